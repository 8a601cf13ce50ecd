"""Tests for the command-line entry point."""

import json
import logging
import os

import pytest

from app import EXIT_APP_ERROR, EXIT_OK, EXIT_USAGE, main
from controllers.results_controller import REPORT_CSV
from tests.conftest import tiny_config_dict


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps(tiny_config_dict(tmp_path / 'run', epochs=1)))
    return str(path)


def test_run_writes_reports(config_file, tmp_path, capsys):
    output = str(tmp_path / 'cli_run')
    assert main(['--log-level', 'WARNING', 'run', '--config', config_file, '--output', output]) == EXIT_OK
    assert os.path.exists(os.path.join(output, REPORT_CSV))
    assert '| task |' in capsys.readouterr().out


def test_missing_config_is_an_application_error(tmp_path, capsys):
    code = main(['run', '--config', str(tmp_path / 'absent.json')])
    assert code == EXIT_APP_ERROR
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error['error'] == 'ValidationError'


def test_unknown_config_key_is_an_application_error(tmp_path, capsys):
    data = tiny_config_dict(tmp_path)
    data['network']['depth'] = 3
    path = tmp_path / 'bad.json'
    path.write_text(json.dumps(data))
    assert main(['run', '--config', str(path)]) == EXIT_APP_ERROR
    assert 'network.depth' in capsys.readouterr().err


@pytest.mark.parametrize('argv', [
    [],
    ['train'],
    ['run'],
    ['run', '--config', 'x.json', '--fraction', '1.5'],
    ['bench', '--shape', '1,2,3'],
    ['bench', '--strategies', 'type9:1'],
    ['compare', '--config', 'x.json', '--study', 'dropout'],
])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == EXIT_USAGE


def test_bench_prints_table(tmp_path, capsys):
    code = main(['bench', '--shape', '4,4,3,16,16', '--strategies', 'plain,cmc:10',
                 '--repeats', '1', '--time-size', '8', '--output', str(tmp_path)])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert 'cmc-10' in out
    assert os.path.exists(tmp_path / 'bench.csv')


def test_bench_analytic_only(capsys):
    assert main(['bench', '--strategies', 'plain,type1:6', '--time-size', '0']) == EXIT_OK
    assert '36.864' in capsys.readouterr().out


def test_bench_invalid_repeats_is_an_application_error(capsys):
    assert main(['bench', '--shape', '2,2,3,8,8', '--strategies', 'plain', '--repeats', '0']) == EXIT_APP_ERROR
    assert 'BenchmarkError' in capsys.readouterr().err


def test_resume_with_missing_archive(config_file, tmp_path, capsys):
    code = main(['run', '--config', config_file, '--resume', str(tmp_path / 'none.cmc'), '--output', str(tmp_path / 'o')])
    assert code == EXIT_APP_ERROR
    assert 'ArchiveError' in capsys.readouterr().err


def test_exit_logs_a_monitoring_summary(caplog):
    with caplog.at_level(logging.INFO, logger='cmc_restore'):
        assert main(['bench', '--shape', '4,4,3,16,16', '--strategies', 'plain',
                     '--repeats', '1', '--time-size', '8']) == EXIT_OK
    summary = [r.getMessage() for r in caplog.records if 'bench finished' in r.getMessage()]
    assert len(summary) == 1
    assert 'peak RSS' in summary[0]
    assert 'bench_plain' in summary[0]


def test_exit_summary_warns_about_surfaced_errors(caplog):
    with caplog.at_level(logging.INFO, logger='cmc_restore'):
        main(['bench', '--shape', '2,2,3,8,8', '--strategies', 'plain', '--repeats', '0'])
    warnings = [r for r in caplog.records if r.levelno == logging.WARNING and 'surfaced' in r.getMessage()]
    assert warnings and 'BenchmarkError' in warnings[-1].getMessage()
