"""
Continual image restoration with kernel memory: command-line entry point.

    python app.py run --config config/sequential_noise.json [--resume ARCHIVE] [--no-sharing] [--seed N]
    python app.py bench [--shape 64,64,3,1000,1000] [--strategies plain,type1:6,cmc:20]
    python app.py compare --config config/sequential_noise.json --study sharing --seeds 0,1,2
"""

# Standard library imports
import argparse
import json
import logging
import os
import sys
from typing import List, Optional

# Local imports
from controllers.bench_controller import (
    DEFAULT_REPEATS, DEFAULT_SHAPE, DEFAULT_STRATEGIES, DEFAULT_TIME_SIZE, BenchController, build_models,
)
from controllers.experiment_controller import STUDIES, ExperimentController
from controllers.results_controller import MEGABYTE, ResultsController, bench_markdown, report_markdown
from models.cost_model import parse_strategy
from utils.config_loader import ConfigLoader, apply_overrides
from utils.exceptions import AppError, ValidationError
from utils.logging import configure_logging, log_exception
from utils.monitoring import error_tracker, monitoring_summary

# Constants - Exit codes
EXIT_OK = 0
EXIT_APP_ERROR = 1
EXIT_USAGE = 2

# Constants - Defaults
DEFAULT_SEEDS = '0,1,2'
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')

logger = logging.getLogger('cmc_restore.app')


def int_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def shape_arg(text: str) -> List[int]:
    values = int_list(text)
    if len(values) != 5 or min(values) < 1:
        raise argparse.ArgumentTypeError(f"shape must be five positive integers k_in,k_out,n,H,W, got '{text}'")
    return values


def strategies_arg(text: str) -> List[str]:
    names = [part.strip() for part in text.split(',') if part.strip()]
    for name in names:
        try:
            parse_strategy(name)
        except ValidationError as e:
            raise argparse.ArgumentTypeError(str(e))
    if not names:
        raise argparse.ArgumentTypeError("expected at least one strategy")
    return names


def fraction_arg(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"fraction must be a number, got '{text}'")
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"fraction must be in (0, 1], got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='cmc', description='Continual image restoration with kernel memory')
    parser.add_argument('--log-level', choices=LOG_LEVELS, default='INFO')
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='train a task sequence')
    run.add_argument('--config', required=True)
    run.add_argument('--resume', help='knowledge-base archive to continue from')
    run.add_argument('--force', action='store_true', help='resume even if the config hash differs')
    run.add_argument('--no-sharing', action='store_true', help='disable knowledge sharing for every task')
    run.add_argument('--seed', type=int)
    run.add_argument('--fraction', type=fraction_arg, help='mask fraction for every task')
    run.add_argument('--rotation', type=int, help='train the k-th cyclic rotation of the task order')
    run.add_argument('--output', help='output directory (overrides output_dir)')
    run.add_argument('--dump-images', action='store_true', help='write degraded/restored/clean PNG triptychs')

    bench = commands.add_parser('bench', help='complexity comparison of growth strategies')
    bench.add_argument('--shape', type=shape_arg, default=list(DEFAULT_SHAPE), help='k_in,k_out,n,H,W')
    bench.add_argument('--strategies', type=strategies_arg, default=list(DEFAULT_STRATEGIES))
    bench.add_argument('--repeats', type=int, default=DEFAULT_REPEATS)
    bench.add_argument('--time-size', type=int, default=DEFAULT_TIME_SIZE, help='spatial size for timing, 0 to skip')
    bench.add_argument('--output', help='directory for bench.csv')

    compare = commands.add_parser('compare', help='multi-seed ablation study')
    compare.add_argument('--config', required=True)
    compare.add_argument('--study', choices=STUDIES, required=True)
    compare.add_argument('--seeds', type=int_list, default=int_list(DEFAULT_SEEDS))
    compare.add_argument('--output', help='output directory (overrides output_dir)')
    return parser


def cmd_run(args: argparse.Namespace) -> int:
    config = apply_overrides(
        ConfigLoader.load(args.config),
        seed=args.seed,
        no_sharing=args.no_sharing,
        fraction=args.fraction,
        rotation=args.rotation,
        output_dir=args.output,
    )
    report = ExperimentController(config).run(resume=args.resume, force=args.force, dump_images=args.dump_images)
    print(report_markdown(report))
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    models = build_models(args.shape, args.strategies)
    reports = BenchController().bench_table(models, args.repeats, args.time_size or None)
    if args.output:
        ResultsController(args.output).write_bench(reports)
    print(bench_markdown(reports))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    config = apply_overrides(ConfigLoader.load(args.config), output_dir=args.output)
    configure_logging(config.output_dir)
    rows, summary = ExperimentController(config).compare(args.study, args.seeds)
    path = ResultsController(config.output_dir).write_comparison(args.study, rows)
    print(summary)
    logger.info(f"comparison written to {path}")
    return EXIT_OK


COMMANDS = {'run': cmd_run, 'bench': cmd_bench, 'compare': cmd_compare}


def log_monitoring_summary(command: str):
    summary = monitoring_summary()
    timings = '; '.join(
        f"{op}: {t['count']} x {t['mean'] * 1000:.1f} ms" for op, t in sorted(summary['timings'].items())
    )
    logger.info(f"{command} finished: peak RSS {summary['peak_rss'] / MEGABYTE:.1f} MB" + (f"; {timings}" if timings else ''))
    errors = summary['errors']
    if errors['total_errors']:
        logger.warning(f"{errors['total_errors']} error(s) surfaced in this process: {errors['error_counts']}")


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments and dispatch. Usage errors exit 2 (argparse); application errors exit 1
    with a one-line JSON object on stderr.
    """
    args = build_parser().parse_args(argv)
    configure_logging(level=getattr(logging, args.log_level))
    try:
        return COMMANDS[args.command](args)
    except AppError as e:
        log_exception(e, {'command': args.command})
        error_tracker.record_error(e, {'command': args.command})
        sys.stderr.write(json.dumps({'error': type(e).__name__, 'message': str(e)}) + os.linesep)
        return EXIT_APP_ERROR
    finally:
        log_monitoring_summary(args.command)


if __name__ == '__main__':
    sys.exit(main())
