import csv
import json
import logging
import os
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from models.cost_model import BenchReport
from models.report import ExperimentReport
from utils.exceptions import ValidationError
from utils.logging import log_exception

# Constants
REPORT_CSV = 'report.csv'
SSIM_CSV = 'ssim.csv'
EPOCHS_CSV = 'epochs.csv'
TRAIN_LOG = 'train_log.jsonl'
RESOLVED_CONFIG = 'config.resolved.json'
ARCHIVE_FILE = 'knowledge_base.cmc'
ABORT_ARCHIVE_FILE = 'abort_checkpoint.cmc'
IMAGES_DIR = 'images'
FLOAT_FORMAT = '.17g'
EPOCH_COLUMNS = ['task', 'epoch', 'lr', 'mean_loss', 'train_psnr', 'eval_psnr']
BENCH_COLUMNS = [
    'strategy', 'trainable_params', 'trainable_x', 'kernel_params', 'kernel_x', 'gmac', 'mac_x',
    'estimation_macs', 'working_set_mb', 'median_ms', 'time_x', 'rss_mb',
]
MEGABYTE = 1024 * 1024

logger = logging.getLogger('cmc_restore.results')


def _fmt(value: Optional[float]) -> str:
    return '' if value is None else format(value, FLOAT_FORMAT)


class TrainLog:
    """JSON-lines step log; the header line carries the only timestamp."""

    def __init__(self, path: str, config_hash: str, append: bool = False):
        self.path = path
        exists = append and os.path.exists(path)
        self._handle = open(path, 'a' if exists else 'w', encoding='utf-8')
        if not exists:
            self.write({'event': 'header', 'started_at': datetime.now().isoformat(), 'config_hash': config_hash})

    def write(self, record: Dict[str, Any]) -> None:
        self._handle.write(json.dumps(record, sort_keys=True) + '\n')

    def step(self, task: str, epoch: int, step: int, loss: float) -> None:
        self.write({'task': task, 'epoch': epoch, 'step': step, 'loss': loss})

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> 'TrainLog':
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class ResultsController:
    """Writes run reports, comparison tables and benchmark tables."""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def _matrix_rows(self, report: ExperimentReport, matrix: Dict[int, Dict[int, float]]) -> List[List[str]]:
        count = len(report.task_names)
        rows = [['task', 'position'] + [f"after_{i}" for i in range(1, count + 1)]]
        for task_id in sorted(report.task_names):
            row = matrix.get(task_id, {})
            rows.append([report.task_names[task_id], str(task_id)] + [_fmt(row.get(a)) for a in range(1, count + 1)])
        return rows

    def _write_csv(self, name: str, rows: Sequence[Sequence[Any]]) -> str:
        path = self.path(name)
        try:
            os.makedirs(self.output_dir, exist_ok=True)
            with open(path, 'w', newline='', encoding='utf-8') as f:
                csv.writer(f, lineterminator='\n').writerows(rows)
        except OSError as e:
            log_exception(e, {'path': path})
            raise ValidationError(f"cannot write {path}: {e}")
        return path

    def write_run_reports(self, report: ExperimentReport) -> List[str]:
        """report.csv (PSNR), ssim.csv and epochs.csv for one run."""
        epochs = [EPOCH_COLUMNS] + [
            [r.task, r.epoch, _fmt(r.lr), _fmt(r.mean_loss), _fmt(r.train_psnr), _fmt(r.eval_psnr)]
            for r in report.epochs
        ]
        written = [
            self._write_csv(REPORT_CSV, self._matrix_rows(report, report.psnr)),
            self._write_csv(SSIM_CSV, self._matrix_rows(report, report.ssim)),
            self._write_csv(EPOCHS_CSV, epochs),
        ]
        logger.debug(f"reports written to {self.output_dir}")
        return written

    def write_comparison(self, study: str, rows: List[Dict[str, Any]]) -> str:
        if not rows:
            raise ValidationError(f"no results to write for study '{study}'")
        columns = list(rows[0])
        table = [columns] + [[_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in columns] for r in rows]
        return self._write_csv(f"compare_{study}.csv", table)

    def write_bench(self, reports: List[BenchReport], name: str = 'bench.csv') -> str:
        return self._write_csv(name, [BENCH_COLUMNS] + [bench_row(r) for r in reports])

    def dump_triptychs(self, task_name: str, degraded: np.ndarray, restored: np.ndarray, clean: np.ndarray) -> List[str]:
        """Save (degraded | restored | clean) side by side as 8-bit PNGs, one per image."""
        directory = self.path(IMAGES_DIR)
        os.makedirs(directory, exist_ok=True)
        paths = []
        for i, panels in enumerate(zip(degraded, restored, clean)):
            strip = np.concatenate([np.clip(p, 0.0, 1.0) for p in panels], axis=2)
            pixels = np.round(strip.transpose(1, 2, 0) * 255).astype(np.uint8)
            path = os.path.join(directory, f"{task_name}_{i}.png")
            Image.fromarray(pixels, mode='RGB').save(path)
            paths.append(path)
        return paths


def bench_row(report: BenchReport) -> List[str]:
    def opt(value, digits):
        return '' if value is None else f"{value:.{digits}f}"

    return [
        report.label, str(report.trainable_params), f"{report.trainable_ratio:.2f}",
        str(report.kernel_params), f"{report.kernel_ratio:.2f}", f"{report.gmac:.3f}", f"{report.mac_ratio:.2f}",
        str(report.estimation_macs), f"{report.working_set_bytes / MEGABYTE:.1f}",
        opt(report.median_ms, 3), opt(report.time_ratio, 2),
        opt(None if report.rss_bytes is None else report.rss_bytes / MEGABYTE, 1),
    ]


def markdown_table(columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    lines = ['| ' + ' | '.join(columns) + ' |', '|' + '|'.join('---' for _ in columns) + '|']
    for row in rows:
        lines.append('| ' + ' | '.join(str(cell) for cell in row) + ' |')
    return '\n'.join(lines)


def bench_markdown(reports: List[BenchReport]) -> str:
    return markdown_table(BENCH_COLUMNS, [bench_row(r) for r in reports])


def report_markdown(report: ExperimentReport) -> str:
    count = len(report.task_names)
    rows = []
    for task_id in sorted(report.task_names):
        row = report.psnr.get(task_id, {})
        rows.append([report.task_names[task_id]] + [
            '' if row.get(a) is None else f"{row[a]:.2f}" for a in range(1, count + 1)
        ])
    return markdown_table(['task'] + [f"after {i}" for i in range(1, count + 1)], rows)
