"""
Results of a continual sequence: per-epoch traces and the task x after-task metric matrices.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from utils.exceptions import ForgettingDetected


@dataclass
class EvalResult:
    psnr: float
    ssim: float


@dataclass
class EpochRecord:
    task: str
    task_id: int
    epoch: int
    lr: float
    mean_loss: float
    train_psnr: float
    eval_psnr: Optional[float] = None


def epochs_to_threshold(trace: List[EpochRecord], target_psnr: float) -> Optional[int]:
    """First 1-based epoch whose eval PSNR reaches target_psnr, or None."""
    for record in trace:
        if record.eval_psnr is not None and record.eval_psnr >= target_psnr:
            return record.epoch
    return None


@dataclass
class ExperimentReport:
    """
    Attributes:
        task_names: task_id -> name, in sequence order
        psnr: task_id -> {after_task_id -> PSNR}
        ssim: task_id -> {after_task_id -> SSIM}
        epochs: Every epoch record in training order
        expansions: Automatic capacity expansions (layer, task_id, new t)
    """
    task_names: Dict[int, str] = field(default_factory=dict)
    psnr: Dict[int, Dict[int, float]] = field(default_factory=dict)
    ssim: Dict[int, Dict[int, float]] = field(default_factory=dict)
    epochs: List[EpochRecord] = field(default_factory=list)
    expansions: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def completed(self) -> int:
        """Highest task id evaluated after its own training."""
        done = [task_id for task_id, row in self.psnr.items() if task_id in row]
        return max(done) if done else 0

    def record(self, task_id: int, after: int, result: EvalResult) -> None:
        self.psnr.setdefault(task_id, {})[after] = result.psnr
        self.ssim.setdefault(task_id, {})[after] = result.ssim

    def trace(self, task_id: int) -> List[EpochRecord]:
        return [r for r in self.epochs if r.task_id == task_id]

    def final_psnr(self, task_id: int) -> float:
        return self.psnr[task_id][task_id]

    def check_non_forgetting(self, after: int) -> None:
        """
        Raise ForgettingDetected if any frozen task scored differently than at its freeze.

        Comparison is exact.
        """
        for task_id, row in self.psnr.items():
            if task_id >= after or after not in row:
                continue
            if row[after] != row[task_id] or self.ssim[task_id][after] != self.ssim[task_id][task_id]:
                raise ForgettingDetected(
                    f"task {task_id} ({self.task_names.get(task_id)}) changed after task {after}: "
                    f"PSNR {row[task_id]!r} -> {row[after]!r}"
                )

    def to_state(self) -> Dict[str, Any]:
        """JSON-compatible form stored inside the archive."""
        return {
            'task_names': {str(k): v for k, v in self.task_names.items()},
            'psnr': {str(k): {str(a): v for a, v in row.items()} for k, row in self.psnr.items()},
            'ssim': {str(k): {str(a): v for a, v in row.items()} for k, row in self.ssim.items()},
            'epochs': [asdict(r) for r in self.epochs],
            'expansions': list(self.expansions),
        }

    @classmethod
    def from_state(cls, state: Dict[str, Any]) -> 'ExperimentReport':
        def matrix(data):
            return {int(k): {int(a): v for a, v in row.items()} for k, row in data.items()}

        return cls(
            task_names={int(k): v for k, v in state.get('task_names', {}).items()},
            psnr=matrix(state.get('psnr', {})),
            ssim=matrix(state.get('ssim', {})),
            epochs=[EpochRecord(**r) for r in state.get('epochs', [])],
            expansions=list(state.get('expansions', [])),
        )

    def truncated(self, through: int) -> 'ExperimentReport':
        """Copy keeping only what tasks 1..through produced."""
        return ExperimentReport(
            task_names=dict(self.task_names),
            psnr={k: {a: v for a, v in row.items() if a <= through} for k, row in self.psnr.items() if k <= through},
            ssim={k: {a: v for a, v in row.items() if a <= through} for k, row in self.ssim.items() if k <= through},
            epochs=[r for r in self.epochs if r.task_id <= through],
            expansions=[e for e in self.expansions if e['task_id'] <= through],
        )
