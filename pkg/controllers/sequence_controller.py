import logging
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from controllers.training_controller import TrainingController
from models.image_source import CleanImageSource, EvalSet, make_eval_set, make_pair_stream
from models.report import ExperimentReport
from models.task_spec import TaskSpec, validate_sequence
from utils.exceptions import CapacityExhausted, ProtocolError
from utils.logging import log_exception

# Constants
DEFAULT_EVAL_COUNT = 8
DEFAULT_POOL_IMAGES = 64
STREAM_SEED_TAG = 101
EVAL_SEED_TAG = 202

logger = logging.getLogger('cmc_restore.sequence')

TaskCompleteCallback = Callable[[TaskSpec, ExperimentReport], None]


def task_seed(global_seed: int, tag: int, task_id: int) -> int:
    """Integer seed for one task's stream or eval set, independent of run history."""
    return int(np.random.SeedSequence([global_seed, tag, task_id]).generate_state(1)[0])


class SequenceController:
    """
    Runs an ordered list of tasks through the continual protocol.

    After each task is trained and frozen, every task trained so far is evaluated on its fixed
    evaluation set and the report is checked for forgetting.
    """

    def __init__(
        self,
        trainer: TrainingController,
        source: CleanImageSource,
        eval_count: int = DEFAULT_EVAL_COUNT,
        pool_images: int = DEFAULT_POOL_IMAGES,
        auto_expand_rows: int = 0,
    ):
        self.trainer = trainer
        self.net = trainer.net
        self.source = source
        self.eval_count = eval_count
        self.pool_images = pool_images
        self.auto_expand_rows = auto_expand_rows
        self.eval_sets: Dict[int, EvalSet] = {}

    def build_eval_sets(self, specs: Sequence[TaskSpec], seed: int) -> Dict[int, EvalSet]:
        """Evaluation sets are generated once per (seed, task) and reused for the whole sequence."""
        self.eval_sets = {
            spec.task_id: make_eval_set(
                self.source, spec.degradation, self.eval_count, task_seed(seed, EVAL_SEED_TAG, spec.task_id),
                spec.patch_size, dtype=self.net.dtype,
            )
            for spec in specs
        }
        return self.eval_sets

    def run_sequence(
        self,
        specs: Sequence[TaskSpec],
        seed: int,
        report: Optional[ExperimentReport] = None,
        on_task_complete: Optional[TaskCompleteCallback] = None,
    ) -> ExperimentReport:
        """
        Train tasks in order, evaluating all frozen tasks after each one.

        Args:
            specs: Ordered tasks with ids 1..N
            seed: Global seed for masks, initialisation, streams and eval sets
            report: Partial report of a resumed run; tasks it completed are skipped
            on_task_complete: Called after every freeze with the updated report

        Returns:
            The completed ExperimentReport

        Raises:
            CapacityExhausted: A layer ran out of free memory entries
            ForgettingDetected: A frozen task's evaluation changed
        """
        validate_sequence(specs)
        report = report if report is not None else ExperimentReport()
        report.task_names = {spec.task_id: spec.name for spec in specs}
        done = report.completed
        if self.net.frozen_through != done:
            raise ProtocolError(f"network has {self.net.frozen_through} frozen tasks but the report covers {done}")
        self.build_eval_sets(specs, seed)

        for spec in specs:
            if spec.task_id <= done:
                logger.info(f"task {spec.task_id} '{spec.name}' already completed, skipping")
                continue
            self._begin(spec, seed, report)
            stream = make_pair_stream(
                self.source, spec.degradation, spec.patch_size, task_seed(seed, STREAM_SEED_TAG, spec.task_id),
                batch_size=spec.batch_size, pool_images=self.pool_images, dtype=self.net.dtype,
            )
            trace = self.trainer.train_task(spec, stream, self.eval_sets[spec.task_id])
            report.epochs.extend(trace)

            for previous in specs[:spec.task_id]:
                report.record(previous.task_id, spec.task_id,
                              self.trainer.evaluate(previous.task_id, self.eval_sets[previous.task_id]))
            report.check_non_forgetting(spec.task_id)
            logger.info(
                f"after task {spec.task_id}: "
                + ", ".join(f"{report.task_names[t]}={report.psnr[t][spec.task_id]:.3f}dB" for t in range(1, spec.task_id + 1))
            )
            if on_task_complete is not None:
                on_task_complete(spec, report)
        return report

    def _begin(self, spec: TaskSpec, seed: int, report: ExperimentReport) -> None:
        before = self.net.capacities()
        try:
            self.net.begin_task(
                spec.task_id, spec.fraction, seed,
                knowledge_sharing=spec.knowledge_sharing,
                layer_fractions=spec.layer_fractions,
                auto_expand_rows=self.auto_expand_rows,
            )
        except CapacityExhausted as e:
            log_exception(e, {'task_id': spec.task_id, 'task': spec.name})
            raise
        for name, t in self.net.capacities().items():
            if t != before[name]:
                report.expansions.append({'layer': name, 'task_id': spec.task_id, 't': t})
                logger.warning(f"layer '{name}' expanded from t={before[name]} to t={t} for task {spec.task_id}")
