import logging
import math
from typing import Callable, List, Optional

import numpy as np

from models.image_source import EvalSet, PairStream
from models.losses import mse_loss
from models.metrics import mean_psnr, mean_ssim
from models.network import RestorationNet
from models.optimizer import AdamState, adam_step
from models.report import EpochRecord, EvalResult
from models.task_spec import TaskSpec, TrainSchedule
from utils.exceptions import AppError, NumericError, ProtocolError, ValidationError
from utils.logging import log_exception
from utils.monitoring import performance_monitor, track_performance

# Constants
DEFAULT_EVAL_BATCH_SIZE = 16

logger = logging.getLogger('cmc_restore.training')

StepCallback = Callable[[TaskSpec, int, int, float], None]
AbortHandler = Callable[[TaskSpec], None]


class TrainingController:
    """
    Trains one task at a time on a RestorationNet and evaluates frozen or active tasks.

    The controller owns the Adam state of the task being trained; nothing else updates it.
    """

    def __init__(
        self,
        net: RestorationNet,
        schedule: TrainSchedule,
        eval_batch_size: int = DEFAULT_EVAL_BATCH_SIZE,
        prefetch_workers: int = 0,
        on_step: Optional[StepCallback] = None,
        on_abort: Optional[AbortHandler] = None,
    ):
        self.net = net
        self.schedule = schedule
        self.eval_batch_size = eval_batch_size
        self.prefetch_workers = prefetch_workers
        self.on_step = on_step
        self.on_abort = on_abort

    def train_task(self, spec: TaskSpec, stream: PairStream, eval_set: Optional[EvalSet] = None) -> List[EpochRecord]:
        """
        Train the active task for spec.epochs epochs, then freeze it in every layer.

        Args:
            spec: Task being trained; its masks must already be allocated
            stream: Source of (degraded, clean) batches
            eval_set: Optional fixed pairs scored after every epoch

        Returns:
            One EpochRecord per epoch

        Raises:
            ProtocolError: If spec is not the network's active task
            NumericError: If the loss or a gradient becomes non-finite
        """
        if self.net.active_task_id != spec.task_id:
            raise ProtocolError(
                f"task {spec.task_id} ('{spec.name}') is not active; active task is {self.net.active_task_id}"
            )

        params = self.net.gather_active()
        state = AdamState.create(params, self.schedule.beta1, self.schedule.beta2, self.schedule.epsilon)
        trace: List[EpochRecord] = []
        logger.info(f"training task {spec.task_id} '{spec.name}': {spec.epochs} epochs x {spec.batches_per_epoch} steps")

        try:
            for epoch in range(spec.epochs):
                lr = self.schedule.lr_at(epoch)
                losses, psnrs = [], []
                first_step = epoch * spec.batches_per_epoch
                batches = stream.batches(first_step, spec.batches_per_epoch, self.prefetch_workers)
                for step, (degraded, clean) in enumerate(batches, start=first_step):
                    params, state, loss, prediction = self._train_step(spec, params, state, lr, degraded, clean, step)
                    losses.append(loss)
                    psnrs.append(mean_psnr(prediction, clean))

                record = EpochRecord(
                    task=spec.name,
                    task_id=spec.task_id,
                    epoch=epoch + 1,
                    lr=lr,
                    mean_loss=float(np.mean(losses)),
                    train_psnr=float(np.mean(psnrs)),
                    eval_psnr=self.evaluate(spec.task_id, eval_set).psnr if eval_set is not None else None,
                )
                trace.append(record)
                logger.info(
                    f"task {spec.task_id} epoch {record.epoch}/{spec.epochs} lr={lr:.3g} "
                    f"loss={record.mean_loss:.6f} train_psnr={record.train_psnr:.3f} eval_psnr={record.eval_psnr}"
                )
        except NumericError as e:
            log_exception(e, {'task_id': spec.task_id, 'task': spec.name})
            if self.on_abort is not None:
                self.on_abort(spec)
            raise

        self.net.freeze_task(spec.task_id)
        return trace

    @track_performance('train_step')
    def _train_step(self, spec, params, state, lr, degraded, clean, step):
        prediction = self.net.forward(degraded, spec.task_id, training=True)
        loss, grad = mse_loss(prediction, clean)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} at task {spec.task_id} step {step}")
        self.net.backward(grad)
        params, state = adam_step(params, self.net.active_gradients(), state, lr)
        self.net.write_active(params)
        logger.debug(f"task {spec.task_id} step {step} loss={loss:.6f}")
        if self.on_step is not None:
            self.on_step(spec, step // spec.batches_per_epoch + 1, step, loss)
        return params, state, loss, prediction

    @track_performance('evaluate')
    def evaluate(self, task_id: int, eval_set: EvalSet) -> EvalResult:
        """
        Mean PSNR and SSIM of a task on a fixed evaluation set.

        Predictions are clamped to [0, 1] before scoring; batches are visited in a fixed order
        so repeated evaluations of a frozen task are bit-identical.

        Raises:
            ValidationError: If the evaluation set is empty
            ProtocolError: If the task does not exist
        """
        if eval_set is None or len(eval_set) == 0:
            raise ValidationError(f"cannot evaluate task {task_id} on an empty evaluation set")
        if task_id not in self.net.task_ids():
            raise ProtocolError(f"task {task_id} has not been allocated")

        try:
            predictions = []
            for start in range(0, len(eval_set), self.eval_batch_size):
                batch = eval_set.degraded[start:start + self.eval_batch_size]
                predictions.append(np.clip(self.net.forward(batch, task_id), 0.0, 1.0))
            restored = np.concatenate(predictions)
            result = EvalResult(psnr=mean_psnr(restored, eval_set.clean), ssim=mean_ssim(restored, eval_set.clean))
        except AppError:
            raise
        except Exception as e:
            log_exception(e, {'task_id': task_id})
            raise ValidationError(f"evaluation of task {task_id} failed: {e}")
        performance_monitor.record_counter('evaluations')
        return result

    def restore(self, task_id: int, degraded: np.ndarray) -> np.ndarray:
        """Clamped restoration of a batch with a task's kernels."""
        return np.clip(self.net.forward(degraded, task_id), 0.0, 1.0)
