import dataclasses
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from controllers.results_controller import (
    ABORT_ARCHIVE_FILE, ARCHIVE_FILE, RESOLVED_CONFIG, TRAIN_LOG,
    ResultsController, TrainLog, markdown_table,
)
from controllers.sequence_controller import SequenceController
from controllers.training_controller import TrainingController
from models.archive import load_archive, restore_network, save_archive
from models.cost_model import conv_macs
from models.image_source import CleanImageSource
from models.network import RestorationNet
from models.report import ExperimentReport, epochs_to_threshold
from utils.config_loader import ConfigLoader, ExperimentConfig, apply_overrides, config_hash
from utils.exceptions import ConfigHashMismatchError, ValidationError
from utils.logging import configure_logging

# Constants
STUDY_SHARING = 'sharing'
STUDY_EXPANSION = 'expansion'
STUDIES = (STUDY_SHARING, STUDY_EXPANSION)
KEY_LAYER_FACTOR = 2

logger = logging.getLogger('cmc_restore.experiment')


def build_network(config: ExperimentConfig) -> RestorationNet:
    net_cfg = config.network
    return RestorationNet(
        channels=net_cfg.channels,
        blocks=net_cfg.blocks,
        kernel_size=net_cfg.kernel_size,
        capacity=net_cfg.capacity,
        layer_capacities=net_cfg.capacity_overrides(),
        residual_scale=net_cfg.residual_scale,
        global_residual=net_cfg.global_residual,
        dtype=config.dtype,
        debug_checks=config.debug_checks,
    )


def build_source(config: ExperimentConfig) -> CleanImageSource:
    return CleanImageSource(config.data.source, config.data.image_size, config.seed, config.data.directory)


def network_conv_macs(net: RestorationNet, height: int, width: int) -> int:
    """Convolution MACs of one forward pass; independent of every layer's capacity t."""
    return sum(conv_macs(*layer.geometry, height, width) for layer in net.layers)


def task_registry(config: ExperimentConfig) -> List[Dict[str, Any]]:
    return [
        {'task_id': t.task_id, 'name': t.name, 'fraction': t.fraction,
         'knowledge_sharing': t.knowledge_sharing, 'degradation': t.degradation.to_dict()}
        for t in config.tasks
    ]


class ExperimentController:
    """
    Runs one configured experiment end to end, and multi-seed comparison studies.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.config_hash = config_hash(config)

    def run(self, resume: Optional[str] = None, force: bool = False, dump_images: bool = False,
            write_outputs: bool = True) -> ExperimentReport:
        """
        Train the configured sequence, optionally resuming from an archive.

        With write_outputs the resolved config, reports, step log and an archive after every
        freeze go to config.output_dir.

        Raises:
            ConfigHashMismatchError: The archive was written by a different configuration
        """
        config = self.config
        net = build_network(config)
        report = ExperimentReport()
        if resume:
            report = self._resume(net, resume, force)

        results = ResultsController(config.output_dir)
        train_log = None
        if write_outputs:
            configure_logging(config.output_dir)
            ConfigLoader.write_resolved(config, results.path(RESOLVED_CONFIG))
            train_log = TrainLog(results.path(TRAIN_LOG), self.config_hash, append=resume is not None)
        registry = task_registry(config)

        def on_step(spec, epoch, step, loss):
            train_log.step(spec.name, epoch, step, loss)

        def on_abort(spec):
            path = results.path(ABORT_ARCHIVE_FILE)
            save_archive(net, path, registry, report.to_state(), self.config_hash, config.seed)
            logger.error(f"task {spec.task_id} aborted; state saved to {path}")

        trainer = TrainingController(
            net, config.schedule,
            eval_batch_size=config.eval_batch_size,
            prefetch_workers=config.data.prefetch_workers,
            on_step=on_step if train_log else None,
            on_abort=on_abort if write_outputs else None,
        )
        sequence = SequenceController(
            trainer, build_source(config),
            eval_count=config.data.eval_count,
            pool_images=config.data.pool_images,
            auto_expand_rows=config.auto_expand_rows,
        )

        def on_task_complete(spec, current):
            save_archive(net, results.path(ARCHIVE_FILE), registry, current.to_state(), self.config_hash, config.seed)
            results.write_run_reports(current)
            if dump_images:
                eval_set = sequence.eval_sets[spec.task_id]
                results.dump_triptychs(spec.name, eval_set.degraded, trainer.restore(spec.task_id, eval_set.degraded),
                                       eval_set.clean)

        try:
            report = sequence.run_sequence(
                list(config.tasks), config.seed, report,
                on_task_complete=on_task_complete if write_outputs else None,
            )
        finally:
            if train_log is not None:
                train_log.close()
        if write_outputs:
            results.write_run_reports(report)
        return report

    def _resume(self, net: RestorationNet, path: str, force: bool) -> ExperimentReport:
        archive = load_archive(path)
        if archive.config_hash != self.config_hash:
            if not force:
                raise ConfigHashMismatchError(
                    f"archive {path} was written with config {archive.config_hash[:12]}, "
                    f"current config is {self.config_hash[:12]}; pass --force to resume anyway"
                )
            logger.warning(f"resuming {path} despite config hash mismatch")
        restore_network(net, archive, discard_unfrozen=True)
        logger.info(f"resuming after task {net.frozen_through}")
        return ExperimentReport.from_state(archive.report_state).truncated(net.frozen_through)

    # ------------------------------------------------------------------ studies

    def compare(self, study: str, seeds: Sequence[int]) -> Tuple[List[Dict[str, Any]], str]:
        """
        Multi-seed ablation; returns per-(seed, task) rows and a markdown summary.

        Raises:
            ValidationError: Unknown study or no seeds
        """
        if study not in STUDIES:
            raise ValidationError(f"unknown study '{study}', expected one of {STUDIES}")
        if not seeds:
            raise ValidationError("a comparison needs at least one seed")
        if study == STUDY_SHARING:
            rows = [row for seed in seeds for row in self._compare_sharing(seed)]
            summary = self._summarise(rows, ['first_epoch_gain', 'final_gain'])
        else:
            rows = [row for seed in seeds for row in self._compare_expansion(seed)]
            summary = self._summarise(rows, ['final_gain'])
        return rows, summary

    def _arm(self, config: ExperimentConfig) -> ExperimentReport:
        return ExperimentController(config).run(write_outputs=False)

    def _compare_sharing(self, seed: int) -> List[Dict[str, Any]]:
        seeded = apply_overrides(self.config, seed=seed)
        shared = self._arm(dataclasses.replace(
            seeded, tasks=tuple(dataclasses.replace(t, knowledge_sharing=True) for t in seeded.tasks)))
        isolated = self._arm(apply_overrides(self.config, seed=seed, no_sharing=True))
        rows = []
        for task_id, name in sorted(shared.task_names.items()):
            on, off = shared.trace(task_id), isolated.trace(task_id)
            target = isolated.final_psnr(task_id)
            rows.append({
                'seed': seed,
                'task': name,
                'position': task_id,
                'sharing_first_epoch': on[0].eval_psnr,
                'isolated_first_epoch': off[0].eval_psnr,
                'first_epoch_gain': on[0].eval_psnr - off[0].eval_psnr,
                'sharing_final': shared.final_psnr(task_id),
                'isolated_final': target,
                'final_gain': shared.final_psnr(task_id) - target,
                'sharing_epochs_to_target': epochs_to_threshold(on, target),
                'isolated_epochs_to_target': epochs_to_threshold(off, target),
            })
        return rows

    def _compare_expansion(self, seed: int) -> List[Dict[str, Any]]:
        base = self.config.network
        key_capacity = base.key_layer_capacity or KEY_LAYER_FACTOR * base.capacity
        key_cfg = dataclasses.replace(
            apply_overrides(self.config, seed=seed),
            network=dataclasses.replace(base, key_layer_capacity=key_capacity),
        )
        uniform_cfg = dataclasses.replace(
            apply_overrides(self.config, seed=seed),
            network=dataclasses.replace(base, key_layer_capacity=None, layer_capacities={}),
        )
        key_report, uniform_report = self._arm(key_cfg), self._arm(uniform_cfg)
        size = self.config.data.image_size
        key_macs = network_conv_macs(build_network(key_cfg), size, size)
        uniform_macs = network_conv_macs(build_network(uniform_cfg), size, size)
        rows = []
        for task_id, name in sorted(key_report.task_names.items()):
            rows.append({
                'seed': seed,
                'task': name,
                'position': task_id,
                'key_layer_final': key_report.final_psnr(task_id),
                'uniform_final': uniform_report.final_psnr(task_id),
                'final_gain': key_report.final_psnr(task_id) - uniform_report.final_psnr(task_id),
                'key_layer_macs': key_macs,
                'uniform_macs': uniform_macs,
            })
        return rows

    @staticmethod
    def _summarise(rows: List[Dict[str, Any]], gains: List[str]) -> str:
        by_task: Dict[Tuple[int, str], List[Dict[str, Any]]] = {}
        for row in rows:
            by_task.setdefault((row['position'], row['task']), []).append(row)
        table = []
        for (position, name), group in sorted(by_task.items()):
            means = [f"{np.mean([r[g] for r in group]):+.3f}" for g in gains]
            wins = sum(1 for r in group if r['final_gain'] >= 0)
            table.append([position, name, len(group)] + means + [f"{wins}/{len(group)}"])
        return markdown_table(['position', 'task', 'seeds'] + [f"mean {g}" for g in gains] + ['final >= other'], table)
