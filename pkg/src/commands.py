"""The stb-asv workflow commands.

Every command owns one stage directory under the run's output directory. It
refuses to touch an existing stage directory unless ``--force`` is given,
writes ``resolved_config.json`` into it and mirrors its log into ``run.log``.
"""
import logging
import shutil
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator

from src.checkpoint import load_checkpoint
from src.config import RunConfig
from src.constants import (CHECKPOINT_DIRNAME, DATASET_DIR, EVAL_DIR, FINETUNE_DIR, LOG_FILENAME, MANIFEST_FILENAME,
                           ORACLE_DIR, PRETRAIN_DIR, REPORT_FILENAME, VERIFY_DIR)
from src.dataset import build_dataset, load_split
from src.errors import MissingArtifactError, OutputExistsError
from src.evaluation import EvalReport, build_trials, evaluate, oracle_one_best_eval
from src.logging import attach_run_log, detach_run_log
from src.randomStreams import TRIALS, stream
from src.trainer import finetune, pretrain
from src.verifySuite import VerifyReport, raise_on_failure, run_verify

logger = logging.getLogger(__name__)


@contextmanager
def stage(run: RunConfig, relative: Path) -> Iterator[Path]:
    directory = run.out_dir / relative
    if directory.exists() and any(directory.iterdir()):
        if not run.force:
            raise OutputExistsError(f"{directory} already exists; pass --force to overwrite it")
        logger.warning(f"Overwriting {directory}")
        shutil.rmtree(directory)
    directory.mkdir(parents=True, exist_ok=True)
    run.write_snapshot(directory)
    handler = attach_run_log(directory / LOG_FILENAME)
    try:
        logger.info(f"Running '{run.command}' (seed {run.seed}) into {directory}")
        yield directory
    finally:
        detach_run_log(handler)


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(str(path), hint)
    return path


def _dataset_split(run: RunConfig, split: str) -> Path:
    dataset_dir = run.out_dir / DATASET_DIR
    _require(dataset_dir / split / MANIFEST_FILENAME, f"run 'simulate' first; split '{split}' is needed")
    return dataset_dir


def _pretrain_checkpoint(run: RunConfig) -> Path:
    path = run.out_dir / PRETRAIN_DIR / CHECKPOINT_DIRNAME
    _require(path / MANIFEST_FILENAME, "run 'pretrain' first")
    return path


def cmd_simulate(run: RunConfig) -> Path:
    with stage(run, DATASET_DIR) as directory:
        manifests = build_dataset(run.sim, run.seed, directory)
        speakers = sum(len(m.speakers) for m in manifests.values())
        utterances = sum(len(m.utterances) for m in manifests.values())
        logger.info(f"Dataset: {speakers} speakers, {utterances} utterances, C={run.sim.channels}, "
                    f"T={run.sim.frames}, F={run.sim.feature_dim}")
    return directory


def cmd_pretrain(run: RunConfig) -> Path:
    dataset_dir = _dataset_split(run, 'train')
    with stage(run, PRETRAIN_DIR) as directory:
        result = pretrain(load_split(dataset_dir, 'train'), run.model, run.pretrain_config(), directory)
    return result.checkpoint_dir


def cmd_finetune(run: RunConfig) -> Dict[str, Path]:
    dataset_dir = _dataset_split(run, 'train')
    checkpoint = _pretrain_checkpoint(run)
    checkpoints = {}
    with stage(run, FINETUNE_DIR) as directory:
        train = load_split(dataset_dir, 'train')
        for normalizer in run.finetune.normalizers:
            result = finetune(train, checkpoint, run.model, run.finetune_config(normalizer), directory / normalizer)
            checkpoints[normalizer] = result.checkpoint_dir
    return checkpoints


def cmd_eval(run: RunConfig) -> Dict[str, EvalReport]:
    dataset_dir = _dataset_split(run, run.eval.split)
    checkpoints = {normalizer: _require(run.out_dir / FINETUNE_DIR / normalizer / CHECKPOINT_DIRNAME,
                                        f"run 'finetune' with the {normalizer} normalizer first")
                   for normalizer in run.eval.normalizers}
    reports = {}
    with stage(run, EVAL_DIR) as directory:
        split = load_split(dataset_dir, run.eval.split)
        trials = build_trials(split.manifest, stream(run.seed, TRIALS))
        for normalizer, checkpoint in checkpoints.items():
            report = evaluate(load_checkpoint(checkpoint), split, trials, run.eval.channel_subset_sizes, run.seed,
                              batch_size=run.eval.batch_size)
            report.write(directory / normalizer / REPORT_FILENAME)
            reports[normalizer] = report
    return reports


def cmd_oracle(run: RunConfig) -> EvalReport:
    dataset_dir = _dataset_split(run, run.eval.split)
    checkpoint = _pretrain_checkpoint(run)
    with stage(run, ORACLE_DIR) as directory:
        split = load_split(dataset_dir, run.eval.split)
        trials = build_trials(split.manifest, stream(run.seed, TRIALS))
        report = oracle_one_best_eval(load_checkpoint(checkpoint), split, trials, ranks=run.eval.ranks,
                                      batch_size=run.eval.batch_size)
        report.write(directory / REPORT_FILENAME)
    return report


def cmd_verify(run: RunConfig, points: int = 100) -> VerifyReport:
    with stage(run, VERIFY_DIR) as directory:
        report = run_verify(run.seed, points)
        report.write(directory / REPORT_FILENAME)
        raise_on_failure(report)
        logger.info(f"All {len(report.suites)} verify suites passed")
    return report


COMMANDS = {
    'simulate': cmd_simulate,
    'pretrain': cmd_pretrain,
    'finetune': cmd_finetune,
    'eval': cmd_eval,
    'oracle': cmd_oracle,
    'verify': cmd_verify,
}
