"""Two-stage training: single-channel pretraining, then multi-channel fine-tuning"""
import csv
import gc
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import psutil

from src.arraySim import reselect_channels
from src.checkpoint import load_pretrained_freeze, save_checkpoint
from src.config import StbConfig, TrainConfig
from src.constants import CHECKPOINT_DIRNAME, CURVE_FILENAME, STAGE_FINETUNE, STAGE_PRETRAIN
from src.dataset import SplitData
from src.errors import ContractError, NumericError, TrainingError
from src.randomStreams import BATCHING, INIT, RESELECT, stream
from src.stbModel import StbModel
from src.tensor import Tape, Tensor, cross_entropy_logits

logger = logging.getLogger(__name__)

_STAGE_INDEX = {STAGE_PRETRAIN: 0, STAGE_FINETUNE: 1}


class Adam:
    """Adam with optional decoupled weight decay.

    Frozen tensors and tensors that received no gradient this step are left
    untouched, weight decay included.
    """

    def __init__(self, params: Dict[str, Tensor], learning_rate: float, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.m = {name: np.zeros(t.shape) for name, t in params.items()}
        self.v = {name: np.zeros(t.shape) for name, t in params.items()}

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.zero_grad()

    def step(self):
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for name, tensor in self.params.items():
            if not tensor.requires_grad or tensor.grad is None:
                continue
            grad = tensor.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad ** 2
            update = (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + self.eps)
            data = tensor.data - self.learning_rate * update
            if self.weight_decay:
                data = data - self.learning_rate * self.weight_decay * tensor.data
            tensor.assign(data)


@dataclass
class CurvePoint:
    step: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    model: StbModel
    curve: List[CurvePoint] = field(default_factory=list)
    checkpoint_dir: Optional[Path] = None

    @property
    def final_loss(self) -> float:
        return self.curve[-1].loss if self.curve else math.nan

    def epoch_accuracy(self, steps_per_epoch: int) -> float:
        tail = self.curve[-steps_per_epoch:]
        return float(np.mean([p.accuracy for p in tail])) if tail else math.nan


def write_curve(curve: List[CurvePoint], path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['step', 'loss', 'accuracy'])
        for point in curve:
            writer.writerow([point.step, repr(point.loss), repr(point.accuracy)])


def _rss_mb() -> float:
    return psutil.Process().memory_info().rss / (1024 * 1024)


def _run_epochs(model: StbModel, config: TrainConfig, labels: np.ndarray,
                make_batch: Callable[[int, np.ndarray], np.ndarray],
                forward: Callable[[Tensor], Tensor]) -> List[CurvePoint]:
    """Shared step loop; ``make_batch(epoch, indices)`` returns a [B, C, T, F] array"""
    optimizer = Adam(model.trainable_parameters(), config.learning_rate, weight_decay=config.weight_decay)
    stage_index = _STAGE_INDEX[config.stage]
    curve: List[CurvePoint] = []
    step = 0
    count = len(labels)
    if count == 0:
        raise ContractError(f"{config.stage}: training split is empty")

    for epoch in range(config.epochs):
        start = time.time()
        order = stream(config.seed, BATCHING, stage_index, epoch).permutation(count)
        epoch_losses, epoch_correct = [], 0
        for offset in range(0, count, config.batch_size):
            indices = order[offset:offset + config.batch_size]
            batch = Tensor(make_batch(epoch, indices))
            batch_labels = labels[indices]

            optimizer.zero_grad()
            try:
                with Tape() as tape:
                    logits = model.classify(forward(batch))
                    loss = cross_entropy_logits(logits, batch_labels)
                if not math.isfinite(loss.item()):
                    raise NumericError("loss is not finite")
                tape.backward(loss)
            except NumericError as e:
                raise TrainingError(f"{config.stage} diverged: {e}", step)

            optimizer.step()
            correct = int((logits.data.argmax(axis=-1) == batch_labels).sum())
            curve.append(CurvePoint(step=step, loss=loss.item(), accuracy=correct / len(indices)))
            epoch_losses.append(loss.item() * len(indices))
            epoch_correct += correct
            step += 1

        logger.info(f"[{config.stage}] epoch {epoch + 1}/{config.epochs}: loss {sum(epoch_losses) / count:.4f}, "
                    f"accuracy {epoch_correct / count:.3f}, {time.time() - start:.1f}s, RSS {_rss_mb():.0f} MB")
        gc.collect()
    return curve


def pretrain(train: SplitData, model_config: StbConfig, config: TrainConfig,
             out_dir: Optional[Path] = None) -> TrainResult:
    """Single-channel model (front-end, pooling, classifier) on the clean frames"""
    if config.stage != STAGE_PRETRAIN:
        raise ContractError(f"pretrain() called with a '{config.stage}' config")
    model_config = replace(model_config, num_speakers=train.num_speakers)
    model = StbModel.initialize(model_config, stream(config.seed, INIT, 0), stage=STAGE_PRETRAIN)
    logger.info(f"Pretraining on {len(train)} clean utterances of {train.num_speakers} speakers")

    def make_batch(epoch: int, indices: np.ndarray) -> np.ndarray:
        return np.stack([train.clean[i] for i in indices])

    curve = _run_epochs(model, config, train.labels, make_batch, model.embed_single)
    return _finish(model, curve, out_dir)


def finetune(train: SplitData, checkpoint_dir: Path, model_config: StbConfig, config: TrainConfig,
             out_dir: Optional[Path] = None) -> TrainResult:
    """Train blocks and a fresh classifier on k reselected channels per utterance and epoch"""
    if config.stage != STAGE_FINETUNE:
        raise ContractError(f"finetune() called with a '{config.stage}' config")
    model_config = replace(model_config, num_speakers=train.num_speakers, normalizer=config.normalizer,
                           channels_train=config.channels_per_epoch)
    model = load_pretrained_freeze(checkpoint_dir, model_config, stream(config.seed, INIT, 1))
    logger.info(f"Fine-tuning ({config.normalizer}) on {len(train)} utterances, "
                f"{config.channels_per_epoch} channels per epoch")

    selections: Dict[int, List[np.ndarray]] = {}

    def make_batch(epoch: int, indices: np.ndarray) -> np.ndarray:
        if epoch not in selections:
            selections.clear()
            selections[epoch] = [reselect_channels(features, config.channels_per_epoch,
                                                   stream(config.seed, RESELECT, epoch, index))
                                 for index, features in enumerate(train.features)]
        return np.stack([selections[epoch][i] for i in indices])

    curve = _run_epochs(model, config, train.labels, make_batch, model.embed)
    return _finish(model, curve, out_dir)


def _finish(model: StbModel, curve: List[CurvePoint], out_dir: Optional[Path]) -> TrainResult:
    result = TrainResult(model=model, curve=curve)
    if out_dir is not None:
        write_curve(curve, out_dir / CURVE_FILENAME)
        result.checkpoint_dir = save_checkpoint(model, out_dir / CHECKPOINT_DIRNAME)
    logger.info(f"Finished {model.stage}: final loss {result.final_loss:.4f}")
    return result
