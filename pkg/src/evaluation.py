"""Verification trials, cosine scoring, EER and the evaluation reports"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.arraySim import reselect_channels
from src.config import WORKERS
from src.dataset import Manifest, SplitData
from src.errors import ManifestError, NumericError, ProtocolError
from src.randomStreams import EVAL, stream
from src.stbModel import StbModel
from src.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    is_target: bool


@dataclass
class TrialSet:
    trials: List[Trial]

    def validate(self):
        if any(t.enroll == t.test for t in self.trials):
            raise ProtocolError("a trial pairs an utterance with itself")
        if not any(t.is_target for t in self.trials) or all(t.is_target for t in self.trials):
            raise ProtocolError("trial set needs both target and nontarget trials")

    @property
    def num_target(self) -> int:
        return sum(1 for t in self.trials if t.is_target)

    @property
    def num_nontarget(self) -> int:
        return len(self.trials) - self.num_target


def build_trials(manifest: Manifest, rng: np.random.Generator) -> TrialSet:
    """Same-speaker cross-scene pairs as targets, as many random cross-speaker pairs as nontargets"""
    utterances = manifest.utterances
    targets, candidates = [], 0
    for i, first in enumerate(utterances):
        for second in utterances[i + 1:]:
            if first.speaker == second.speaker:
                if first.scene != second.scene:
                    targets.append(Trial(first.id, second.id, True))
            else:
                candidates += 1

    wanted = min(len(targets), candidates)
    chosen = set()
    while len(chosen) < wanted:
        i, j = (int(x) for x in rng.choice(len(utterances), size=2, replace=False))
        if utterances[i].speaker == utterances[j].speaker:
            continue
        chosen.add((min(i, j), max(i, j)))
    nontargets = [Trial(utterances[i].id, utterances[j].id, False) for i, j in sorted(chosen)]

    trials = TrialSet(targets + nontargets)
    trials.validate()
    logger.info(f"Built {trials.num_target} target and {trials.num_nontarget} nontarget trials "
                f"on split '{manifest.split}'")
    return trials


def cosine_score(e1, e2) -> float:
    a = np.asarray(e1.data if isinstance(e1, Tensor) else e1, dtype=np.float64)
    b = np.asarray(e2.data if isinstance(e2, Tensor) else e2, dtype=np.float64)
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise NumericError("cosine score of a zero vector")
    return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


def compute_eer(target_scores: Sequence[float], nontarget_scores: Sequence[float]) -> Tuple[float, float]:
    """EER and its threshold.

    Thresholds are swept at the midpoints between sorted unique scores plus
    one point beyond each end. FAR counts nontargets scoring >= t, FRR counts
    targets scoring < t. The crossing is linearly interpolated between the two
    bracketing thresholds.
    """
    target = np.sort(np.asarray(target_scores, dtype=np.float64))
    nontarget = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if target.size == 0 or nontarget.size == 0:
        raise ProtocolError("both target and nontarget scores are required")

    scores = np.unique(np.concatenate([target, nontarget]))
    thresholds = np.concatenate([[scores[0] - 1.0], (scores[:-1] + scores[1:]) / 2.0, [scores[-1] + 1.0]])
    far = (nontarget.size - np.searchsorted(nontarget, thresholds, side='left')) / nontarget.size
    frr = np.searchsorted(target, thresholds, side='left') / target.size
    gap = far - frr

    index = int(np.argmax(gap <= 0))
    if gap[index] == 0:
        return float(far[index]), float(thresholds[index])
    w = gap[index - 1] / (gap[index - 1] - gap[index])
    eer = far[index - 1] + w * (far[index] - far[index - 1])
    return float(eer), float(thresholds[index - 1] + w * (thresholds[index] - thresholds[index - 1]))


@dataclass
class ConditionResult:
    eer: float
    threshold: float
    target_scores: List[float]
    nontarget_scores: List[float]


@dataclass
class EvalReport:
    system: str
    normalizer: Optional[str]
    split: str
    conditions: Dict[str, ConditionResult] = field(default_factory=dict)
    channel_rank: Dict[str, float] = field(default_factory=dict)
    rank_trend_monotone: Optional[bool] = None

    def to_json(self) -> Dict:
        return asdict(self)

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_json(), f, indent=4, sort_keys=True)
            f.write('\n')
        return path


def score_trials(trials: TrialSet, embeddings: Dict[str, np.ndarray]) -> ConditionResult:
    target, nontarget = [], []
    for trial in trials.trials:
        score = cosine_score(embeddings[trial.enroll], embeddings[trial.test])
        (target if trial.is_target else nontarget).append(score)
    eer, threshold = compute_eer(target, nontarget)
    return ConditionResult(eer=eer, threshold=threshold, target_scores=target, nontarget_scores=nontarget)


def _extract(inputs: List[np.ndarray], embed: Callable[[Tensor], Tensor], batch_size: int,
             workers: Optional[int]) -> List[np.ndarray]:
    """Embed equally shaped inputs in fixed batches; results come back in input order"""
    batches = [inputs[i:i + batch_size] for i in range(0, len(inputs), batch_size)]

    def run(batch: List[np.ndarray]) -> np.ndarray:
        return embed(Tensor(np.stack(batch))).data

    with ThreadPoolExecutor(max_workers=workers or WORKERS) as executor:
        return [row for result in executor.map(run, batches) for row in result]


def channel_subset(features: np.ndarray, k: int, seed: int, index: int) -> np.ndarray:
    """Seeded k-channel subset of one utterance; k = C keeps the recorded order"""
    if k == features.shape[0]:
        return features
    return reselect_channels(features, k, stream(seed, EVAL, k, index))


def evaluate(model: StbModel, split: SplitData, trials: TrialSet, channel_subset_sizes: Sequence[int], seed: int,
             batch_size: int = 16, workers: Optional[int] = None) -> EvalReport:
    ids = [u.id for u in split.manifest.utterances]
    report = EvalReport(system='stb', normalizer=model.config.normalizer, split=split.manifest.split)
    for k in channel_subset_sizes:
        inputs = [channel_subset(features, k, seed, index) for index, features in enumerate(split.features)]
        embeddings = dict(zip(ids, _extract(inputs, model.embed, batch_size, workers)))
        result = score_trials(trials, embeddings)
        report.conditions[f"C={k}"] = result
        logger.info(f"[{report.normalizer}] C={k}: EER {100 * result.eer:.2f}% at threshold {result.threshold:.4f}")
    return report


def _oracle_inputs(split: SplitData, rank: int) -> List[np.ndarray]:
    """Channel of the given distance rank (1 = closest), taken from the manifest only"""
    inputs = []
    for record, features in zip(split.manifest.utterances, split.features):
        if rank == 1:
            channel = record.oracle_channel
        else:
            if not record.distances:
                raise ManifestError(f"utterance {record.id} has no channel distances")
            channel = int(np.argsort(record.distances, kind='stable')[rank - 1])
        if channel is None or not 0 <= channel < features.shape[0]:
            raise ManifestError(f"utterance {record.id} has no usable oracle channel ({channel})")
        inputs.append(features[channel][None])
    return inputs


def oracle_one_best_eval(model: StbModel, split: SplitData, trials: TrialSet, ranks: int = 6,
                         batch_size: int = 16, workers: Optional[int] = None) -> EvalReport:
    """Closest-channel baseline through the single-channel path, plus a per-rank sweep"""
    ids = [u.id for u in split.manifest.utterances]
    report = EvalReport(system='oracle_one_best', normalizer=None, split=split.manifest.split)
    rank_eers = []
    for rank in range(1, min(ranks, split.manifest.channels) + 1):
        embeddings = dict(zip(ids, _extract(_oracle_inputs(split, rank), model.embed_single, batch_size, workers)))
        result = score_trials(trials, embeddings)
        if rank == 1:
            report.conditions['oracle_one_best'] = result
        report.channel_rank[str(rank)] = result.eer
        rank_eers.append(result.eer)
        logger.info(f"Channel rank {rank}: EER {100 * result.eer:.2f}%")
    report.rank_trend_monotone = bool(all(a <= b for a, b in zip(rank_eers, rank_eers[1:])))
    if not report.rank_trend_monotone:
        logger.warning("EER does not increase monotonically with channel distance rank")
    return report
