"""Property suites behind ``stb-asv verify``.

Each suite returns a ``SuiteResult`` with the number of checked cases and the
largest observed error. A failing suite names the offending kernel or
property in ``failing``.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.attention import AttentionParams, ScoreState, mha_residual_scores
from src.config import StbConfig
from src.errors import ContractError, PropertyFailure
from src.gradCheck import grad_check_tensors
from src.evaluation import compute_eer
from src.oracles import brute_force_eer, project_simplex_bisection
from src.randomStreams import VERIFY, stream
from src.stbModel import StbModel
from src.tensor import (Tape, Tensor, add, concat_lastdim, cross_entropy_logits, l2_normalize, layer_norm, matmul,
                        mean_axis, mul, permute, relu, reshape, scale, simplex_projection, softmax_lastdim,
                        sparsemax_lastdim, sum_all, tanh)

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
KINK_MARGIN = 1e-4

# Model used by the gradient, invariance and replay suites
TINY_MODEL = StbConfig(input_dim=5, feature_dim=8, num_blocks=2, heads=2, frames=4, channels_train=3, sap_dim=4,
                       ffn_dim=8, num_speakers=3, init_std=0.1, out_proj_scale=1.0, classifier_init_std=1.0)


@dataclass
class SuiteResult:
    name: str
    checked: int
    max_error: float
    tolerance: float
    passed: bool
    failing: Optional[str] = None
    seconds: float = 0.0
    counts: Dict[str, int] = field(default_factory=dict)


@dataclass
class VerifyReport:
    seed: int
    suites: List[SuiteResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    @property
    def first_failure(self) -> Optional[SuiteResult]:
        return next((s for s in self.suites if not s.passed), None)

    def to_json(self) -> Dict:
        return {'seed': self.seed, 'passed': self.passed, 'suites': [asdict(s) for s in self.suites]}

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_json(), f, indent=4, sort_keys=True)
            f.write('\n')
        return path


def kink_margin(tape: Tape) -> float:
    """Smallest distance of any relu input or sparsemax score to a non-differentiable point"""
    margin = np.inf
    for node in tape.nodes:
        if node.kind == 'relu':
            margin = min(margin, float(np.abs(node.input_data[0]).min()))
        elif node.kind == 'sparsemax':
            z = node.input_data[0]
            p = simplex_projection(z)
            tau = np.max(np.where(p > 0, z - p, -np.inf), axis=-1, keepdims=True)
            margin = min(margin, float(np.abs(z - tau).min()))
    return margin


def _leaf(rng: np.random.Generator, *shape, spread: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, spread, size=shape), requires_grad=True)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(weights)))


def _projection(rng, fn, *leaves):
    """Scalar reduction of a tensor-valued kernel: fixed random weighting of its output"""
    weights = rng.normal(size=fn(*leaves).shape)
    return (lambda: _weighted(fn(*leaves), weights)), list(leaves)


def _case_cross_entropy(rng):
    logits = _leaf(rng, 4, 5)
    labels = rng.integers(0, 5, size=4)
    return (lambda: cross_entropy_logits(logits, labels)), [logits]


KERNEL_CASES: Dict[str, Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor]]]] = {
    'add': lambda rng: _projection(rng, add, _leaf(rng, 3, 4), _leaf(rng, 4)),
    'mul': lambda rng: _projection(rng, mul, _leaf(rng, 3, 4), _leaf(rng, 3, 1)),
    'scale': lambda rng: _projection(rng, lambda x: scale(x, 1.7), _leaf(rng, 3, 4)),
    'matmul': lambda rng: _projection(rng, matmul, _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)),
    'relu': lambda rng: _projection(rng, relu, _leaf(rng, 3, 4)),
    'tanh': lambda rng: _projection(rng, tanh, _leaf(rng, 3, 4)),
    'layer_norm': lambda rng: _projection(rng, layer_norm, _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)),
    'softmax': lambda rng: _projection(rng, softmax_lastdim, _leaf(rng, 3, 5)),
    'sparsemax': lambda rng: _projection(rng, sparsemax_lastdim, _leaf(rng, 3, 5)),
    'concat': lambda rng: _projection(rng, lambda a, b: concat_lastdim([a, b]), _leaf(rng, 2, 3), _leaf(rng, 2, 2)),
    'mean': lambda rng: _projection(rng, lambda x: mean_axis(x, 1), _leaf(rng, 3, 4, 2)),
    'sum': lambda rng: _projection(rng, lambda x: reshape(sum_all(x), (1,)), _leaf(rng, 3, 4)),
    'permute': lambda rng: _projection(rng, lambda x: permute(x, (1, 2, 0)), _leaf(rng, 2, 3, 4)),
    'reshape': lambda rng: _projection(rng, lambda x: reshape(x, (4, 6)), _leaf(rng, 2, 3, 4)),
    'l2_normalize': lambda rng: _projection(rng, l2_normalize, _leaf(rng, 3, 4)),
    'cross_entropy': _case_cross_entropy,
}


def _smooth_case(make_case, rng, attempts: int = 50):
    """Draw cases until the case is at least KINK_MARGIN away from every kink"""
    for _ in range(attempts):
        loss_fn, leaves = make_case(rng)
        with Tape() as tape:
            loss_fn()
        if kink_margin(tape) > KINK_MARGIN:
            return loss_fn, leaves
    return loss_fn, leaves


def suite_kernel_gradients(seed: int, points: int = 100, kernels: Optional[List[str]] = None) -> SuiteResult:
    worst, checked, failing = 0.0, 0, None
    for index, kind in enumerate(kernels or KERNEL_CASES):
        rng = stream(seed, VERIFY, 0, index)
        kernel_worst = 0.0
        for _ in range(points):
            loss_fn, leaves = _smooth_case(KERNEL_CASES[kind], rng)
            report = grad_check_tensors(loss_fn, leaves, tol=GRAD_TOLERANCE)
            kernel_worst = max(kernel_worst, report.worst_error)
            checked += 1
        logger.debug(f"gradcheck {kind}: max relative error {kernel_worst:.2e}")
        if kernel_worst > GRAD_TOLERANCE and failing is None:
            failing = kind
        worst = max(worst, kernel_worst)
    return SuiteResult('kernel_gradients', checked, worst, GRAD_TOLERANCE, failing is None, failing)


def _tiny_model(rng: np.random.Generator, normalizer: str) -> StbModel:
    return StbModel.initialize(replace(TINY_MODEL, normalizer=normalizer), rng)


def suite_model_gradients(seed: int, points: int = 100, max_coords: int = 16) -> SuiteResult:
    worst, checked, failing = 0.0, 0, None
    for n_index, normalizer in enumerate(('softmax', 'sparsemax')):
        for point in range(points):
            rng = stream(seed, VERIFY, 1, n_index, point)
            for _ in range(50):
                model = _tiny_model(rng, normalizer)
                x = Tensor(rng.normal(size=(2, 3, TINY_MODEL.frames, TINY_MODEL.input_dim)))
                labels = rng.integers(0, TINY_MODEL.num_speakers, size=2)

                def loss_fn(model=model, x=x, labels=labels):
                    return cross_entropy_logits(model.classify(model.embed(x)), labels)

                with Tape() as tape:
                    loss_fn()
                if kink_margin(tape) > KINK_MARGIN:
                    break
            report = grad_check_tensors(loss_fn, list(model.trainable_parameters().values()), tol=GRAD_TOLERANCE,
                                        max_coords=max_coords, rng=rng)
            worst = max(worst, report.worst_error)
            checked += 1
            if not report.passed and failing is None:
                failing = f"model[{normalizer}]"
    return SuiteResult('model_gradients', checked, worst, GRAD_TOLERANCE, failing is None, failing)


def suite_sparsemax_oracle(seed: int, rows: int = 1000) -> SuiteResult:
    rng = stream(seed, VERIFY, 2)
    worst = 0.0
    for _ in range(rows):
        z = rng.normal(0.0, rng.uniform(0.1, 3.0), size=int(rng.integers(2, 17)))
        p = sparsemax_lastdim(Tensor(z)).data
        worst = max(worst, float(np.abs(p - project_simplex_bisection(z)).max()), abs(float(p.sum()) - 1.0))
    return SuiteResult('sparsemax_oracle', rows, worst, 1e-9, worst <= 1e-9, None if worst <= 1e-9 else 'sparsemax')


def suite_softmax_rows(seed: int, rows: int = 1000) -> SuiteResult:
    rng = stream(seed, VERIFY, 3)
    worst, positive = 0.0, True
    for _ in range(rows):
        p = softmax_lastdim(Tensor(rng.normal(0.0, 3.0, size=int(rng.integers(1, 17))))).data
        worst = max(worst, abs(float(p.sum()) - 1.0))
        positive = positive and bool((p > 0).all())
    passed = worst <= 1e-12 and positive
    return SuiteResult('softmax_rows', rows, worst, 1e-12, passed, None if passed else 'softmax')


def suite_channel_permutation(seed: int, max_channels: int = 8) -> SuiteResult:
    worst, checked = 0.0, 0
    for n_index, normalizer in enumerate(('softmax', 'sparsemax')):
        for channels in range(1, max_channels + 1):
            rng = stream(seed, VERIFY, 4, n_index, channels)
            model = _tiny_model(rng, normalizer)
            features = rng.normal(size=(channels, TINY_MODEL.frames, TINY_MODEL.input_dim))
            order = rng.permutation(channels)
            a = model.embed(Tensor(features)).data
            b = model.embed(Tensor(features[order])).data
            worst = max(worst, float(1.0 - np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))))
            checked += 1
    passed = worst < 1e-10
    return SuiteResult('channel_permutation', checked, worst, 1e-10, passed,
                       None if passed else 'channel_permutation_invariance')


def suite_attention_equivariance(seed: int, cases: int = 50) -> SuiteResult:
    worst = 0.0
    for case in range(cases):
        rng = stream(seed, VERIFY, 5, case)
        params = AttentionParams.initialize(8, 2, rng, std=0.3, out_scale=1.0)
        length = int(rng.integers(1, 9))
        x = rng.normal(size=(length, 8))
        order = rng.permutation(length)
        normalizer = 'sparsemax' if case % 2 else 'softmax'
        y, _ = mha_residual_scores(Tensor(x), params, ScoreState.zeros(), normalizer)
        y_perm, _ = mha_residual_scores(Tensor(x[order]), params, ScoreState.zeros(), normalizer)
        worst = max(worst, float(np.abs(y.data[order] - y_perm.data).max()))
    passed = worst < 1e-10
    return SuiteResult('attention_equivariance', cases, worst, 1e-10, passed,
                       None if passed else 'attention_permutation_equivariance')


def suite_eer_oracle(seed: int, sets: int = 100) -> SuiteResult:
    rng = stream(seed, VERIFY, 6)
    worst = 0.0
    for index in range(sets):
        target = rng.normal(1.0, 1.0, size=int(rng.integers(1, 40)))
        nontarget = rng.normal(0.0, 1.0, size=int(rng.integers(1, 40)))
        if index % 3 == 0:
            target, nontarget = np.round(target, 1), np.round(nontarget, 1)
        eer, threshold = compute_eer(target, nontarget)
        ref_eer, ref_threshold = brute_force_eer(target, nontarget)
        worst = max(worst, abs(eer - ref_eer), abs(threshold - ref_threshold))
    passed = worst <= 1e-9
    return SuiteResult('eer_oracle', sets, worst, 1e-9, passed, None if passed else 'compute_eer')


def suite_tape_replay(seed: int, cases: int = 10) -> SuiteResult:
    mismatches, checked = 0, 0
    for case in range(cases):
        rng = stream(seed, VERIFY, 7, case)
        model = _tiny_model(rng, 'sparsemax' if case % 2 else 'softmax')
        x = Tensor(rng.normal(size=(2, 3, TINY_MODEL.frames, TINY_MODEL.input_dim)))
        with Tape() as tape:
            cross_entropy_logits(model.classify(model.embed(x)), [0, 1])
        for node, replayed in zip(tape.nodes, tape.replay()):
            checked += 1
            if not np.array_equal(node.output.data, replayed):
                mismatches += 1
    return SuiteResult('tape_replay', checked, float(mismatches), 0.0, mismatches == 0,
                       None if mismatches == 0 else 'tape_replay_determinism')


def sparsity_case(normalizer: str, seed: int = 0) -> np.ndarray:
    """Cross-channel weights for three identical clean channels and one loud noise channel"""
    rng = stream(seed, VERIFY, 8)
    config = replace(TINY_MODEL, num_blocks=1, layers='ccl_only', normalizer=normalizer)
    model = StbModel.initialize(config, rng)
    attn = model.blocks[0].ccl.attn
    eye = np.eye(config.feature_dim)
    for head in range(config.heads):
        cols = slice(head * config.head_dim, (head + 1) * config.head_dim)
        attn.w_q[head].assign(3.0 * eye[:, cols])
        attn.w_k[head].assign(3.0 * eye[:, cols])
    clean = rng.normal(size=(1, 10, config.input_dim))
    noise = 10.0 * rng.normal(size=(1, 10, config.input_dim))
    features = np.concatenate([clean, clean, clean, noise])
    return model.channel_attention(Tensor(features))[0]


def suite_sparsity(seed: int) -> SuiteResult:
    sparse = sparsity_case('sparsemax', seed)
    dense = sparsity_case('softmax', seed)
    counts = {'sparsemax_zero_weights': int((sparse == 0).sum()), 'softmax_zero_weights': int((dense == 0).sum())}
    # max_error counts the violated conditions: no sparsemax zero, any softmax zero
    violations = int(counts['sparsemax_zero_weights'] == 0) + int(counts['softmax_zero_weights'] > 0)
    passed = violations == 0
    return SuiteResult('sparsemax_sparsity', int(sparse.size + dense.size), float(violations), 0.0, passed,
                       None if passed else 'cross_channel_sparsity', counts=counts)


SUITES = ('kernel_gradients', 'model_gradients', 'sparsemax_oracle', 'softmax_rows', 'channel_permutation',
          'attention_equivariance', 'eer_oracle', 'tape_replay', 'sparsemax_sparsity')


def _run_suite(name: str, seed: int, points: int) -> SuiteResult:
    if name == 'kernel_gradients':
        return suite_kernel_gradients(seed, points)
    if name == 'model_gradients':
        return suite_model_gradients(seed, points)
    runners = {
        'sparsemax_oracle': suite_sparsemax_oracle,
        'softmax_rows': suite_softmax_rows,
        'channel_permutation': suite_channel_permutation,
        'attention_equivariance': suite_attention_equivariance,
        'eer_oracle': suite_eer_oracle,
        'tape_replay': suite_tape_replay,
        'sparsemax_sparsity': suite_sparsity,
    }
    if name not in runners:
        raise ContractError(f"unknown verify suite '{name}'")
    return runners[name](seed)


def run_verify(seed: int, points: int = 100, suites: Optional[List[str]] = None) -> VerifyReport:
    report = VerifyReport(seed=seed)
    for name in suites or SUITES:
        start = time.time()
        result = _run_suite(name, seed, points)
        result.seconds = round(time.time() - start, 3)
        report.suites.append(result)
        status = 'passed' if result.passed else f"FAILED ({result.failing})"
        log = logger.info if result.passed else logger.error
        log(f"{name}: {status}, {result.checked} checks, max error {result.max_error:.3e} "
            f"(tolerance {result.tolerance:.0e}), {result.seconds:.1f}s")
    return report


def raise_on_failure(report: VerifyReport):
    failure = report.first_failure
    if failure is not None:
        raise PropertyFailure(failure.failing or failure.name,
                              f"suite {failure.name}: max error {failure.max_error:.3e} > {failure.tolerance:.0e}")
