"""Slow reference implementations that the verify suites compare against"""
from typing import Sequence, Tuple

import numpy as np

from src.errors import EmptyAxisError, ProtocolError


def project_simplex_bisection(z: Sequence[float], iterations: int = 200) -> np.ndarray:
    """Euclidean projection onto the simplex by bisection on the threshold tau.

    The projection is max(z - tau, 0) where tau solves sum(max(z - tau, 0)) = 1;
    the left-hand side is monotone in tau, so bisection converges to machine
    precision without sorting.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise EmptyAxisError("cannot project an empty vector")
    low, high = z.max() - 1.0, z.max()
    for _ in range(iterations):
        tau = 0.5 * (low + high)
        if np.maximum(z - tau, 0.0).sum() > 1.0:
            low = tau
        else:
            high = tau
        if high - low <= 0.0:
            break
    p = np.maximum(z - 0.5 * (low + high), 0.0)
    return p / p.sum()


def brute_force_eer(target: Sequence[float], nontarget: Sequence[float]) -> Tuple[float, float]:
    """O(n^2) EER: FAR and FRR are recounted from scratch at every candidate threshold"""
    target = [float(s) for s in target]
    nontarget = [float(s) for s in nontarget]
    if not target or not nontarget:
        raise ProtocolError("both target and nontarget scores are required")

    scores = sorted(set(target + nontarget))
    candidates = [scores[0] - 1.0]
    candidates += [(a + b) / 2.0 for a, b in zip(scores, scores[1:])]
    candidates.append(scores[-1] + 1.0)

    points = []
    for threshold in candidates:
        far = sum(1 for s in nontarget if s >= threshold) / len(nontarget)
        frr = sum(1 for s in target if s < threshold) / len(target)
        points.append((threshold, far, frr))

    for (t0, far0, frr0), (t1, far1, frr1) in zip(points, points[1:]):
        d0, d1 = far0 - frr0, far1 - frr1
        if d0 == 0:
            return far0, t0
        if d0 > 0 > d1 or d1 == 0:
            w = d0 / (d0 - d1)
            return far0 + w * (far1 - far0), t0 + w * (t1 - t0)
    threshold, far, frr = points[-1]
    return (far + frr) / 2.0, threshold
