from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from src.errors import ContractError
from src.tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    """Outcome of one gradient check.

    ``max_rel_error`` is per tensor: the largest analytic/numeric gap of a
    tensor divided by the largest gradient magnitude of that tensor (floored
    at ``min_scale``). It is blind to a wrong small coordinate next to a large
    one, so ``max_coord_error`` also compares every coordinate whose magnitude
    reaches ``coord_floor`` against its own magnitude. Both must stay within
    ``tolerance``.
    """
    max_rel_error: float
    tolerance: float
    checked: int
    errors: List[float] = field(default_factory=list)
    max_coord_error: float = 0.0

    @property
    def worst_error(self) -> float:
        return max(self.max_rel_error, self.max_coord_error)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst_error)) and self.worst_error <= self.tolerance


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the tape gradient of scalar f at x with central differences"""
    leaf = Tensor(x.data, requires_grad=True)
    return grad_check_tensors(lambda: f(leaf), [leaf], eps=eps, tol=tol)


def grad_check_tensors(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
                       tol: float = 1e-4, max_coords: Optional[int] = None,
                       rng: Optional[np.random.Generator] = None, min_scale: float = 1e-6,
                       coord_floor: float = 1e-3) -> GradCheckReport:
    """Gradient check of a closure with respect to leaf tensors it reads.

    Errors are measured per tensor and per coordinate, see ``GradCheckReport``;
    coordinates below ``coord_floor`` in magnitude only count per tensor.
    ``max_coords`` samples a subset of coordinates across all tensors for
    large parameter sets.
    """
    for tensor in tensors:
        if not tensor.requires_grad:
            raise ContractError(f"grad_check: {tensor!r} does not require a gradient")
        tensor.zero_grad()

    with Tape() as tape:
        loss = loss_fn()
    if loss.size != 1:
        raise ContractError(f"grad_check: function must be scalar-valued, got shape {list(loss.shape)}")
    tape.backward(loss)

    coords = [(index, flat) for index, tensor in enumerate(tensors) for flat in range(tensor.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picked)]

    analytic = {index: [] for index in range(len(tensors))}
    numeric = {index: [] for index in range(len(tensors))}
    for index, flat in coords:
        tensor = tensors[index]
        base = tensor.data.copy()
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(base)

        shifted = base.copy()
        shifted.reshape(-1)[flat] += eps
        tensor.assign(shifted)
        upper = loss_fn().item()
        shifted.reshape(-1)[flat] -= 2 * eps
        tensor.assign(shifted)
        lower = loss_fn().item()
        tensor.assign(base)

        analytic[index].append(grad.reshape(-1)[flat])
        numeric[index].append((upper - lower) / (2 * eps))

    errors, coord_error = [], 0.0
    for index in analytic:
        if not analytic[index]:
            continue
        a = np.array(analytic[index])
        n = np.array(numeric[index])
        gap = np.abs(a - n)
        scale = max(np.abs(a).max(), np.abs(n).max(), min_scale)
        errors.append(float(gap.max() / scale))
        magnitude = np.maximum(np.abs(a), np.abs(n))
        large = magnitude >= coord_floor
        if large.any():
            coord_error = max(coord_error, float((gap[large] / magnitude[large]).max()))

    return GradCheckReport(max_rel_error=max(errors) if errors else 0.0, tolerance=tol, checked=len(coords),
                           errors=errors, max_coord_error=coord_error)
