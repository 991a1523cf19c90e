"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable operation is a registered ``Kernel`` with a forward rule
and a gradient rule. Operations are recorded on the tape that is active on the
current thread (``with Tape() as tape:``) whenever one of their inputs requires
a gradient; without an active tape nothing is recorded, which is how inference
runs.
"""
import itertools
import threading
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import ContractError, DimensionError, EmptyAxisError, LabelError, NumericError

ArrayLike = Union[np.ndarray, Sequence, float, int]

_local = threading.local()
_tape_ids = itertools.count(1)


def active_tape() -> Optional['Tape']:
    stack = getattr(_local, 'stack', None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable float64 array, optionally tracked for gradients"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self._data = _frozen(np.array(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.tape_id: Optional[Tuple[int, int]] = None
        self._tape: Optional['Tape'] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> 'Tensor':
        tensor = cls.__new__(cls)
        tensor._data = _frozen(np.asarray(array, dtype=np.float64))
        tensor.requires_grad = False
        tensor.grad = None
        tensor.name = None
        tensor.tape_id = None
        tensor._tape = None
        return tensor

    # Accessors
    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def assign(self, data: ArrayLike):
        """Swap in a new buffer of the same shape (parameter updates only).

        The previous buffer is left untouched, so arrays saved by earlier
        tapes stay valid.
        """
        array = np.array(data, dtype=np.float64)
        if array.shape != self.shape:
            raise DimensionError(f"assign: shape {array.shape} does not match {self.shape}")
        self._data = _frozen(array)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self._data)

    def backward(self):
        if self._tape is None:
            raise ContractError("backward() called on a tensor that was not recorded on a tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{flags}{label})"

    # Operators
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeNode:
    kind: str
    inputs: Tuple[Tensor, ...]
    input_data: Tuple[np.ndarray, ...]
    output: Tensor
    saved: Dict[str, Any]
    attrs: Dict[str, Any]


class Tape:
    """Ordered record of kernel applications; nodes are appended in execution order"""

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: List[TapeNode] = []

    def __enter__(self) -> 'Tape':
        if not hasattr(_local, 'stack'):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: Tuple[Tensor, ...], output: Tensor, saved: Dict[str, Any],
               attrs: Dict[str, Any]):
        output.requires_grad = True
        output.tape_id = (self.id, len(self.nodes))
        output._tape = self
        self.nodes.append(TapeNode(kind, inputs, tuple(t.data for t in inputs), output, saved, attrs))

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")

        last = loss.tape_id[1]
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        reached: Dict[int, Tensor] = {id(loss): loss}

        for node in reversed(self.nodes[:last + 1]):
            grad = grads.get(id(node.output))
            if grad is None:
                continue
            input_grads = KERNELS[node.kind].backward(grad, node.saved, node.input_data, node.attrs)
            for tensor, input_grad in zip(node.inputs, input_grads):
                if not tensor.requires_grad or input_grad is None:
                    continue
                if input_grad.shape != tensor.shape:
                    raise DimensionError(f"{node.kind}: gradient shape {input_grad.shape} "
                                         f"does not match input shape {tensor.shape}")
                key = id(tensor)
                grads[key] = grads[key] + input_grad if key in grads else input_grad
                reached[key] = tensor

        for key, tensor in reached.items():
            grad = np.array(grads[key], dtype=np.float64)
            if tensor.tape_id is None and tensor.grad is not None:
                tensor.grad = tensor.grad + grad
            else:
                tensor.grad = grad

    def replay(self) -> List[np.ndarray]:
        """Re-run every recorded kernel from its recorded inputs"""
        return [KERNELS[node.kind].forward(*node.input_data, **node.attrs)[0] for node in self.nodes]


# Kernel registry
class Kernel:
    name = ''

    def forward(self, *inputs: np.ndarray, **attrs) -> Tuple[np.ndarray, Dict[str, Any]]:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, saved: Dict[str, Any], inputs: Tuple[np.ndarray, ...],
                 attrs: Dict[str, Any]) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


KERNELS: Dict[str, Kernel] = {}


def register(cls):
    KERNELS[cls.name] = cls()
    return cls


def apply(kind: str, *tensors: Tensor, **attrs) -> Tensor:
    arrays = tuple(t.data for t in tensors)
    out, saved = KERNELS[kind].forward(*arrays, **attrs)
    output = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        tape.record(kind, tensors, output, saved, attrs)
    return output


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {list(a)} and {list(b)} are not broadcastable")


def _check_finite(kind: str, z: np.ndarray):
    if np.isnan(z).any():
        raise NumericError(f"{kind}: NaN in input")


@register
class Add(Kernel):
    name = 'add'

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        return a + b, {}

    def backward(self, grad, saved, inputs, attrs):
        a, b = inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


@register
class Mul(Kernel):
    name = 'mul'

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        return a * b, {}

    def backward(self, grad, saved, inputs, attrs):
        a, b = inputs
        return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


@register
class Scale(Kernel):
    name = 'scale'

    def forward(self, x, factor=1.0):
        return x * factor, {}

    def backward(self, grad, saved, inputs, attrs):
        return (grad * attrs['factor'],)


@register
class MatMul(Kernel):
    name = 'matmul'

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul: operands need rank >= 2, got {list(a.shape)} and {list(b.shape)}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: inner extents differ for {list(a.shape)} and {list(b.shape)}")
        _broadcast_shape(self.name, a.shape[:-2], b.shape[:-2])
        return np.matmul(a, b), {}

    def backward(self, grad, saved, inputs, attrs):
        a, b = inputs
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)


@register
class Relu(Kernel):
    name = 'relu'

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), {'mask': mask}

    def backward(self, grad, saved, inputs, attrs):
        return (grad * saved['mask'],)


@register
class Tanh(Kernel):
    name = 'tanh'

    def forward(self, x):
        y = np.tanh(x)
        return y, {'y': y}

    def backward(self, grad, saved, inputs, attrs):
        return (grad * (1.0 - saved['y'] ** 2),)


@register
class LayerNorm(Kernel):
    name = 'layer_norm'

    def forward(self, x, gamma, beta, eps=1e-5):
        n = x.shape[-1] if x.ndim else 0
        if n < 1:
            raise EmptyAxisError("layer_norm: last axis is empty")
        if gamma.shape != (n,) or beta.shape != (n,):
            raise DimensionError(f"layer_norm: gamma {list(gamma.shape)} / beta {list(beta.shape)} "
                                 f"do not match feature extent {n}")
        if eps <= 0:
            raise ContractError(f"layer_norm: eps must be > 0, got {eps}")
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
        x_hat = centered * inv_std
        return gamma * x_hat + beta, {'x_hat': x_hat, 'inv_std': inv_std}

    def backward(self, grad, saved, inputs, attrs):
        x, gamma, beta = inputs
        x_hat, inv_std = saved['x_hat'], saved['inv_std']
        grad_hat = grad * gamma
        grad_x = inv_std * (grad_hat
                            - grad_hat.mean(axis=-1, keepdims=True)
                            - x_hat * (grad_hat * x_hat).mean(axis=-1, keepdims=True))
        grad_gamma = (grad * x_hat).reshape(-1, x.shape[-1]).sum(axis=0)
        grad_beta = grad.reshape(-1, x.shape[-1]).sum(axis=0)
        return grad_x, grad_gamma, grad_beta


@register
class Softmax(Kernel):
    name = 'softmax'

    def forward(self, z):
        _check_finite(self.name, z)
        if z.ndim == 0 or z.shape[-1] == 0:
            raise EmptyAxisError("softmax: last axis is empty")
        shifted = np.exp(z - z.max(axis=-1, keepdims=True))
        p = shifted / shifted.sum(axis=-1, keepdims=True)
        return p, {'p': p}

    def backward(self, grad, saved, inputs, attrs):
        p = saved['p']
        return (p * (grad - (grad * p).sum(axis=-1, keepdims=True)),)


def simplex_projection(z: np.ndarray) -> np.ndarray:
    """Sort-based Euclidean projection of each last-axis row onto the probability simplex"""
    k_max = z.shape[-1]
    z_sorted = -np.sort(-z, axis=-1)
    cumulative = np.cumsum(z_sorted, axis=-1)
    ks = np.arange(1, k_max + 1, dtype=np.float64)
    in_support = 1.0 + ks * z_sorted > cumulative
    k = np.max(np.where(in_support, ks, 0.0), axis=-1, keepdims=True)
    tau = (np.take_along_axis(cumulative, k.astype(np.int64) - 1, axis=-1) - 1.0) / k
    return np.maximum(z - tau, 0.0)


@register
class Sparsemax(Kernel):
    name = 'sparsemax'

    def forward(self, z):
        if z.ndim == 0 or z.shape[-1] == 0:
            raise EmptyAxisError("sparsemax: last axis is empty")
        _check_finite(self.name, z)
        p = simplex_projection(z)
        return p, {'p': p}

    def backward(self, grad, saved, inputs, attrs):
        support = saved['p'] > 0
        count = support.sum(axis=-1, keepdims=True)
        masked = grad * support
        return (support * (grad - masked.sum(axis=-1, keepdims=True) / count),)


@register
class Concat(Kernel):
    name = 'concat'

    def forward(self, *xs):
        if not xs:
            raise EmptyAxisError("concat: no inputs")
        lead = xs[0].shape[:-1]
        for x in xs[1:]:
            if x.shape[:-1] != lead:
                raise DimensionError(f"concat: leading shapes differ ({list(xs[0].shape)} vs {list(x.shape)})")
        return np.concatenate(xs, axis=-1), {}

    def backward(self, grad, saved, inputs, attrs):
        bounds = np.cumsum([x.shape[-1] for x in inputs])[:-1]
        return tuple(np.split(grad, bounds, axis=-1))


@register
class Mean(Kernel):
    name = 'mean'

    def forward(self, x, axis=0, keepdims=False):
        axis = _normalize_axis(x, axis)
        if x.shape[axis] == 0:
            raise EmptyAxisError(f"mean: axis {axis} of shape {list(x.shape)} is empty")
        return x.mean(axis=axis, keepdims=keepdims), {}

    def backward(self, grad, saved, inputs, attrs):
        (x,) = inputs
        axis = _normalize_axis(x, attrs.get('axis', 0))
        if not attrs.get('keepdims', False):
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, x.shape) / x.shape[axis],)


@register
class Sum(Kernel):
    name = 'sum'

    def forward(self, x):
        return np.asarray(x.sum()), {}

    def backward(self, grad, saved, inputs, attrs):
        (x,) = inputs
        return (np.full(x.shape, float(grad)),)


@register
class Permute(Kernel):
    name = 'permute'

    def forward(self, x, axes=()):
        if sorted(axes) != list(range(x.ndim)):
            raise DimensionError(f"permute: {list(axes)} is not a permutation of the axes of {list(x.shape)}")
        return np.transpose(x, axes), {}

    def backward(self, grad, saved, inputs, attrs):
        return (np.transpose(grad, np.argsort(attrs['axes'])),)


@register
class Reshape(Kernel):
    name = 'reshape'

    def forward(self, x, shape=()):
        if int(np.prod(shape)) != x.size:
            raise DimensionError(f"reshape: cannot view {list(x.shape)} as {list(shape)}")
        return x.reshape(shape), {}

    def backward(self, grad, saved, inputs, attrs):
        return (grad.reshape(inputs[0].shape),)


@register
class L2Normalize(Kernel):
    name = 'l2_normalize'

    def forward(self, x):
        norm = np.sqrt((x ** 2).sum(axis=-1, keepdims=True))
        if (norm == 0).any():
            raise NumericError("l2_normalize: zero vector")
        y = x / norm
        return y, {'y': y, 'norm': norm}

    def backward(self, grad, saved, inputs, attrs):
        y, norm = saved['y'], saved['norm']
        return ((grad - y * (grad * y).sum(axis=-1, keepdims=True)) / norm,)


@register
class CrossEntropy(Kernel):
    name = 'cross_entropy'

    def forward(self, logits, labels=()):
        labels = np.asarray(labels, dtype=np.int64)
        if logits.ndim != 2:
            raise DimensionError(f"cross_entropy: logits must be [B, S], got {list(logits.shape)}")
        batch, classes = logits.shape
        if labels.shape != (batch,):
            raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch {batch}")
        if batch == 0:
            raise EmptyAxisError("cross_entropy: empty batch")
        if (labels < 0).any() or (labels >= classes).any():
            raise LabelError(f"cross_entropy: label out of range [0, {classes})")
        _check_finite(self.name, logits)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_p = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        loss = -log_p[np.arange(batch), labels].mean()
        return np.asarray(loss), {'p': np.exp(log_p)}

    def backward(self, grad, saved, inputs, attrs):
        p = saved['p']
        labels = np.asarray(attrs['labels'], dtype=np.int64)
        one_hot = np.zeros_like(p)
        one_hot[np.arange(p.shape[0]), labels] = 1.0
        return (float(grad) * (p - one_hot) / p.shape[0],)


def _normalize_axis(x: np.ndarray, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {list(x.shape)}")
    return axis % x.ndim


# Public operations
def add(a: Tensor, b: Tensor) -> Tensor:
    return apply('add', a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply('mul', a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return apply('scale', x, factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply('matmul', a, b)


def relu(x: Tensor) -> Tensor:
    return apply('relu', x)


def tanh(x: Tensor) -> Tensor:
    return apply('tanh', x)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return apply('layer_norm', x, gamma, beta, eps=float(eps))


def softmax_lastdim(z: Tensor) -> Tensor:
    return apply('softmax', z)


def sparsemax_lastdim(z: Tensor) -> Tensor:
    return apply('sparsemax', z)


def normalize_lastdim(z: Tensor, normalizer: str) -> Tensor:
    if normalizer == 'softmax':
        return softmax_lastdim(z)
    if normalizer == 'sparsemax':
        return sparsemax_lastdim(z)
    raise ContractError(f"unknown normalizer '{normalizer}'")


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    return apply('concat', *tensors)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return apply('mean', x, axis=int(axis), keepdims=bool(keepdims))


def sum_all(x: Tensor) -> Tensor:
    return apply('sum', x)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    return apply('permute', x, axes=tuple(int(a) for a in axes))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply('reshape', x, shape=tuple(int(s) for s in shape))


def l2_normalize(x: Tensor) -> Tensor:
    return apply('l2_normalize', x)


def cross_entropy_logits(logits: Tensor, labels: Sequence[int]) -> Tensor:
    return apply('cross_entropy', logits, labels=tuple(int(label) for label in labels))
