"""Multi-head self-attention with residual raw-score pass-through.

Attention runs over the second-to-last axis of ``X[..., A, N]``; any leading
axes are independent batch positions. The raw pre-normalizer scores of every
head are handed to the next layer of the same kind and added to its scores.
No positional encoding is applied anywhere, so the result is equivariant to
permutations of the attention axis.
"""
import math
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np

from src.errors import ConfigError, ContractError, DimensionError
from src.tensor import (Tensor, add, concat_lastdim, layer_norm, matmul, normalize_lastdim, relu, scale,
                        swap_last)


def _normal(rng: np.random.Generator, shape, std: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class AttentionParams:
    w_q: List[Tensor]
    w_k: List[Tensor]
    w_v: List[Tensor]
    b_q: List[Tensor]
    b_k: List[Tensor]
    b_v: List[Tensor]
    w_o: Tensor

    @property
    def heads(self) -> int:
        return len(self.w_q)

    @property
    def feature_dim(self) -> int:
        return self.w_o.shape[0]

    @property
    def head_dim(self) -> int:
        return self.feature_dim // self.heads

    @classmethod
    def initialize(cls, feature_dim: int, heads: int, rng: np.random.Generator, std: float = 0.02,
                   out_scale: float = 0.1) -> 'AttentionParams':
        if heads < 1 or feature_dim % heads:
            raise ConfigError(f"feature_dim {feature_dim} is not divisible by {heads} heads")
        d_k = feature_dim // heads
        projections = {
            name: [_normal(rng, (feature_dim, d_k), std, f"{name}.{i}") for i in range(heads)]
            for name in ('w_q', 'w_k', 'w_v')
        }
        biases = {name: [_zeros((d_k,), f"{name}.{i}") for i in range(heads)] for name in ('b_q', 'b_k', 'b_v')}
        w_o = Tensor(rng.normal(0.0, std, size=(feature_dim, feature_dim)) * out_scale, requires_grad=True,
                     name='w_o')
        params = cls(**projections, **biases, w_o=w_o)
        params.validate()
        return params

    def validate(self):
        n, h = self.feature_dim, self.heads
        if h < 1 or n % h:
            raise ConfigError(f"feature_dim {n} is not divisible by {h} heads")
        d_k = n // h
        if self.w_o.shape != (n, n):
            raise ConfigError(f"w_o has shape {list(self.w_o.shape)}, expected {[n, n]}")
        for name in ('w_q', 'w_k', 'w_v', 'b_q', 'b_k', 'b_v'):
            group = getattr(self, name)
            expected = (n, d_k) if name.startswith('w') else (d_k,)
            if len(group) != h:
                raise ConfigError(f"{name} holds {len(group)} heads, expected {h}")
            for tensor in group:
                if tensor.shape != expected:
                    raise ConfigError(f"{name} head has shape {list(tensor.shape)}, expected {list(expected)}")
        for _, tensor in self.named_parameters():
            if not np.isfinite(tensor.data).all():
                raise ConfigError(f"{tensor.name or 'attention parameter'} is not finite")

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for name in ('w_q', 'w_k', 'w_v', 'b_q', 'b_k', 'b_v'):
            for i, tensor in enumerate(getattr(self, name)):
                yield f"{prefix}{name}.{i}", tensor
        yield f"{prefix}w_o", self.w_o


@dataclass
class ScoreState:
    """Raw attention scores forwarded between stacked layers.

    ``scores`` holds one ``[..., A, A]`` tensor per head (a single entry in
    shared mode); ``None`` is the all-zero state given to the first layer.
    ``weights`` keeps the normalized attention of the layer that produced
    the state, for diagnostics.
    """
    scores: Optional[Tuple[Tensor, ...]] = None
    layer: int = 0
    weights: Optional[Tuple[Tensor, ...]] = None

    @classmethod
    def zeros(cls) -> 'ScoreState':
        return cls()

    @property
    def is_zero(self) -> bool:
        return self.scores is None


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def initialize(cls, feature_dim: int, inner_dim: int, rng: np.random.Generator,
                   std: float = 0.02) -> 'FfnParams':
        return cls(w1=_normal(rng, (feature_dim, inner_dim), std, 'w1'), b1=_zeros((inner_dim,), 'b1'),
                   w2=_normal(rng, (inner_dim, feature_dim), std, 'w2'), b2=_zeros((feature_dim,), 'b2'))

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for name in ('w1', 'b1', 'w2', 'b2'):
            yield f"{prefix}{name}", getattr(self, name)


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def initialize(cls, feature_dim: int, eps: float = 1e-5) -> 'NormParams':
        return cls(gamma=Tensor(np.ones(feature_dim), requires_grad=True, name='gamma'),
                   beta=_zeros((feature_dim,), 'beta'), eps=eps)

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}gamma", self.gamma
        yield f"{prefix}beta", self.beta


@dataclass
class LayerParams:
    """One pre-norm attention layer: attention sublayer followed by FFN sublayer"""
    attn_norm: NormParams
    attn: AttentionParams
    ffn_norm: NormParams
    ffn: FfnParams

    @classmethod
    def initialize(cls, feature_dim: int, heads: int, ffn_dim: int, rng: np.random.Generator, std: float = 0.02,
                   out_scale: float = 0.1, eps: float = 1e-5) -> 'LayerParams':
        return cls(attn_norm=NormParams.initialize(feature_dim, eps),
                   attn=AttentionParams.initialize(feature_dim, heads, rng, std, out_scale),
                   ffn_norm=NormParams.initialize(feature_dim, eps),
                   ffn=FfnParams.initialize(feature_dim, ffn_dim, rng, std))

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        yield from self.attn_norm.named_parameters(f"{prefix}attn_norm.")
        yield from self.attn.named_parameters(f"{prefix}attn.")
        yield from self.ffn_norm.named_parameters(f"{prefix}ffn_norm.")
        yield from self.ffn.named_parameters(f"{prefix}ffn.")


def mha_residual_scores(x: Tensor, params: AttentionParams, prev: ScoreState, normalizer: str = 'softmax',
                        sharing: str = 'per_head') -> Tuple[Tensor, ScoreState]:
    """Multi-head attention over axis -2 of x, adding the previous layer's raw scores"""
    if x.ndim < 2 or x.shape[-1] != params.feature_dim:
        raise DimensionError(f"attention input {list(x.shape)} does not end in feature extent {params.feature_dim}")
    if sharing not in ('per_head', 'shared'):
        raise ConfigError(f"unknown score sharing mode '{sharing}'")
    length = x.shape[-2]
    expected_heads = params.heads if sharing == 'per_head' else 1
    if prev.scores is not None:
        if len(prev.scores) != expected_heads:
            raise ConfigError(f"score state holds {len(prev.scores)} heads, attention expects {expected_heads}")
        for score in prev.scores:
            if score.shape[-2:] != (length, length):
                raise DimensionError(f"score state {list(score.shape)} does not match attention axis of "
                                     f"length {length}")

    inv_sqrt = 1.0 / math.sqrt(params.head_dim)
    heads, raw_scores, weights = [], [], []
    for i in range(params.heads):
        q = add(matmul(x, params.w_q[i]), params.b_q[i])
        k = add(matmul(x, params.w_k[i]), params.b_k[i])
        v = add(matmul(x, params.w_v[i]), params.b_v[i])
        s = scale(matmul(q, swap_last(k)), inv_sqrt)
        if prev.scores is not None:
            s = add(s, prev.scores[i if sharing == 'per_head' else 0])
        a = normalize_lastdim(s, normalizer)
        heads.append(matmul(a, v))
        raw_scores.append(s)
        weights.append(a)

    y = matmul(concat_lastdim(heads), params.w_o)
    if sharing == 'shared':
        total = raw_scores[0]
        for s in raw_scores[1:]:
            total = add(total, s)
        forwarded = (scale(total, 1.0 / params.heads),)
    else:
        forwarded = tuple(raw_scores)
    return y, ScoreState(scores=forwarded, layer=prev.layer + 1, weights=tuple(weights))


def prenorm_sublayer(x: Tensor, inner: Callable[[Tensor], Tensor], norm: NormParams) -> Tensor:
    """x + inner(layer_norm(x))"""
    y = inner(layer_norm(x, norm.gamma, norm.beta, norm.eps))
    if y.shape != x.shape:
        raise ContractError(f"sublayer changed shape {list(x.shape)} -> {list(y.shape)}")
    return add(x, y)


def ffn(x: Tensor, params: FfnParams) -> Tensor:
    if x.shape[-1] != params.w1.shape[0]:
        raise DimensionError(f"ffn input {list(x.shape)} does not match w1 {list(params.w1.shape)}")
    return add(matmul(relu(add(matmul(x, params.w1), params.b1)), params.w2), params.b2)


def attention_layer(x: Tensor, layer: LayerParams, prev: ScoreState, normalizer: str = 'softmax',
                    sharing: str = 'per_head') -> Tuple[Tensor, ScoreState]:
    state: List[ScoreState] = []

    def attend(h: Tensor) -> Tensor:
        y, next_state = mha_residual_scores(h, layer.attn, prev, normalizer, sharing)
        state.append(next_state)
        return y

    x = prenorm_sublayer(x, attend, layer.attn_norm)
    x = prenorm_sublayer(x, lambda h: ffn(h, layer.ffn), layer.ffn_norm)
    return x, state[0]
