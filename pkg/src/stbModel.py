"""Frame-level multi-channel speaker model.

Pipeline: per-frame front-end -> K spatio-temporal blocks (cross-frame layer
and cross-channel layer) -> channel fusion -> self-attentive pooling ->
L2-normalized embedding -> linear classifier.

Features are laid out ``[..., C, T, F_in]``; every channel-axis operation
is shape-polymorphic, so a model evaluates on any channel count.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from src.attention import LayerParams, ScoreState, attention_layer
from src.config import StbConfig
from src.constants import PARAM_GROUPS, STAGE_FINETUNE
from src.errors import ConfigError, DimensionError
from src.tensor import (Tensor, add, l2_normalize, matmul, mean_axis, permute, relu, reshape, softmax_lastdim,
                        tanh)

logger = logging.getLogger(__name__)


@dataclass
class FrontendParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def initialize(cls, input_dim: int, feature_dim: int, rng: np.random.Generator) -> 'FrontendParams':
        return cls(
            w1=Tensor(rng.normal(0.0, math.sqrt(2.0 / input_dim), size=(input_dim, feature_dim)), requires_grad=True),
            b1=Tensor(np.zeros(feature_dim), requires_grad=True),
            w2=Tensor(rng.normal(0.0, math.sqrt(2.0 / feature_dim), size=(feature_dim, feature_dim)),
                      requires_grad=True),
            b2=Tensor(np.full(feature_dim, 0.1), requires_grad=True),
        )

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for name in ('w1', 'b1', 'w2', 'b2'):
            yield f"{prefix}{name}", getattr(self, name)


@dataclass
class SapParams:
    w: Tensor
    b: Tensor
    u: Tensor

    @classmethod
    def initialize(cls, feature_dim: int, sap_dim: int, rng: np.random.Generator) -> 'SapParams':
        return cls(w=Tensor(rng.normal(0.0, 1.0 / math.sqrt(feature_dim), size=(feature_dim, sap_dim)),
                            requires_grad=True),
                   b=Tensor(np.zeros(sap_dim), requires_grad=True),
                   u=Tensor(rng.normal(0.0, 1.0 / math.sqrt(sap_dim), size=(sap_dim,)), requires_grad=True))

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for name in ('w', 'b', 'u'):
            yield f"{prefix}{name}", getattr(self, name)


@dataclass
class BlockParams:
    """One spatio-temporal block; a layer is None when ablated"""
    cfl: Optional[LayerParams]
    ccl: Optional[LayerParams]

    @classmethod
    def initialize(cls, config: StbConfig, rng: np.random.Generator) -> 'BlockParams':
        def layer():
            return LayerParams.initialize(config.feature_dim, config.heads, config.ffn_dim, rng, config.init_std,
                                          config.out_proj_scale, config.layer_norm_eps)

        return cls(cfl=layer() if config.layers in ('both', 'cfl_only') else None,
                   ccl=layer() if config.layers in ('both', 'ccl_only') else None)

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        if self.cfl is not None:
            yield from self.cfl.named_parameters(f"{prefix}cfl.")
        if self.ccl is not None:
            yield from self.ccl.named_parameters(f"{prefix}ccl.")


# Model operations
def frontend(features: Tensor, params: FrontendParams) -> Tensor:
    """Per-frame two-layer ReLU MLP, identical for every (channel, frame)"""
    if features.shape[-1] != params.w1.shape[0]:
        raise ConfigError(f"feature dimension {features.shape[-1]} does not match front-end input "
                          f"{params.w1.shape[0]}")
    hidden = relu(add(matmul(features, params.w1), params.b1))
    return relu(add(matmul(hidden, params.w2), params.b2))


def cfl(x: Tensor, layer: LayerParams, prev: ScoreState, sharing: str = 'per_head') -> Tuple[Tensor, ScoreState]:
    """Cross-frame layer: attention over T, independently per channel (softmax)"""
    _check_block_input(x)
    return attention_layer(x, layer, prev, 'softmax', sharing)


def ccl(x: Tensor, layer: LayerParams, prev: ScoreState, normalizer: str = 'softmax',
        sharing: str = 'per_head') -> Tuple[Tensor, ScoreState]:
    """Cross-channel layer: attention over C, independently per frame"""
    _check_block_input(x)
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    y, state = attention_layer(permute(x, axes), layer, prev, normalizer, sharing)
    return permute(y, axes), state


def _check_block_input(x: Tensor):
    if x.ndim < 3:
        raise DimensionError(f"block input must be [..., C, T, N], got {list(x.shape)}")


def stb_stack(x: Tensor, blocks: List[BlockParams], config: StbConfig,
              trace: Optional[List[Tuple[str, int, ScoreState]]] = None) -> Tensor:
    """K blocks; the cross-frame and cross-channel score chains are threaded separately"""
    frame_state, channel_state = ScoreState.zeros(), ScoreState.zeros()
    for index, block in enumerate(blocks):
        order = ('cfl', 'ccl') if config.block_order == 'cfl_first' else ('ccl', 'cfl')
        for kind in order:
            if kind == 'cfl' and block.cfl is not None:
                x, frame_state = cfl(x, block.cfl, frame_state, config.score_sharing)
                if trace is not None:
                    trace.append(('cfl', index, frame_state))
            elif kind == 'ccl' and block.ccl is not None:
                x, channel_state = ccl(x, block.ccl, channel_state, config.normalizer, config.score_sharing)
                if trace is not None:
                    trace.append(('ccl', index, channel_state))
    return x


def fuse_channels(x: Tensor) -> Tensor:
    """Mean over the channel axis: [..., C, T, N] -> [..., T, N]"""
    return mean_axis(x, -3)


def sap_pool(x: Tensor, params: SapParams) -> Tensor:
    """Self-attentive pooling over T: [..., T, N] -> [..., N]"""
    lead, frames, dim = x.shape[:-2], x.shape[-2], x.shape[-1]
    hidden = tanh(add(matmul(x, params.w), params.b))
    energy = reshape(matmul(hidden, reshape(params.u, (params.u.shape[0], 1))), lead + (frames,))
    alpha = softmax_lastdim(energy)
    pooled = matmul(reshape(alpha, lead + (1, frames)), x)
    return reshape(pooled, lead + (dim,))


def classify(embedding: Tensor, classifier: Tensor) -> Tensor:
    if embedding.ndim == 1:
        return reshape(matmul(reshape(embedding, (1, embedding.shape[0])), classifier), (classifier.shape[1],))
    return matmul(embedding, classifier)


class StbModel:
    """Parameters of the full model plus per-group freeze flags"""

    def __init__(self, config: StbConfig, frontend_params: FrontendParams, blocks: List[BlockParams],
                 sap: SapParams, classifier: Tensor, stage: str = STAGE_FINETUNE,
                 frozen: Optional[Iterable[str]] = None):
        config.validate()
        if len(blocks) != config.num_blocks:
            raise ConfigError(f"{len(blocks)} blocks given, config expects {config.num_blocks}")
        self.config = config
        self.frontend = frontend_params
        self.blocks = blocks
        self.sap = sap
        self.classifier = classifier
        self.stage = stage
        self.frozen: Dict[str, bool] = {group: False for group in PARAM_GROUPS}
        self.freeze(frozen or ())

    @classmethod
    def initialize(cls, config: StbConfig, rng: np.random.Generator, stage: str = STAGE_FINETUNE) -> 'StbModel':
        if config.num_speakers < 1:
            raise ConfigError("model.num_speakers must be set before initializing a model")
        return cls(config,
                   FrontendParams.initialize(config.input_dim, config.feature_dim, rng),
                   [BlockParams.initialize(config, rng) for _ in range(config.num_blocks)],
                   SapParams.initialize(config.feature_dim, config.sap_dim, rng),
                   initialize_classifier(config.feature_dim, config.num_speakers, rng, config.classifier_init_std),
                   stage=stage)

    # Parameter bookkeeping
    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.frontend.named_parameters('frontend.')
        for index, block in enumerate(self.blocks):
            yield from block.named_parameters(f"blocks.{index}.")
        yield from self.sap.named_parameters('sap.')
        yield 'classifier.w', self.classifier

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return {name: tensor for name, tensor in self.named_parameters() if not self.frozen[name.split('.')[0]]}

    def freeze(self, groups: Iterable[str]):
        for group in groups:
            if group not in self.frozen:
                raise ConfigError(f"unknown parameter group '{group}'")
            self.frozen[group] = True
        for name, tensor in self.named_parameters():
            tensor.requires_grad = not self.frozen[name.split('.')[0]]
        logger.debug(f"Frozen parameter groups: {[g for g, frozen in self.frozen.items() if frozen]}")

    def snapshot(self, groups: Optional[Iterable[str]] = None) -> Dict[str, bytes]:
        """Raw bytes of each parameter, for bitwise comparisons"""
        groups = set(groups) if groups is not None else set(PARAM_GROUPS)
        return {name: tensor.data.tobytes() for name, tensor in self.named_parameters()
                if name.split('.')[0] in groups}

    # Forward paths
    def encode(self, features: Tensor, trace: Optional[List[Tuple[str, int, ScoreState]]] = None) -> Tensor:
        """Front-end plus blocks: [..., C, T, F_in] -> [..., C, T, N]"""
        return stb_stack(frontend(features, self.frontend), self.blocks, self.config, trace)

    def pool(self, frames: Tensor) -> Tensor:
        """Fusion, pooling and normalization: [..., C, T, N] -> [..., N]"""
        if self.config.fusion == 'per_channel_sap':
            return l2_normalize(mean_axis(sap_pool(frames, self.sap), -2))
        return l2_normalize(sap_pool(fuse_channels(frames), self.sap))

    def embed(self, features: Tensor) -> Tensor:
        return self.pool(self.encode(features))

    def embed_single(self, features: Tensor) -> Tensor:
        """Single-channel path without blocks: front-end, pooling, normalization"""
        if features.shape[-3] != 1:
            raise DimensionError(f"single-channel path expects C=1, got {list(features.shape)}")
        return l2_normalize(sap_pool(fuse_channels(frontend(features, self.frontend)), self.sap))

    def classify(self, embedding: Tensor) -> Tensor:
        return classify(embedding, self.classifier)

    def channel_attention(self, features: Tensor) -> List[np.ndarray]:
        """Cross-channel attention weights per block, each [..., T, h, C, C]"""
        trace: List[Tuple[str, int, ScoreState]] = []
        self.encode(features, trace)
        return [np.stack([w.data for w in state.weights], axis=-3) for kind, _, state in trace if kind == 'ccl']


def initialize_classifier(feature_dim: int, num_speakers: int, rng: np.random.Generator, std: float = 0.0) -> Tensor:
    """Speaker classifier W_cls; std 0 starts from all-zero logits"""
    # consumes the same rng draws at any std
    return Tensor(rng.normal(0.0, std, size=(feature_dim, num_speakers)), requires_grad=True)
