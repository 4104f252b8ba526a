"""Shared visual encoder: patch embedding, behavior accumulation, attention blocks.

Each block computes::

    b   <- b_prev + MLP_behavior(raw_behavior)
    a_i <- MHA(x_i + b) + x_i
    f_i <- MLP(a_i) + a_i
"""

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .autodiff import DiffTensor, as_tensor, layer_norm, relu, softmax_lastdim
from .config import BackboneConfig
from .errors import ConfigError, ContractError

logger = logging.getLogger(__name__)

# Stable checkpoint key suffix for every BlockParams field.
BLOCK_KEYS = {
    "q_w": "attn.q.weight",
    "q_b": "attn.q.bias",
    "k_w": "attn.k.weight",
    "k_b": "attn.k.bias",
    "v_w": "attn.v.weight",
    "v_b": "attn.v.bias",
    "o_w": "attn.o.weight",
    "o_b": "attn.o.bias",
    "mlp_w1": "mlp.fc1.weight",
    "mlp_b1": "mlp.fc1.bias",
    "mlp_w2": "mlp.fc2.weight",
    "mlp_b2": "mlp.fc2.bias",
    "beh_w1": "behavior.fc1.weight",
    "beh_b1": "behavior.fc1.bias",
    "beh_w2": "behavior.fc2.weight",
    "beh_b2": "behavior.fc2.bias",
    "ln1_scale": "norm1.scale",
    "ln1_shift": "norm1.shift",
    "ln2_scale": "norm2.scale",
    "ln2_shift": "norm2.shift",
}


@dataclass
class BlockParams:
    """Weights of one encoder block (projections are stored input-major)."""

    q_w: DiffTensor
    q_b: DiffTensor
    k_w: DiffTensor
    k_b: DiffTensor
    v_w: DiffTensor
    v_b: DiffTensor
    o_w: DiffTensor
    o_b: DiffTensor
    mlp_w1: DiffTensor
    mlp_b1: DiffTensor
    mlp_w2: DiffTensor
    mlp_b2: DiffTensor
    beh_w1: DiffTensor
    beh_b1: DiffTensor
    beh_w2: DiffTensor
    beh_b2: DiffTensor
    ln1_scale: Optional[DiffTensor] = None
    ln1_shift: Optional[DiffTensor] = None
    ln2_scale: Optional[DiffTensor] = None
    ln2_shift: Optional[DiffTensor] = None

    def named_parameters(self, prefix: str) -> dict[str, DiffTensor]:
        named = {}
        for f in fields(self):
            tensor = getattr(self, f.name)
            if tensor is not None:
                named[f"{prefix}.{BLOCK_KEYS[f.name]}"] = tensor
        return named


@dataclass
class BackboneParams:
    """Patch embedding, positional embedding and the block stack."""

    patch_w: DiffTensor
    patch_b: DiffTensor
    pos: DiffTensor
    blocks: list[BlockParams] = field(default_factory=list)

    def named_parameters(self, prefix: str = "backbone") -> dict[str, DiffTensor]:
        named = {
            f"{prefix}.patch.weight": self.patch_w,
            f"{prefix}.patch.bias": self.patch_b,
            f"{prefix}.pos_embed": self.pos,
        }
        for i, block in enumerate(self.blocks):
            named.update(block.named_parameters(f"{prefix}.block{i}"))
        return named


@dataclass
class BehaviorState:
    """Embedded behavior vector carried from block to block."""

    b: DiffTensor
    b_prev: DiffTensor

    @classmethod
    def initial(cls, batch: int, embed_dim: int) -> "BehaviorState":
        zero = as_tensor(np.zeros((batch, embed_dim)))
        return cls(b=zero, b_prev=zero)


def uniform_weight(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> DiffTensor:
    bound = 1.0 / math.sqrt(fan_in)
    return DiffTensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape: tuple[int, ...]) -> DiffTensor:
    return DiffTensor(np.zeros(shape), requires_grad=True)


def init_block(rng: np.random.Generator, config: BackboneConfig) -> BlockParams:
    d, hidden, bd = config.embed_dim, 4 * config.embed_dim, config.behavior_dim
    params = BlockParams(
        q_w=uniform_weight(rng, d, (d, d)),
        q_b=zeros((d,)),
        k_w=uniform_weight(rng, d, (d, d)),
        k_b=zeros((d,)),
        v_w=uniform_weight(rng, d, (d, d)),
        v_b=zeros((d,)),
        o_w=uniform_weight(rng, d, (d, d)),
        o_b=zeros((d,)),
        mlp_w1=uniform_weight(rng, d, (d, hidden)),
        mlp_b1=zeros((hidden,)),
        mlp_w2=uniform_weight(rng, hidden, (hidden, d)),
        mlp_b2=zeros((d,)),
        beh_w1=uniform_weight(rng, bd, (bd, d)),
        beh_b1=zeros((d,)),
        beh_w2=uniform_weight(rng, d, (d, d)),
        beh_b2=zeros((d,)),
    )
    if config.layernorm_enabled:
        params.ln1_scale = DiffTensor(np.ones(d), requires_grad=True)
        params.ln1_shift = zeros((d,))
        params.ln2_scale = DiffTensor(np.ones(d), requires_grad=True)
        params.ln2_shift = zeros((d,))
    return params


def init_backbone(config: BackboneConfig) -> BackboneParams:
    """Seeded uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, patch_dim = config.embed_dim, config.patch * config.patch
    params = BackboneParams(
        patch_w=uniform_weight(rng, patch_dim, (patch_dim, d)),
        patch_b=zeros((d,)),
        pos=uniform_weight(rng, d, (config.num_tokens, d)),
    )
    params.blocks = [init_block(rng, config) for _ in range(config.num_blocks)]
    logger.info(
        f"Backbone initialized: {config.num_blocks} blocks, d={d}, "
        f"{config.grid_h}x{config.grid_w} tokens, {count_backbone_parameters(config)} parameters"
    )
    return params


def count_block_parameters(config: BackboneConfig) -> int:
    d, bd = config.embed_dim, config.behavior_dim
    attention = 4 * (d * d + d)
    mlp = d * 4 * d + 4 * d + 4 * d * d + d
    behavior = bd * d + d + d * d + d
    norms = 4 * d if config.layernorm_enabled else 0
    return attention + mlp + behavior + norms


def count_backbone_parameters(config: BackboneConfig) -> int:
    """Closed-form parameter count of the encoder."""
    patch_dim = config.patch * config.patch
    embedding = patch_dim * config.embed_dim + config.embed_dim + config.num_tokens * config.embed_dim
    return embedding + config.num_blocks * count_block_parameters(config)


def patchify(images: np.ndarray, config: BackboneConfig) -> np.ndarray:
    """Split ``[B, H, W]`` images into row-major flattened patches ``[B, T, p*p]``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3 or images.shape[1:] != (config.image_h, config.image_w):
        raise ConfigError(
            f"image shape {images.shape[-2:]} does not match configured "
            f"{config.image_h}x{config.image_w}"
        )
    batch, p = images.shape[0], config.patch
    grid = images.reshape(batch, config.grid_h, p, config.grid_w, p)
    return grid.transpose(0, 1, 3, 2, 4).reshape(batch, config.num_tokens, p * p)


def patch_embed(images: np.ndarray, params: BackboneParams, config: BackboneConfig) -> DiffTensor:
    """Project non-overlapping patches to ``d`` dims and add positional embeddings."""
    patches = as_tensor(patchify(images, config))
    return patches @ params.patch_w + params.patch_b + params.pos


def behavior_mlp(raw: DiffTensor, block: BlockParams) -> DiffTensor:
    return relu(raw @ block.beh_w1 + block.beh_b1) @ block.beh_w2 + block.beh_b2


def behavior_embed(raw, b_prev: DiffTensor, block: BlockParams) -> DiffTensor:
    """Accumulate the block's behavior embedding onto the previous one."""
    return b_prev + behavior_mlp(as_tensor(raw), block)


def multi_head_attention(x: DiffTensor, block: BlockParams, num_heads: int) -> DiffTensor:
    batch, tokens, d = x.shape
    head_dim = d // num_heads

    def split_heads(t: DiffTensor) -> DiffTensor:
        return t.reshape(batch, tokens, num_heads, head_dim).transpose(0, 2, 1, 3)

    q = split_heads(x @ block.q_w + block.q_b)
    k = split_heads(x @ block.k_w + block.k_b)
    v = split_heads(x @ block.v_w + block.v_b)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    context = (softmax_lastdim(scores) @ v).transpose(0, 2, 1, 3).reshape(batch, tokens, d)
    return context @ block.o_w + block.o_b


def block_mlp(x: DiffTensor, block: BlockParams) -> DiffTensor:
    return relu(x @ block.mlp_w1 + block.mlp_b1) @ block.mlp_w2 + block.mlp_b2


def attention_residual(x: DiffTensor, b: DiffTensor, block: BlockParams, config: BackboneConfig) -> DiffTensor:
    """``MHA(x + b) + x`` with ``b`` broadcast to every token."""
    h = x + b.reshape(b.shape[0], 1, b.shape[-1])
    if config.layernorm_enabled:
        h = layer_norm(h, block.ln1_scale, block.ln1_shift)
    return multi_head_attention(h, block, config.num_heads) + x


def mlp_residual(a: DiffTensor, block: BlockParams, config: BackboneConfig) -> DiffTensor:
    """``MLP(a) + a``."""
    h = layer_norm(a, block.ln2_scale, block.ln2_shift) if config.layernorm_enabled else a
    return block_mlp(h, block) + a


def block_forward(
    x: DiffTensor, b: DiffTensor, block: BlockParams, config: BackboneConfig
) -> tuple[DiffTensor, DiffTensor]:
    """Run one block on ``[B, T, d]`` tokens; returns ``(a, f)``."""
    if x.ndim != 3 or x.shape[1] < 1:
        raise ContractError(f"block_forward expects [batch, tokens>=1, d] tokens, got {x.shape}")
    a = attention_residual(x, b, block, config)
    return a, mlp_residual(a, block, config)


def to_feature_map(tokens: DiffTensor, config: BackboneConfig) -> DiffTensor:
    return tokens.reshape(tokens.shape[0], config.grid_h, config.grid_w, config.embed_dim)


def backbone_forward(
    images: np.ndarray, behavior: np.ndarray, params: BackboneParams, config: BackboneConfig
) -> DiffTensor:
    """Plain (non-modulated) encoder; returns the ``[B, H/p, W/p, d]`` feature map."""
    x = patch_embed(images, params, config)
    raw = as_tensor(np.atleast_2d(np.asarray(behavior, dtype=np.float64)))
    state = BehaviorState.initial(x.shape[0], config.embed_dim)
    for block in params.blocks:
        state = BehaviorState(b=behavior_embed(raw, state.b, block), b_prev=state.b)
        _, x = block_forward(x, state.b, block, config)
    return to_feature_map(x, config)
