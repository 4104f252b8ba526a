"""Condition-aware modulation units (CAMU) and their wiring into the encoder.

A CAMU is the residual bottleneck ``x + w * Up(ReLU(Down(x)))``. Inside a
block the skip term already exists, so each insertion point adds only the
unit's branch ``w * Up(ReLU(Down(.)))``::

    a     = MHA(x + b) + x + branch1(x)
    f_mid = MLP(a) + a + branch2(a)
    f     = f_mid + branch3(x)

With the up projection zeroed every branch is exactly zero, so a freshly
initialized modulation path reproduces the plain encoder bit for bit.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .autodiff import DiffTensor, as_tensor, relu
from .backbone import (
    BackboneParams,
    BehaviorState,
    BlockParams,
    attention_residual,
    behavior_embed,
    block_forward,
    mlp_residual,
    patch_embed,
    to_feature_map,
)
from .config import BackboneConfig, ModulationConfig
from .errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

TAGS = {"avm": "AVM", "avm-s": "AVM_S", "avm-b": "AVM_B"}


@dataclass
class CamuParams:
    """One bottleneck unit: Down ``[d, m]``, Up ``[m, d]``, biases, and strength ``w``."""

    down_w: DiffTensor
    down_b: DiffTensor
    up_w: DiffTensor
    up_b: DiffTensor
    weight: float = 1.0

    @property
    def embed_dim(self) -> int:
        return self.down_w.shape[0]

    @property
    def bottleneck_dim(self) -> int:
        return self.down_w.shape[1]

    def named_parameters(self, prefix: str) -> dict[str, DiffTensor]:
        return {
            f"{prefix}.down.weight": self.down_w,
            f"{prefix}.down.bias": self.down_b,
            f"{prefix}.up.weight": self.up_w,
            f"{prefix}.up.bias": self.up_b,
        }

    @classmethod
    def create(cls, rng: np.random.Generator, embed_dim: int, bottleneck_dim: int, weight: float) -> "CamuParams":
        if bottleneck_dim < 1:
            raise ConfigError(f"bottleneck dimension must be >= 1, got {bottleneck_dim}")
        bound = 1.0 / math.sqrt(embed_dim)
        return cls(
            down_w=DiffTensor(rng.uniform(-bound, bound, (embed_dim, bottleneck_dim)), requires_grad=True),
            down_b=DiffTensor(np.zeros(bottleneck_dim), requires_grad=True),
            up_w=DiffTensor(np.zeros((bottleneck_dim, embed_dim)), requires_grad=True),
            up_b=DiffTensor(np.zeros(embed_dim), requires_grad=True),
            weight=weight,
        )


@dataclass
class CamuTriplet:
    """The three units attached to one block (after attention, after MLP, on the block input)."""

    camu1: CamuParams
    camu2: CamuParams
    camu3: CamuParams

    def units(self) -> tuple[CamuParams, CamuParams, CamuParams]:
        return self.camu1, self.camu2, self.camu3

    def named_parameters(self, prefix: str) -> dict[str, DiffTensor]:
        named = {}
        for i, unit in enumerate(self.units(), start=1):
            named.update(unit.named_parameters(f"{prefix}.camu{i}"))
        return named


@dataclass
class ModulationVariant:
    """Wiring of modulation units across the encoder.

    ``AVM`` owns one triplet per block, ``AVM_S`` one triplet shared by every
    block, and ``AVM_B`` per-block triplets plus ``L-1`` cross units where
    cross unit ``k`` reads the input of block ``k`` and adds to the output of
    block ``k+1``.
    """

    tag: str
    num_blocks: int
    triplets: list[CamuTriplet]
    cross: list[CamuParams] = field(default_factory=list)

    def triplet_for(self, block: int) -> CamuTriplet:
        return self.triplets[0] if self.tag == "AVM_S" else self.triplets[block]

    def units(self) -> list[tuple[str, str, CamuParams]]:
        """Every distinct unit as ``(block label, unit label, params)``."""
        labelled = []
        for i, triplet in enumerate(self.triplets):
            block_label = "shared" if self.tag == "AVM_S" else str(i)
            for j, unit in enumerate(triplet.units(), start=1):
                labelled.append((block_label, str(j), unit))
        for k, unit in enumerate(self.cross):
            labelled.append((str(k), "cross", unit))
        return labelled

    def named_parameters(self, prefix: str = "modulation") -> dict[str, DiffTensor]:
        named = {}
        if self.tag == "AVM_S":
            named.update(self.triplets[0].named_parameters(f"{prefix}.shared"))
        else:
            for i, triplet in enumerate(self.triplets):
                named.update(triplet.named_parameters(f"{prefix}.block{i}"))
        for k, unit in enumerate(self.cross):
            named.update(unit.named_parameters(f"{prefix}.cross{k}"))
        return named

    def validate(self) -> None:
        expected_triplets = 1 if self.tag == "AVM_S" else self.num_blocks
        expected_cross = self.num_blocks - 1 if self.tag == "AVM_B" else 0
        if len(self.triplets) != expected_triplets or len(self.cross) != expected_cross:
            raise ConfigError(
                f"{self.tag} with {self.num_blocks} blocks needs {expected_triplets} triplets and "
                f"{expected_cross} cross units, got {len(self.triplets)} and {len(self.cross)}"
            )


def count_camu_parameters(embed_dim: int, bottleneck_dim: int) -> int:
    """``d*m + m + m*d + d``."""
    return 2 * embed_dim * bottleneck_dim + bottleneck_dim + embed_dim


def count_variant_parameters(variant: str, config: BackboneConfig, bottleneck_dim: int) -> int:
    """Closed-form trainable count of a modulation variant."""
    unit = count_camu_parameters(config.embed_dim, bottleneck_dim)
    L = config.num_blocks
    counts = {"plain": 0, "avm": 3 * L * unit, "avm-s": 3 * unit, "avm-b": (3 * L + L - 1) * unit}
    if variant not in counts:
        raise ConfigError(f"unknown modulation variant '{variant}'")
    return counts[variant]


def build_variant(backbone_config: BackboneConfig, config: ModulationConfig) -> ModulationVariant:
    """Construct the units of a variant with zero-initialized up projections."""
    if config.variant not in TAGS:
        raise ConfigError(f"variant '{config.variant}' has no modulation path (expected one of {tuple(TAGS)})")
    rng = np.random.default_rng(config.seed)
    d, m, w, L = backbone_config.embed_dim, config.bottleneck_dim, config.weight, backbone_config.num_blocks
    tag = TAGS[config.variant]

    def triplet() -> CamuTriplet:
        return CamuTriplet(*(CamuParams.create(rng, d, m, w) for _ in range(3)))

    triplets = [triplet()] if tag == "AVM_S" else [triplet() for _ in range(L)]
    cross = [CamuParams.create(rng, d, m, w) for _ in range(L - 1)] if tag == "AVM_B" else []
    variant = ModulationVariant(tag=tag, num_blocks=L, triplets=triplets, cross=cross)
    variant.validate()
    logger.info(
        f"Built {tag} modulation: {len(variant.units())} units, m={m}, w={w}, "
        f"{count_variant_parameters(config.variant, backbone_config, m)} parameters"
    )
    return variant


def camu_branch(x, params: CamuParams) -> DiffTensor:
    """``w * Up(ReLU(Down(x)))`` applied per token."""
    x = as_tensor(x)
    if x.shape[-1] != params.embed_dim:
        raise DimensionError("camu", x.shape, params.down_w.shape, "last extent must equal d")
    hidden = relu(x @ params.down_w + params.down_b)
    return (hidden @ params.up_w + params.up_b) * params.weight


def camu_forward(x, params: CamuParams) -> DiffTensor:
    """``x + w * Up(ReLU(Down(x)))``; ``w`` scales only the branch."""
    x = as_tensor(x)
    return x + camu_branch(x, params)


def modulated_block_forward(
    x: DiffTensor,
    b: DiffTensor,
    block: BlockParams,
    camus: CamuTriplet,
    config: BackboneConfig,
) -> DiffTensor:
    """One encoder block with the three insertion points; the third unit reads the block input."""
    a = attention_residual(x, b, block, config) + camu_branch(x, camus.camu1)
    f_mid = mlp_residual(a, block, config) + camu_branch(a, camus.camu2)
    return f_mid + camu_branch(x, camus.camu3)


def variant_forward(
    images: np.ndarray,
    behavior: np.ndarray,
    backbone: BackboneParams,
    config: BackboneConfig,
    variant: Optional[ModulationVariant] = None,
) -> DiffTensor:
    """Encoder forward with an optional modulation variant; returns the feature map."""
    if variant is not None and variant.num_blocks != len(backbone.blocks):
        raise ConfigError(
            f"{variant.tag} was built for {variant.num_blocks} blocks, backbone has {len(backbone.blocks)}"
        )
    x = patch_embed(images, backbone, config)
    raw = as_tensor(np.atleast_2d(np.asarray(behavior, dtype=np.float64)))
    state = BehaviorState.initial(x.shape[0], config.embed_dim)
    inputs: list[DiffTensor] = []

    for i, block in enumerate(backbone.blocks):
        state = BehaviorState(b=behavior_embed(raw, state.b, block), b_prev=state.b)
        inputs.append(x)
        if variant is None:
            _, x = block_forward(x, state.b, block, config)
            continue
        x = modulated_block_forward(x, state.b, block, variant.triplet_for(i), config)
        if variant.tag == "AVM_B" and i >= 1:
            x = x + camu_branch(inputs[i - 1], variant.cross[i - 1])

    return to_feature_map(x, config)


def zero_init_modulation(variant: ModulationVariant, seed: int = 1) -> None:
    """Zero every up projection and re-draw down projections from ``seed``."""
    rng = np.random.default_rng(seed)
    for _, _, unit in variant.units():
        bound = 1.0 / math.sqrt(unit.embed_dim)
        unit.down_w.values[...] = rng.uniform(-bound, bound, unit.down_w.shape)
        unit.down_b.values[...] = 0.0
        unit.up_w.values[...] = 0.0
        unit.up_b.values[...] = 0.0
    logger.debug(f"Zero-initialized {len(variant.units())} {variant.tag} units")


def camu_weight_frame(block: str, unit: str, params: CamuParams) -> pd.DataFrame:
    """Long-format table of one unit's down/up weights."""
    frames = []
    for matrix, tensor in (("down", params.down_w), ("up", params.up_w)):
        rows, cols = np.indices(tensor.shape)
        frames.append(
            pd.DataFrame(
                {
                    "block": block,
                    "unit": unit,
                    "matrix": matrix,
                    "row": rows.ravel(),
                    "col": cols.ravel(),
                    "value": tensor.values.ravel(),
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


def export_camu_weights(variant: ModulationVariant, path: Path) -> list[Path]:
    """Write one CSV per unit (``block,unit,matrix,row,col,value``)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    written = []
    for block, unit, params in variant.units():
        target = path / f"camu_block{block}_unit{unit}.csv"
        camu_weight_frame(block, unit, params).to_csv(target, index=False, float_format="%.17g")
        written.append(target)
    logger.info(f"Exported {len(written)} CAMU weight tables to: {path}")
    return written
