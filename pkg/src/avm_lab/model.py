"""Full model: encoder, optional modulation path, and readout, behind one parameter registry.

Parameter names are stable checkpoint keys; their first dotted component is
the group (``backbone``, ``modulation``, ``readout``) that freeze plans act on.
"""

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

import numpy as np

from .autodiff import DiffTensor
from .backbone import BackboneParams, count_backbone_parameters, init_backbone
from .config import BackboneConfig, ModulationConfig, ReadoutConfig
from .errors import ConfigError
from .modulation import ModulationVariant, build_variant, count_variant_parameters, variant_forward
from .readout import NeuronReadout, count_readout_parameters, init_readout, readout_forward

logger = logging.getLogger(__name__)

GROUPS = ("backbone", "modulation", "readout")


@dataclass
class ModelSpec:
    """Complete architectural description of a model."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    modulation: ModulationConfig = field(default_factory=ModulationConfig)
    readout: ReadoutConfig = field(default_factory=ReadoutConfig)
    num_neurons: int = 200

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelSpec":
        try:
            return cls(
                backbone=BackboneConfig(**data["backbone"]),
                modulation=ModulationConfig(**data["modulation"]),
                readout=ReadoutConfig(**data["readout"]),
                num_neurons=int(data["num_neurons"]),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed model spec: {e}") from e


@dataclass
class FreezePlan:
    """Which parameter groups receive gradients and optimizer state."""

    phase: str
    trainable: dict[str, bool]

    @classmethod
    def phase1(cls) -> "FreezePlan":
        return cls("phase1", {group: True for group in GROUPS})

    @classmethod
    def phase2(cls, readout_trainable: bool = True) -> "FreezePlan":
        return cls("phase2", {"backbone": False, "modulation": True, "readout": readout_trainable})

    @classmethod
    def full_finetune(cls) -> "FreezePlan":
        return cls("phase2", {group: True for group in GROUPS})

    def is_trainable(self, group: str) -> bool:
        return self.trainable.get(group, False)


def group_of(name: str) -> str:
    group = name.split(".", 1)[0]
    if group not in GROUPS:
        raise ConfigError(f"parameter '{name}' does not belong to a known group")
    return group


def digest_arrays(arrays: dict[str, np.ndarray]) -> str:
    """SHA-256 over names and raw little-endian bytes, in sorted name order."""
    sha = hashlib.sha256()
    for name in sorted(arrays):
        sha.update(name.encode("utf-8"))
        sha.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return sha.hexdigest()


class AvmModel:
    """Encoder + optional modulation + Gaussian readout."""

    def __init__(
        self,
        spec: ModelSpec,
        backbone: BackboneParams,
        readout: NeuronReadout,
        modulation: Optional[ModulationVariant] = None,
    ):
        self.spec = spec
        self.backbone = backbone
        self.readout = readout
        self.modulation = modulation

    @classmethod
    def build(cls, spec: ModelSpec) -> "AvmModel":
        backbone = init_backbone(spec.backbone)
        readout = init_readout(
            spec.num_neurons,
            spec.backbone.embed_dim,
            seed=spec.readout.seed,
            init_sigma=spec.readout.init_sigma,
            bias=spec.readout.bias,
        )
        modulation = None
        if spec.modulation.variant != "plain":
            modulation = build_variant(spec.backbone, spec.modulation)
        return cls(spec, backbone, readout, modulation)

    def parameters(self) -> dict[str, DiffTensor]:
        named = dict(self.backbone.named_parameters("backbone"))
        if self.modulation is not None:
            named.update(self.modulation.named_parameters("modulation"))
        named.update(self.readout.named_parameters("readout"))
        return named

    def trainable_parameters(self) -> dict[str, DiffTensor]:
        return {name: p for name, p in self.parameters().items() if p.requires_grad}

    def apply_freeze(self, plan: FreezePlan) -> None:
        for name, tensor in self.parameters().items():
            tensor.requires_grad = plan.is_trainable(group_of(name))
            tensor.zero_grad()
        logger.info(
            f"Freeze plan {plan.phase}: "
            + ", ".join(f"{g}={'trainable' if plan.is_trainable(g) else 'frozen'}" for g in GROUPS)
        )

    def count_parameters(self, scope: str = "all") -> int:
        """Exact count over ``all`` parameters or only ``trainable`` ones."""
        if scope == "all":
            tensors = self.parameters().values()
        elif scope == "trainable":
            tensors = self.trainable_parameters().values()
        else:
            raise ConfigError(f"unknown parameter scope '{scope}' (expected 'all' or 'trainable')")
        return int(sum(t.values.size for t in tensors))

    def count_by_group(self) -> dict[str, int]:
        counts = {group: 0 for group in GROUPS}
        for name, tensor in self.parameters().items():
            counts[group_of(name)] += tensor.values.size
        return counts

    def features(self, images: np.ndarray, behavior: np.ndarray) -> DiffTensor:
        return variant_forward(images, behavior, self.backbone, self.spec.backbone, self.modulation)

    def forward(
        self,
        images: np.ndarray,
        behavior: np.ndarray,
        mode: str = "eval",
        rng: Optional[np.random.Generator] = None,
    ) -> DiffTensor:
        """Predict ``[B, N]`` positive responses."""
        return readout_forward(self.features(images, behavior), self.readout, mode, rng)

    def attach_modulation(self, config: ModulationConfig) -> ModulationVariant:
        """Add a freshly zero-initialized modulation path (identity at attachment)."""
        self.modulation = build_variant(self.spec.backbone, config)
        self.spec.modulation = ModulationConfig(**asdict(config))
        return self.modulation

    def replace_readout(self, num_neurons: int, seed: int) -> None:
        logger.warning(
            f"Readout reinitialized: {self.readout.num_neurons} -> {num_neurons} neurons (seed={seed})"
        )
        self.readout = init_readout(
            num_neurons,
            self.spec.backbone.embed_dim,
            seed=seed,
            init_sigma=self.spec.readout.init_sigma,
            bias=self.spec.readout.bias,
        )
        self.spec.num_neurons = num_neurons

    def state_arrays(self, group: Optional[str] = None) -> dict[str, np.ndarray]:
        return {
            name: tensor.values.copy()
            for name, tensor in self.parameters().items()
            if group is None or group_of(name) == group
        }

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        if missing or unexpected:
            raise ConfigError(f"parameter mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, tensor in params.items():
            if arrays[name].shape != tensor.shape:
                raise ConfigError(f"parameter '{name}' has shape {arrays[name].shape}, expected {tensor.shape}")
            tensor.values[...] = arrays[name]

    def backbone_digest(self) -> str:
        return digest_arrays(self.state_arrays("backbone"))


def expected_parameter_counts(spec: ModelSpec) -> dict[str, int]:
    """Closed-form group counts for a spec."""
    return {
        "backbone": count_backbone_parameters(spec.backbone),
        "modulation": count_variant_parameters(
            spec.modulation.variant, spec.backbone, spec.modulation.bottleneck_dim
        ),
        "readout": count_readout_parameters(spec.num_neurons, spec.backbone.embed_dim, spec.readout.bias),
    }
