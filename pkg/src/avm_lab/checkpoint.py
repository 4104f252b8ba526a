"""Training state snapshots stored as AVMD ``checkpoint`` containers."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .avmd import read_container, write_container
from .errors import AvmdManifestError
from .model import AvmModel, ModelSpec

logger = logging.getLogger(__name__)

PARAM_PREFIX = "param/"
MOMENT1_PREFIX = "adam_m/"
MOMENT2_PREFIX = "adam_v/"


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and continue its training bit-exactly."""

    spec: ModelSpec
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    best_val_loss: float = float("inf")
    val_history: list[float] = field(default_factory=list)
    lr: float = 0.0
    rng_state: Optional[dict[str, Any]] = None
    phase: str = "phase1"
    strategy: str = "plain"
    trainable: list[str] = field(default_factory=list)
    base_backbone_digest: Optional[str] = None

    def build_model(self) -> AvmModel:
        model = AvmModel.build(ModelSpec.from_dict(self.spec.to_dict()))
        model.load_state(self.params)
        return model

    def restore_rng(self) -> np.random.Generator:
        rng = np.random.Generator(np.random.PCG64())
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        return rng

    def backbone_arrays(self) -> dict[str, np.ndarray]:
        return {name: value for name, value in self.params.items() if name.startswith("backbone.")}


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    blobs: dict[str, np.ndarray] = {}
    for prefix, arrays in (
        (PARAM_PREFIX, checkpoint.params),
        (MOMENT1_PREFIX, checkpoint.adam_m),
        (MOMENT2_PREFIX, checkpoint.adam_v),
    ):
        blobs.update({prefix + name: value for name, value in arrays.items()})
    meta = {
        "spec": checkpoint.spec.to_dict(),
        "adam_t": checkpoint.adam_t,
        "epoch": checkpoint.epoch,
        # JSON has no infinity; None stands for "no validation yet"
        "best_val_loss": checkpoint.best_val_loss if np.isfinite(checkpoint.best_val_loss) else None,
        "val_history": [float(v) for v in checkpoint.val_history],
        "lr": checkpoint.lr,
        "rng_state": checkpoint.rng_state,
        "phase": checkpoint.phase,
        "strategy": checkpoint.strategy,
        "trainable": list(checkpoint.trainable),
        "base_backbone_digest": checkpoint.base_backbone_digest,
    }
    write_container(path, "checkpoint", blobs, meta)
    logger.info(f"Checkpoint ({checkpoint.phase}/{checkpoint.strategy}, epoch {checkpoint.epoch}) saved to: {path}")
    return Path(path)


def _strip(blobs: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {name[len(prefix) :]: value for name, value in blobs.items() if name.startswith(prefix)}


def load_checkpoint(path: Path) -> Checkpoint:
    container = read_container(path, section="checkpoint")
    meta = container.meta
    try:
        best = meta["best_val_loss"]
        checkpoint = Checkpoint(
            spec=ModelSpec.from_dict(meta["spec"]),
            params=_strip(container.blobs, PARAM_PREFIX),
            adam_m=_strip(container.blobs, MOMENT1_PREFIX),
            adam_v=_strip(container.blobs, MOMENT2_PREFIX),
            adam_t=int(meta["adam_t"]),
            epoch=int(meta["epoch"]),
            best_val_loss=float("inf") if best is None else float(best),
            val_history=[float(v) for v in meta["val_history"]],
            lr=float(meta["lr"]),
            rng_state=meta["rng_state"],
            phase=str(meta["phase"]),
            strategy=str(meta["strategy"]),
            trainable=list(meta["trainable"]),
            base_backbone_digest=meta["base_backbone_digest"],
        )
    except KeyError as e:
        raise AvmdManifestError(f"checkpoint {path} is missing {e}") from e
    logger.debug(f"Loaded checkpoint {path} ({len(checkpoint.params)} tensors, epoch {checkpoint.epoch})")
    return checkpoint
