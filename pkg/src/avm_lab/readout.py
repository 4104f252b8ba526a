"""Neuron-wise Gaussian readout.

Each neuron reads the feature map at a learned position ``mu`` (jittered by
``sigma * eps`` while training) and maps the sampled feature vector to a
positive rate with ``ELU(w . f(mu)) + 1``.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import DiffTensor, as_tensor, bilinear_sample, elu_plus_one, softplus
from .errors import ConfigError, ContractError

logger = logging.getLogger(__name__)


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass
class NeuronReadout:
    """Per-neuron position, positive jitter scale, feature weights and optional bias."""

    mu: DiffTensor
    sigma_free: DiffTensor
    weight: DiffTensor
    bias: Optional[DiffTensor] = None

    @property
    def num_neurons(self) -> int:
        return self.mu.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[1]

    def sigma(self) -> DiffTensor:
        return softplus(self.sigma_free)

    def clamp_(self) -> None:
        """Keep positions inside the frame."""
        np.clip(self.mu.values, -1.0, 1.0, out=self.mu.values)

    def named_parameters(self, prefix: str = "readout") -> dict[str, DiffTensor]:
        named = {
            f"{prefix}.mu": self.mu,
            f"{prefix}.sigma_free": self.sigma_free,
            f"{prefix}.weight": self.weight,
        }
        if self.bias is not None:
            named[f"{prefix}.bias"] = self.bias
        return named


def count_readout_parameters(num_neurons: int, embed_dim: int, bias: bool = False) -> int:
    return num_neurons * (4 + embed_dim + (1 if bias else 0))


def init_readout(
    num_neurons: int,
    embed_dim: int,
    seed: int,
    init_sigma: float = 0.25,
    bias: bool = False,
) -> NeuronReadout:
    """mu ~ U(-0.5, 0.5)^2, sigma = ``init_sigma`` per axis, w ~ U(-1/sqrt(d), 1/sqrt(d))."""
    if num_neurons < 1:
        raise ConfigError(f"readout needs at least one neuron, got {num_neurons}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(embed_dim)
    readout = NeuronReadout(
        mu=DiffTensor(rng.uniform(-0.5, 0.5, (num_neurons, 2)), requires_grad=True),
        sigma_free=DiffTensor(np.full((num_neurons, 2), inverse_softplus(init_sigma)), requires_grad=True),
        weight=DiffTensor(rng.uniform(-bound, bound, (num_neurons, embed_dim)), requires_grad=True),
        bias=DiffTensor(np.zeros(num_neurons), requires_grad=True) if bias else None,
    )
    logger.debug(f"Readout initialized for {num_neurons} neurons (d={embed_dim}, seed={seed})")
    return readout


def readout_forward(
    fmap: DiffTensor,
    readout: NeuronReadout,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> DiffTensor:
    """Predict positive responses from a ``[H, W, d]`` or ``[B, H, W, d]`` feature map.

    Args:
        fmap: Encoder feature map.
        readout: Readout parameters.
        mode: ``eval`` samples exactly at ``mu``; ``train`` samples at
            ``mu + sigma * eps`` with a fresh standard-normal ``eps`` per
            (sample, neuron).
        rng: Generator for the jitter; required in train mode.

    Returns:
        ``[N]`` or ``[B, N]`` predictions, all strictly positive.
    """
    fmap = as_tensor(fmap)
    if fmap.shape[-1] != readout.embed_dim:
        raise ConfigError(
            f"feature map depth {fmap.shape[-1]} does not match readout depth {readout.embed_dim}"
        )

    if mode == "eval":
        pos = readout.mu
    elif mode == "train":
        if rng is None:
            raise ContractError("train-mode readout needs a random generator for position jitter")
        shape = (readout.num_neurons, 2) if fmap.ndim == 3 else (fmap.shape[0], readout.num_neurons, 2)
        pos = readout.mu + readout.sigma() * rng.standard_normal(shape)
    else:
        raise ContractError(f"unknown readout mode '{mode}' (expected 'train' or 'eval')")

    features = bilinear_sample(fmap, pos)
    z = (features * readout.weight).sum(axis=-1)
    if readout.bias is not None:
        z = z + readout.bias
    return elu_plus_one(z)
