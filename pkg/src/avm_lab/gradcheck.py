"""Central finite-difference verification of tape gradients."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .autodiff import DiffTensor, backward, no_grad, tape_scope
from .errors import DivergenceError

logger = logging.getLogger(__name__)


@dataclass
class ParameterReport:
    """Gradient agreement for one parameter tensor."""

    name: str
    coordinates: int
    max_relative_error: float
    worst_index: Optional[tuple[int, ...]] = None
    skipped: int = 0


@dataclass
class GradCheckReport:
    """Per-parameter relative errors between tape and finite differences."""

    parameters: list[ParameterReport] = field(default_factory=list)

    @property
    def max_relative_error(self) -> float:
        return max((p.max_relative_error for p in self.parameters), default=0.0)

    @property
    def coordinates(self) -> int:
        return sum(p.coordinates for p in self.parameters)

    @property
    def skipped(self) -> int:
        return sum(p.skipped for p in self.parameters)

    def passed(self, tolerance: float) -> bool:
        return self.max_relative_error < tolerance

    def worst(self) -> Optional[ParameterReport]:
        return max(self.parameters, key=lambda p: p.max_relative_error, default=None)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denominator


def finite_difference_check(
    f: Callable[[], DiffTensor],
    params: Mapping[str, DiffTensor],
    h: float = 1e-5,
    max_coordinates: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-8,
    kink_tolerance: Optional[float] = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    Args:
        f: Builds the scalar objective from the current values of ``params``.
        params: Named leaf tensors; each must have ``requires_grad`` set.
        h: Finite-difference step.
        max_coordinates: If set, check a seeded random subset of this many
            coordinates per parameter instead of all of them.
        seed: Seed for coordinate sampling.
        floor: Lower bound of the relative-error denominator.
        kink_tolerance: If set, skip coordinates whose forward and backward
            one-sided slopes disagree by more than this (relative). A ReLU
            or cell boundary inside ``[x - h, x + h]`` shows up this way; the
            central-difference error at a single kink is half the disagreement,
            so ``2 * tolerance`` keeps every unskipped coordinate meaningful.

    Returns:
        GradCheckReport with the maximum relative error per parameter.

    Raises:
        DivergenceError: If ``f`` is non-finite at a perturbed coordinate.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")

    for tensor in params.values():
        tensor.zero_grad()
    with tape_scope():
        root = f()
        backward(root)
    analytic = {name: tensor.grad.copy() for name, tensor in params.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport()

    def evaluate(name: str, index: tuple[int, ...]) -> float:
        with no_grad():
            value = float(f().values)
        if not np.isfinite(value):
            raise DivergenceError(f"objective is non-finite when perturbing {name}{list(index)}")
        return value

    f0 = float(root.values)
    for name, tensor in params.items():
        size = tensor.values.size
        flat_indices = np.arange(size)
        if max_coordinates is not None and size > max_coordinates:
            flat_indices = np.sort(rng.choice(size, size=max_coordinates, replace=False))

        worst_error, worst_index, skipped = 0.0, None, 0
        for flat in flat_indices:
            index = tuple(int(i) for i in np.unravel_index(flat, tensor.shape)) if tensor.shape else ()
            original = tensor.values[index]
            tensor.values[index] = original + h
            f_plus = evaluate(name, index)
            tensor.values[index] = original - h
            f_minus = evaluate(name, index)
            tensor.values[index] = original

            if kink_tolerance is not None:
                forward, backward_slope = (f_plus - f0) / h, (f0 - f_minus) / h
                if float(relative_error(np.asarray(forward), np.asarray(backward_slope), floor)) > kink_tolerance:
                    skipped += 1
                    continue

            numeric = (f_plus - f_minus) / (2.0 * h)
            error = float(relative_error(np.asarray(analytic[name][index]), np.asarray(numeric), floor))
            if error > worst_error:
                worst_error, worst_index = error, index

        report.parameters.append(ParameterReport(name, len(flat_indices), worst_error, worst_index, skipped))
        logger.debug(
            f"Gradient check {name}: {len(flat_indices)} coords ({skipped} skipped), max rel err {worst_error:.3e}"
        )

    worst = report.worst()
    if worst is not None:
        logger.info(
            f"Gradient check max relative error {worst.max_relative_error:.3e} ({worst.name}), "
            f"{report.skipped}/{report.coordinates} coordinates skipped"
        )
    return report
