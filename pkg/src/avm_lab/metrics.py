"""Response-prediction metrics with repeat-aware noise handling.

Trials are rows, neurons are columns, and each trial carries the id of the
image it showed. Every metric is computed per neuron and then averaged,
unweighted, over the neurons for which it is defined.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .errors import ContractError

logger = logging.getLogger(__name__)

# Variances below this are treated as zero when deciding exclusions.
DEGENERATE_VARIANCE = 1e-12


@dataclass(frozen=True)
class TrialTensor:
    """Responses or predictions as ``[n_trials, n_neurons]`` plus per-trial image ids."""

    values: np.ndarray
    image_ids: np.ndarray
    kind: str = "response"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        image_ids = np.asarray(self.image_ids, dtype=np.int64)
        if values.ndim != 2:
            raise ContractError(f"trial tensor must be [trials, neurons], got shape {values.shape}")
        if image_ids.shape != (values.shape[0],):
            raise ContractError(
                f"{values.shape[0]} trials but {image_ids.shape} image ids"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "image_ids", image_ids)

    @property
    def num_trials(self) -> int:
        return self.values.shape[0]

    @property
    def num_neurons(self) -> int:
        return self.values.shape[1]

    def grouping(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(unique image ids, trial -> image slot, repeats per image)``."""
        images, inverse, counts = np.unique(self.image_ids, return_inverse=True, return_counts=True)
        return images, inverse, counts

    def image_means(self) -> np.ndarray:
        """Per-image mean over repeats, ``[n_images, n_neurons]`` in sorted image order."""
        images, inverse, counts = self.grouping()
        sums = np.zeros((images.size, self.num_neurons))
        np.add.at(sums, inverse, self.values)
        return sums / counts[:, None]


@dataclass
class MetricReport:
    """Per-neuron scores, aggregates over included neurons, and exclusions with reasons."""

    rho_trial: np.ndarray
    rho_avg: np.ndarray
    feve: np.ndarray
    excluded: dict[int, str] = field(default_factory=dict)
    loss: Optional[float] = None

    @property
    def num_neurons(self) -> int:
        return self.rho_trial.size

    @property
    def included(self) -> np.ndarray:
        mask = np.ones(self.num_neurons, dtype=bool)
        mask[list(self.excluded)] = False
        return mask

    def aggregate(self) -> dict[str, float]:
        return {
            "rho_trial": _mean_defined(self.rho_trial),
            "rho_avg": _mean_defined(self.rho_avg),
            "feve": _mean_defined(self.feve),
        }

    def to_frame(self) -> pd.DataFrame:
        """Per-neuron rows followed by one ``mean`` aggregate row."""
        frame = pd.DataFrame(
            {
                "neuron": [str(n) for n in range(self.num_neurons)],
                "rho_trial": self.rho_trial,
                "rho_avg": self.rho_avg,
                "feve": self.feve,
                "included": self.included,
                "reason": [self.excluded.get(n, "") for n in range(self.num_neurons)],
            }
        )
        agg = self.aggregate()
        summary = pd.DataFrame(
            [
                {
                    "neuron": "mean",
                    **agg,
                    "included": True,
                    "reason": f"{int(self.included.sum())} of {self.num_neurons} neurons",
                }
            ]
        )
        return pd.concat([frame, summary], ignore_index=True)


def _mean_defined(values: np.ndarray) -> float:
    finite = values[np.isfinite(values)]
    return float(finite.mean()) if finite.size else float("nan")


def _check_structure(r: TrialTensor, o: TrialTensor) -> None:
    if r.values.shape != o.values.shape:
        raise ContractError(f"response shape {r.values.shape} does not match prediction shape {o.values.shape}")
    if not np.array_equal(r.image_ids, o.image_ids):
        raise ContractError("responses and predictions index different (image, repeat) trials")


def pearson_columns(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Pearson correlation; NaN where either column has zero variance."""
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=0)
    sa = np.sqrt((da * da).sum(axis=0))
    sb = np.sqrt((db * db).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = (da * db).sum(axis=0) / (sa * sb)
    degenerate = (sa * sa <= DEGENERATE_VARIANCE * a.shape[0]) | (sb * sb <= DEGENERATE_VARIANCE * b.shape[0])
    rho[degenerate] = np.nan
    return rho


def single_trial_corr(r: TrialTensor, o: TrialTensor) -> tuple[np.ndarray, float]:
    """Correlation over every (image, repeat) trial."""
    _check_structure(r, o)
    rho = pearson_columns(r.values, o.values)
    return rho, _mean_defined(rho)


def avg_corr(r: TrialTensor, o: TrialTensor) -> tuple[np.ndarray, float]:
    """Correlation between per-image mean responses and per-image mean predictions."""
    _check_structure(r, o)
    rho = pearson_columns(r.image_means(), o.image_means())
    return rho, _mean_defined(rho)


def _require_repeats(r: TrialTensor) -> None:
    images, _, counts = r.grouping()
    short = np.flatnonzero(counts < 2)
    if short.size:
        raise ContractError(
            f"image {int(images[short[0]])} has {int(counts[short[0]])} repeat(s); noise variance needs >= 2"
        )


def _per_image_variance(r: TrialTensor) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased across-repeat variance per image and the repeat counts."""
    _, inverse, counts = r.grouping()
    means = r.image_means()
    scatter = np.zeros_like(means)
    np.add.at(scatter, inverse, (r.values - means[inverse]) ** 2)
    return scatter / (counts[:, None] - 1), counts


def noise_variance(r: TrialTensor) -> np.ndarray:
    """Mean over images of the unbiased across-repeat variance, per neuron."""
    _require_repeats(r)
    variance, _ = _per_image_variance(r)
    return variance.mean(axis=0)


def feve(r: TrialTensor, o: TrialTensor) -> tuple[np.ndarray, float, dict[int, str]]:
    """Fraction of explainable variance explained, per neuron.

    The squared error and the response variance are normalized by the number
    of trials ``N``, so the noise term is the repeat-weighted
    ``sum_i (n_i - 1) * s_i^2 / N``. Under that normalization the per-image
    mean predictor scores exactly 1 and the grand-mean predictor exactly 0.
    Neurons whose explainable variance is not positive are excluded.

    Returns:
        Per-neuron FEVE (NaN for excluded neurons), the aggregate, and the
        excluded neurons with reasons.
    """
    _check_structure(r, o)
    _require_repeats(r)
    _, inverse, _ = r.grouping()
    variance, counts = _per_image_variance(r)
    n = r.num_trials
    noise = ((counts[:, None] - 1) * variance).sum(axis=0) / n

    per_image_pred = o.image_means()[inverse]
    mse = ((r.values - per_image_pred) ** 2).mean(axis=0)
    total = r.values.var(axis=0)
    explainable = total - noise

    scores = np.full(r.num_neurons, np.nan)
    excluded: dict[int, str] = {}
    for neuron in range(r.num_neurons):
        if explainable[neuron] <= DEGENERATE_VARIANCE:
            excluded[neuron] = "feve: response variance does not exceed noise variance"
            continue
        scores[neuron] = 1.0 - (mse[neuron] - noise[neuron]) / explainable[neuron]
    return scores, _mean_defined(scores), excluded


def evaluate_report(r: TrialTensor, o: TrialTensor, loss: Optional[float] = None) -> MetricReport:
    """All three metrics with exclusions recorded.

    Splits without repeated images get correlations only; FEVE stays NaN
    and the reason is recorded for every neuron.
    """
    rho_trial, _ = single_trial_corr(r, o)
    rho_avg, _ = avg_corr(r, o)
    excluded: dict[int, str] = {}

    for neuron in np.flatnonzero(~np.isfinite(rho_trial)):
        excluded[int(neuron)] = "zero variance in responses or predictions"

    try:
        scores, _, feve_excluded = feve(r, o)
        for neuron, reason in feve_excluded.items():
            excluded.setdefault(neuron, reason)
    except ContractError as e:
        logger.info(f"FEVE not computed: {e}")
        scores = np.full(r.num_neurons, np.nan)

    for neuron in np.flatnonzero(~np.isfinite(rho_avg)):
        excluded.setdefault(int(neuron), "zero variance in per-image means")

    if excluded:
        logger.warning(f"{len(excluded)} of {r.num_neurons} neurons excluded from aggregates")
    rho_trial = rho_trial.copy()
    rho_avg = rho_avg.copy()
    for neuron in excluded:
        rho_trial[neuron] = np.nan
        rho_avg[neuron] = np.nan
        scores[neuron] = np.nan
    return MetricReport(rho_trial=rho_trial, rho_avg=rho_avg, feve=scores, excluded=excluded, loss=loss)
