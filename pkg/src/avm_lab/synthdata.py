"""Synthetic V1 world: pink-noise stimuli, Gabor neurons, behavior-dependent Poisson responses.

A world holds the ground-truth neurons; a bundle holds one experimental
condition's stimuli, behavior and recorded responses. Every random draw is
keyed by (seed, stream, index) so generation order never changes results.
"""

import copy
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .avmd import read_container, write_container
from .config import WorldConfig
from .errors import AvmdManifestError, ConfigError
from .model import digest_arrays

logger = logging.getLogger(__name__)

# RNG stream tags
IMAGE_STREAM = 11
BEHAVIOR_STREAM = 12
RESPONSE_STREAM = 13
SPLIT_STREAM = 14
NEURON_STREAM = 15

CENTER_EXTENT = 0.7
SPLITS = ("train", "val", "test")
SHIFT_KINDS = ("identity", "stimulus", "subject", "environment")

WORLD_ARRAYS = ("gabors", "centers", "orientation", "frequency", "envelope", "phase", "amplitude", "baseline", "behavior_gain")


def keyed_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


@dataclass
class ImageStats:
    """Power-law image statistics restricted to a radial frequency band (cycles/pixel).

    ``orientation_bias`` > 0 concentrates power around ``orientation`` (radians,
    in the receptive-field frame); 0 gives an isotropic spectrum.
    """

    spectral_exponent: float = 2.0
    band: tuple[float, float] = (0.0, 0.75)
    orientation_bias: float = 0.0
    orientation: float = 0.0

    def validate(self) -> None:
        low, high = self.band
        if not 0 <= low < high:
            raise ConfigError(f"frequency band must satisfy 0 <= low < high, got {self.band}")
        if self.orientation_bias < 0:
            raise ConfigError(f"orientation_bias must be >= 0, got {self.orientation_bias}")


@dataclass
class StimulusRecipe:
    """Everything besides the world that determines a bundle."""

    stats: ImageStats = field(default_factory=ImageStats)
    image_seed: int = 0
    behavior_seed: int = 1
    response_seed: int = 2
    contrast: float = 1.0
    offset: float = 0.0

    def to_dict(self) -> dict:
        data = asdict(self)
        data["stats"]["band"] = list(self.stats.band)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "StimulusRecipe":
        stats = data["stats"]
        return cls(
            stats=ImageStats(
                float(stats["spectral_exponent"]),
                tuple(float(b) for b in stats["band"]),
                float(stats.get("orientation_bias", 0.0)),
                float(stats.get("orientation", 0.0)),
            ),
            image_seed=int(data["image_seed"]),
            behavior_seed=int(data["behavior_seed"]),
            response_seed=int(data["response_seed"]),
            contrast=float(data["contrast"]),
            offset=float(data["offset"]),
        )


@dataclass
class World:
    """Ground-truth neurons of one subject."""

    config: WorldConfig
    rf_seed: int
    gabors: np.ndarray
    centers: np.ndarray
    orientation: np.ndarray
    frequency: np.ndarray
    envelope: np.ndarray
    phase: np.ndarray
    amplitude: np.ndarray
    baseline: np.ndarray
    behavior_gain: np.ndarray
    response_gain: float = 1.0

    @property
    def num_neurons(self) -> int:
        return self.centers.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in WORLD_ARRAYS}

    def digest(self) -> str:
        arrays = self.arrays()
        arrays["response_gain"] = np.array([self.response_gain])
        return digest_arrays(arrays)

    def image_drive(self, images: np.ndarray) -> np.ndarray:
        """Linear receptive-field drive ``[n_images, n_neurons]``."""
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        return flat @ self.gabors.reshape(self.num_neurons, -1).T

    def rates(self, images: np.ndarray, behavior: np.ndarray) -> np.ndarray:
        """``response_gain * softplus(gabor . image + gain . behavior + baseline)`` per trial."""
        drive = self.image_drive(images) + np.asarray(behavior) @ self.behavior_gain.T + self.baseline
        return self.response_gain * softplus(drive)


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized pixel-center coordinates; x spans the width, y the height, both in [-1, 1]."""
    y, x = np.meshgrid(np.linspace(-1.0, 1.0, height), np.linspace(-1.0, 1.0, width), indexing="ij")
    return x, y


def gabor(
    x: np.ndarray,
    y: np.ndarray,
    center: np.ndarray,
    orientation: float,
    frequency: float,
    envelope: float,
    phase: float,
) -> np.ndarray:
    """Unit-norm Gabor patch; ``frequency`` in cycles per normalized unit."""
    dx, dy = x - center[0], y - center[1]
    along = dx * np.cos(orientation) + dy * np.sin(orientation)
    patch = np.exp(-(dx**2 + dy**2) / (2 * envelope**2)) * np.cos(2 * np.pi * frequency * along + phase)
    norm = np.linalg.norm(patch)
    return patch / norm if norm > 0 else patch


def render_gabors(
    config: WorldConfig,
    centers: np.ndarray,
    orientation: np.ndarray,
    frequency: np.ndarray,
    envelope: np.ndarray,
    phase: np.ndarray,
    amplitude: np.ndarray,
) -> np.ndarray:
    """Amplitude-scaled Gabor bank ``[n_neurons, H, W]``."""
    x, y = pixel_grid(config.image_h, config.image_w)
    return np.stack(
        [
            amplitude[i] * gabor(x, y, centers[i], orientation[i], frequency[i], envelope[i], phase[i])
            for i in range(centers.shape[0])
        ]
    )


def make_world(config: WorldConfig, rf_seed: Optional[int] = None) -> World:
    """Sample one subject's neurons."""
    config.validate()
    rf_seed = config.seed if rf_seed is None else rf_seed
    rng = keyed_rng(rf_seed, NEURON_STREAM)
    n = config.num_neurons
    centers = rng.uniform(-CENTER_EXTENT, CENTER_EXTENT, (n, 2))
    orientation = rng.uniform(0.0, np.pi, n)
    frequency = rng.uniform(*config.gabor_frequency_range, n)
    envelope = rng.uniform(*config.gabor_sigma_range, n)
    phase = rng.uniform(0.0, 2 * np.pi, n)
    amplitude = rng.uniform(*config.amplitude_range, n)
    baseline = rng.uniform(*config.baseline_range, n)
    behavior_gain = rng.normal(0.0, config.behavior_gain_scale, (n, config.behavior_dim))

    return World(
        config=config,
        rf_seed=rf_seed,
        gabors=render_gabors(config, centers, orientation, frequency, envelope, phase, amplitude),
        centers=centers,
        orientation=orientation,
        frequency=frequency,
        envelope=envelope,
        phase=phase,
        amplitude=amplitude,
        baseline=baseline,
        behavior_gain=behavior_gain,
    )


def adapt_world(world: World, orientation: float, repulsion: float, suppression: float) -> World:
    """The same cells after adapting to an ensemble dominated by ``orientation``.

    Preferred orientations are pushed away from the adapting orientation by
    ``repulsion * sin(2 * delta)`` radians (largest at 45 degrees, zero at 0 and
    90), and gains drop by ``suppression * cos(delta)**2``. Centers, envelopes,
    phases, frequencies, baselines and behavior gains are unchanged.
    """
    delta = world.orientation - orientation
    adapted_orientation = np.mod(world.orientation + repulsion * np.sin(2.0 * delta), np.pi)
    adapted_amplitude = world.amplitude * (1.0 - suppression * np.cos(delta) ** 2)
    return replace(
        world,
        orientation=adapted_orientation,
        amplitude=adapted_amplitude,
        gabors=render_gabors(
            world.config, world.centers, adapted_orientation, world.frequency, world.envelope, world.phase,
            adapted_amplitude,
        ),
    )


def pink_noise_image(height: int, width: int, stats: ImageStats, seed: int, index: int) -> np.ndarray:
    """Zero-mean, unit-variance image with power spectrum ``1/f^exponent`` inside ``stats.band``."""
    rng = keyed_rng(seed, IMAGE_STREAM, index)
    spectrum = np.fft.rfft2(rng.standard_normal((height, width)))
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    radius = np.sqrt(fx**2 + fy**2)
    low, high = stats.band
    inside = (radius >= low) & (radius <= high) & (radius > 0)
    amplitude = np.zeros_like(radius)
    amplitude[inside] = radius[inside] ** (-stats.spectral_exponent / 2.0)
    if stats.orientation_bias > 0:
        # spectral angle in the receptive-field frame, where x and y both span [-1, 1]
        angle = np.arctan2(fy * (height - 1) / 2.0, fx * (width - 1) / 2.0)
        amplitude *= np.exp(stats.orientation_bias * np.cos(2.0 * (angle - stats.orientation)))
    image = np.fft.irfft2(spectrum * amplitude, s=(height, width))
    image -= image.mean()
    std = image.std()
    if std == 0:
        raise ConfigError(f"image statistics {stats} leave no frequencies for a {height}x{width} image")
    return image / std


def sample_responses(rates: np.ndarray, seed: int, trial_offset: int = 0) -> np.ndarray:
    """Poisson counts, one keyed generator per trial row."""
    counts = np.empty_like(rates)
    for t in range(rates.shape[0]):
        counts[t] = keyed_rng(seed, RESPONSE_STREAM, trial_offset + t).poisson(rates[t])
    return counts.astype(np.float64)


@dataclass(frozen=True)
class Batch:
    """Read-only arrays for one optimization step."""

    images: np.ndarray
    behavior: np.ndarray
    responses: np.ndarray


@dataclass(frozen=True)
class TrialSet:
    """Trials of one split, with a lookup into the stimulus bank."""

    stimuli: np.ndarray
    slots: np.ndarray
    image_ids: np.ndarray
    behavior: np.ndarray
    responses: np.ndarray

    def __len__(self) -> int:
        return self.slots.shape[0]

    @property
    def num_neurons(self) -> int:
        return self.responses.shape[1]

    def batch(self, index: np.ndarray) -> Batch:
        arrays = (self.stimuli[self.slots[index]], self.behavior[index], self.responses[index])
        for array in arrays:
            array.setflags(write=False)
        return Batch(*arrays)


@dataclass
class DatasetBundle:
    """One condition: stimulus bank, per-trial behavior and responses, and the image split."""

    stimulus_ids: np.ndarray
    stimuli: np.ndarray
    trial_image: np.ndarray
    trial_repeat: np.ndarray
    behavior: np.ndarray
    responses: np.ndarray
    splits: dict[str, np.ndarray]
    test_repeats: int
    condition: str
    recipe: StimulusRecipe
    world_digest: str

    @property
    def num_neurons(self) -> int:
        return self.responses.shape[1]

    @property
    def num_trials(self) -> int:
        return self.trial_image.shape[0]

    def split_mask(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ConfigError(f"unknown split '{split}' (expected one of {SPLITS})")
        return np.isin(self.trial_image, self.splits[split])

    def trials(self, split: Optional[str] = None) -> TrialSet:
        mask = np.ones(self.num_trials, dtype=bool) if split is None else self.split_mask(split)
        index = np.flatnonzero(mask)
        if index.size == 0:
            raise ConfigError(f"split '{split}' of condition '{self.condition}' has no trials")
        image_ids = self.trial_image[index]
        return TrialSet(
            stimuli=self.stimuli,
            slots=np.searchsorted(self.stimulus_ids, image_ids),
            image_ids=image_ids,
            behavior=self.behavior[index],
            responses=self.responses[index],
        )

    def restrict(self, split: str) -> "DatasetBundle":
        """Bundle holding only one split's images and trials."""
        mask = self.split_mask(split)
        keep = np.isin(self.stimulus_ids, self.splits[split])
        return replace(
            self,
            stimulus_ids=self.stimulus_ids[keep],
            stimuli=self.stimuli[keep],
            trial_image=self.trial_image[mask],
            trial_repeat=self.trial_repeat[mask],
            behavior=self.behavior[mask],
            responses=self.responses[mask],
            splits={name: (ids if name == split else ids[:0]) for name, ids in self.splits.items()},
        )

    @classmethod
    def concat(cls, parts: Iterable["DatasetBundle"]) -> "DatasetBundle":
        """Reassemble a condition from split files; trials keep their relative order."""
        parts = list(parts)
        if not parts:
            raise ConfigError("no dataset parts to combine")
        first = parts[0]
        for part in parts[1:]:
            if part.world_digest != first.world_digest or part.num_neurons != first.num_neurons:
                raise ConfigError(f"dataset parts come from different worlds ({first.condition} vs {part.condition})")
        stimulus_ids = np.concatenate([p.stimulus_ids for p in parts])
        order = np.argsort(stimulus_ids, kind="stable")
        if np.unique(stimulus_ids).size != stimulus_ids.size:
            raise ConfigError("dataset parts share image ids")
        return replace(
            first,
            stimulus_ids=stimulus_ids[order],
            stimuli=np.concatenate([p.stimuli for p in parts])[order],
            trial_image=np.concatenate([p.trial_image for p in parts]),
            trial_repeat=np.concatenate([p.trial_repeat for p in parts]),
            behavior=np.concatenate([p.behavior for p in parts]),
            responses=np.concatenate([p.responses for p in parts]),
            splits={name: np.concatenate([p.splits[name] for p in parts]) for name in SPLITS},
        )

    def blobs(self) -> dict[str, np.ndarray]:
        arrays = {
            "stimulus_ids": self.stimulus_ids,
            "stimuli": self.stimuli,
            "trial_image": self.trial_image,
            "trial_repeat": self.trial_repeat,
            "behavior": self.behavior,
            "responses": self.responses,
        }
        arrays.update({f"split.{name}": self.splits[name] for name in SPLITS})
        return arrays


def build_bundle(
    world: World, recipe: StimulusRecipe, condition: str, poisson_sampling: Optional[bool] = None
) -> DatasetBundle:
    """Render stimuli, behavior and responses of one condition for ``world``."""
    config = world.config
    recipe.stats.validate()
    sampling = config.poisson_sampling if poisson_sampling is None else poisson_sampling
    n_train, n_test, repeats = config.num_train_images, config.num_test_images, config.test_repeats

    stimulus_ids = np.arange(n_train + n_test, dtype=np.int64)
    raw = np.stack(
        [pink_noise_image(config.image_h, config.image_w, recipe.stats, recipe.image_seed, i) for i in stimulus_ids]
    )
    stimuli = recipe.contrast * raw + recipe.offset

    trial_image = np.concatenate([np.arange(n_train), np.repeat(np.arange(n_train, n_train + n_test), repeats)])
    trial_repeat = np.concatenate([np.zeros(n_train, dtype=np.int64), np.tile(np.arange(repeats), n_test)])
    behavior = np.stack(
        [keyed_rng(recipe.behavior_seed, BEHAVIOR_STREAM, t).standard_normal(config.behavior_dim) for t in range(trial_image.size)]
    )

    rates = world.rates(stimuli[trial_image], behavior)
    responses = sample_responses(rates, recipe.response_seed) if sampling else rates

    n_val = max(1, int(round(config.val_fraction * n_train)))
    order = keyed_rng(recipe.image_seed, SPLIT_STREAM).permutation(n_train)
    splits = {
        "train": np.sort(order[n_val:]).astype(np.int64),
        "val": np.sort(order[:n_val]).astype(np.int64),
        "test": np.arange(n_train, n_train + n_test, dtype=np.int64),
    }
    logger.info(
        f"Built condition '{condition}': {stimulus_ids.size} images, {trial_image.size} trials, "
        f"{world.num_neurons} neurons, mean rate {rates.mean():.3f}"
    )
    return DatasetBundle(
        stimulus_ids=stimulus_ids,
        stimuli=stimuli,
        trial_image=trial_image.astype(np.int64),
        trial_repeat=trial_repeat,
        behavior=behavior,
        responses=responses,
        splits=splits,
        test_repeats=repeats,
        condition=condition,
        recipe=recipe,
        world_digest=world.digest(),
    )


def generate_world(config: WorldConfig) -> tuple[World, DatasetBundle]:
    """Sample the source subject and its training/test condition."""
    world = make_world(config)
    recipe = StimulusRecipe(
        stats=ImageStats(spectral_exponent=config.spectral_exponent),
        image_seed=config.seed,
        behavior_seed=config.seed + 1,
        response_seed=config.seed + 2,
    )
    return world, build_bundle(world, recipe, condition="source")


@dataclass
class ConditionShift:
    """How a new condition differs from the source.

    ``stimulus`` draws images from another frequency band, spectral slope and
    dominant orientation; the same cells adapt to that ensemble (tuning
    repelled from ``adapter_orientation``, gain suppressed near it), which
    ``tuning_repulsion = gain_suppression = 0`` switches off. ``subject``
    resamples every neuron; ``environment`` rescales stimulus contrast, adds a
    luminance offset and scales all responses by ``response_gain`` (with fresh
    images unless ``resample_stimuli`` is off).
    """

    kind: str = "identity"
    seed: int = 101
    spectral_exponent: float = 1.0
    band: tuple[float, float] = (0.02, 0.3)
    orientation_bias: float = 1.0
    adapter_orientation: float = 0.0
    tuning_repulsion: float = 0.8
    gain_suppression: float = 0.5
    contrast: float = 0.6
    offset: float = 0.2
    response_gain: float = 1.5
    resample_stimuli: bool = True

    def validate(self) -> None:
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind '{self.kind}' (expected one of {SHIFT_KINDS})")
        if self.response_gain <= 0:
            raise ConfigError(f"response_gain must be positive, got {self.response_gain}")
        if not 0 <= self.gain_suppression < 1:
            raise ConfigError(f"gain_suppression must be in [0, 1), got {self.gain_suppression}")
        if self.tuning_repulsion < 0:
            raise ConfigError(f"tuning_repulsion must be >= 0, got {self.tuning_repulsion}")

    @property
    def adapts_tuning(self) -> bool:
        return self.tuning_repulsion > 0 or self.gain_suppression > 0


def apply_shift(bundle: DatasetBundle, world: World, shift: ConditionShift) -> tuple[DatasetBundle, World]:
    """Derive the shifted condition and the world that generated it."""
    shift.validate()
    if shift.kind == "identity":
        return copy.deepcopy(bundle), world

    recipe = bundle.recipe
    if shift.kind == "stimulus":
        stats = ImageStats(
            shift.spectral_exponent, tuple(shift.band), shift.orientation_bias, shift.adapter_orientation
        )
        recipe = replace(
            recipe,
            stats=stats,
            image_seed=shift.seed,
            behavior_seed=shift.seed + 1,
            response_seed=shift.seed + 2,
        )
        if shift.adapts_tuning:
            world = adapt_world(world, shift.adapter_orientation, shift.tuning_repulsion, shift.gain_suppression)
    elif shift.kind == "subject":
        world = make_world(world.config, rf_seed=shift.seed)
        recipe = replace(recipe, response_seed=shift.seed + 2)
    else:
        world = replace(world, response_gain=world.response_gain * shift.response_gain)
        recipe = replace(
            recipe,
            contrast=recipe.contrast * shift.contrast,
            offset=recipe.offset * shift.contrast + shift.offset,
        )
        if shift.resample_stimuli:
            recipe = replace(
                recipe, image_seed=shift.seed, behavior_seed=shift.seed + 1, response_seed=shift.seed + 2
            )

    logger.info(f"Applying {shift.kind} shift (seed={shift.seed}) to condition '{bundle.condition}'")
    return build_bundle(world, recipe, condition=shift.kind), world


def write_dataset(bundle: DatasetBundle, path: Path) -> Path:
    meta = {
        "condition": bundle.condition,
        "test_repeats": bundle.test_repeats,
        "recipe": bundle.recipe.to_dict(),
        "world_digest": bundle.world_digest,
        "num_neurons": bundle.num_neurons,
    }
    return write_container(path, "dataset", bundle.blobs(), meta)


def read_dataset(path: Path) -> DatasetBundle:
    container = read_container(path, section="dataset")
    blobs, meta = container.blobs, container.meta
    try:
        return DatasetBundle(
            stimulus_ids=blobs["stimulus_ids"],
            stimuli=blobs["stimuli"],
            trial_image=blobs["trial_image"],
            trial_repeat=blobs["trial_repeat"],
            behavior=blobs["behavior"],
            responses=blobs["responses"],
            splits={name: blobs[f"split.{name}"] for name in SPLITS},
            test_repeats=int(meta["test_repeats"]),
            condition=str(meta["condition"]),
            recipe=StimulusRecipe.from_dict(meta["recipe"]),
            world_digest=str(meta["world_digest"]),
        )
    except KeyError as e:
        raise AvmdManifestError(f"dataset container {path} is missing {e}") from e


def read_condition(directory: Path) -> DatasetBundle:
    """Combine ``train.avmd``, ``val.avmd`` and ``test.avmd`` of one condition directory."""
    directory = Path(directory)
    return DatasetBundle.concat(read_dataset(directory / f"{split}.avmd") for split in SPLITS)


def write_condition(bundle: DatasetBundle, world: World, directory: Path) -> list[Path]:
    directory = Path(directory)
    written = [write_dataset(bundle.restrict(split), directory / f"{split}.avmd") for split in SPLITS]
    written.append(write_world(world, directory / "world.avmd"))
    logger.info(f"Condition '{bundle.condition}' written to: {directory}")
    return written


def write_world(world: World, path: Path) -> Path:
    meta = {
        "config": {
            key: (list(value) if isinstance(value, tuple) else value) for key, value in asdict(world.config).items()
        },
        "rf_seed": world.rf_seed,
        "response_gain": world.response_gain,
        "digest": world.digest(),
    }
    return write_container(path, "world", world.arrays(), meta)


def read_world(path: Path) -> World:
    container = read_container(path, section="world")
    meta = container.meta
    config = WorldConfig(
        **{key: (tuple(value) if isinstance(value, list) else value) for key, value in meta["config"].items()}
    )
    return World(
        config=config,
        rf_seed=int(meta["rf_seed"]),
        response_gain=float(meta["response_gain"]),
        **{name: container.blobs[name] for name in WORLD_ARRAYS},
    )
