"""Experiment engine that coordinates data, training, evaluation and reports."""

import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ModulationConfig, RunConfig
from .errors import AvmError, ConfigError, InvariantBreach
from .formatter import ReportFormatter, ablation_plots, camu_histograms, write_frame
from .metrics import MetricReport, TrialTensor, evaluate_report
from .model import AvmModel, ModelSpec, expected_parameter_counts
from .modulation import export_camu_weights
from .synthdata import ConditionShift, DatasetBundle, apply_shift, generate_world, read_condition, write_condition
from .training import STRATEGIES, AdaptationResult, poisson_loss_value, predict, train_phase1, train_phase2

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (0.1, 0.5, 1.0, 2.0)
DEFAULT_DIMS = (1, 5, 31, 50, 100)
ADAPTER_VARIANTS = ("avm-s", "avm", "avm-b")
COMPARE_ORDER = ("frozen", "full-ft", "avm-s", "avm", "avm-b")

# Called with a label after each finished ablation cell or strategy
ProgressHook = Callable[[str], None]


class AdaptationExperiment:
    """Runs the pretraining, adaptation and evaluation workflows for one run config."""

    def __init__(self, config: Optional[RunConfig] = None):
        """Initialize the experiment.

        Args:
            config: Effective run configuration. If not provided, defaults are used.
        """
        self.config = (config or RunConfig()).validate()
        logger.info("AdaptationExperiment initialized")

    def model_spec(self, num_neurons: int) -> ModelSpec:
        return ModelSpec(
            backbone=replace(self.config.backbone),
            modulation=ModulationConfig(variant="plain", seed=self.config.modulation.seed),
            readout=replace(self.config.readout),
            num_neurons=num_neurons,
        )

    def echo_config(self, out_dir: Path) -> None:
        self.config.write(Path(out_dir) / "effective_config.json")

    def synthesize(self, out_dir: Path, shifts: Sequence[str] = (), shift_seed: int = 101) -> dict[str, Path]:
        """Write the source condition and each requested shift under ``out_dir/<condition>/``."""
        out_dir = Path(out_dir)
        world, bundle = generate_world(self.config.world)
        written = {"source": out_dir / "source"}
        write_condition(bundle, world, written["source"])
        for kind in shifts:
            shifted, shifted_world = apply_shift(bundle, world, ConditionShift(kind=kind, seed=shift_seed))
            written[kind] = out_dir / kind
            write_condition(shifted, shifted_world, written[kind])
        self.echo_config(out_dir)
        return written

    def train(self, dataset_dir: Path, out_dir: Path, max_epochs: Optional[int] = None) -> Checkpoint:
        """Phase 1: writes ``phase1.ckpt`` and ``train_log.csv``."""
        out_dir = Path(out_dir)
        bundle = read_condition(dataset_dir)
        model = AvmModel.build(self.model_spec(bundle.num_neurons))
        self.echo_config(out_dir)
        best = train_phase1(model, bundle, self.config.train, out_dir / "train_log.csv", max_epochs)
        save_checkpoint(best, out_dir / "phase1.ckpt")
        return best

    def adapt(
        self,
        checkpoint_path: Path,
        strategy: str,
        dataset_dir: Path,
        out_dir: Path,
        max_epochs: Optional[int] = None,
        modulation: Optional[ModulationConfig] = None,
    ) -> AdaptationResult:
        """Phase 2: writes ``phase2.ckpt`` and ``adapt_log.csv``."""
        out_dir = Path(out_dir)
        checkpoint = load_checkpoint(checkpoint_path)
        bundle = read_condition(dataset_dir)
        self.echo_config(out_dir)
        result = self._adapt(checkpoint, strategy, bundle, out_dir / "adapt_log.csv", max_epochs, modulation)
        save_checkpoint(result.checkpoint, out_dir / "phase2.ckpt")
        return result

    def _adapt(
        self,
        checkpoint: Checkpoint,
        strategy: str,
        bundle: DatasetBundle,
        log_path: Optional[Path],
        max_epochs: Optional[int],
        modulation: Optional[ModulationConfig] = None,
    ) -> AdaptationResult:
        return train_phase2(
            checkpoint,
            strategy,
            bundle,
            self.config.train,
            modulation=modulation or self.config.modulation,
            readout=self.config.readout,
            log_path=log_path,
            max_epochs=max_epochs,
        )

    def score(self, checkpoint: Checkpoint, bundle: DatasetBundle, split: str = "test") -> MetricReport:
        """Metrics and mean per-trial loss of ``checkpoint`` on one split."""
        model = checkpoint.build_model()
        if model.readout.num_neurons != bundle.num_neurons:
            raise ConfigError(
                f"checkpoint predicts {model.readout.num_neurons} neurons, dataset has {bundle.num_neurons}"
            )
        trials = bundle.trials(split)
        predictions = predict(model, trials)
        loss = poisson_loss_value(trials.responses, predictions, self.config.train.loss_eps)
        return evaluate_report(
            TrialTensor(trials.responses, trials.image_ids, kind="response"),
            TrialTensor(predictions, trials.image_ids, kind="prediction"),
            loss=loss,
        )

    def evaluate(self, checkpoint_path: Path, dataset_dir: Path, out_dir: Path, split: str = "test") -> MetricReport:
        """Writes ``metrics.csv`` and ``eval_summary.json``."""
        out_dir = Path(out_dir)
        checkpoint = load_checkpoint(checkpoint_path)
        report = self.score(checkpoint, read_condition(dataset_dir), split)
        write_frame(ReportFormatter.metric_frame(report), out_dir / "metrics.csv")
        summary = {
            "checkpoint": str(checkpoint_path),
            "strategy": checkpoint.strategy,
            "split": split,
            "loss": report.loss,
            **report.aggregate(),
            "included_neurons": int(report.included.sum()),
            "num_neurons": report.num_neurons,
        }
        path = out_dir / "eval_summary.json"
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info(f"Evaluation summary saved to: {path}")
        return report

    def parameter_counts(self, spec: Optional[ModelSpec] = None) -> dict[str, dict[str, int]]:
        """Per-group and trainable counts for plain, every adapter variant and full fine-tuning."""
        spec = spec or self.model_spec(self.config.world.num_neurons)
        m = self.config.modulation.bottleneck_dim
        table: dict[str, dict[str, int]] = {}
        for variant in ("plain",) + ADAPTER_VARIANTS:
            variant_spec = replace(spec, modulation=ModulationConfig(variant=variant, bottleneck_dim=m))
            groups = expected_parameter_counts(variant_spec)
            if variant == "plain":
                trainable = groups["backbone"] + groups["readout"]
            else:
                trainable = groups["modulation"] + (groups["readout"] if spec.readout.train_in_phase2 else 0)
            table[variant] = {**groups, "trainable": trainable}
        table["full-ft"] = {**table["plain"]}
        ordered = table["avm-s"]["modulation"] < table["avm"]["modulation"] < table["avm-b"]["modulation"]
        if spec.backbone.num_blocks > 1 and not ordered:
            raise InvariantBreach("modulation parameter counts are not ordered avm-s < avm < avm-b")
        return table

    def _cell_row(self, result: AdaptationResult, bundle: DatasetBundle, seconds: float) -> dict:
        report = self.score(result.checkpoint, bundle)
        return {**report.aggregate(), "trainable_params": result.trainable_params, "seconds": seconds}

    def ablate(
        self,
        checkpoint_path: Path,
        dataset_dir: Path,
        out_dir: Path,
        weights: Sequence[float] = DEFAULT_WEIGHTS,
        dims: Sequence[int] = DEFAULT_DIMS,
        max_epochs: Optional[int] = None,
        on_cell: Optional[ProgressHook] = None,
    ) -> pd.DataFrame:
        """Adapt once per (weight, dim) cell; failed cells stay as NaN rows.

        ``ablation.csv`` is rewritten after every cell so an interrupted grid keeps its finished rows.
        """
        out_dir = Path(out_dir)
        checkpoint = load_checkpoint(checkpoint_path)
        bundle = read_condition(dataset_dir)
        variant = self.config.modulation.variant if self.config.modulation.variant != "plain" else "avm"
        self.echo_config(out_dir)

        rows = []
        for weight in weights:
            for dim in dims:
                start = time.perf_counter()
                modulation = replace(self.config.modulation, variant=variant, weight=float(weight), bottleneck_dim=int(dim))
                try:
                    result = self._adapt(checkpoint, variant, bundle, None, max_epochs, modulation)
                    row = self._cell_row(result, bundle, time.perf_counter() - start)
                except AvmError as e:
                    logger.warning(f"Ablation cell w={weight} m={dim} failed: {e}")
                    row = {"rho_trial": np.nan, "rho_avg": np.nan, "feve": np.nan, "trainable_params": np.nan,
                           "seconds": time.perf_counter() - start}
                rows.append({"weight": float(weight), "dim": int(dim), **row})
                write_frame(ReportFormatter.ablation_frame(rows), out_dir / "ablation.csv")
                if on_cell:
                    on_cell(f"w={weight:g} m={dim}")

        frame = ReportFormatter.ablation_frame(rows)
        ablation_plots(frame, out_dir)
        return frame

    def compare(
        self,
        checkpoint_path: Path,
        dataset_dir: Path,
        out_dir: Path,
        strategies: Sequence[str] = COMPARE_ORDER,
        max_epochs: Optional[int] = None,
        on_strategy: Optional[ProgressHook] = None,
    ) -> pd.DataFrame:
        """Run every adaptation strategy from one checkpoint and tabulate test metrics."""
        unknown = [s for s in strategies if s not in STRATEGIES]
        if unknown:
            raise ConfigError(f"unknown strategies {unknown} (expected from {STRATEGIES})")
        out_dir = Path(out_dir)
        checkpoint = load_checkpoint(checkpoint_path)
        bundle = read_condition(dataset_dir)
        self.echo_config(out_dir)

        rows = []
        for strategy in strategies:
            start = time.perf_counter()
            result = self._adapt(checkpoint, strategy, bundle, out_dir / f"{strategy}_log.csv", max_epochs)
            rows.append({"strategy": strategy, **self._cell_row(result, bundle, time.perf_counter() - start)})
            if on_strategy:
                on_strategy(strategy)

        frame = ReportFormatter.comparison_frame(rows)
        write_frame(frame, out_dir / "comparison.csv")
        return frame

    def export_weights(self, checkpoint_path: Path, out_dir: Path) -> list[Path]:
        """CAMU weight CSVs plus one histogram SVG per unit position."""
        checkpoint = load_checkpoint(checkpoint_path)
        model = checkpoint.build_model()
        if model.modulation is None:
            raise ConfigError(f"checkpoint {checkpoint_path} has no modulation units ({checkpoint.strategy})")
        written = export_camu_weights(model.modulation, Path(out_dir))
        written += camu_histograms(model.modulation, Path(out_dir))
        return written
