"""Command-line interface for avm-lab."""

import functools
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import click
from rich.console import Console
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from .config import load_run_config
from .errors import AvmError
from .experiment import DEFAULT_DIMS, DEFAULT_WEIGHTS, AdaptationExperiment
from .formatter import ConsoleFormatter, ReportFormatter, write_frame
from .synthdata import SHIFT_KINDS
from .training import STRATEGIES

console = Console(force_terminal=True, legacy_windows=False)

# Reference trainable counts (backbone vs AVM vs AVM-S) at full scale
REFERENCE_COUNTS = {"backbone": 2_460_000, "avm": 110_000, "avm-s": 30_000}


def setup_logging(level: str = "INFO"):
    """Setup logging configuration."""
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler()],
        force=True,
    )


def handle_errors(command):
    """Map library errors to exit codes: AvmError subclasses carry their own, OSError is 3."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except click.ClickException:
            raise
        except AvmError as e:
            console.print(f"[red]{ConsoleFormatter.format_error(str(e))}[/red]")
            sys.exit(e.exit_code)
        except OSError as e:
            console.print(f"[red]{ConsoleFormatter.format_error(f'I/O failure: {e}')}[/red]")
            sys.exit(3)
        except Exception as e:
            console.print(f"[red]{ConsoleFormatter.format_error(f'Command failed: {e}')}[/red]")
            logging.exception("Command failed")
            sys.exit(1)

    return wrapper


def build_experiment(config_path: Optional[Path], seed: Optional[int]) -> AdaptationExperiment:
    config = load_run_config(config_path)
    if seed is not None:
        config.reseed(seed)
    return AdaptationExperiment(config)


config_option = click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Run configuration JSON (unknown keys are rejected)",
)
seed_option = click.option("--seed", type=int, help="Base seed for every random stream (overrides AVM_SEED)")
epochs_option = click.option("--max-epochs", type=int, help="Cap on training epochs for this command")
out_option = click.option(
    "-o", "--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True, help="Output directory"
)
dataset_argument = click.argument("dataset", type=click.Path(exists=True, file_okay=False, path_type=Path))
checkpoint_argument = click.argument("checkpoint", type=click.Path(exists=True, file_okay=False, path_type=Path))


def spinner():
    return Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console)


@click.group()
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default=lambda: os.getenv("AVM_LOG_LEVEL", "INFO"),
    help="Set logging level",
)
def cli(log_level: str):
    """AVM-Lab: frozen-encoder neural response models with condition-aware modulation.

    Generate synthetic V1 conditions, pretrain the encoder, adapt it to a shifted
    condition with modulation units, and evaluate response predictions.
    """
    setup_logging(log_level)


@cli.command()
@config_option
@seed_option
@out_option
@click.option(
    "--shift",
    "shifts",
    type=click.Choice([k for k in SHIFT_KINDS if k != "identity"]),
    multiple=True,
    help="Also write a shifted condition (repeatable)",
)
@click.option("--shift-seed", type=int, default=101, show_default=True, help="Seed of the shifted conditions")
@handle_errors
def synth(config_path, seed, out_dir, shifts, shift_seed):
    """Generate the source condition and optional shifted conditions.

    Writes OUT/source/{train,val,test,world}.avmd and OUT/<shift>/... per shift.

    Examples:

      avm-lab synth -o data --shift subject --shift environment
    """
    experiment = build_experiment(config_path, seed)
    with spinner() as progress:
        progress.add_task("Generating synthetic conditions...", total=None)
        written = experiment.synthesize(out_dir, shifts, shift_seed)
    for condition, path in written.items():
        console.print(f"[green]{ConsoleFormatter.format_success(f'{condition}: {path}')}[/green]")


@cli.command()
@dataset_argument
@config_option
@seed_option
@epochs_option
@out_option
@handle_errors
def train(dataset, config_path, seed, max_epochs, out_dir):
    """Phase 1: train encoder and readout on DATASET (a condition directory).

    Writes OUT/phase1.ckpt and OUT/train_log.csv.
    """
    experiment = build_experiment(config_path, seed)
    with spinner() as progress:
        progress.add_task("Pretraining encoder and readout...", total=None)
        best = experiment.train(dataset, out_dir, max_epochs)
    console.print(
        f"[green]{ConsoleFormatter.format_success(f'Best validation loss {best.best_val_loss:.6f} at epoch {best.epoch}')}[/green]"
    )
    console.print(f"  Checkpoint: {(out_dir / 'phase1.ckpt').absolute()}")


@cli.command()
@checkpoint_argument
@dataset_argument
@click.option("--variant", type=click.Choice(STRATEGIES), required=True, help="Adaptation strategy")
@click.option("--dim", type=int, help="Bottleneck dimension of each modulation unit")
@click.option("--weight", type=float, help="Modulation strength w")
@config_option
@seed_option
@epochs_option
@out_option
@handle_errors
def adapt(checkpoint, dataset, variant, dim, weight, config_path, seed, max_epochs, out_dir):
    """Phase 2: adapt a phase-1 CHECKPOINT to the condition in DATASET.

    Writes OUT/phase2.ckpt and OUT/adapt_log.csv.
    """
    experiment = build_experiment(config_path, seed)
    if dim is not None:
        experiment.config.modulation.bottleneck_dim = dim
    if weight is not None:
        experiment.config.modulation.weight = weight
    experiment.config.validate()

    counts = experiment.parameter_counts()
    if variant in counts:
        console.print(f"[bold]{variant}[/bold]: {counts[variant]['trainable']:,} trainable parameters")
    with spinner() as progress:
        progress.add_task(f"Adapting with {variant}...", total=None)
        result = experiment.adapt(checkpoint, variant, dataset, out_dir, max_epochs)
    console.print(
        f"[green]{ConsoleFormatter.format_success(f'{variant}: step-0 val {result.step0_val_loss:.6f}, best val {result.checkpoint.best_val_loss:.6f}')}[/green]"
    )
    console.print(f"  Trainable parameters: {result.trainable_params:,}")
    console.print(f"  Checkpoint: {(out_dir / 'phase2.ckpt').absolute()}")


@cli.command(name="eval")
@checkpoint_argument
@dataset_argument
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@config_option
@out_option
@handle_errors
def evaluate(checkpoint, dataset, split, config_path, out_dir):
    """Score CHECKPOINT on one split of DATASET.

    Writes OUT/metrics.csv (one row per neuron plus the mean) and OUT/eval_summary.json.
    """
    experiment = build_experiment(config_path, None)
    report = experiment.evaluate(checkpoint, dataset, out_dir, split)
    console.print(f"[green]{ConsoleFormatter.format_success(ConsoleFormatter.format_metrics(report))}[/green]")
    console.print(f"  Mean per-trial loss: {report.loss:.10f}")
    for neuron, reason in list(report.excluded.items())[:10]:
        console.print(f"[yellow]{ConsoleFormatter.format_warning(f'neuron {neuron} excluded: {reason}')}[/yellow]")


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, file_okay=False, path_type=Path), help="Take shapes from a checkpoint")
@click.option("-o", "--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), help="Also write parameters.csv here")
@config_option
@handle_errors
def params(checkpoint, out_dir, config_path):
    """Print parameter counts per group and trainable totals for every variant."""
    from .checkpoint import load_checkpoint

    experiment = build_experiment(config_path, None)
    spec = load_checkpoint(checkpoint).spec if checkpoint else None
    counts = experiment.parameter_counts(spec)

    table = Table(title="Parameter counts")
    for column in ("variant", "backbone", "modulation", "readout", "trainable", "modulation / backbone"):
        table.add_column(column, justify="right" if column != "variant" else "left")
    for variant, groups in counts.items():
        ratio = groups["modulation"] / groups["backbone"]
        table.add_row(
            variant,
            f"{groups['backbone']:,}",
            f"{groups['modulation']:,}",
            f"{groups['readout']:,}",
            f"{groups['trainable']:,}",
            f"{100 * ratio:.2f}%",
        )
    console.print(table)
    if out_dir:
        path = write_frame(ReportFormatter.parameter_frame(counts), out_dir / "parameters.csv")
        console.print(f"  Counts: {path.absolute()}")
    ref = REFERENCE_COUNTS
    console.print(
        ConsoleFormatter.format_info(
            f"Full-scale reference: backbone {ref['backbone'] / 1e6:.2f}M, AVM {ref['avm'] / 1e6:.2f}M "
            f"({100 * ref['avm'] / ref['backbone']:.1f}%), AVM-S {ref['avm-s'] / 1e6:.2f}M "
            f"({100 * ref['avm-s'] / ref['backbone']:.1f}%)"
        )
    )


def _parse_list(value: Optional[str], cast, default):
    if not value:
        return tuple(default)
    try:
        return tuple(cast(item) for item in value.split(","))
    except ValueError as e:
        raise click.BadParameter(f"'{value}' is not a comma-separated list: {e}") from e


@cli.command()
@checkpoint_argument
@dataset_argument
@click.option("--weights", help="Comma-separated modulation strengths (default 0.1,0.5,1.0,2.0)")
@click.option("--dims", help="Comma-separated bottleneck dimensions (default 1,5,31,50,100)")
@config_option
@seed_option
@epochs_option
@out_option
@handle_errors
def ablate(checkpoint, dataset, weights, dims, config_path, seed, max_epochs, out_dir):
    """Sweep modulation strength and bottleneck dimension from one phase-1 CHECKPOINT.

    Writes OUT/ablation.csv and OUT/ablation_<metric>.svg.
    """
    weights = _parse_list(weights, float, DEFAULT_WEIGHTS)
    dims = _parse_list(dims, int, DEFAULT_DIMS)
    experiment = build_experiment(config_path, seed)
    with Progress(console=console) as progress:
        task = progress.add_task("Ablation cells", total=len(weights) * len(dims))
        frame = experiment.ablate(
            checkpoint, dataset, out_dir, weights, dims, max_epochs, on_cell=lambda _: progress.advance(task)
        )
    failed = int(frame["rho_avg"].isna().sum())
    message = f"{len(frame)} cells written to {out_dir / 'ablation.csv'}"
    console.print(f"[green]{ConsoleFormatter.format_success(message)}[/green]")
    if failed:
        console.print(f"[yellow]{ConsoleFormatter.format_warning(f'{failed} cells failed (NaN rows)')}[/yellow]")


@cli.command()
@checkpoint_argument
@dataset_argument
@config_option
@seed_option
@epochs_option
@out_option
@handle_errors
def compare(checkpoint, dataset, config_path, seed, max_epochs, out_dir):
    """Run frozen, full-ft, avm-s, avm and avm-b from one CHECKPOINT on DATASET.

    Writes OUT/comparison.csv with the FEVE gain of each strategy over frozen.
    """
    experiment = build_experiment(config_path, seed)
    with Progress(console=console) as progress:
        task = progress.add_task("Strategies", total=5)
        frame = experiment.compare(checkpoint, dataset, out_dir, max_epochs=max_epochs,
                                   on_strategy=lambda _: progress.advance(task))

    table = Table(title="Adaptation strategies (test split)")
    for column in frame.columns:
        table.add_column(column, justify="left" if column == "strategy" else "right")
    for row in frame.itertuples(index=False):
        table.add_row(
            row.strategy,
            f"{row.rho_trial:.4f}",
            f"{row.rho_avg:.4f}",
            f"{row.feve:.4f}",
            f"{int(row.trainable_params):,}",
            f"{row.feve_gain_pct:+.2f}",
            f"{row.seconds:.1f}",
        )
    console.print(table)


@cli.command(name="camu-weights")
@checkpoint_argument
@out_option
@handle_errors
def camu_weights(checkpoint, out_dir):
    """Dump every CAMU weight matrix of a phase-2 CHECKPOINT as CSV, plus histogram SVGs."""
    experiment = AdaptationExperiment()
    written = experiment.export_weights(checkpoint, out_dir)
    console.print(f"[green]{ConsoleFormatter.format_success(f'{len(written)} files written to {out_dir}')}[/green]")


@cli.command()
def version():
    """Show version information."""
    from . import __version__

    console.print(f"avm-lab version {__version__}", highlight=False)


def main():
    """Main entry point for the CLI."""
    cli()


if __name__ == "__main__":
    main()
