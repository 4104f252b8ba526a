"""Formatters for CSV reports, SVG plots and console output."""

import html
import logging
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .metrics import MetricReport
from .modulation import ModulationVariant

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ["weight", "dim", "rho_trial", "rho_avg", "feve", "trainable_params", "seconds"]
COMPARISON_COLUMNS = ["strategy", "rho_trial", "rho_avg", "feve", "trainable_params", "feve_gain_pct", "seconds"]
METRICS = ("rho_trial", "rho_avg", "feve")

# Plot geometry in px
WIDTH, HEIGHT, MARGIN = 640, 400, 60
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def write_frame(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Report saved to: {path}")
    return path


class ReportFormatter:
    """Tabular result files."""

    @staticmethod
    def metric_frame(report: MetricReport) -> pd.DataFrame:
        """``neuron,rho_trial,rho_avg,feve,included,reason`` plus the aggregate row."""
        return report.to_frame()

    @staticmethod
    def ablation_frame(rows: list[dict]) -> pd.DataFrame:
        return pd.DataFrame(rows, columns=ABLATION_COLUMNS)

    @staticmethod
    def comparison_frame(rows: list[dict]) -> pd.DataFrame:
        """Add ``feve_gain_pct`` relative to the ``frozen`` row when present."""
        frame = pd.DataFrame(rows)
        baseline = frame.loc[frame["strategy"] == "frozen", "feve"]
        if baseline.empty or not np.isfinite(baseline.iloc[0]) or baseline.iloc[0] == 0:
            frame["feve_gain_pct"] = np.nan
        else:
            base = float(baseline.iloc[0])
            frame["feve_gain_pct"] = 100.0 * (frame["feve"] - base) / abs(base)
        return frame[COMPARISON_COLUMNS]

    @staticmethod
    def parameter_frame(counts: dict[str, dict[str, int]]) -> pd.DataFrame:
        """One row per variant with group counts and the trainable total."""
        rows = []
        for variant, groups in counts.items():
            rows.append({"variant": variant, **groups})
        return pd.DataFrame(rows)


def _scale(values: Sequence[float], low: float, high: float, out_low: float, out_high: float) -> list[float]:
    span = (high - low) or 1.0
    return [out_low + (v - low) / span * (out_high - out_low) for v in values]


def _finite_range(values: list[float]) -> tuple[float, float]:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    low, high = min(finite), max(finite)
    if low == high:
        low, high = low - 0.5, high + 0.5
    return low, high


class SvgFormatter:
    """Minimal standalone SVG documents (polylines, axes, legend)."""

    @staticmethod
    def line_plot(
        series: dict[str, tuple[Sequence[float], Sequence[float]]],
        title: str,
        xlabel: str,
        ylabel: str,
        xticks: Optional[Sequence[float]] = None,
    ) -> str:
        """Plot each series as a polyline; NaN points break the line."""
        xs_all = [float(x) for xs, _ in series.values() for x in xs]
        ys_all = [float(y) for _, ys in series.values() for y in ys]
        x_low, x_high = _finite_range(xs_all)
        y_low, y_high = _finite_range(ys_all)
        left, right, top, bottom = MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN

        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="{MARGIN / 2}" text-anchor="middle" font-size="14">{html.escape(title)}</text>',
            f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 15}" text-anchor="middle">{html.escape(xlabel)}</text>',
            f'<text x="15" y="{HEIGHT / 2}" text-anchor="middle" transform="rotate(-90 15 {HEIGHT / 2})">'
            f"{html.escape(ylabel)}</text>",
            f'<text x="{left - 5}" y="{bottom}" text-anchor="end">{y_low:.4g}</text>',
            f'<text x="{left - 5}" y="{top + 4}" text-anchor="end">{y_high:.4g}</text>',
        ]
        for tick in xticks if xticks is not None else (x_low, x_high):
            (px,) = _scale([float(tick)], x_low, x_high, left, right)
            parts.append(f'<text x="{px:.2f}" y="{bottom + 16}" text-anchor="middle">{tick:g}</text>')

        for i, (label, (xs, ys)) in enumerate(series.items()):
            color = PALETTE[i % len(PALETTE)]
            px = _scale([float(x) for x in xs], x_low, x_high, left, right)
            py = _scale([float(y) for y in ys], y_low, y_high, bottom, top)
            segment: list[str] = []
            for x, y, raw in zip(px, py, ys):
                if math.isfinite(float(raw)):
                    segment.append(f"{x:.2f},{y:.2f}")
                    continue
                if segment:
                    parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{" ".join(segment)}"/>')
                segment = []
            if segment:
                parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{" ".join(segment)}"/>')
            legend_y = top + 16 * i
            parts.append(f'<rect x="{right - 110}" y="{legend_y - 9}" width="10" height="10" fill="{color}"/>')
            parts.append(f'<text x="{right - 95}" y="{legend_y}">{html.escape(label)}</text>')

        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    @staticmethod
    def write(svg: str, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(svg, encoding="utf-8")
        logger.info(f"Plot saved to: {path}")
        return path


def ablation_plots(frame: pd.DataFrame, out_dir: Path) -> list[Path]:
    """One SVG per metric: metric against bottleneck dimension, one line per weight."""
    written = []
    dims = sorted(frame["dim"].unique())
    for metric in METRICS:
        series = {}
        for weight, group in frame.groupby("weight", sort=True):
            group = group.sort_values("dim")
            series[f"w={weight:g}"] = (group["dim"].tolist(), group[metric].tolist())
        svg = SvgFormatter.line_plot(series, f"{metric} by bottleneck dimension", "dim", metric, xticks=dims)
        written.append(SvgFormatter.write(svg, Path(out_dir) / f"ablation_{metric}.svg"))
    return written


def camu_histograms(variant: ModulationVariant, out_dir: Path, bins: int = 40) -> list[Path]:
    """One SVG per unit position overlaying the weight histograms of every block."""
    by_position: dict[str, dict[str, np.ndarray]] = {}
    for block, unit, params in variant.units():
        values = np.concatenate([params.down_w.values.ravel(), params.up_w.values.ravel()])
        by_position.setdefault(unit, {})[f"block {block}"] = values

    written = []
    for unit, blocks in by_position.items():
        pooled = np.concatenate(list(blocks.values()))
        low, high = float(pooled.min()), float(pooled.max())
        if low == high:
            low, high = low - 0.5, high + 0.5
        edges = np.linspace(low, high, bins + 1)
        centers = 0.5 * (edges[:-1] + edges[1:])
        series = {
            label: (centers.tolist(), np.histogram(values, bins=edges, density=True)[0].tolist())
            for label, values in blocks.items()
        }
        svg = SvgFormatter.line_plot(series, f"CAMU {unit} weight distribution ({variant.tag})", "weight", "density")
        written.append(SvgFormatter.write(svg, Path(out_dir) / f"camu_hist_unit{unit}.svg"))
    return written


class ConsoleFormatter:
    """Formatter for console output with colors."""

    @staticmethod
    def format_success(message: str) -> str:
        return f"[OK] {message}"

    @staticmethod
    def format_error(message: str) -> str:
        return f"[ERROR] {message}"

    @staticmethod
    def format_warning(message: str) -> str:
        return f"[WARNING] {message}"

    @staticmethod
    def format_info(message: str) -> str:
        return f"[INFO] {message}"

    @staticmethod
    def format_metrics(report: MetricReport) -> str:
        agg = report.aggregate()
        return (
            f"rho_trial={agg['rho_trial']:.4f}  rho_avg={agg['rho_avg']:.4f}  feve={agg['feve']:.4f}  "
            f"({int(report.included.sum())}/{report.num_neurons} neurons)"
        )
