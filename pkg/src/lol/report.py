"""Figure rendering for run traces and comparisons.

The CSV files are the contract; this module is one consumer of them. It
renders loss curves, diagnostic curves and test-error curves for run or
algorithm directories, and a bar chart for comparison outputs. Figures are
written as PNG files next to the CSV they were rendered from (or into
--out).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .runner import read_trace

_LOSS_CURVES = [
    ("train_loss", "train loss"),
    ("loss_m1bar_g", "block-2-only subset (g)"),
    ("loss_m2bar", "block-1-only subset"),
]
_DIAG_CURVES = [
    ("rho", "rho"),
    ("almost_lin", "ray curvature of g"),
    ("hamming_frac", "pattern overlap distance"),
]
_ERR_CURVES = [
    ("test_err", "overall"),
    ("test_err_p_only", "block-1 only"),
    ("test_err_q_only", "block-2 only"),
    ("test_err_both", "both blocks"),
]


def _plot_traces(ax, traces: dict[str, list[dict]], column: str):
    for label, rows in traces.items():
        ts = [r["t"] for r in rows if r.get(column) is not None]
        vs = [r[column] for r in rows if r.get(column) is not None]
        if ts:
            ax.plot(ts, vs, label=label, linewidth=1.2)
    ax.set_xlabel("iteration")
    ax.grid(alpha=0.3)


def _t0_of(algo_dir: Path, seed: str):
    summary = algo_dir / "summary.json"
    if not summary.exists():
        return None
    doc = json.loads(summary.read_text())
    for row in doc["runs"]:
        if str(row["seed"]) == seed:
            return row["t0"]
    return None


def _collect_traces(path: Path) -> dict[str, tuple[list[dict], object]]:
    """Map curve label -> (trace rows, anneal iteration or None)."""
    out = {}
    if (path / "trace.csv").exists():
        t0 = _t0_of(path.parent, path.name)
        out[path.name] = (read_trace(path / "trace.csv"), t0)
        return out
    if (path / "summary.json").exists():
        doc = json.loads((path / "summary.json").read_text())
        for row in doc["runs"]:
            seed = row["seed"]
            trace = read_trace(path / str(seed) / "trace.csv")
            out[f"{doc['algorithm']} seed {seed}"] = (trace, row["t0"])
        return out
    for child in sorted(path.iterdir()) if path.is_dir() else []:
        if child.is_dir() and (child / "summary.json").exists():
            doc = json.loads((child / "summary.json").read_text())
            for row in doc["runs"]:
                trace = read_trace(child / str(row["seed"]) / "trace.csv")
                out[f"{doc['algorithm']} seed {row['seed']}"] = (trace, row["t0"])
    return out


def _render_trace_figures(path: Path, out_dir: Path) -> list[Path]:
    labeled = _collect_traces(path)
    if not labeled:
        return []
    name = path.name or "run"
    written = []
    specs = [
        (f"losses_{name}.png", _LOSS_CURVES, "loss"),
        (f"diagnostics_{name}.png", _DIAG_CURVES, "value"),
        (f"test_error_{name}.png", _ERR_CURVES, "test error"),
    ]
    for fname, curves, ylabel in specs:
        fig, axes = plt.subplots(
            1, len(curves), figsize=(4.2 * len(curves), 3.4), squeeze=False
        )
        for ax, (col, title) in zip(axes[0], curves):
            _plot_traces(ax, {k: rows for k, (rows, _) in labeled.items()}, col)
            for _, (rows, t0) in labeled.items():
                if t0 is not None:
                    ax.axvline(t0, color="gray", alpha=0.4, linewidth=0.8)
            ax.set_title(title, fontsize=10)
            ax.set_ylabel(ylabel)
        handles, labels = axes[0][0].get_legend_handles_labels()
        if len(labels) <= 12:
            fig.legend(handles, labels, loc="lower center",
                       ncol=min(4, max(1, len(labels))), fontsize=7)
        fig.tight_layout(rect=(0, 0.1, 1, 1))
        target = out_dir / fname
        fig.savefig(target, dpi=130)
        plt.close(fig)
        written.append(target)
    return written


def _render_comparison_figure(path: Path, out_dir: Path) -> list[Path]:
    rows = []
    with open(path / "comparison.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return []
    metrics = [
        ("test_err_mean", "overall"),
        ("test_err_p_only_mean", "block-1 only"),
        ("test_err_q_only_mean", "block-2 only"),
        ("test_err_both_mean", "both"),
    ]
    fig, ax = plt.subplots(figsize=(6.5, 3.6))
    width = 0.8 / len(rows)
    for i, row in enumerate(rows):
        vals = [float(row[m]) if row[m] else 0.0 for m, _ in metrics]
        xs = [j + i * width for j in range(len(metrics))]
        ax.bar(xs, vals, width=width, label=row["algorithm"])
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(metrics))])
    ax.set_xticklabels([lbl for _, lbl in metrics])
    ax.set_ylabel("final test error (mean over seeds)")
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    target = out_dir / "comparison.png"
    fig.savefig(target, dpi=130)
    plt.close(fig)
    return [target]


def render_report(paths: list[str], out_dir: str | None = None) -> int:
    written = []
    for raw in paths:
        path = Path(raw)
        if not path.exists():
            print(f"error: {path} does not exist")
            return 2
        target = Path(out_dir) if out_dir else (path if path.is_dir() else path.parent)
        target.mkdir(parents=True, exist_ok=True)
        if path.is_dir() and (path / "comparison.csv").exists():
            written += _render_comparison_figure(path, target)
        if path.is_dir():
            written += _render_trace_figures(path, target)
    for item in written:
        print(f"wrote {item}")
    return 0 if written else 2
