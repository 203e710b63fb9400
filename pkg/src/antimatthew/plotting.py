"""Line charts written as SVG files with matplotlib's non-interactive backend."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# keep SVG output byte-stable across runs
matplotlib.rcParams["svg.hashsalt"] = "antimatthew"
matplotlib.rcParams["svg.fonttype"] = "none"


def line_chart(path: str | Path, x: Sequence[float], series: Mapping[str, Sequence[float]],
               *, title: str = "", xlabel: str = "round", ylabel: str = "",
               budgets: Optional[Mapping[str, float]] = None) -> Path:
    """One solid line per series plus a dashed horizontal line per budget."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, ys in series.items():
        ax.plot(x, ys, label=name, linewidth=1.2)
    for name, level in (budgets or {}).items():
        ax.axhline(level, linestyle="--", linewidth=1.0, color="0.4", label=name)
    ax.set_xlabel(xlabel)
    if ylabel:
        ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if series or budgets:
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out


def training_figures(out_dir: str | Path, rows: Sequence[Mapping[str, float]],
                     budgets=None) -> list[Path]:
    """Accuracy, bias and deviation curves over rounds for one run."""
    out_dir = Path(out_dir)
    x = [r["round"] for r in rows]
    col = lambda k: [r[k] for r in rows]  # noqa: E731
    made = [
        line_chart(out_dir / "accuracy.svg", x, {"avg_acc": col("avg_acc"), "std_acc": col("std_acc")},
                   title="test accuracy", ylabel="accuracy",
                   budgets={"eps_vl": budgets.eps_vl} if budgets else None),
        line_chart(out_dir / "bias.svg", x, {"avg_bias": col("avg_bias"), "max_bias": col("max_bias"),
                                             "std_bias": col("std_bias")},
                   title="test decision bias", ylabel="bias",
                   budgets={"eps_b": budgets.eps_b, "eps_vb": budgets.eps_vb} if budgets else None),
        line_chart(out_dir / "loss.svg", x, {"avg_loss": col("avg_loss"),
                                             "max_loss_dev": col("max_loss_dev")},
                   title="test loss", ylabel="loss"),
    ]
    return made


def sweep_figure(path: str | Path, parameter: str, values: Sequence[float],
                 table: Mapping[str, Sequence[float]]) -> Path:
    return line_chart(path, values, table, title=f"sensitivity to {parameter}", xlabel=parameter)
