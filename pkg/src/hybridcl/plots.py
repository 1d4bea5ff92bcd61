"""Figures from aggregated run records: AvgWER and BWT against task index.

One figure per metric, one panel per channel, one line per (method, epochs)
with the min/max envelope across seeds shaded.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import CHANNELS  # noqa: E402

FIG_RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

YLABELS = {"avg_wer": "AvgWER", "bwt": "BWT", "current_wer": "WER on current task"}


def render_figures(summary: Sequence[dict], out_dir, fmt: str = "png") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(FIG_RC):
        for metric, ylabel in YLABELS.items():
            rows = [r for r in summary if r["metric"] == metric]
            if not rows:
                continue
            fig, axes = plt.subplots(1, len(CHANNELS), figsize=(11, 2.8), sharey=True)
            for ax, ch in zip(axes, CHANNELS):
                series = {}
                for r in rows:
                    if r["channel"] == ch:
                        series.setdefault((r["method"], r["epochs"]), []).append(r)
                for (method, epochs), pts in sorted(series.items()):
                    pts.sort(key=lambda r: r["k"])
                    ks = [p["k"] for p in pts]
                    line, = ax.plot(ks, [p["mean"] for p in pts], marker="o", ms=3,
                                    label=f"{method} ({epochs} ep)")
                    ax.fill_between(ks, [p["min"] for p in pts], [p["max"] for p in pts],
                                    color=line.get_color(), alpha=0.15, lw=0)
                ax.set_title(ch.replace("_", " "))
                ax.set_xlabel("after task k")
                if metric == "bwt":
                    ax.axhline(0.0, color="0.6", lw=0.6, ls="--")
            axes[0].set_ylabel(ylabel)
            axes[-1].legend(loc="best", frameon=False)
            fig.tight_layout()
            path = out_dir / f"{metric}.{fmt}"
            fig.savefig(path, dpi=150)
            plt.close(fig)
            written.append(path)
    return written
