"""Matplotlib figures written next to the CSV/text outputs.

Everything renders through the Agg canvas to SVG with a fixed hash salt and
no date stamp, so reruns produce identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "gatets",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (7.0, 3.2),
}


def set_id(experts: Sequence[int]) -> str:
    return "expert-set-" + "-".join(str(int(e)) for e in sorted(experts))


def set_colors(sets: Sequence[tuple[int, ...]]) -> dict[tuple[int, ...], str]:
    """One distinct hex color per expert set, in order of first appearance."""
    unique = list(dict.fromkeys(tuple(sorted(s)) for s in sets))
    n = len(unique)
    if n <= 20:
        cmap = plt.get_cmap("tab20")
        palette = [cmap(i) for i in range(n)]
    else:
        cmap = plt.get_cmap("hsv")
        palette = [cmap(i / n) for i in range(n)]
    return {s: matplotlib.colors.to_hex(c) for s, c in zip(unique, palette)}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def route_trace_figure(steps, actual, forecast, sets: Sequence[tuple[int, ...]], path) -> Path:
    """Actual series in grey; one-step forecasts colored by the active expert set."""
    colors = set_colors(sets)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, actual, color="0.6", lw=1.0, label="actual", gid="actual")
        ax.plot(steps, forecast, color="0.2", lw=0.6, alpha=0.5, gid="forecast-line")
        keyed = [tuple(sorted(s)) for s in sets]
        steps = np.asarray(steps)
        forecast = np.asarray(forecast)
        for s, color in colors.items():
            sel = np.array([k == s for k in keyed])
            ax.scatter(steps[sel], forecast[sel], s=9, color=color, label="{" + ",".join(map(str, s)) + "}",
                       gid=set_id(s), zorder=3)
        ax.set_xlabel("step")
        ax.set_ylabel("value")
        if len(colors) <= 12:
            ax.legend(title="experts", ncol=2, frameon=False, title_fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def forecast_figure(actual: np.ndarray, forecast: np.ndarray, path, title: str = "") -> Path:
    """First-step forecasts against actuals across consecutive windows."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(actual[:, 0], color="0.6", lw=1.0, label="actual")
        ax.plot(forecast[:, 0], color="C0", lw=0.9, label="forecast (step 1)")
        ax.set_xlabel("window")
        ax.set_ylabel("value")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def history_figure(epochs: Sequence[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = [r["epoch"] for r in epochs]
        ax.semilogy(x, [r["train_loss"] for r in epochs], label="train")
        if epochs and "val_loss" in epochs[0]:
            ax.semilogy(x, [r["val_loss"] for r in epochs], label="val")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE (normalized)")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
