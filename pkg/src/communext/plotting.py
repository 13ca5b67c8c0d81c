"""PNG rendering of SS maps, error maps, masks and metric box plots.

Fixed colour ramps: signal strength -160 dBm (black) to -30 dBm (white);
absolute error 0 dB (black) upwards on ``inferno``.
"""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.colors import ListedColormap
from matplotlib.figure import Figure

from .propagation import CANONICAL_ANGLES

SS_RANGE = (-160.0, -30.0)
ERROR_MAX_DB = 30.0
DPI = 100

MASK_CMAP = ListedColormap(["#2ca02c", "#d62728", "#404040"])  # LoS, NLoS, building


def _save(fig: Figure, path, tag: str | None) -> None:
    FigureCanvasAgg(fig)
    meta = {"Software": None}
    if tag:
        meta["Description"] = tag
    fig.savefig(path, dpi=DPI, metadata=meta)


def _grid(maps, titles, cmap, vmin, vmax, label, suptitle):
    fig = Figure(figsize=(12, 6.4))
    axes = fig.subplots(2, 4)
    im = None
    for ax, m, t in zip(axes.ravel(), maps, titles):
        im = ax.imshow(m, cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
        ax.set_title(t, fontsize=10)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.8, label=label)
    if suptitle:
        fig.suptitle(suptitle)
    return fig


def render_ss_maps(maps, path, title: str = "", tag: str | None = None) -> None:
    """Eight directional SS maps (8, H, W) in dBm on the fixed grey ramp."""
    titles = [f"{a}\N{DEGREE SIGN}" for a in CANONICAL_ANGLES]
    _save(_grid(maps, titles, "gray", *SS_RANGE, "SS (dBm)", title), path, tag)


def render_error_maps(errors, path, title: str = "", tag: str | None = None) -> None:
    titles = [f"|err| {a}\N{DEGREE SIGN}" for a in CANONICAL_ANGLES]
    _save(_grid(errors, titles, "inferno", 0.0, ERROR_MAX_DB, "absolute error (dB)", title),
          path, tag)


def render_scene(heights, classes, coverage, path, tx=None, tag: str | None = None) -> None:
    """Building heights, LoS/NLoS classes and the 3.5 GHz coverage map side by side."""
    fig = Figure(figsize=(12, 4))
    a0, a1, a2 = fig.subplots(1, 3)
    im = a0.imshow(heights, cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=a0, shrink=0.8, label="height (m)")
    a0.set_title("buildings")
    a1.imshow(classes, cmap=MASK_CMAP, vmin=-0.5, vmax=2.5, interpolation="nearest")
    a1.set_title("LoS (green) / NLoS (red)")
    im = a2.imshow(coverage, cmap="gray", vmin=SS_RANGE[0], vmax=SS_RANGE[1],
                   interpolation="nearest")
    fig.colorbar(im, ax=a2, shrink=0.8, label="SS (dBm)")
    a2.set_title("3.5 GHz coverage")
    for ax in (a0, a1, a2):
        ax.set_xticks([])
        ax.set_yticks([])
        if tx is not None:
            ax.plot(tx[1], tx[0], marker="^", color="white", markeredgecolor="black")
    _save(fig, path, tag)


def render_boxplot(groups: dict[str, list[float]], path, metric: str = "MAE",
                   tag: str | None = None) -> None:
    """Per-map metric distributions, whiskers at 1.5 IQR."""
    fig = Figure(figsize=(1.8 + 1.4 * len(groups), 4))
    ax = fig.subplots()
    labels = list(groups)
    data = [np.asarray([v for v in groups[k] if v is not None], dtype=float) for k in labels]
    ax.boxplot(data, whis=1.5)
    ax.set_xticks(range(1, len(labels) + 1), labels)
    ax.set_ylabel(f"{metric} (dB)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path, tag)


def render_loss_trace(trace: list[dict], path, tag: str | None = None) -> None:
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    steps = [r["step"] for r in trace if "total" in r]
    ax.semilogy(steps, [r["total"] for r in trace if "total" in r], label="train total")
    ax.semilogy(steps, [r["ss"] for r in trace if "total" in r], label="train L_SS", alpha=0.7)
    val = [(r["step"], r["val"]) for r in trace if "val" in r]
    if val:
        ax.semilogy(*zip(*val), "o-", label="validation")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    _save(fig, path, tag)
