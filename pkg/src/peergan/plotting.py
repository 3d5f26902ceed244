"""Figures written next to the CSV outputs: loss curves, image strips, distance matrices."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from .dataset import to_uint8

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

COLORS = {"loss_D": "#0072b2", "loss_G": "#d55e00", "r1": "#009e73", "L_direction": "#cc79a7", "p": "#555555"}


def _figure(width: float = 6.0, height: float | None = None, **kwargs) -> Figure:
    import matplotlib as mpl

    height = height or width * 0.62
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(width, height), **kwargs)
    fig.set_layout_engine("constrained")
    return fig


def plot_loss_curves(records: list[dict], path: str | Path) -> Path:
    """Adversarial losses, lazy regularizers and augmentation probability against step."""
    import matplotlib as mpl

    path = Path(path)
    with mpl.rc_context(STYLE):
        fig = _figure(7.0, 5.0)
        ax_adv, ax_reg, ax_p = fig.subplots(3, 1, sharex=True)
        steps = np.array([r["step"] for r in records])
        for key, ax in (("loss_D", ax_adv), ("loss_G", ax_adv), ("r1", ax_reg), ("L_direction", ax_reg)):
            pts = [(r["step"], r[key]) for r in records if r.get(key) is not None]
            if not pts:
                continue
            xs, ys = zip(*pts)
            marker = "o" if key in ("r1", "L_direction") else None
            ax.plot(xs, ys, color=COLORS[key], label=key, lw=0.9, marker=marker, ms=2.5)
        ax_p.plot(steps, [r["p"] for r in records], color=COLORS["p"], lw=0.9)
        ax_adv.set_ylabel("loss")
        ax_reg.set_ylabel("lazy terms")
        ax_p.set_ylabel("augment p")
        ax_p.set_ylim(-0.02, 1.02)
        ax_p.set_xlabel("step")
        for ax in (ax_adv, ax_reg):
            if ax.lines:
                ax.legend(loc="upper right", frameon=False)
        fig.savefig(path, dpi=120)
    return path


def plot_image_strip(frames, path: str | Path, title: str | None = None, labels: list[str] | None = None) -> Path:
    """One row of images (e.g. an interpolation path), frames ``[N, 3, R, R]`` in [-1, 1]."""
    import matplotlib as mpl

    path = Path(path)
    pixels = to_uint8(frames)
    n = len(pixels)
    with mpl.rc_context(STYLE):
        fig = _figure(1.1 * n, 1.4 if title else 1.2)
        axes = np.atleast_1d(fig.subplots(1, n))
        for i, (ax, img) in enumerate(zip(axes, pixels)):
            ax.imshow(img, interpolation="nearest")
            ax.set_axis_off()
            if labels:
                ax.set_title(labels[i], fontsize=7)
        if title:
            fig.suptitle(title)
        fig.savefig(path, dpi=120)
    return path


def plot_distance_matrix(matrix: np.ndarray, path: str | Path, title: str = "",
                         xlabel: str = "target", ylabel: str = "source") -> Path:
    import matplotlib as mpl

    path = Path(path)
    with mpl.rc_context(STYLE):
        fig = _figure(4.5, 3.8)
        ax = fig.subplots()
        im = ax.imshow(np.asarray(matrix), aspect="auto", cmap="viridis", interpolation="nearest")
        fig.colorbar(im, ax=ax, label="perceptual distance")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        fig.savefig(path, dpi=120)
    return path
