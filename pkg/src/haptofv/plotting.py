"""Figures written next to the CSV outputs.

Figures are drawn on explicit Agg canvases, so no global backend is touched
and plotting is safe from worker threads.
"""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path

import matplotlib as mpl
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

__all__ = ["RC", "style", "plot_state", "plot_diagnostics", "plot_loglog", "plot_series"]

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
COLUMN_WIDTH = 3.4
PAGE_WIDTH = 7.1
COLORS = ["#08589e", "#d55e00", "#2b8cbe", "#73b55b", "#cc79a7", "#909090"]

RC = {
    "axes.prop_cycle": mpl.cycler(color=COLORS),
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "axes.linewidth": 0.8,
    "font.family": "serif",
    "font.size": 8,
    "mathtext.fontset": "stix",
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "lines.linewidth": 1.0,
    "lines.markersize": 3,
    "savefig.dpi": 200,
    "savefig.bbox": "tight",
}


@contextmanager
def style():
    with mpl.rc_context(RC):
        yield


def _figure(width: float, height: float, ncols: int = 1, nrows: int = 1):
    fig = Figure(figsize=(width, height))
    FigureCanvasAgg(fig)
    axes = fig.subplots(nrows, ncols, squeeze=False)
    return fig, axes


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    return path


def _hide_right_top(ax) -> None:
    for side in ("right", "top"):
        ax.spines[side].set_visible(False)


def plot_state(state, grid, path, title: str = "") -> Path:
    """Side-by-side maps of ``u`` and ``w`` (inactive cells blank)."""
    with style():
        fig, axes = _figure(PAGE_WIDTH, PAGE_WIDTH * 0.42, ncols=2)
        x0, y0 = grid.origin
        ext = (x0, x0 + grid.extent[0], y0, y0 + grid.extent[1])
        for ax, name, arr, cmap in ((axes[0, 0], "u", state.u, "viridis"), (axes[0, 1], "w", state.w, "magma")):
            data = np.ma.masked_where(~grid.mask, arr)
            im = ax.imshow(data.T, origin="lower", extent=ext, cmap=cmap, interpolation="nearest")
            ax.set_xlabel("$x$")
            ax.set_ylabel("$y$")
            ax.set_title(f"${name}$" + (f", {title}" if title else ""))
            fig.colorbar(im, ax=ax, shrink=0.85)
        return _save(fig, path)


def plot_diagnostics(columns: dict, path) -> Path:
    """Mass against its bound, extrema of ``w``, and the energy terms."""
    t = np.asarray(columns["t"])
    with style():
        fig, axes = _figure(PAGE_WIDTH, PAGE_WIDTH * GOLDEN * 0.55, ncols=3)
        ax = axes[0, 0]
        ax.plot(t, columns["mass"], label="mass")
        ax.plot(t, np.asarray(columns["mass"]) + np.asarray(columns["mass_bound_margin"]), "--", label="bound")
        ax.set_xlabel("$t$")
        ax.legend()
        ax = axes[0, 1]
        ax.plot(t, columns["u_max"], label=r"$\max u$")
        ax.plot(t, columns["w_max"], label=r"$\max w$")
        ax.plot(t, columns["w_min"], label=r"$\min w$")
        ax.set_xlabel("$t$")
        ax.legend()
        ax = axes[0, 2]
        for key in ("E1", "E2", "Dsp1", "Dsp2"):
            ax.plot(t, columns[key], label=key)
        ax.set_xlabel("$t$")
        ax.legend()
        for a in axes.ravel():
            _hide_right_top(a)
        return _save(fig, path)


def plot_loglog(x, y, path, xlabel: str, ylabel: str, slope: float | None = None) -> Path:
    """Log-log convergence plot, optionally with a reference slope."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    with style():
        fig, axes = _figure(COLUMN_WIDTH, COLUMN_WIDTH * GOLDEN)
        ax = axes[0, 0]
        keep = y > 0
        if keep.any():
            ax.loglog(x[keep], y[keep], "o-")
            if slope is not None:
                ref = y[keep][0] * (x[keep] / x[keep][0]) ** slope
                ax.loglog(x[keep], ref, ":", color="0.5", label=f"slope {slope:g}")
                ax.legend()
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        _hide_right_top(ax)
        return _save(fig, path)


def plot_series(x, series: dict, path, xlabel: str, ylabel: str = "", logy: bool = False) -> Path:
    with style():
        fig, axes = _figure(COLUMN_WIDTH, COLUMN_WIDTH * GOLDEN)
        ax = axes[0, 0]
        for label, y in series.items():
            ax.plot(x, y, "o-", label=label)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend()
        _hide_right_top(ax)
        return _save(fig, path)
