"""Figures from solver run directories, CSV in and PNG out.

Five layouts cover what the solvers leave behind: a loss curve from any
run, learned-vs-reference control overlays from control grids, tracked
X/Y path overlays from trajectory files, and a surface or contour view
of the density grid. The overlay convention is fixed everywhere: the
learned layer is dots (controls) or full lines (trajectories), the
reference layer is dashed lines.

This module is deliberately dumb. It reads exactly the CSV files its
FigureSpec names, checks their headers, and draws; nothing is recomputed
from model definitions, so a figure is honest about what the run
actually produced. Rendering is deterministic: same input files, same
pixels.

All readers take a `required` column list and fail naming the first
missing column, which turns the usual genfromtxt key-error archaeology
into a one-line message pointing at the offending file.
"""

import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIGURE_KINDS = ("control-overlay", "trajectory-overlay", "density-surface",
                "density-contour", "loss-curve")

# dgm loss histories carry per-residual columns next to the total; they
# are drawn thin when present and ignored when absent
_PART_COLUMNS = ("kfp", "kfp0", "hjb", "hjb_t")

_DPI = 150


class FigureError(ValueError):
    """Bad figure request: missing file, missing column, ragged grid."""


@dataclass
class FigureSpec:
    """What to draw: a kind, the CSV path for each role the kind
    consumes, and where the image goes."""

    kind: str
    inputs: dict
    out: str


def spec_for(kind, input_dir, out, oracle_dir=None):
    """Map run directories onto the file roles `kind` consumes.

    The reference directory defaults to the input directory, which turns
    the overlay kinds into self-comparisons (the two layers must then
    coincide, a cheap sanity check on a finished run).
    """
    odir = oracle_dir or input_dir
    j = os.path.join
    if kind == "loss-curve":
        inputs = {"loss": j(input_dir, "loss_history.csv")}
    elif kind == "control-overlay":
        inputs = {"learned": j(input_dir, "control_grid.csv"),
                  "oracle": j(odir, "control_grid.csv")}
    elif kind == "trajectory-overlay":
        inputs = {"learned_x": j(input_dir, "trajX.csv"),
                  "learned_y": j(input_dir, "trajY.csv"),
                  "oracle_x": j(odir, "trajX.csv"),
                  "oracle_y": j(odir, "trajY.csv")}
    elif kind in ("density-surface", "density-contour"):
        inputs = {"density": j(input_dir, "density_grid.csv")}
    else:
        raise FigureError(f"unknown figure kind {kind!r} "
                          f"(expected one of {', '.join(FIGURE_KINDS)})")
    return FigureSpec(kind=kind, inputs=inputs, out=out)


# ---------------------------------------------------------------------------
# CSV access
# ---------------------------------------------------------------------------

def read_csv(path, required):
    """Columns of a header-row CSV as {name: float array}; every name in
    `required` must be present or the error says which one is not."""
    if not os.path.exists(path):
        raise FigureError(f"{path}: no such file")
    with open(path) as fh:
        header = fh.readline().strip()
    names = [c.strip() for c in header.split(",")]
    for col in required:
        if col not in names:
            raise FigureError(f"{path}: missing column {col!r} "
                              f"(header has {', '.join(names)})")
    data = np.genfromtxt(path, delimiter=",", names=True)
    if data.size == 0:
        raise FigureError(f"{path}: no data rows")
    return {n: np.atleast_1d(np.asarray(data[n], dtype=np.float64))
            for n in data.dtype.names}


def pivot_grid(path, value):
    """Long-format (t, x, value) rows -> (times, xs, grid[i_t, i_x]).

    The writers emit full rectangular grids; anything else is refused
    rather than silently interpolated.
    """
    d = read_csv(path, ("t", "x", value))
    t, x, v = d["t"], d["x"], d[value]
    times, xs = np.unique(t), np.unique(x)
    grid = np.full((times.size, xs.size), np.nan)
    grid[np.searchsorted(times, t), np.searchsorted(xs, x)] = v
    if np.isnan(grid).any() or times.size * xs.size != t.size:
        raise FigureError(f"{path}: ragged (t, x) grid "
                          f"({t.size} rows, {times.size} x {xs.size} lattice)")
    return times, xs, grid


def _snapshot_times(times, k=3):
    """Up to k row indices spread across the time range, ends included."""
    if times.size <= k:
        return list(range(times.size))
    return sorted({0, (times.size - 1) // 2, times.size - 1})


# ---------------------------------------------------------------------------
# per-kind drawing; each takes the already-loaded data so layer_images can
# reuse it with one layer switched off
# ---------------------------------------------------------------------------

def _load_control(spec):
    lt, lx, lv = pivot_grid(spec.inputs["learned"], "control")
    ot, ox, ov = pivot_grid(spec.inputs["oracle"], "control")
    rows = []
    for i in _snapshot_times(lt):
        j = int(np.argmin(np.abs(ot - lt[i])))
        rows.append((lt[i], lx, lv[i], ox, ov[j]))
    return rows


def _draw_control(ax, rows, layers=("learned", "oracle")):
    colors = plt.cm.viridis(np.linspace(0.0, 0.85, len(rows)))
    for (tv, xl, vl, xo, vo), c in zip(rows, colors):
        if "learned" in layers:
            ax.plot(xl, vl, "o", ms=3.5, color=c, label=f"learned  t={tv:g}")
        if "oracle" in layers:
            ax.plot(xo, vo, "--", lw=1.6, color=c, label=f"reference t={tv:g}")
    ax.set_xlabel("x")
    ax.set_ylabel("control")


def _load_traj(spec, role):
    d = read_csv(spec.inputs[role], ("t", "particle", "value"))
    series = []
    for pid in np.unique(d["particle"]):
        sel = d["particle"] == pid
        order = np.argsort(d["t"][sel])
        series.append((pid, d["t"][sel][order], d["value"][sel][order]))
    return series


def _draw_traj(ax, learned, oracle, layers=("learned", "oracle")):
    colors = plt.cm.tab10(np.arange(10) % 10)
    for k, (pid, t, v) in enumerate(learned):
        if "learned" in layers:
            ax.plot(t, v, "-", lw=1.5, color=colors[k % 10],
                    label=f"learned {pid:g}")
    for k, (pid, t, v) in enumerate(oracle):
        if "oracle" in layers:
            ax.plot(t, v, "--", lw=1.4, color=colors[k % 10],
                    label=f"reference {pid:g}")
    ax.set_xlabel("t")


# ---------------------------------------------------------------------------
# figure assembly
# ---------------------------------------------------------------------------

def build_figure(spec):
    """The matplotlib Figure for a spec, not yet written to disk. Split
    from render so tests can poke at artists instead of decoding pixels."""
    if spec.kind == "loss-curve":
        d = read_csv(spec.inputs["loss"], ("iteration", "loss"))
        order = np.argsort(d["iteration"])
        it, loss = d["iteration"][order], d["loss"][order]
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        marker = "o" if it.size <= 50 else None
        ax.plot(it, loss, "-", lw=1.6, marker=marker, label="total")
        for name in _PART_COLUMNS:
            if name in d:
                ax.plot(it, d[name][order], lw=0.9, alpha=0.7, label=name)
        if (loss > 0).all():
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(loc="best", fontsize=8)
    elif spec.kind == "control-overlay":
        rows = _load_control(spec)
        fig, ax = plt.subplots(figsize=(6.4, 4.6))
        _draw_control(ax, rows)
        ax.legend(loc="best", fontsize=8)
    elif spec.kind == "trajectory-overlay":
        lx, ly = _load_traj(spec, "learned_x"), _load_traj(spec, "learned_y")
        ox, oy = _load_traj(spec, "oracle_x"), _load_traj(spec, "oracle_y")
        fig, (ax_x, ax_y) = plt.subplots(2, 1, figsize=(6.4, 6.4),
                                         sharex=True)
        _draw_traj(ax_x, lx, ox)
        _draw_traj(ax_y, ly, oy)
        ax_x.set_ylabel("X")
        ax_y.set_ylabel("Y")
        ax_x.legend(loc="best", fontsize=7, ncol=2)
    elif spec.kind == "density-surface":
        times, xs, grid = pivot_grid(spec.inputs["density"], "density")
        fig = plt.figure(figsize=(7.0, 5.2))
        ax = fig.add_subplot(projection="3d")
        tg, xg = np.meshgrid(times, xs, indexing="ij")
        ax.plot_surface(tg, xg, grid, cmap="viridis", linewidth=0.2,
                        antialiased=True)
        ax.set_xlabel("t")
        ax.set_ylabel("x")
        ax.set_zlabel("density")
    elif spec.kind == "density-contour":
        times, xs, grid = pivot_grid(spec.inputs["density"], "density")
        fig, ax = plt.subplots(figsize=(6.4, 4.6))
        cs = ax.contourf(times, xs, grid.T, levels=30, cmap="viridis")
        fig.colorbar(cs, ax=ax, label="density")
        ax.set_xlabel("t")
        ax.set_ylabel("x")
    else:
        raise FigureError(f"unknown figure kind {spec.kind!r} "
                          f"(expected one of {', '.join(FIGURE_KINDS)})")
    fig.set_dpi(_DPI)
    return fig


def render(spec):
    """Write the figure and return its path."""
    fig = build_figure(spec)
    parent = os.path.dirname(os.path.abspath(spec.out))
    os.makedirs(parent, exist_ok=True)
    fig.savefig(spec.out, dpi=_DPI)
    plt.close(fig)
    return spec.out


def layer_images(spec):
    """The two overlay layers rendered separately, as RGBA uint8 arrays on
    identical axes (no legend, shared limits). This is the hook behind the
    coincidence check on self-compared runs: when learned == reference the
    dot ink and the dash ink must trace the same curves, so each layer's
    ink has to sit within a few pixels of the other's."""
    if spec.kind == "control-overlay":
        rows = _load_control(spec)
        draw = lambda ax, layer: _draw_control(ax, rows, layers=(layer,))
        size = (6.4, 4.6)
    elif spec.kind == "trajectory-overlay":
        lx, ox = _load_traj(spec, "learned_x"), _load_traj(spec, "oracle_x")
        draw = lambda ax, layer: _draw_traj(
            ax, lx if layer == "learned" else [], ox if layer == "oracle" else [])
        size = (6.4, 4.2)
    else:
        raise FigureError(f"{spec.kind!r} is not an overlay kind")

    # fix limits from a throwaway joint render so the layers align
    fig, ax = plt.subplots(figsize=size)
    draw(ax, "learned")
    draw(ax, "oracle")
    xlim, ylim = ax.get_xlim(), ax.get_ylim()
    plt.close(fig)

    out = {}
    for layer in ("learned", "oracle"):
        fig, ax = plt.subplots(figsize=size)
        draw(ax, layer)
        ax.set_xlim(xlim)
        ax.set_ylim(ylim)
        ax.set_axis_off()      # data ink only; chrome would always coincide
        fig.canvas.draw()
        out[layer] = np.asarray(fig.canvas.buffer_rgba()).copy()
        plt.close(fig)
    return out
