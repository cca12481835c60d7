"""Figure export: portable graymaps, raw arrays, matplotlib panels.

PGM is the archival format (zero-dependency, bit-exact, diffable);
matplotlib PNGs sit alongside for human consumption.
"""

import numpy as np

from .wavesim import V_MAX, V_MIN


def _agg_pyplot():
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt
    return plt


def to_gray(grid, lo=V_MIN, hi=V_MAX):
    """Map values in [lo, hi] to uint8 levels 0..255 (clipped)."""
    grid = np.asarray(grid, dtype=np.float64)
    if hi <= lo:
        raise ValueError(f"bad gray range [{lo}, {hi}]")
    scaled = np.clip((grid - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def write_pgm(path, grid, lo=V_MIN, hi=V_MAX):
    """Binary P5 graymap of a 2D array scaled from [lo, hi]."""
    g = np.asarray(grid)
    if g.ndim != 2:
        raise ValueError(f"pgm export needs a 2D array, got {g.shape}")
    levels = to_gray(g, lo, hi)
    h, w = levels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())


def read_pgm(path):
    """Levels 0..255 as uint8; accepts only what write_pgm produces."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not a P5/255 graymap")
    w, h = (int(t) for t in parts[1].split())
    levels = np.frombuffer(parts[3], dtype=np.uint8)
    if levels.size != w * h:
        raise ValueError(f"{path}: payload {levels.size}, expected {w * h}")
    return levels.reshape(h, w)


def save_array(path, grid):
    """Raw array alongside the rendered exports."""
    np.save(path, np.asarray(grid))


def velocity_png(path, grids, titles=None, lo=V_MIN, hi=V_MAX):
    """One row of velocity-map panels with a shared colorbar."""
    grids = [np.asarray(g) for g in grids]
    if not grids:
        raise ValueError("no maps to draw")
    titles = titles or [""] * len(grids)
    if len(titles) != len(grids):
        raise ValueError("titles must match maps")
    plt = _agg_pyplot()
    fig, axes = plt.subplots(1, len(grids),
                             figsize=(3.2 * len(grids), 3.0), squeeze=False)
    for ax, g, title in zip(axes[0], grids, titles):
        im = ax.imshow(g, vmin=lo, vmax=hi, cmap="viridis")
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[0], shrink=0.85, label="velocity (m/s)")
    fig.savefig(path, dpi=110)
    plt.close(fig)


def gather_png(path, traces, title="shot gather"):
    """Time-by-receiver image of one shot, symmetric gray scale."""
    traces = np.asarray(traces)
    if traces.ndim != 2:
        raise ValueError(f"expected (T, R) traces, got {traces.shape}")
    plt = _agg_pyplot()
    amp = np.abs(traces).max() or 1.0
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    ax.imshow(traces, aspect="auto", cmap="gray", vmin=-amp, vmax=amp)
    ax.set_title(title)
    ax.set_xlabel("receiver")
    ax.set_ylabel("time sample")
    fig.savefig(path, dpi=110)
    plt.close(fig)


def curve_png(path, xs, ys, xlabel, ylabel, title=""):
    """Single line plot, used for loss/reward/residual trajectories."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("curve needs matching 1D x and y")
    plt = _agg_pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xs, ys, marker="o", markersize=2.5, linewidth=1.0)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
