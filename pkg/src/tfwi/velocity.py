"""Procedural velocity-map families, normalization, and map mixing.

Four families: flat layers, curved layers, faulted layers, and a
high-velocity inclusion family reserved for zero-shot evaluation. Each
family has a deterministic low-level constructor (used directly by the
oracle tests) plus a sampler that draws parameters from a seeded stream.
"""

import numpy as np

from .wavesim import V_MAX, V_MIN, VelocityMap

FAMILIES = ("flat-layers", "curved-layers", "faulted-layers", "inclusion")


class NormalizationSpec:
    """Affine map between physical velocity and the [-1, 1] range."""

    def __init__(self, v_min=V_MIN, v_max=V_MAX):
        if v_max <= v_min:
            raise ValueError(f"bad range [{v_min}, {v_max}]")
        self.v_min = float(v_min)
        self.v_max = float(v_max)
        self.mid = 0.5 * (v_min + v_max)
        self.half = 0.5 * (v_max - v_min)

    def normalize(self, v):
        return (np.asarray(v, dtype=np.float64) - self.mid) / self.half

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.half + self.mid


class FamilySpec:
    """Parameter ranges for one velocity-map family."""

    def __init__(self, family, layer_range=(3, 6), ordered=True,
                 dip_range=(-0.6, 0.6), throw_range=(3, 10),
                 inclusion_velocity_range=(4000.0, 4500.0),
                 inclusion_radius_range=(6, 14), seed=0):
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r}, expected one of {FAMILIES}")
        if layer_range[0] < 2 or layer_range[1] < layer_range[0]:
            raise ValueError(f"layer_range must be >= 2 and ordered, got {layer_range}")
        if inclusion_velocity_range[0] < 4000.0:
            raise ValueError("inclusion velocity must be >= 4000 m/s")
        self.family = family
        self.layer_range = tuple(layer_range)
        self.ordered = bool(ordered)
        self.dip_range = tuple(dip_range)
        self.throw_range = tuple(throw_range)
        self.inclusion_velocity_range = tuple(inclusion_velocity_range)
        self.inclusion_radius_range = tuple(inclusion_radius_range)
        self.seed = int(seed)


# ---------------------------------------------------------------------------
# deterministic constructors


def layered_grid(interfaces, velocities, shape=(70, 70)):
    """Horizontal bands: layer k spans rows [interfaces[k-1], interfaces[k])."""
    H, W = shape
    interfaces = list(interfaces)
    if len(velocities) != len(interfaces) + 1:
        raise ValueError("need len(velocities) == len(interfaces) + 1")
    if any(b <= a for a, b in zip(interfaces, interfaces[1:])):
        raise ValueError("interfaces must be strictly increasing")
    profile = np.empty(H)
    bounds = [0] + interfaces + [H]
    for k, vel in enumerate(velocities):
        profile[bounds[k]:bounds[k + 1]] = vel
    return np.tile(profile[:, None], (1, W))


def curved_grid(interface_rows, velocities, shape=(70, 70)):
    """Bands whose interfaces vary per column.

    interface_rows: (n_layers-1, W) array of interface depths; rendered
    with non-crossing enforced top-down.
    """
    H, W = shape
    rows = np.asarray(interface_rows, dtype=np.float64)
    if rows.shape != (len(velocities) - 1, W):
        raise ValueError(f"interface_rows shape {rows.shape} does not match "
                         f"{len(velocities) - 1} interfaces over width {W}")
    rows = np.clip(rows, 0, H)
    rows = np.maximum.accumulate(rows, axis=0)
    depth = np.arange(H)[:, None]
    grid = np.full((H, W), float(velocities[0]))
    for k in range(rows.shape[0]):
        grid[depth >= rows[k][None, :]] = velocities[k + 1]
    return grid


def faulted_grid(interfaces, velocities, x0, dip, throw, shape=(70, 70)):
    """Flat layers sheared by `throw` rows on the right of a dipping trace.

    The trace passes through column x0 at row 0 with slope `dip` columns
    per row; right-side cells take the profile shifted up by throw rows.
    """
    H, W = shape
    base = layered_grid(interfaces, velocities, shape)
    profile = base[:, 0]
    shifted = profile[np.clip(np.arange(H) - int(throw), 0, H - 1)]
    cols = np.arange(W)[None, :]
    trace = x0 + dip * np.arange(H)[:, None]
    out = base.copy()
    right = cols > trace
    out[right] = np.tile(shifted[:, None], (1, W))[right]
    return out


def inclusion_grid(background, center, radii, angle, inc_velocity):
    """Stamp a rotated elliptical body of inc_velocity into background."""
    H, W = background.shape
    ci, cj = center
    a, b = radii
    ii, jj = np.mgrid[0:H, 0:W]
    u = (ii - ci) * np.cos(angle) + (jj - cj) * np.sin(angle)
    w = -(ii - ci) * np.sin(angle) + (jj - cj) * np.cos(angle)
    mask = (u / a) ** 2 + (w / b) ** 2 <= 1.0
    out = background.copy()
    out[mask] = inc_velocity
    return out


# ---------------------------------------------------------------------------
# samplers


def _draw_interfaces(rng, n_layers, H):
    """n_layers-1 strictly increasing interior rows with gaps >= 2."""
    slots = (H - 2) // 2
    if n_layers - 1 > slots:
        raise ValueError(
            f"infeasible: {n_layers} layers do not fit {H} grid rows")
    picks = rng.choice(slots, size=n_layers - 1, replace=False)
    return sorted(2 * np.sort(picks) + 2)


def _draw_velocities(rng, n_layers, ordered):
    v = rng.uniform(V_MIN, V_MAX, n_layers)
    return np.sort(v) if ordered else v


def generate_velocity(spec, seed, shape=(70, 70), dx=10.0):
    """Pure function of (spec, seed) -> VelocityMap."""
    H, W = shape
    rng = np.random.default_rng([spec.seed, int(seed)])
    lo, hi = spec.layer_range
    n_layers = int(rng.integers(lo, hi + 1))
    if n_layers > H // 2:
        raise ValueError(f"infeasible: {n_layers} layers on {H} rows")
    interfaces = _draw_interfaces(rng, n_layers, H)
    vels = _draw_velocities(rng, n_layers, spec.ordered)

    if spec.family == "flat-layers":
        grid = layered_grid(interfaces, vels, shape)
    elif spec.family == "curved-layers":
        amp = rng.uniform(2.0, 6.0, (n_layers - 1, 1))
        freq = rng.uniform(0.5, 1.5, (n_layers - 1, 1))
        phase = rng.uniform(0.0, 2 * np.pi, (n_layers - 1, 1))
        tilt = rng.uniform(-0.15, 0.15, (n_layers - 1, 1))
        j = np.arange(W)[None, :]
        rows = (np.asarray(interfaces, dtype=np.float64)[:, None]
                + amp * np.sin(2 * np.pi * freq * j / W + phase) + tilt * j)
        grid = curved_grid(rows, vels, shape)
    elif spec.family == "faulted-layers":
        x0 = rng.uniform(0.2 * W, 0.8 * W)
        dip = rng.uniform(*spec.dip_range)
        throw = int(rng.integers(spec.throw_range[0], spec.throw_range[1] + 1))
        grid = faulted_grid(interfaces, vels, x0, dip, throw, shape)
    elif spec.family == "inclusion":
        # few gentle background layers, then the compact fast body
        bg_vels = np.sort(rng.uniform(V_MIN, 3500.0, n_layers))
        grid = layered_grid(interfaces, bg_vels, shape)
        r_lo, r_hi = spec.inclusion_radius_range
        center = (rng.uniform(0.3 * H, 0.8 * H), rng.uniform(0.2 * W, 0.8 * W))
        radii = (rng.uniform(r_lo, r_hi), rng.uniform(r_lo, r_hi))
        inc_v = rng.uniform(*spec.inclusion_velocity_range)
        grid = inclusion_grid(grid, center, radii,
                              rng.uniform(0, np.pi), inc_v)
    else:  # pragma: no cover - FamilySpec already validates
        raise ValueError(spec.family)

    return VelocityMap(np.clip(grid, V_MIN, V_MAX), dx=dx)


def hybrid_mix(a, b, seed, blend_width=3):
    """Splice a depth- or lateral-split region of b into a.

    The split axis and position come from the seed; the two sides are
    joined by a convex ramp blend_width+1 cells wide.
    """
    if a.grid.shape != b.grid.shape:
        raise ValueError(f"shapes differ: {a.grid.shape} vs {b.grid.shape}")
    rng = np.random.default_rng(int(seed))
    axis = int(rng.integers(0, 2))
    H, W = a.grid.shape
    n = H if axis == 0 else W
    split = int(rng.integers(3, n - 3))
    mixed = mix_at(a.grid, b.grid, axis, split, blend_width)
    return VelocityMap(np.clip(mixed, V_MIN, V_MAX), dx=a.dx)


def mix_at(ga, gb, axis, split, blend_width=3):
    """Deterministic core of hybrid_mix: b takes over past `split`."""
    n = ga.shape[axis]
    if split <= 0:
        return gb.copy()
    if split >= n:
        return ga.copy()
    idx = np.arange(n, dtype=np.float64)
    w = np.clip((idx - split + 2.0) / (blend_width + 2.0), 0.0, 1.0)
    shape = (n, 1) if axis == 0 else (1, n)
    w = w.reshape(shape)
    return (1.0 - w) * ga + w * gb


def distribution_stats(real, synth):
    """Moment distances between two map collections.

    Returns per-pixel mean/variance distances plus the depth-averaged
    velocity profile of each set (for eyeballing augmentation quality).
    """
    if not real or not synth:
        raise ValueError("need non-empty map sets")
    r = np.stack([m.grid for m in real])
    s = np.stack([m.grid for m in synth])
    mean_r, mean_s = r.mean(axis=0), s.mean(axis=0)
    var_r, var_s = r.var(axis=0), s.var(axis=0)
    return {
        "mean_distance": float(np.abs(mean_r - mean_s).mean()),
        "var_distance": float(np.abs(var_r - var_s).mean()),
        "depth_profile_real": mean_r.mean(axis=1),
        "depth_profile_synth": mean_s.mean(axis=1),
    }
