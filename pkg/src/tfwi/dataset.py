"""Paired velocity/seismic dataset persistence.

A dataset directory holds one plain-text manifest plus two raw payload
files (little-endian float32): velocity maps and seismic gathers, in
manifest order. Compute stays float64; storage is float32, and the
pair-consistency guarantee is at storage precision.
"""

import concurrent.futures
import hashlib
import os

import numpy as np

from .wavesim import AcquisitionGeometry, SeismicGather, simulate_forward

MANIFEST_NAME = "manifest.txt"
VELOCITY_NAME = "velocity.f32"
GATHER_NAME = "gathers.f32"
FORMAT_VERSION = 1
TRAIN_FRACTION = 0.9


def split_of(seed):
    """Deterministic 90/10 train/val assignment by seed hash."""
    digest = hashlib.sha256(str(int(seed)).encode("ascii")).digest()
    frac = int.from_bytes(digest[:4], "big") / 2 ** 32
    return "train" if frac < TRAIN_FRACTION else "val"


class ManifestError(ValueError):
    """Manifest missing, malformed, or inconsistent with the payloads."""


def _geometry_fields(geom, dx):
    return {
        "dx": repr(float(dx)),
        "dt": repr(geom.dt),
        "f_peak": repr(geom.f_peak),
        "t0": repr(geom.t0),
        "source_amp": repr(geom.source_amp),
        "sponge_width": str(geom.sponge_width),
        "source_cols": ",".join(str(c) for c in geom.source_cols),
        "receiver_cols": ",".join(str(c) for c in geom.receiver_cols),
    }


def write_manifest(path, header, samples):
    lines = [f"{k}={v}" for k, v in header.items()]
    for i, s in enumerate(samples):
        lines.append(f"sample.{i}={s['family']},{s['seed']},{s['augmented']},"
                     f"{s['split']},{s['voffset']},{s['goffset']}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path):
    if not os.path.exists(path):
        raise ManifestError(f"no manifest at {path}")
    header = {}
    samples = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ManifestError(f"malformed manifest line: {line!r}")
            key, val = line.split("=", 1)
            if key.startswith("sample."):
                idx = int(key.split(".", 1)[1])
                family, seed, aug, split, voff, goff = val.split(",")
                samples.append((idx, {"family": family, "seed": int(seed),
                                      "augmented": int(aug), "split": split,
                                      "voffset": int(voff), "goffset": int(goff)}))
            else:
                header[key] = val
    samples.sort(key=lambda t: t[0])
    if [i for i, _ in samples] != list(range(len(samples))):
        raise ManifestError("sample indices are not contiguous from 0")
    return header, [s for _, s in samples]


class Dataset:
    """Read-only view over a dataset directory; payloads are memmapped."""

    def __init__(self, directory):
        self.directory = directory
        header, samples = read_manifest(os.path.join(directory, MANIFEST_NAME))
        if int(header.get("version", -1)) != FORMAT_VERSION:
            raise ManifestError(f"unsupported version {header.get('version')}")
        if header.get("dtype") != "f32le":
            raise ManifestError(f"unsupported dtype {header.get('dtype')}")
        self.header = header
        self.samples = samples
        self.count = int(header["count"])
        if self.count != len(samples):
            raise ManifestError(
                f"count {self.count} but {len(samples)} sample records")
        self.H, self.W = int(header["H"]), int(header["W"])
        self.Ns, self.T, self.R = (int(header[k]) for k in ("Ns", "T", "R"))
        self.dx = float(header["dx"])
        vsize = self.H * self.W * 4
        gsize = self.Ns * self.T * self.R * 4
        offs_v = [s["voffset"] for s in samples]
        offs_g = [s["goffset"] for s in samples]
        if offs_v != sorted(set(offs_v)) or offs_g != sorted(set(offs_g)):
            raise ManifestError("payload offsets must be strictly increasing")
        vpath = os.path.join(directory, header["velocity_file"])
        gpath = os.path.join(directory, header["gather_file"])
        if os.path.getsize(vpath) != self.count * vsize:
            raise ManifestError("velocity payload size does not match count")
        if os.path.getsize(gpath) != self.count * gsize:
            raise ManifestError("gather payload size does not match count")
        self._vmap = np.memmap(vpath, dtype="<f4", mode="r",
                               shape=(self.count, self.H, self.W))
        self._gmap = np.memmap(gpath, dtype="<f4", mode="r",
                               shape=(self.count, self.Ns, self.T, self.R))

    def __len__(self):
        return self.count

    def velocity(self, i):
        return np.asarray(self._vmap[i], dtype=np.float64)

    def velocity_f32(self, i):
        return np.asarray(self._vmap[i])

    def gather(self, i):
        return np.asarray(self._gmap[i], dtype=np.float64)

    def gather_f32(self, i):
        return np.asarray(self._gmap[i])

    def family(self, i):
        return self.samples[i]["family"]

    def seed(self, i):
        return self.samples[i]["seed"]

    def augmented(self, i):
        return bool(self.samples[i]["augmented"])

    def indices(self, split=None):
        if split is None:
            return list(range(self.count))
        return [i for i, s in enumerate(self.samples) if s["split"] == split]

    def geometry(self):
        h = self.header
        return AcquisitionGeometry(
            width=self.W,
            num_timesteps=self.T,
            dt=float(h["dt"]), f_peak=float(h["f_peak"]), t0=float(h["t0"]),
            source_cols=[int(c) for c in h["source_cols"].split(",")],
            receiver_cols=[int(c) for c in h["receiver_cols"].split(",")],
            sponge_width=int(h["sponge_width"]),
            source_amp=float(h["source_amp"]))


def build_pairs(maps, geom, directory, families, seeds, augmented=None,
                threads=1):
    """Simulate a gather for every map and persist the paired dataset.

    Simulation fans out across worker threads; results are consumed and
    written strictly in sample order.
    """
    n = len(maps)
    if len(families) != n or len(seeds) != n:
        raise ValueError("families and seeds must match maps in length")
    if augmented is None:
        augmented = [0] * n
    dxs = {m.dx for m in maps}
    if len(dxs) != 1:
        raise ValueError(f"maps disagree on dx: {sorted(dxs)}")
    os.makedirs(directory, exist_ok=True)
    vsize = maps[0].grid.size * 4
    gsize = geom.num_sources * geom.num_timesteps * geom.num_receivers * 4
    samples = []
    for i in range(n):
        samples.append({"family": families[i], "seed": int(seeds[i]),
                        "augmented": int(augmented[i]),
                        "split": split_of(seeds[i]),
                        "voffset": i * vsize, "goffset": i * gsize})

    # simulate from the float32-rounded grids so a reload + re-simulate
    # reproduces the stored gather exactly at storage precision
    from .wavesim import VelocityMap
    stored = [m.grid.astype("<f4") for m in maps]
    dx = maps[0].dx

    def simulate(i):
        vm = VelocityMap(stored[i].astype(np.float64), dx=dx)
        return simulate_forward(vm, geom).traces

    vpath = os.path.join(directory, VELOCITY_NAME)
    gpath = os.path.join(directory, GATHER_NAME)
    with open(vpath, "wb") as vf, open(gpath, "wb") as gf:
        if threads <= 1:
            results = map(simulate, range(n))
        else:
            pool = concurrent.futures.ThreadPoolExecutor(max_workers=threads)
            results = pool.map(simulate, range(n))
        for i, traces in enumerate(results):
            vf.write(stored[i].tobytes())
            gf.write(traces.astype("<f4").tobytes())
        if threads > 1:
            pool.shutdown()

    H, W = maps[0].grid.shape
    fam_counts = {}
    for f in families:
        fam_counts[f] = fam_counts.get(f, 0) + 1
    header = {
        "version": FORMAT_VERSION, "count": n, "H": H, "W": W,
        "Ns": geom.num_sources, "T": geom.num_timesteps,
        "R": geom.num_receivers,
        **_geometry_fields(geom, maps[0].dx),
        "dtype": "f32le",
        "velocity_file": VELOCITY_NAME, "gather_file": GATHER_NAME,
        "family_counts": ",".join(f"{k}:{v}" for k, v in sorted(fam_counts.items())),
    }
    write_manifest(os.path.join(directory, MANIFEST_NAME), header, samples)
    return Dataset(directory)


def pair_consistent(ds, i, threads=1):
    """True when re-simulating sample i reproduces the stored gather at
    storage (float32) precision."""
    from .wavesim import VelocityMap
    v = VelocityMap(ds.velocity(i), dx=ds.dx)
    sim = simulate_forward(v, ds.geometry(), threads=threads)
    return np.array_equal(sim.traces.astype("<f4"), ds.gather_f32(i))


def gather_asarray(ds, i):
    return SeismicGather(ds.gather(i))
