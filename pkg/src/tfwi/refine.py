"""Physics-guided refinement of decoded velocity maps.

A predicted token grid fixes a continuous latent z (the codebook
embeddings of the predicted tokens). Gradient descent on z against the
seismic residual couples two adjoints: the wave simulator supplies
dL/dv at the decoded map, and the decoder backward pass pulls that
cotangent to the latent. Backtracking on the step size keeps the
accepted-residual history nonincreasing by construction. Stochastic
decoding plus per-member refinement and a pixel-wise mean gives the
ensemble estimate.
"""

import csv
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import sample as draw_samples
from .velocity import NormalizationSpec
from .wavesim import (CFLError, FieldBlowupError, SeismicGather, VelocityMap,
                      adjoint_gradient, misfit, simulate_forward)


class RefineConfig:
    def __init__(self, max_iters=20, rel_tol=1e-4, max_halvings=5, threads=1):
        if max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if max_halvings < 0:
            raise ValueError("max_halvings must be nonnegative")
        self.max_iters = max_iters
        self.rel_tol = rel_tol
        self.max_halvings = max_halvings
        self.threads = threads


class RefinementState:
    """Trajectory bookkeeping: residuals over accepted steps only."""

    def __init__(self, z0, residual0):
        self.z = np.asarray(z0, dtype=np.float64).copy()
        self.k = 0
        self.residuals = [float(residual0)]
        self.eta = None
        self.log = []          # (kind, eta, residual) per tried step
        self.warning = False   # simulator failed mid-loop

    @property
    def accepted_steps(self):
        return sum(1 for kind, _, _ in self.log if kind == "accept")


class EnsembleSpec:
    def __init__(self, n=5, temperature=1.0, refine_config=None):
        if n < 1:
            raise ValueError("ensemble size must be at least 1")
        if temperature < 0:
            raise ValueError("temperature must be non-negative")
        self.n = n
        self.temperature = temperature
        self.refine_config = refine_config or RefineConfig()


def _as_gather(s_obs):
    return s_obs if isinstance(s_obs, SeismicGather) else SeismicGather(s_obs)


def decode_to_map(tok, z, norm=None):
    """Continuous latent -> physical VelocityMap through the decoder."""
    norm = norm or NormalizationSpec()
    with ad.no_grad():
        y = tok.decode(np.asarray(z, dtype=np.float64)).numpy()
    return VelocityMap(norm.denormalize(y))


def residual_of(tok, z, s_obs, geom, threads=1, norm=None):
    """Seismic misfit of the decoded latent against observed data."""
    vm = decode_to_map(tok, z, norm)
    return misfit(simulate_forward(vm, geom, threads=threads), _as_gather(s_obs))


def latent_gradient(tok, z, s_obs, geom, threads=1, norm=None):
    """d misfit / dz in two stages: simulator adjoint at the decoded map,
    then the decoder backward pass with that cotangent injected."""
    norm = norm or NormalizationSpec()
    zt = Tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
    y = tok.decode(zt)
    vm = VelocityMap(norm.denormalize(y.data))
    g_v = adjoint_gradient(vm, _as_gather(s_obs), geom, threads=threads)
    # d denormalize / dy is the constant half-range; fold it into the
    # cotangent and pull back through the decoder
    seed = ad.sum_(y * Tensor(g_v * norm.half))
    ad.backward(seed)
    return zt.grad.copy()


def refine(tok, z0, s_obs, geom, config=None, norm=None):
    """Backtracking gradient descent on the decoder latent.

    Halves the step on residual increase (up to max_halvings), rejects
    the step if still increasing, stops on max_iters, relative
    improvement below rel_tol, or a rejected step. A simulator failure
    mid-loop returns the best iterate so far with the warning flag set.
    Returns (refined VelocityMap, RefinementState).
    """
    config = config or RefineConfig()
    norm = norm or NormalizationSpec()
    s_obs = _as_gather(s_obs)
    z0 = np.asarray(z0, dtype=np.float64)
    state = RefinementState(
        z0, residual_of(tok, z0, s_obs, geom, config.threads, norm))
    z0_norm = float(np.linalg.norm(z0))
    try:
        for _ in range(config.max_iters):
            g = latent_gradient(tok, state.z, s_obs, geom, config.threads,
                                norm)
            g_norm = float(np.linalg.norm(g))
            if g_norm == 0.0:
                break  # exact fixed point, nothing to descend
            if state.eta is None:
                # first step moves z by 1% of its own norm
                state.eta = 0.01 * max(z0_norm, 1e-12) / g_norm
            r_cur = state.residuals[-1]
            eta, accepted = state.eta, False
            for _ in range(config.max_halvings + 1):
                z_try = state.z - eta * g
                r_try = residual_of(tok, z_try, s_obs, geom, config.threads,
                                    norm)
                if r_try <= r_cur:
                    accepted = True
                    break
                state.log.append(("reject", eta, r_try))
                eta *= 0.5
            if not accepted:
                break
            state.log.append(("accept", eta, r_try))
            state.z = z_try
            state.eta = eta
            state.residuals.append(r_try)
            state.k += 1
            if r_cur > 0 and (r_cur - r_try) / r_cur < config.rel_tol:
                break
    except (CFLError, FieldBlowupError, FloatingPointError):
        state.warning = True
    return decode_to_map(tok, state.z, norm), state


def ensemble_invert(model, tok, s_obs, d_id, geom, spec=None, seed=0,
                    norm=None):
    """Sample N token grids, refine each member, average pixel-wise.

    Members refine independently (threaded when the refinement config
    asks for it); the mean is reduced in member order. Returns
    (VelocityMap, list of (member map, RefinementState)).
    """
    spec = spec or EnsembleSpec()
    s_obs = _as_gather(s_obs)
    entries = tok.codebook.entries.data
    gathers = np.broadcast_to(s_obs.traces, (spec.n,) + s_obs.traces.shape)
    tokens = draw_samples(model, entries, gathers, np.full(spec.n, int(d_id)),
                          temperature=spec.temperature, seed=seed)
    with ad.no_grad():
        z0s = [tok.lookup(tokens[i]).numpy() for i in range(spec.n)]

    def member(z0):
        return refine(tok, z0, s_obs, geom, spec.refine_config, norm)

    if spec.refine_config.threads > 1:
        with ThreadPoolExecutor(spec.refine_config.threads) as pool:
            members = list(pool.map(member, z0s))
    else:
        members = [member(z) for z in z0s]
    mean = np.mean([vm.grid for vm, _ in members], axis=0)
    return VelocityMap(mean), members


def write_residual_csv(state, path):
    """Accepted-step residual trajectory as CSV rows (iteration, residual)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "residual"])
        for k, r in enumerate(state.residuals):
            w.writerow([k, f"{r:.12e}"])
