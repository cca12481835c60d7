"""Transformer backbone over multimodal visual sentences.

One sentence packs a shot gather and a velocity map into a single token
sequence: BOS, B_SEIS, seismic patch embeddings, E_SEIS, a dataset
identifier, B_VEL, then the velocity token slots. Causal models
supervise next-token prediction over the velocity slots (teacher
forcing); non-causal models replace the slots with a learned
placeholder embedding and predict every slot in one full-attention
pass. Only velocity positions carry loss.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import Embedding, LayerNorm, Linear, Module, TransformerBlock, causal_mask
from .optim import AdamW, cosine_schedule
from .velocity import FAMILIES

BOS, B_SEIS, E_SEIS, B_VEL, PLACEHOLDER = range(5)
_N_BASE = 5

MODES = ("causal", "full")


class SequenceLayout:
    """Index bookkeeping for one visual sentence of length 5 + L_s + L_v."""

    def __init__(self, L_s, L_v):
        self.L_s, self.L_v = int(L_s), int(L_v)
        self.bos = 0
        self.b_seis = 1
        self.seis = slice(2, 2 + L_s)
        self.e_seis = 2 + L_s
        self.d_id = 3 + L_s
        self.b_vel = 4 + L_s
        self.vel = slice(5 + L_s, 5 + L_s + L_v)
        self.length = 5 + L_s + L_v


class BackboneConfig:
    """Architecture plus the gather/tokenizer shapes the model binds to."""

    def __init__(self, mode="causal", layers=6, heads=8, width=256,
                 ff_mult=4, dropout=0.0, K=512, latent_dim=32, token_grid=9,
                 num_sources=5, num_timesteps=1000, num_receivers=70,
                 patch_time=50, families=FAMILIES):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        if num_timesteps % patch_time:
            raise ValueError("patch_time must divide num_timesteps")
        self.mode = mode
        self.layers = layers
        self.heads = heads
        self.width = width
        self.ff_mult = ff_mult
        self.dropout = float(dropout)
        self.K = K
        self.latent_dim = latent_dim
        self.token_grid = token_grid
        self.num_sources = num_sources
        self.num_timesteps = num_timesteps
        self.num_receivers = num_receivers
        self.patch_time = patch_time
        self.L_s = num_sources * (num_timesteps // patch_time)
        self.L_v = token_grid * token_grid
        self.patch_dim = patch_time * num_receivers
        self.families = tuple(families)
        self.unknown_id = len(self.families)
        self.n_ids = len(self.families) + 1

    def family_id(self, name):
        """Dataset identifier for a family name; unseen names map to the
        reserved unknown id (used at zero-shot inference)."""
        try:
            return self.families.index(name)
        except ValueError:
            return self.unknown_id


class Backbone(Module):
    def __init__(self, cfg, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.layout = SequenceLayout(cfg.L_s, cfg.L_v)
        w = cfg.width
        self.patch_proj = Linear(cfg.patch_dim, w, rng)
        self.vel_proj = Linear(cfg.latent_dim, w, rng)
        self.pos_seis = Tensor(rng.normal(0.0, 0.02, (cfg.L_s, w)),
                               requires_grad=True)
        self.pos_vel = Tensor(rng.normal(0.0, 0.02, (cfg.L_v, w)),
                              requires_grad=True)
        # rows: BOS, B_SEIS, E_SEIS, B_VEL, PLACEHOLDER, then dataset ids
        self.specials = Embedding(_N_BASE + cfg.n_ids, w, rng)
        self.blocks = [TransformerBlock(w, cfg.heads, rng, mlp_mult=cfg.ff_mult)
                       for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(w)
        self.head = Linear(w, cfg.K, rng)

    def _check_entries(self, entries):
        entries = np.asarray(entries, dtype=np.float64)
        if entries.shape != (self.cfg.K, self.cfg.latent_dim):
            raise ShapeError(
                f"codebook {entries.shape} does not match model "
                f"(K={self.cfg.K}, d={self.cfg.latent_dim})")
        return entries

    def patch_embed(self, traces):
        """Gathers (B, Ns, T, R) -> patch embeddings (B, L_s, width).

        Non-overlapping per-source time windows spanning all receivers,
        flattened, projected, plus learned positional embeddings.
        """
        x = np.asarray(traces, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        cfg = self.cfg
        want = (cfg.num_sources, cfg.num_timesteps, cfg.num_receivers)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ShapeError(f"gather {x.shape[1:]} does not match geometry {want}")
        b = x.shape[0]
        # (Ns, T, R) row-major == source-major time windows when chunked
        patches = x.reshape(b, cfg.L_s, cfg.patch_dim)
        return self.patch_proj(Tensor(patches)) + self.pos_seis

    def velocity_embed(self, tokens, entries):
        """Ground-truth token grid (B, h, w) or (B, L_v) -> embeddings
        via the frozen codebook and the trained linear projection."""
        entries = self._check_entries(entries)
        tokens = np.asarray(tokens).reshape(len(tokens), -1)
        if tokens.shape[1] != self.cfg.L_v:
            raise ShapeError(f"expected {self.cfg.L_v} velocity tokens, "
                             f"got {tokens.shape[1]}")
        return self.vel_proj(Tensor(entries[tokens])) + self.pos_vel

    def placeholder_embed(self, batch):
        idx = np.full((batch, self.cfg.L_v), PLACEHOLDER)
        return self.specials(idx) + self.pos_vel

    def build_sequence(self, m, vel_part, d_ids):
        """Assemble [BOS, B_SEIS, m, E_SEIS, D_ID, B_VEL, vel_part]."""
        b = m.shape[0]
        if m.shape[1] != self.cfg.L_s:
            raise ShapeError(f"seismic segment {m.shape[1]} != L_s {self.cfg.L_s}")
        if vel_part is not None and vel_part.shape[1] != self.cfg.L_v:
            raise ShapeError(f"velocity segment {vel_part.shape[1]} != L_v "
                             f"{self.cfg.L_v}")
        d_ids = np.asarray(d_ids)
        if d_ids.shape != (b,) or d_ids.min() < 0 or d_ids.max() >= self.cfg.n_ids:
            raise ShapeError(f"d_ids must be (B,) in [0, {self.cfg.n_ids})")
        col = lambda tok: self.specials(np.full((b, 1), tok))
        parts = [col(BOS), col(B_SEIS), m, col(E_SEIS),
                 self.specials(_N_BASE + d_ids[:, None]), col(B_VEL)]
        if vel_part is not None:
            parts.append(vel_part)
        return ad.concat(parts, axis=1)

    def forward(self, seq):
        """(B, L, width) -> logits (B, L, K); causal mode masks the future."""
        mask = causal_mask(seq.shape[1]) if self.cfg.mode == "causal" else None
        h = seq
        for blk in self.blocks:
            h = blk(h, mask=mask)
        return self.head(self.ln_f(h))


def loss_step(model, entries, gathers, tokens, d_ids, rng=None):
    """Cross entropy over velocity positions for one batch.

    Causal: logits at positions b_vel .. b_vel+L_v-1 predict the next
    token (shift by one). Non-causal: placeholder inputs, logits at the
    velocity positions themselves.
    """
    cfg, lay = model.cfg, model.layout
    tokens = np.asarray(tokens).reshape(len(tokens), -1)
    m = model.patch_embed(gathers)
    if cfg.mode == "causal":
        vel = model.velocity_embed(tokens, entries)
        lo, hi = lay.b_vel, lay.b_vel + cfg.L_v
    else:
        vel = model.placeholder_embed(len(tokens))
        lo, hi = lay.vel.start, lay.vel.stop
    seq = model.build_sequence(m, vel, d_ids)
    if cfg.dropout > 0.0 and rng is not None:
        seq = ad.dropout(seq, cfg.dropout, rng)
    logits = model.forward(seq)
    lv = ad.getitem(logits, (slice(None), slice(lo, hi)))
    flat = ad.reshape(lv, (-1, cfg.K))
    return ad.cross_entropy_with_logits(flat, tokens.reshape(-1))


def train_backbone(model, entries, gathers, tokens, d_ids, steps, batch=8,
                   lr=5e-4, seed=0, warmup_frac=0.05):
    """AdamW training loop over (gather, token grid, id) triples.

    Returns the per-step loss history. Aborts on non-finite loss.
    """
    entries = model._check_entries(entries)
    gathers = np.asarray(gathers, dtype=np.float64)
    tokens = np.asarray(tokens).reshape(len(tokens), -1)
    d_ids = np.asarray(d_ids)
    n = len(gathers)
    if len(tokens) != n or len(d_ids) != n:
        raise ValueError("gathers, tokens and d_ids must align")
    rng = np.random.default_rng(int(seed))
    params = model.parameters()
    opt = AdamW(params, lr=lr, decay_mask=model.decay_mask())
    lr_of = cosine_schedule(lr, max(1, int(warmup_frac * steps)), steps)
    history = []
    for step in range(steps):
        idx = rng.integers(0, n, batch)
        loss = loss_step(model, entries, gathers[idx], tokens[idx],
                         d_ids[idx], rng=rng if model.cfg.dropout > 0 else None)
        val = float(loss.data)
        if not np.isfinite(val):
            raise FloatingPointError(
                f"backbone training diverged at step {step}: loss={val}")
        history.append(val)
        opt.zero_grad()
        ad.backward(loss, params=params)
        opt.lr = lr_of(step)
        opt.step()
    return history


def _draw(rng, probs):
    """Vectorized categorical draw over the last axis."""
    cum = probs.cumsum(axis=-1)
    u = rng.random(probs.shape[:-1] + (1,))
    idx = (u >= cum).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def _choose(logits, temperature, rng):
    if temperature == 0.0:
        return np.argmax(logits, axis=-1)
    z = logits / temperature
    p = np.exp(z - z.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    return _draw(rng, p)


def decode_causal(model, entries, gathers, d_ids, temperature=0.0, seed=0):
    """Sequential velocity-token generation (greedy unless temperature > 0).

    Each step re-runs the forward pass on the grown prefix; the logits at
    the last position choose the next token, whose codebook embedding is
    appended. Returns (B, h, w) token grids.
    """
    if model.cfg.mode != "causal":
        raise ValueError("decode_causal requires a causal-mode model")
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    entries = model._check_entries(entries)
    cfg = model.cfg
    rng = np.random.default_rng(int(seed))
    gathers = np.asarray(gathers, dtype=np.float64)
    single = gathers.ndim == 3
    if single:
        gathers = gathers[None]
        d_ids = np.asarray([d_ids]) if np.ndim(d_ids) == 0 else np.asarray(d_ids)
    b = len(gathers)
    with ad.no_grad():
        m = model.patch_embed(gathers)
        prefix = model.build_sequence(m, None, np.asarray(d_ids))
        out = np.zeros((b, cfg.L_v), dtype=np.int64)
        for i in range(cfg.L_v):
            logits = model.forward(prefix)
            last = logits.data[:, -1]
            out[:, i] = _choose(last, temperature, rng)
            emb = model.vel_proj(Tensor(entries[out[:, i:i + 1]]))
            emb = emb + ad.getitem(model.pos_vel, slice(i, i + 1))
            prefix = ad.concat([prefix, emb], axis=1)
    grids = out.reshape(b, cfg.token_grid, cfg.token_grid)
    return grids[0] if single else grids


def decode_parallel(model, entries, gathers, d_ids, temperature=0.0, seed=0):
    """One-pass prediction of every velocity token from placeholders."""
    if model.cfg.mode != "full":
        raise ValueError("decode_parallel requires a full-attention model")
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    entries = model._check_entries(entries)
    cfg = model.cfg
    rng = np.random.default_rng(int(seed))
    gathers = np.asarray(gathers, dtype=np.float64)
    single = gathers.ndim == 3
    if single:
        gathers = gathers[None]
        d_ids = np.asarray([d_ids]) if np.ndim(d_ids) == 0 else np.asarray(d_ids)
    b = len(gathers)
    with ad.no_grad():
        m = model.patch_embed(gathers)
        seq = model.build_sequence(m, model.placeholder_embed(b),
                                   np.asarray(d_ids))
        logits = model.forward(seq)
        lv = logits.data[:, model.layout.vel]
    out = _choose(lv, temperature, rng)
    grids = out.reshape(b, cfg.token_grid, cfg.token_grid)
    return grids[0] if single else grids


def sample(model, entries, gathers, d_ids, temperature=1.0, seed=0):
    """Stochastic token grids: categorical draws from softmax(logits/tau),
    independent across velocity positions; deterministic given seed."""
    fn = decode_causal if model.cfg.mode == "causal" else decode_parallel
    return fn(model, entries, gathers, d_ids, temperature=temperature,
              seed=seed)
