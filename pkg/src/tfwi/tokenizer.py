"""Discrete tokenizers for velocity maps.

Two variants share the same nearest-neighbour codebook quantization: a
compact convolutional autoencoder that bottlenecks 70x70 maps down to a
9x9x32 latent grid, and a wide attention autoencoder that upsamples the
input first and keeps a larger latent grid (14x14x64 by default,
25x25x196 with full_scale) so no spatial compression bottleneck remains.
"""

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import Conv2d, LayerNorm, Linear, Module, TransformerBlock
from .optim import AdamW, cosine_schedule
from .velocity import NormalizationSpec

VARIANTS = ("compact", "wide")


class TokenizerConfig:
    """Shapes and training budget for one tokenizer variant."""

    def __init__(self, variant="compact", K=512, input_size=70,
                 full_scale=False, latent_dim=None, channels=(16, 32),
                 blocks=2, heads=4, train_steps=1500, batch=8, lr=1e-3,
                 commit_weight=0.25, warmup_frac=0.05):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected {VARIANTS}")
        if K <= 0:
            raise ValueError("codebook must have at least one entry")
        self.variant = variant
        self.K = K
        self.input_size = int(input_size)
        self.full_scale = bool(full_scale)
        self.channels = tuple(channels)
        if variant == "compact":
            # three stride-2 convs: 70 -> 35 -> 18 -> 9
            sizes = [self.input_size]
            for _ in range(3):
                sizes.append(-(-sizes[-1] // 2))
            self.sizes = tuple(sizes)
            self.grid = sizes[-1]
            self.d = 32 if latent_dim is None else int(latent_dim)
        else:
            self.patch = 14
            self.grid = 25 if full_scale else 14
            self.d = (196 if full_scale else 64) if latent_dim is None else int(latent_dim)
            self.resize = self.patch * self.grid
            self.blocks = 4 if full_scale else blocks
            self.heads = 7 if full_scale else heads
            if self.d % self.heads:
                raise ValueError(f"latent dim {self.d} not divisible by {self.heads} heads")
        self.train_steps = train_steps
        self.batch = batch
        self.lr = lr
        self.commit_weight = commit_weight
        self.warmup_frac = warmup_frac


class Codebook(Module):
    """K x d embedding table with usage counters."""

    def __init__(self, K, d, rng):
        if K <= 0:
            raise ValueError("codebook must have at least one entry")
        self.K, self.d = int(K), int(d)
        self.entries = Tensor(rng.normal(0.0, 0.05, (K, d)), requires_grad=True)
        self.usage = np.zeros(K, dtype=np.int64)

    def reset_usage(self):
        self.usage[:] = 0

    def usage_fraction(self):
        return float((self.usage > 0).mean())


def quantize(z, cb):
    """Map each latent vector to its nearest codebook entry (Euclidean,
    ties to the lowest index).

    Returns (tokens, z_q). For Tensor input z_q carries straight-through
    gradients: its value is the selected entries, its gradient flows to z
    unchanged. Usage counters on cb are incremented.
    """
    zd = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if zd.shape[-1] != cb.d:
        raise ShapeError(f"latent dim {zd.shape[-1]} does not match codebook d={cb.d}")
    flat = zd.reshape(-1, cb.d)
    e = cb.entries.data
    d2 = (flat * flat).sum(1)[:, None] - 2.0 * flat @ e.T + (e * e).sum(1)[None, :]
    idx = np.argmin(d2, axis=1)
    np.add.at(cb.usage, idx, 1)
    tokens = idx.reshape(zd.shape[:-1])
    values = e[idx].reshape(zd.shape)
    if isinstance(z, Tensor):
        return tokens, ad.straight_through(z, values)
    return tokens, values


class _ConvEncoder(Module):
    def __init__(self, cfg, rng):
        c1, c2 = cfg.channels
        kw = dict(pad="same", pad_mode="reflect")
        self.down1 = Conv2d(1, c1, 3, rng, stride=2, **kw)
        self.down2 = Conv2d(c1, c2, 3, rng, stride=2, **kw)
        self.down3 = Conv2d(c2, c2, 3, rng, stride=2, **kw)
        self.head = Conv2d(c2, cfg.d, 3, rng, **kw)

    def __call__(self, x):
        h = ad.gelu(self.down1(x))
        h = ad.gelu(self.down2(h))
        h = ad.gelu(self.down3(h))
        return ad.transpose(self.head(h), (0, 2, 3, 1))


class _ConvDecoder(Module):
    def __init__(self, cfg, rng):
        c1, c2 = cfg.channels
        self.sizes = cfg.sizes[::-1][1:]  # e.g. (18, 35, 70)
        kw = dict(pad="same", pad_mode="reflect")
        self.mix = Conv2d(cfg.d, c2, 3, rng, **kw)
        self.up1 = Conv2d(c2, c2, 3, rng, **kw)
        self.up2 = Conv2d(c2, c1, 3, rng, **kw)
        self.head = Conv2d(c1, 1, 3, rng, **kw)

    def __call__(self, z):
        h = ad.gelu(self.mix(ad.transpose(z, (0, 3, 1, 2))))
        for conv, size in zip((self.up1, self.up2), self.sizes):
            h = ad.resize2d(h, size, size)
            h = ad.gelu(conv(h))
        h = ad.resize2d(h, self.sizes[-1], self.sizes[-1])
        y = self.head(h)
        b = y.shape[0]
        return ad.clamp(ad.reshape(y, (b, y.shape[2], y.shape[3])), -1.0, 1.0)


def _patchify(x, p):
    """(B, 1, g*p, g*p) -> (B, g*g, p*p), patches in row-major grid order."""
    b, _, hh, ww = x.shape
    g = hh // p
    t = ad.reshape(x, (b, g, p, g, p))
    t = ad.transpose(t, (0, 1, 3, 2, 4))
    return ad.reshape(t, (b, g * g, p * p))


def _unpatchify(t, g, p):
    b = t.shape[0]
    x = ad.reshape(t, (b, g, g, p, p))
    x = ad.transpose(x, (0, 1, 3, 2, 4))
    return ad.reshape(x, (b, 1, g * p, g * p))


class _PatchEncoder(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.embed = Linear(cfg.patch ** 2, cfg.d, rng)
        self.blocks = [TransformerBlock(cfg.d, cfg.heads, rng)
                       for _ in range(cfg.blocks)]
        self.ln = LayerNorm(cfg.d)
        self.rope = ad.rope_tables(np.arange(cfg.grid ** 2), cfg.d // cfg.heads)

    def __call__(self, x):
        cfg = self.cfg
        xr = ad.resize2d(x, cfg.resize, cfg.resize)
        t = self.embed(_patchify(xr, cfg.patch))
        for blk in self.blocks:
            t = blk(t, rope=self.rope)
        t = self.ln(t)
        return ad.reshape(t, (t.shape[0], cfg.grid, cfg.grid, cfg.d))


class _PatchDecoder(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.blocks = [TransformerBlock(cfg.d, cfg.heads, rng)
                       for _ in range(cfg.blocks)]
        self.ln = LayerNorm(cfg.d)
        self.unembed = Linear(cfg.d, cfg.patch ** 2, rng)
        self.rope = ad.rope_tables(np.arange(cfg.grid ** 2), cfg.d // cfg.heads)

    def __call__(self, z):
        cfg = self.cfg
        t = ad.reshape(z, (z.shape[0], cfg.grid ** 2, cfg.d))
        for blk in self.blocks:
            t = blk(t, rope=self.rope)
        img = _unpatchify(self.unembed(self.ln(t)), cfg.grid, cfg.patch)
        y = ad.resize2d(img, cfg.input_size, cfg.input_size)
        b = y.shape[0]
        return ad.clamp(
            ad.reshape(y, (b, cfg.input_size, cfg.input_size)), -1.0, 1.0)


class VQTokenizer(Module):
    """Encoder, shared codebook, decoder for one variant.

    Weights are plain Tensors; training mutates them, after which the
    tokenizer is treated as frozen (weights_hash can confirm).
    """

    def __init__(self, cfg, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.codebook = Codebook(cfg.K, cfg.d, rng)
        if cfg.variant == "compact":
            self.enc = _ConvEncoder(cfg, rng)
            self.dec = _ConvDecoder(cfg, rng)
        else:
            self.enc = _PatchEncoder(cfg, rng)
            self.dec = _PatchDecoder(cfg, rng)

    def _as_batch(self, v):
        x = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        s = self.cfg.input_size
        if x.ndim != 3 or x.shape[1] != s or x.shape[2] != s:
            raise ShapeError(f"expected ({s}, {s}) maps, got {x.shape}")
        if np.abs(x).max() > 1.0 + 1e-9:
            raise ValueError("maps must be normalized to [-1, 1]")
        return x, single

    def encode(self, v):
        """Normalized map(s) -> continuous latent grid (h, w, d)."""
        x, single = self._as_batch(v)
        z = self.enc(Tensor(x[:, None]))
        return ad.reshape(z, z.shape[1:]) if single else z

    def decode(self, z):
        """Latent grid, quantized or continuous, or an integer token grid,
        back to normalized map(s) in [-1, 1]."""
        if not isinstance(z, Tensor) and np.issubdtype(np.asarray(z).dtype, np.integer):
            z = self.lookup(z)
        elif not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=np.float64))
        single = z.data.ndim == 3
        if single:
            z = ad.reshape(z, (1,) + z.shape)
        g, d = self.cfg.grid, self.cfg.d
        if z.shape[1:] != (g, g, d):
            raise ShapeError(f"expected latent (B, {g}, {g}, {d}), got {z.shape}")
        y = self.dec(z)
        return ad.reshape(y, y.shape[1:]) if single else y

    def lookup(self, tokens):
        """Token grid -> quantized latent grid."""
        tokens = np.asarray(tokens)
        if tokens.min() < 0 or tokens.max() >= self.cfg.K:
            raise ValueError(f"token index out of range [0, {self.cfg.K})")
        return ad.embedding(self.codebook.entries, tokens)

    def tokenize(self, v):
        """Normalized map(s) -> integer token grid (h, w)."""
        with ad.no_grad():
            tokens, _ = quantize(self.encode(v), self.codebook)
        return tokens

    def reconstruct(self, v):
        """encode -> quantize -> decode round trip, returns plain arrays."""
        with ad.no_grad():
            _, z_q = quantize(self.encode(v), self.codebook)
            return self.decode(z_q).numpy()

    def weights_hash(self):
        h = hashlib.sha256()
        for name, arr in sorted(self.state_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def header(self):
        norm = NormalizationSpec()
        return {"variant": self.cfg.variant, "K": self.cfg.K, "d": self.cfg.d,
                "h": self.cfg.grid, "w": self.cfg.grid,
                "input_size": self.cfg.input_size,
                "v_min": norm.v_min, "v_max": norm.v_max}


def train_tokenizer(maps_norm, cfg, seed=0, val_maps=None):
    """Train encoder, decoder and codebook on normalized maps (N, H, W).

    Loss: reconstruction MSE + ||sg(z) - e||^2 + commit_weight *
    ||z - sg(e)||^2. Codebook entries unused for a full epoch are
    reinitialized to random encoder outputs from the latest batch.
    After training, usage counters reflect one pass over val_maps
    (the training maps when not given).
    """
    maps = np.asarray(maps_norm, dtype=np.float64)
    if maps.ndim != 3:
        raise ValueError(f"expected (N, H, W) maps, got {maps.shape}")
    if np.abs(maps).max() > 1.0 + 1e-9:
        raise ValueError("maps must be normalized to [-1, 1] before training")
    rng = np.random.default_rng(int(seed))
    tok = VQTokenizer(cfg, rng)
    params = tok.parameters()
    entries = tok.codebook.entries
    # the codebook loss anchors entries; decaying them toward 0 fights it
    mask = [m and (p is not entries) for p, m in zip(params, tok.decay_mask())]
    opt = AdamW(params, lr=cfg.lr, decay_mask=mask)
    ent_slot = next(i for i, p in enumerate(params) if p is entries)
    lr_of = cosine_schedule(cfg.lr, max(1, int(cfg.warmup_frac * cfg.train_steps)),
                            cfg.train_steps)
    n = maps.shape[0]
    steps_per_epoch = max(1, -(-n // cfg.batch))
    epoch_usage = np.zeros(cfg.K, dtype=np.int64)
    last_z = None
    for step in range(cfg.train_steps):
        idx = rng.integers(0, n, cfg.batch)
        x = maps[idx]
        z = tok.encode(x)
        tokens, z_q = quantize(z, tok.codebook)
        np.add.at(epoch_usage, tokens.reshape(-1), 1)
        recon = tok.decode(z_q)
        zf = ad.reshape(z, (-1, cfg.d))
        sel = ad.embedding(entries, tokens.reshape(-1))
        loss = (ad.mse_loss(recon, Tensor(x))
                + ad.mse_loss(sel, ad.stop_gradient(zf))
                + cfg.commit_weight * ad.mse_loss(zf, ad.stop_gradient(sel)))
        val = float(loss.data)
        if not np.isfinite(val):
            raise FloatingPointError(
                f"tokenizer training diverged at step {step}: loss={val}, "
                f"variant={cfg.variant}, lr={lr_of(step):.3e}")
        opt.zero_grad()
        ad.backward(loss, params=params)
        opt.lr = lr_of(step)
        opt.step()
        last_z = zf.data.copy()
        if (step + 1) % steps_per_epoch == 0:
            dead = epoch_usage == 0
            if dead.any() and last_z is not None:
                take = rng.integers(0, last_z.shape[0], int(dead.sum()))
                entries.data[dead] = last_z[take]
                opt.m[ent_slot][dead] = 0.0
                opt.v[ent_slot][dead] = 0.0
            epoch_usage[:] = 0
    tok.codebook.reset_usage()
    hold = maps if val_maps is None else np.asarray(val_maps, dtype=np.float64)
    for i in range(0, hold.shape[0], cfg.batch):
        tok.tokenize(hold[i:i + cfg.batch])
    return tok
