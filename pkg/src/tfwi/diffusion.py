"""Pixel-space denoising diffusion over normalized velocity maps.

A small convolutional denoiser predicts the added noise; feature maps
are modulated per-timestep by FiLM (scale/shift from a time embedding).
Works directly on 70x70 maps in [-1, 1].
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Conv2d, Linear, Module
from .optim import AdamW, cosine_schedule
from .velocity import NormalizationSpec
from .wavesim import VelocityMap


class DiffusionConfig:
    def __init__(self, channels=16, t_steps=120, beta_start=3e-4,
                 beta_end=0.12, train_steps=600, batch=8, lr=2e-4,
                 warmup_frac=0.05, time_dim=32):
        self.channels = channels
        self.t_steps = t_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.train_steps = train_steps
        self.batch = batch
        self.lr = lr
        self.warmup_frac = warmup_frac
        self.time_dim = time_dim


def make_betas(cfg):
    betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.t_steps)
    _check_betas(betas)
    return betas


def _check_betas(betas):
    if betas.min() <= 0.0 or betas.max() >= 1.0:
        raise ValueError("betas must lie in (0, 1)")
    if np.any(np.diff(betas) < 0):
        raise ValueError("betas must be nondecreasing")


def _time_features(t_frac, dim):
    """Sinusoidal features of t/T over geometric frequencies."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(400.0), half))
    ang = np.asarray(t_frac, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class _FilmBlock(Module):
    def __init__(self, channels, time_dim, rng):
        self.film = Linear(time_dim, 2 * channels, rng)
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)
        self.channels = channels

    def __call__(self, h, temb):
        b = h.shape[0]
        c = self.channels
        mod = self.film(temb)
        scale = ad.reshape(mod[:, :c], (b, c, 1, 1))
        shift = ad.reshape(mod[:, c:], (b, c, 1, 1))
        y = h * (1.0 + scale) + shift
        y = self.conv2(ad.gelu(self.conv1(ad.gelu(y))))
        return h + y


class Denoiser(Module):
    """Noise predictor eps(x_t, t) on (B, 1, H, W) inputs."""

    def __init__(self, cfg, rng):
        c, td = cfg.channels, cfg.time_dim
        self.t_steps = cfg.t_steps
        self.time_dim = td
        self.temb1 = Linear(td, td, rng)
        self.temb2 = Linear(td, td, rng)
        self.conv_in = Conv2d(1, c, 3, rng)
        self.blocks = [_FilmBlock(c, td, rng) for _ in range(2)]
        self.conv_out = Conv2d(c, 1, 3, rng)
        # time-gated copy of the input: eps is x_t-dominated at high t
        self.skip_gain = Linear(td, 1, rng)
        self.skip_gain.w.data[:] = 0.0
        self.skip_gain.b.data[:] = 0.0

    def __call__(self, x, t):
        t_frac = np.asarray(t, dtype=np.float64) / self.t_steps
        feats = Tensor(_time_features(t_frac, self.time_dim))
        temb = self.temb2(ad.gelu(self.temb1(feats)))
        h = self.conv_in(x)
        for blk in self.blocks:
            h = blk(h, temb)
        gain = ad.reshape(self.skip_gain(temb), (x.shape[0], 1, 1, 1))
        return self.conv_out(ad.gelu(h)) + gain * x


class DiffusionModel:
    """Denoiser plus its noise schedule and normalization."""

    def __init__(self, net, betas, norm=None):
        _check_betas(np.asarray(betas, dtype=np.float64))
        self.net = net
        self.betas = np.asarray(betas, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.abar = np.cumprod(self.alphas)
        self.norm = norm if norm is not None else NormalizationSpec()


def train_diffusion(maps_norm, cfg, seed):
    """Denoising training on normalized maps (N, H, W) in [-1, 1]."""
    maps_norm = np.asarray(maps_norm, dtype=np.float64)
    if maps_norm.ndim != 3:
        raise ValueError(f"expected (N, H, W) maps, got {maps_norm.shape}")
    if maps_norm.min() < -1.0 - 1e-9 or maps_norm.max() > 1.0 + 1e-9:
        raise ValueError("maps must be normalized to [-1, 1] before training")
    rng = np.random.default_rng(int(seed))
    net = Denoiser(cfg, rng)
    model = DiffusionModel(net, make_betas(cfg))
    params = net.parameters()
    opt = AdamW(params, lr=cfg.lr, decay_mask=net.decay_mask())
    warmup = max(1, int(cfg.warmup_frac * cfg.train_steps))
    lr_of = cosine_schedule(cfg.lr, warmup, cfg.train_steps)
    n = maps_norm.shape[0]
    sab = np.sqrt(model.abar)
    somab = np.sqrt(1.0 - model.abar)
    for step in range(cfg.train_steps):
        idx = rng.integers(0, n, cfg.batch)
        t = rng.integers(0, cfg.t_steps, cfg.batch)
        x0 = maps_norm[idx][:, None]
        eps = rng.standard_normal(x0.shape)
        xt = sab[t, None, None, None] * x0 + somab[t, None, None, None] * eps
        pred = net(Tensor(xt), t)
        loss = ad.mse_loss(pred, Tensor(eps))
        opt.zero_grad()
        ad.backward(loss, params=params)
        opt.lr = lr_of(step)
        opt.step()
    return model


def sample_diffusion(model, n, seed, shape=(70, 70), dx=10.0):
    """Run the reverse chain; returns denormalized, clamped VelocityMaps."""
    rng = np.random.default_rng(int(seed))
    H, W = shape
    x = rng.standard_normal((n, 1, H, W))
    betas, alphas, abar = model.betas, model.alphas, model.abar
    t_steps = len(betas)
    for t in range(t_steps - 1, -1, -1):
        with ad.no_grad():
            eps = model.net(Tensor(x), np.full(n, t)).numpy()
        mean = (x - betas[t] / np.sqrt(1.0 - abar[t]) * eps) / np.sqrt(alphas[t])
        if t > 0:
            var = (1.0 - abar[t - 1]) / (1.0 - abar[t]) * betas[t]
            x = mean + np.sqrt(var) * rng.standard_normal(x.shape)
        else:
            x = mean
    z = np.clip(x[:, 0], -1.0, 1.0)
    phys = model.norm.denormalize(z)
    return [VelocityMap(phys[i], dx=dx) for i in range(n)]
