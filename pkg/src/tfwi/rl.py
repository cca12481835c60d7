"""GRPO-style fine-tuning of the backbone with map-level rewards.

The trained backbone is treated as a stochastic policy over velocity
token grids, factorized per position. Groups of G samples per gather
are scored by negative reconstruction MAE in normalized units; rewards
are standardized within the group into advantages; updates maximize the
clipped-ratio surrogate with a k3 KL penalty against the frozen pre-RL
reference policy.
"""

import csv

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone
from .backbone import sample as draw_samples
from .optim import AdamW
from .velocity import NormalizationSpec
from .wavesim import VelocityMap

ADV_EPS = 1e-8


class RLConfig:
    def __init__(self, group_size=8, temperature=1.0, clip_eps=0.2,
                 kl_coef=0.02, lr=5e-5, iterations=40, weight_decay=0.0):
        if group_size < 2:
            raise ValueError("group_size must be at least 2")
        if not 0.0 < clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if temperature <= 0.0:
            raise ValueError("temperature must be positive for sampling")
        self.group_size = group_size
        self.temperature = temperature
        self.clip_eps = clip_eps
        self.kl_coef = kl_coef
        self.lr = lr
        self.iterations = iterations
        self.weight_decay = weight_decay


class RolloutGroup:
    """One gather, G sampled token grids, and their scoring."""

    def __init__(self, gather, d_id, v_true, tokens, old_logp, rewards,
                 advantages):
        self.gather = gather
        self.d_id = d_id
        self.v_true = v_true
        self.tokens = tokens
        self.old_logp = old_logp
        self.rewards = rewards
        self.advantages = advantages


def _normalized(v_true):
    if isinstance(v_true, VelocityMap):
        return NormalizationSpec().normalize(v_true.grid)
    return np.asarray(v_true, dtype=np.float64)


def reward(v_true, tokens, tok):
    """r = -MAE(v_true, decode(tokens)) in normalized units (0 is best)."""
    target = _normalized(v_true)
    with ad.no_grad():
        pred = tok.decode(np.asarray(tokens)).numpy()
    if pred.shape != target.shape:
        raise ValueError(f"decoded {pred.shape} vs target {target.shape}")
    return -float(np.abs(pred - target).mean())


def group_rewards(v_true, token_groups, tok):
    target = _normalized(v_true)
    with ad.no_grad():
        pred = tok.decode(np.asarray(token_groups)).numpy()
    return -np.abs(pred - target[None]).mean(axis=(1, 2))


def group_advantages(rewards):
    """Group-standardized rewards: (r - mean) / (std + eps)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least 2 rewards for group standardization")
    if np.all(r == r[0]):
        return np.zeros_like(r)  # degenerate group, exact zeros
    return (r - r.mean()) / (r.std() + ADV_EPS)


def token_logprobs(model, entries, gathers, tokens, d_ids):
    """Per-token log pi(y_i | s) as a (B, L_v) Tensor.

    Causal models score teacher-forced positions; full-attention models
    score all positions from one placeholder pass.
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
    logits = model.forward(model.build_sequence(m, vel, d_ids))
    lv = ad.getitem(logits, (slice(None), slice(lo, hi)))
    logp = ad.log_softmax(lv)
    b, L = tokens.shape
    return ad.getitem(logp, (np.arange(b)[:, None], np.arange(L)[None, :],
                             tokens))


def policy_objective(model, entries, group, cfg, ref_logp):
    """Clipped-surrogate loss (to minimize) plus the mean k3 KL estimate.

    Returns (loss Tensor, kl float). ref_logp holds per-token log-probs
    of the sampled grids under the frozen reference policy.
    """
    g = len(group.tokens)
    gathers = np.broadcast_to(group.gather, (g,) + group.gather.shape)
    d_ids = np.full(g, group.d_id)
    new_lp = token_logprobs(model, entries, gathers, group.tokens, d_ids)
    ratio = ad.exp(new_lp - Tensor(group.old_logp))
    if not np.all(np.isfinite(ratio.data)):
        bad = np.argwhere(~np.isfinite(ratio.data))[0]
        raise FloatingPointError(
            f"non-finite probability ratio at sample {bad[0]}, "
            f"token position {bad[1]}")
    adv = Tensor(group.advantages[:, None])
    un = ratio * adv
    cl = ad.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv
    take_un = (un.data <= cl.data).astype(np.float64)
    surr = un * Tensor(take_un) + cl * Tensor(1.0 - take_un)
    diff = Tensor(ref_logp) - new_lp  # log ref - log new of sampled tokens
    k3 = ad.exp(diff) - diff - 1.0
    loss = ad.mean(k3) * cfg.kl_coef - ad.mean(surr)
    return loss, float(k3.data.mean())


def make_group(model, entries, tok, gather, v_true, d_id, cfg, seed):
    """Sample G grids for one gather and score them."""
    g = cfg.group_size
    gathers = np.broadcast_to(gather, (g,) + gather.shape)
    d_ids = np.full(g, d_id)
    tokens = draw_samples(model, entries, gathers, d_ids,
                          temperature=cfg.temperature, seed=seed)
    tokens = tokens.reshape(g, -1)
    with ad.no_grad():
        old_lp = token_logprobs(model, entries, gathers, tokens, d_ids).numpy()
    rewards = group_rewards(v_true, tokens.reshape(
        g, model.cfg.token_grid, model.cfg.token_grid), tok)
    return RolloutGroup(gather, d_id, v_true, tokens, old_lp, rewards,
                        group_advantages(rewards))


def _clone_model(model):
    ref = Backbone(model.cfg, np.random.default_rng(0))
    ref.load_state_arrays({k: v.copy() for k, v in
                           model.state_arrays().items()})
    return ref


def rl_finetune(model, tok, gathers, maps_norm, d_ids, cfg, seed=0):
    """Sample -> reward -> advantage -> update loop over the dataset.

    Mutates model in place, tracks the best-mean-reward snapshot and
    loads it back before returning. Mean group reward dropping more than
    50% below the first iteration stops the run early. Returns
    (model, history) where history rows are dicts with iteration,
    mean_reward and kl.
    """
    entries = tok.codebook.entries.data
    gathers = np.asarray(gathers, dtype=np.float64)
    maps_norm = np.asarray(maps_norm, dtype=np.float64)
    d_ids = np.asarray(d_ids)
    n = len(gathers)
    if len(maps_norm) != n or len(d_ids) != n:
        raise ValueError("gathers, maps and d_ids must align")
    ref = _clone_model(model)
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                decay_mask=model.decay_mask())
    rng = np.random.default_rng(int(seed))
    history = []
    best = (-np.inf, None)
    start = None
    for it in range(cfg.iterations):
        i = int(rng.integers(0, n))
        group = make_group(model, entries, tok, gathers[i], maps_norm[i],
                           int(d_ids[i]), cfg, seed=int(rng.integers(2 ** 31)))
        g = cfg.group_size
        with ad.no_grad():
            ref_lp = token_logprobs(
                ref, entries,
                np.broadcast_to(gathers[i], (g,) + gathers[i].shape),
                group.tokens, np.full(g, int(d_ids[i]))).numpy()
        mean_r = float(group.rewards.mean())
        if mean_r > best[0]:
            # the pre-update weights earned this group's reward
            best = (mean_r, {k: v.copy() for k, v in
                             model.state_arrays().items()})
        loss, kl = policy_objective(model, entries, group, cfg, ref_lp)
        opt.zero_grad()
        ad.backward(loss, params=params)
        opt.step()
        row = {"iteration": it, "mean_reward": mean_r, "kl": kl}
        history.append(row)
        if start is None:
            start = mean_r
        elif mean_r < start - 0.5 * abs(start):
            row["collapsed"] = True
            break
    if best[1] is not None:
        model.load_state_arrays(best[1])
    return model, history


def evaluate_mean_reward(model, tok, gathers, maps_norm, d_ids,
                         temperature=1.0, seed=0, batch=8):
    """Mean reward over a held-out set, one stochastic draw per gather.

    Returns (mean, per-sample rewards).
    """
    entries = tok.codebook.entries.data
    gathers = np.asarray(gathers, dtype=np.float64)
    maps_norm = np.asarray(maps_norm, dtype=np.float64)
    d_ids = np.asarray(d_ids)
    out = []
    for lo in range(0, len(gathers), batch):
        part = gathers[lo:lo + batch]
        toks = draw_samples(model, entries, part, d_ids[lo:lo + batch],
                            temperature=temperature, seed=seed + lo)
        with ad.no_grad():
            pred = tok.decode(toks).numpy()
        out.extend(-np.abs(pred - maps_norm[lo:lo + batch]).mean(axis=(1, 2)))
    rs = np.asarray(out)
    return float(rs.mean()), rs


def write_reward_csv(history, path):
    """Reward-curve rows (iteration, mean_reward, kl) as a CSV file."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "mean_reward", "kl"])
        for row in history:
            w.writerow([row["iteration"],
                        f"{row['mean_reward']:.10f}", f"{row['kl']:.10f}"])
