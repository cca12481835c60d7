"""AdamW with decoupled weight decay and a warmup + cosine schedule."""

import numpy as np


class AdamW:
    """Standard Adam moments with weight decay applied outside the update.

    decay_mask, when given, must align with params; entries set False
    (biases, norm gains) skip the decay term.
    """

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=5e-2, decay_mask=None):
        self.params = list(params)
        if decay_mask is None:
            decay_mask = [True] * len(self.params)
        if len(decay_mask) != len(self.params):
            raise ValueError("decay_mask length does not match params")
        self.decay_mask = list(decay_mask)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v, decay in zip(self.params, self.m, self.v, self.decay_mask):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if decay and self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        """Flat name->array map for checkpointing."""
        out = {"t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"][0])
        for i in range(len(self.params)):
            self.m[i] = arrays[f"m{i}"].reshape(self.m[i].shape).copy()
            self.v[i] = arrays[f"v{i}"].reshape(self.v[i].shape).copy()


def cosine_schedule(base_lr, warmup_steps, total_steps, min_lr=0.0):
    """lr(t): linear 0 -> base over warmup, then cosine base -> min_lr.

    Returns a function of the step index (0-based call count works too:
    lr(0) = 0 when warmup_steps > 0, lr(warmup_steps) = base_lr).
    """
    if total_steps <= warmup_steps:
        raise ValueError("total_steps must exceed warmup_steps")

    def lr(step):
        if step < warmup_steps:
            return base_lr * step / warmup_steps
        frac = (step - warmup_steps) / (total_steps - warmup_steps)
        frac = min(frac, 1.0)
        return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + np.cos(np.pi * frac))

    return lr
