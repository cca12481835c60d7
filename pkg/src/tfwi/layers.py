"""Parameterized layers on top of the autodiff engine.

Modules hold Tensors and expose parameters() in a stable declaration
order so optimizers and checkpoints see the same flat list every run.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def parameters(self):
        """Depth-first parameter list, stable across runs."""
        out = []
        seen = set()
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                if id(val) not in seen:
                    seen.add(id(val))
                    out.append(val)
            elif isinstance(val, Module):
                for p in val.parameters():
                    if id(p) not in seen:
                        seen.add(id(p))
                        out.append(p)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        for p in item.parameters():
                            if id(p) not in seen:
                                seen.add(id(p))
                                out.append(p)
                    elif isinstance(item, Tensor) and item.requires_grad:
                        if id(item) not in seen:
                            seen.add(id(item))
                            out.append(item)
        return out

    def named_parameters(self, prefix=""):
        out = []
        seen = set()
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                if id(val) not in seen:
                    seen.add(id(val))
                    out.append((key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix=key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{key}.{i}", item))
        return out

    def decay_mask(self):
        """True for matrix-like weights, False for biases and norm gains."""
        return [p.data.ndim >= 2 for p in self.parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def state_arrays(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays):
        for name, p in self.named_parameters():
            src = arrays[name]
            if src.shape != p.data.shape:
                src = src.reshape(p.data.shape)
            p.data = np.ascontiguousarray(src.astype(np.float64))


def _uniform(rng, shape, bound):
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        bound = 1.0 / np.sqrt(d_in)
        self.w = _uniform(rng, (d_in, d_out), bound)
        self.b = _uniform(rng, (d_out,), bound) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.w)
        if self.b is not None:
            y = ad.add(y, self.b)
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num, dim, rng, scale=0.02):
        self.table = Tensor(rng.normal(0.0, scale, (num, dim)), requires_grad=True)

    def __call__(self, idx):
        return ad.embedding(self.table, idx)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, pad="same", pad_mode="zero",
                 bias=True):
        bound = 1.0 / np.sqrt(c_in * k * k)
        self.w = _uniform(rng, (c_out, c_in, k, k), bound)
        self.b = _uniform(rng, (c_out,), bound) if bias else None
        self.k = k
        self.stride = stride
        self.pad = pad
        self.pad_mode = pad_mode

    def _pads(self, h, w):
        if self.pad == "same":
            return ad.same_pads(h, self.k, self.stride), ad.same_pads(w, self.k, self.stride)
        if self.pad == "valid":
            return (0, 0), (0, 0)
        return self.pad  # explicit ((pt,pb),(pl,pr))

    def __call__(self, x):
        pads = self._pads(x.shape[2], x.shape[3])
        return ad.conv2d(x, self.w, self.b, self.stride, pads, self.pad_mode)


class MLP(Module):
    """Two-layer feedforward with GELU, hidden = mult * dim."""

    def __init__(self, dim, rng, mult=4):
        self.fc1 = Linear(dim, mult * dim, rng)
        self.fc2 = Linear(mult * dim, dim, rng)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


def _split_heads(x, n_heads):
    # (B, L, D) -> (B, H, L, Dh)
    b, l, d = x.shape
    dh = d // n_heads
    return ad.transpose(ad.reshape(x, (b, l, n_heads, dh)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, l, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


class Attention(Module):
    """Multi-head attention with optional rotary rotation on Q and K.

    mask, when given, is a (L, L) float array added to the pre-softmax
    scores (use -inf style large negatives for disallowed positions).
    """

    def __init__(self, dim, n_heads, rng):
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by heads {n_heads}")
        self.n_heads = n_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x, mask=None, rope=None):
        b, l, d = x.shape
        dh = d // self.n_heads
        q = _split_heads(self.q(x), self.n_heads)
        k = _split_heads(self.k(x), self.n_heads)
        v = _split_heads(self.v(x), self.n_heads)
        if rope is not None:
            cos, sin = rope
            q = ad.rope_rotate(q, cos, sin)
            k = ad.rope_rotate(k, cos, sin)
        att = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        att = att * (1.0 / np.sqrt(dh))
        if mask is not None:
            att = att + Tensor(mask)
        att = ad.softmax(att)
        y = ad.matmul(att, v)
        return self.proj(_merge_heads(y))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim, n_heads, rng, mlp_mult=4):
        self.ln1 = LayerNorm(dim)
        self.attn = Attention(dim, n_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, rng, mlp_mult)

    def __call__(self, x, mask=None, rope=None):
        x = x + self.attn(self.ln1(x), mask=mask, rope=rope)
        return x + self.mlp(self.ln2(x))


def causal_mask(length):
    """(L, L) additive mask: position i attends to j <= i."""
    m = np.zeros((length, length))
    m[np.triu_indices(length, k=1)] = -1e30
    return m
