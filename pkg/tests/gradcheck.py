"""Central-difference gradient checker shared by the test modules."""

import numpy as np

from tfwi import autodiff as ad
from tfwi.autodiff import Tensor


def numeric_grad(fn, tensors, which, h=1e-5):
    """d fn / d tensors[which] by central differences, elementwise."""
    t = tensors[which]
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with ad.no_grad():
            hi = fn(*tensors).item()
        flat[i] = orig - h
        with ad.no_grad():
            lo = fn(*tensors).item()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def check(fn, tensors, h=1e-5, rtol=1e-6, atol=1e-8):
    """Compare analytic grads of scalar fn(*tensors) against central diffs."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    loss = fn(*tensors)
    ad.backward(loss, params=tensors)
    for i, t in enumerate(tensors):
        num = numeric_grad(fn, tensors, i, h=h)
        ana = t.grad
        denom = max(np.abs(num).max(), np.abs(ana).max(), atol)
        rel = np.abs(ana - num).max() / denom
        assert rel < rtol, f"input {i}: rel err {rel:.3e} (shape {t.shape})"
