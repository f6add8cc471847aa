"""Shared test oracles: central finite differences and tiny graph builders."""

import numpy as np

from odin.autodiff import Tensor


def finite_diff_check(fn, tensors, step=1e-5, rtol=1e-4, atol=1e-8, probes=None, rng=None):
    """Compare analytic gradients of scalar fn(tensors) against central differences.

    fn must be a pure function of the tensors' data. `probes` limits the check
    to that many randomly chosen scalar entries per tensor (all entries when
    None). Returns the worst relative error seen.
    """
    loss = fn()
    for t in tensors:
        t.zero_grad()
    loss.backward()
    worst = 0.0
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idxs = range(flat.size)
        if probes is not None and flat.size > probes:
            assert rng is not None
            idxs = rng.choice(flat.size, size=probes, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            num = (hi - lo) / (2 * step)
            ana = grad.reshape(-1)[i]
            err = abs(num - ana) / max(abs(num), abs(ana), atol / rtol)
            worst = max(worst, err)
            assert err < rtol, f"grad mismatch at entry {i}: analytic {ana}, numeric {num}"
    return worst


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def rand_tensor(rng, *shape, scale=1.0, requires_grad=True):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)
