"""Central finite-difference checks for autodiff graphs (float64)."""

import numpy as np


def numeric_grad(f, arr, idx, h):
    """Central differences of scalar ``f()`` w.r.t. ``arr.flat[idx]`` (in place)."""
    out = np.empty(len(idx))
    flat = arr.reshape(-1)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def check(build, tensors, h=1e-5, max_entries=40, seed=0):
    """Worst norm-wise relative error between analytic and numeric gradients.

    ``build()`` returns a scalar Tensor computed from ``tensors`` (a dict of
    leaf Tensors with ``requires_grad``). Up to ``max_entries`` randomly
    chosen entries per tensor are differenced.
    """
    rng = np.random.default_rng(seed)
    for t in tensors.values():
        t.grad = None
    build().backward()
    analytic = {k: np.zeros_like(t.data) if t.grad is None else t.grad.copy() for k, t in tensors.items()}
    worst = 0.0
    for k, t in tensors.items():
        n = t.data.size
        idx = np.arange(n) if n <= max_entries else np.sort(rng.choice(n, max_entries, replace=False))
        num = numeric_grad(lambda: float(build().data), t.data, idx, h)
        ana = analytic[k].reshape(-1)[idx]
        scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
        worst = max(worst, float(np.linalg.norm(num - ana) / scale))
    return worst
