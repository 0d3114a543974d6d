"""Central finite-difference verification of reverse-mode gradients."""

import numpy as np


def finite_diff_check(f, params, eps=1e-4, n_coords=200, seed=0):
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes no arguments and returns a scalar Tensor computed from
    ``params``.  Coordinates are sampled uniformly across all parameters
    (every coordinate when there are at most ``n_coords``).  Returns the
    maximum relative error, with denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"finite-difference check requires float64 parameters ({getattr(p, 'name', '')} is {p.data.dtype})")
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("objective is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_ids = np.arange(total) if total <= n_coords else rng.choice(total, size=n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for fid in np.sort(flat_ids):
        k = int(np.searchsorted(offsets, fid, side="right") - 1)
        p = params[k]
        flat = p.data.reshape(-1)
        j = fid - offsets[k]
        orig = flat[j]
        flat[j] = orig + eps
        up = float(f().data)
        flat[j] = orig - eps
        down = float(f().data)
        flat[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError("objective is not finite under perturbation")
        numeric = (up - down) / (2.0 * eps)
        a = float(analytic[k].reshape(-1)[j])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
