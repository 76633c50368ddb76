"""Finite-difference oracle shared by the gradient tests."""

import numpy as np


def central_diff(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arrays`` (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            up = fn()
            a[idx] = orig - h
            dn = fn()
            a[idx] = orig
            g[idx] = (up - dn) / (2 * h)
        out.append(g)
    return out


def rel_error(analytic, numeric, floor=1e-12):
    """Norm-ratio relative error of one gradient tensor."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return diff / scale
