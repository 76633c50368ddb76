"""Pure numpy kernels for rates and the primal Lagrangian ascent.

Inputs are dimensionless: powers ``u`` in [0, 1] (fraction of p_max) and
gains ``g`` already scaled by ``p_max / noise_power``, with ``g[j, i]`` the
gain from transmitter j to receiver i. Signatures mirror ``_ckernels.pyx``.
"""

import numpy as np

INV_LN2 = 1.0 / np.log(2.0)


def _parts(u, g):
    # interference excludes the diagonal explicitly; forming it as
    # total - signal cancels badly when the direct link dominates
    off = g.copy()
    np.fill_diagonal(off, 0.0)
    signal = u * np.diagonal(g)
    interf = 1.0 + u @ off
    return off, signal, interf


def rates(u, g):
    u = np.asarray(u, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _, signal, interf = _parts(u, g)
    return np.log1p(signal / interf) * INV_LN2


def weighted_rate_sum(u, g, w):
    return float(np.dot(w, rates(u, g)))


def rate_grad(u, g, w):
    """Gradient of sum_i w_i r_i(u) with respect to u.

    d r_i / d u_j is g_ii / T_i for j = i and -g_ji S_i / (T_i I_i) otherwise
    (over ln 2), with signal S, interference-plus-noise I and T = S + I.
    """
    u = np.asarray(u, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    off, signal, interf = _parts(u, g)
    total = signal + interf
    grad = np.diagonal(g) * w / total - off @ (w * signal / (total * interf))
    return grad * INV_LN2


def ascent(u0, g, w, eta, steps):
    """Projected gradient ascent of sum_i w_i r_i over the unit box.

    Returns ``(u, value)`` at the terminal iterate.
    """
    u = np.clip(np.array(u0, dtype=np.float64), 0.0, 1.0)
    g = np.asarray(g, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    for _ in range(steps):
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            grad = rate_grad(u, g, w)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite Lagrangian gradient")
        u = np.clip(u + eta * grad, 0.0, 1.0)
    return u, weighted_rate_sum(u, g, w)
