"""Hot inner-loop kernels, compiled when available.

The Cython extension ``_ckernels`` is preferred; the numpy implementation in
``_fallback`` is used when the extension is not built or when the
environment variable ``GDMPOLICY_PURE_PYTHON=1`` is set.
"""

import os

from . import _fallback

if os.environ.get("GDMPOLICY_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _fallback

BACKEND = "cython" if _impl is not _fallback else "python"

rates = _impl.rates
weighted_rate_sum = _impl.weighted_rate_sum
rate_grad = _impl.rate_grad
ascent = _impl.ascent

__all__ = ["BACKEND", "rates", "weighted_rate_sum", "rate_grad", "ascent"]
