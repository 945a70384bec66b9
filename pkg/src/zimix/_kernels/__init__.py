"""Numerical kernel backend selection.

The compiled Cython extension is preferred when importable; the NumPy
reference implementation is the fallback.  Set ``ZIMIX_DISABLE_SPEEDUPS=1``
to force the fallback (used by the backend-equivalence tests and the
benchmark).
"""

import os

from . import reference

backend_name = "numpy"
_impl = reference

if not os.environ.get("ZIMIX_DISABLE_SPEEDUPS"):
    try:
        from . import _speedups as _compiled
    except ImportError:
        pass
    else:
        backend_name = "cython"
        _impl = _compiled

log_h_lognormal = _impl.log_h_lognormal
log_false_zero_sum_poisson = _impl.log_false_zero_sum_poisson
log_false_zero_sum_negbin = _impl.log_false_zero_sum_negbin

__all__ = [
    "backend_name",
    "log_h_lognormal",
    "log_false_zero_sum_poisson",
    "log_false_zero_sum_negbin",
    "reference",
]
