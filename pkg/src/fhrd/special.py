"""Log-gamma, digamma and trigamma with strict domain checking.

Thin wrappers over :mod:`scipy.special`; the wrappers reject non-positive or
non-finite arguments instead of returning ``inf``/``nan``.
"""

import numpy as np
from scipy import special as _sp

from .errors import DomainError

__all__ = ["log_gamma", "digamma", "trigamma"]


def _check_positive(x, name):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError(f"{name} requires finite x > 0, got {x!r}")
    return arr


def _out(value, like):
    return float(value) if np.ndim(like) == 0 else value


def log_gamma(x):
    """log Gamma(x) for x > 0."""
    arr = _check_positive(x, "log_gamma")
    return _out(_sp.gammaln(arr), x)


def digamma(x):
    """psi(x) = d/dx log Gamma(x) for x > 0."""
    arr = _check_positive(x, "digamma")
    return _out(_sp.digamma(arr), x)


def trigamma(x):
    """psi'(x) for x > 0."""
    arr = _check_positive(x, "trigamma")
    return _out(_sp.polygamma(1, arr), x)
