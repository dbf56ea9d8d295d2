"""Approximated Bayes (AB / AEB), quadrature Bayes and benchmarked predictors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate

from .errors import DataValidationError, DomainError, QuadratureError
from .model import AreaData, AreaRecord, ModelParams, shrinkage_factor

__all__ = [
    "QuadratureOptions",
    "PredictionSet",
    "BenchmarkWeights",
    "predict_ab",
    "predict",
    "predict_aeb",
    "bayes_shrinkage",
    "bayes_shrinkage_array",
    "predict_bayes",
    "benchmark_cab",
]


@dataclass(frozen=True)
class QuadratureOptions:
    """Settings for the Bayes shrinkage integral.

    The integral runs over t in [0, s + trunc_sd * sqrt(s) + trunc_pad],
    s = (n + 1 + alpha) / 2.
    """

    rtol: float = 1e-10
    trunc_sd: float = 12.0
    trunc_pad: float = 20.0
    limit: int = 2000
    chunk: int = 2048

    def __post_init__(self):
        if not (0 < self.rtol < 1):
            raise DomainError("rtol must lie in (0, 1)")
        if self.trunc_sd <= 0 or self.trunc_pad < 0 or self.limit < 1 or self.chunk < 1:
            raise DomainError("invalid quadrature options")


@dataclass(frozen=True)
class PredictionSet:
    """Per-area predictions.

    ``xi_ab`` is the AB formula at the parameters used; when those are
    estimates it is the AEB predictor, exposed as ``xi_aeb``.
    """

    area_ids: tuple[str, ...]
    y: np.ndarray
    synthetic: np.ndarray
    b: np.ndarray
    xi_ab: np.ndarray
    params: ModelParams
    xi_bayes: Optional[np.ndarray] = None
    e: Optional[np.ndarray] = None

    @property
    def xi_aeb(self) -> np.ndarray:
        return self.xi_ab

    def __len__(self):
        return len(self.y)


@dataclass(frozen=True)
class BenchmarkWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).reshape(-1)
        if w.size == 0 or not np.all(np.isfinite(w)):
            raise DataValidationError("weights must be a nonempty finite vector")
        if np.any(w < 0):
            raise DataValidationError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise DataValidationError(f"weights must sum to 1 (got {w.sum():.17g})")
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, m: int) -> "BenchmarkWeights":
        return cls(np.full(m, 1.0 / m))


# ---------------------------------------------------------------------------
# approximated Bayes
# ---------------------------------------------------------------------------


def predict_ab(params: ModelParams, record: AreaRecord) -> float:
    """z'beta + (1 - B)(y - z'beta)."""
    mu = float(np.dot(record.z, params.beta))
    b = shrinkage_factor(params.tau2, params.alpha, params.gamma, record.v, record.n)
    return mu + (1.0 - b) * (record.y - mu)


def _ab_arrays(params: ModelParams, data: AreaData):
    mu = data.z @ params.beta
    b = shrinkage_factor(params.tau2, params.alpha, params.gamma, data.v, data.n)
    return mu, b, mu + (1.0 - b) * (data.y - mu)


def predict(params: ModelParams, data: AreaData, bayes: bool = False,
            quad: QuadratureOptions | None = None) -> PredictionSet:
    """Predictions for every area of an unbatched dataset at ``params``."""
    if np.ndim(data.y) != 1:
        raise DomainError("predict expects a single dataset")
    if params.beta.shape[0] != data.p:
        raise DomainError("beta length does not match the number of covariates")
    mu, b, xi = _ab_arrays(params, data)
    xi_b = e = None
    if bayes:
        e = bayes_shrinkage_array(params.tau2, params.alpha, params.gamma, mu, data.y, data.v, data.n, quad)
        xi_b = mu + (1.0 - e) * (data.y - mu)
    ids = data.area_ids or tuple(str(i + 1) for i in range(data.m))
    return PredictionSet(ids, data.y.copy(), mu, b, xi, params, xi_b, e)


def predict_aeb(fit, data: AreaData, bayes: bool = False,
                quad: QuadratureOptions | None = None) -> PredictionSet:
    """Plug the fitted parameters into the AB formula (no re-fit)."""
    params = fit.params if hasattr(fit, "params") else fit
    return predict(params, data, bayes=bayes, quad=quad)


# ---------------------------------------------------------------------------
# Bayes shrinkage by quadrature
# ---------------------------------------------------------------------------
#
# E = int (1 + tau2 eta)^{-1} f(eta) d eta / int f(eta) d eta with
# f(eta) = eta^{s-1} (1 + tau2 eta)^{-1/2} exp(-eta (V + gamma)/2 - eta d^2 / (2 (1 + tau2 eta))).
# Substituting eta = c t, c = 2 / (V + gamma), gives a Gamma(s) kernel
# t^{s-1} e^{-t} times a factor bounded by one.

_GL_X, _GL_W = np.polynomial.legendre.leggauss(64)


def _log_den(t, s, ct2, cd2):
    # t (..., q) broadcast against per-area (..., 1) parameters
    u = 1.0 + ct2 * t
    with np.errstate(divide="ignore"):
        return (s - 1.0) * np.log(t) - t - 0.5 * np.log(u) - 0.5 * cd2 * t / u, u


def _shrinkage_chunk(s, ct2, cd2, upper, opts: QuadratureOptions):
    s, ct2, cd2, upper = (x[:, None] for x in (s, ct2, cd2, upper))
    # per-area log maximum from a coarse grid (shared by numerator and denominator)
    grid = upper * np.linspace(1e-6, 1.0, 513)[None, :]
    lmax = np.max(_log_den(grid, s, ct2, cd2)[0], axis=1, keepdims=True)

    def parts(u01):
        t = upper * u01
        ld, u = _log_den(t, s, ct2, cd2)
        den = np.exp(ld - lmax) * upper
        return den / u, den

    # composite Gauss-Legendre pass for per-component scales
    panels = 8
    nodes = ((np.arange(panels)[:, None] + 0.5 * (_GL_X[None, :] + 1.0)) / panels).ravel()
    weights = np.tile(_GL_W, panels) / (2.0 * panels)
    num0, den0 = parts(nodes[None, :])
    s_num = np.sum(num0 * weights, axis=1)
    s_den = np.sum(den0 * weights, axis=1)
    s_num = np.where(s_num > 0, s_num, 1.0)
    s_den = np.where(s_den > 0, s_den, 1.0)
    k = s_num.size

    def f(x):
        a, b = parts(np.array([[x]]))
        return np.concatenate([a[:, 0] / s_num, b[:, 0] / s_den])

    res, err, info = integrate.quad_vec(
        f, 0.0, 1.0, epsabs=0.0, epsrel=opts.rtol, norm="max", limit=opts.limit, full_output=True
    )
    if info.status != 0 or not np.all(np.isfinite(res)) or np.any(res[k:] <= 0):
        raise QuadratureError(
            "Bayes shrinkage quadrature did not converge",
            {"status": int(info.status), "error_estimate": float(err), "intervals": int(info.intervals.shape[0]),
             "evaluations": int(info.neval), "message": str(info.message)},
        )
    return (res[:k] * s_num) / (res[k:] * s_den)


def bayes_shrinkage_array(tau2, alpha, gamma, mu, y, v, n, quad: QuadratureOptions | None = None):
    """Vectorised Bayes shrinkage E for arrays that broadcast together."""
    opts = quad or QuadratureOptions()
    tau2, alpha, gamma, mu, y, v, n = np.broadcast_arrays(
        *(np.asarray(x, dtype=float) for x in (tau2, alpha, gamma, mu, y, v, n))
    )
    shape = y.shape
    if np.any(tau2 < 0) or np.any(alpha <= 0) or np.any(gamma <= 0):
        raise DomainError("need tau2 >= 0, alpha > 0, gamma > 0")
    if np.any(~(v > 0)) or np.any(n < 1):
        raise DomainError("need v > 0 and n >= 1")
    tau2, alpha, gamma, mu, y, v, n = (x.ravel() for x in (tau2, alpha, gamma, mu, y, v, n))
    out = np.ones(y.size)
    s = 0.5 * (n + 1.0 + alpha)
    c = 2.0 / (v + gamma)
    upper = s + opts.trunc_sd * np.sqrt(s) + opts.trunc_pad
    idx = np.flatnonzero(tau2 > 0)
    for start in range(0, idx.size, opts.chunk):
        j = idx[start : start + opts.chunk]
        out[j] = _shrinkage_chunk(s[j], c[j] * tau2[j], c[j] * (y[j] - mu[j]) ** 2, upper[j], opts)
    return out.reshape(shape)


def bayes_shrinkage(params: ModelParams, record: AreaRecord, quad: QuadratureOptions | None = None) -> float:
    """Posterior mean of 1/(1 + tau2 eta) given (y, V); equals 1 when tau2 = 0."""
    mu = float(np.dot(record.z, params.beta))
    e = bayes_shrinkage_array(params.tau2, params.alpha, params.gamma, mu, record.y, record.v, record.n, quad)
    return float(e)


def predict_bayes(params: ModelParams, record: AreaRecord, quad: QuadratureOptions | None = None) -> float:
    """z'beta + (1 - E)(y - z'beta)."""
    mu = float(np.dot(record.z, params.beta))
    e = bayes_shrinkage(params, record, quad)
    return mu + (1.0 - e) * (record.y - mu)


# ---------------------------------------------------------------------------
# benchmarking
# ---------------------------------------------------------------------------


def benchmark_cab(predictions, data: AreaData, weights: BenchmarkWeights) -> np.ndarray:
    """Benchmarked predictor delta_i = xi_i + w_i / sum(w^2) (ybar_w - sum w xi).

    ``predictions`` is a PredictionSet or an array of AEB predictions. The
    output satisfies sum w delta = sum w y exactly up to rounding.
    """
    xi = predictions.xi_aeb if isinstance(predictions, PredictionSet) else np.asarray(predictions, dtype=float)
    w = weights.w
    y = np.asarray(data.y, dtype=float)
    if w.shape[0] != xi.shape[-1] or y.shape[-1] != w.shape[0]:
        raise DataValidationError("weights do not match the number of areas")
    ss = float(np.dot(w, w))
    if not ss > 0:
        raise DataValidationError("sum of squared weights must be > 0")
    gap = y @ w - xi @ w
    return xi + np.multiply.outer(gap, w / ss) if np.ndim(gap) else xi + gap * w / ss


def benchmark_gap(xi, y, w) -> float:
    """ybar_w - sum w xi."""
    return float(np.dot(w, y) - np.dot(w, xi))

