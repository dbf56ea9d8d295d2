"""Second-order MSE estimation for the AEB and benchmarked predictors.

The leading term is the plug-in G(theta-hat, V_i); the O(1/m) corrections
g12, g2, g3 (and the benchmarking cross term J) come from a single
parametric bootstrap that re-runs the whole fitting pipeline on each
bootstrap dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._parallel import chunk_ranges, flatten, ordered_map
from .errors import BootstrapError, DataValidationError, DomainError
from .estimation import FitOptions, FitResult, fit_batch
from .model import AreaData, AreaRecord, ModelParams, shrinkage_factor
from .prediction import BenchmarkWeights
from .sampling import STREAM_BOOTSTRAP, Design, RngSeed, generate_many

__all__ = [
    "GFunctionValue",
    "MseReport",
    "BootstrapComponents",
    "g_function",
    "g_values",
    "g11_hat",
    "bootstrap_mse_components",
    "mse_aeb",
    "j_star",
    "mse_cab",
    "FrozenRefit",
]

MAX_DROP_FRACTION = 0.10
BOOT_CHUNK = 50


@dataclass(frozen=True)
class GFunctionValue:
    value: float
    theta_used: tuple[float, float, float]
    v: float
    n: int


def g_values(tau2, alpha, gamma, v, n):
    """G = (v+gamma)/(n-2+alpha) (1-B)^2 + tau2 B^2, elementwise, no validation."""
    b = shrinkage_factor(tau2, alpha, gamma, v, n)
    return (v + gamma) / (n - 2.0 + alpha) * (1.0 - b) ** 2 + tau2 * b**2


def g_function(theta, v, n) -> GFunctionValue:
    tau2, alpha, gamma = (float(x) for x in theta)
    if tau2 < 0 or alpha <= 0 or gamma <= 0:
        raise DomainError("need tau2 >= 0, alpha > 0, gamma > 0")
    if not v > 0:
        raise DomainError("v must be > 0")
    if n + alpha <= 2:
        raise DomainError("G needs n + alpha > 2")
    return GFunctionValue(float(g_values(tau2, alpha, gamma, v, n)), (tau2, alpha, gamma), float(v), int(n))


def g11_hat(fit, record) -> float | np.ndarray:
    """Plug-in G(theta-hat, V_i); ``record`` may be an AreaRecord or AreaData."""
    params = fit.params if hasattr(fit, "params") else fit
    if isinstance(record, AreaRecord):
        return g_function(params.theta, record.v, record.n).value
    if np.any(record.n + params.alpha <= 2):
        raise DomainError("G needs n + alpha > 2")
    return g_values(params.tau2, params.alpha, params.gamma, record.v, record.n)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------


class FrozenRefit:
    """Refit stand-in that returns fixed parameters for every dataset."""

    def __init__(self, params: ModelParams):
        self.params = params

    def __call__(self, data: AreaData, options: FitOptions):
        k = np.atleast_2d(data.y).shape[0]
        p = self.params
        return (
            np.tile(p.beta, (k, 1)),
            np.full(k, p.tau2),
            np.full(k, p.alpha),
            np.full(k, p.gamma),
            np.ones(k, dtype=bool),
            np.ones(k, dtype=bool),
        )


def _default_refit(data: AreaData, options: FitOptions):
    bf = fit_batch(data, options)
    ok = ~bf.failed
    return bf.beta, bf.tau2, bf.alpha, bf.gamma, ok, bf.converged


@dataclass(frozen=True)
class BootstrapComponents:
    g12: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    j_star: Optional[np.ndarray]
    replicates: int
    used: int
    dropped: int
    nonconverged: int


def _boot_chunk(task):
    params, z, n, seed, lo, hi, w, refit, options = task
    design = Design(z, n)
    ds = generate_many(params, design, [seed.child(STREAM_BOOTSTRAP, b) for b in range(lo, hi)])
    y, v, xi = ds.data.y, ds.data.v, ds.xi
    beta_s, tau2_s, alpha_s, gamma_s, ok, conv = refit(ds.data, options)
    tau2, alpha, gamma = params.theta
    mu = z @ params.beta                                  # (m,)
    b_true = shrinkage_factor(tau2, alpha, gamma, v, n)   # B(theta-hat, V*)
    out_g12 = np.full(y.shape, np.nan)
    out_d2 = np.full(y.shape, np.nan)
    out_g3 = np.full(y.shape, np.nan)
    out_j = np.full(y.shape, np.nan) if w is not None else None
    r = np.flatnonzero(ok)
    if r.size:
        t2s, als, gas = tau2_s[r, None], alpha_s[r, None], gamma_s[r, None]
        b_hat = shrinkage_factor(t2s, als, gas, v[r], n)  # B(theta-hat*, V*)
        mu_s = beta_s[r] @ z.T
        d = (b_hat - b_true[r]) * (y[r] - mu) - b_hat * (mu_s - mu)
        ab_err = (1.0 - b_true[r]) * y[r] + b_true[r] * mu - xi[r]
        out_g12[r] = g_values(t2s, als, gas, v[r], n) - g_values(tau2, alpha, gamma, v[r], n)
        out_d2[r] = d * d
        out_g3[r] = ab_err * d
        if w is not None:
            aeb = mu_s + (1.0 - b_hat) * (y[r] - mu_s)
            gap = y[r] @ w - aeb @ w
            out_j[r] = (aeb - xi[r]) * gap[:, None]
    return out_g12, out_d2, out_g3, out_j, ok, conv


def _as_seed(seed) -> RngSeed:
    return seed if isinstance(seed, RngSeed) else RngSeed(int(seed))


def bootstrap_mse_components(
    fit,
    data: AreaData,
    replicates: int,
    seed,
    weights: BenchmarkWeights | None = None,
    refit: Callable | None = None,
    workers: int | None = 1,
    fit_options: FitOptions | None = None,
    chunk: int = BOOT_CHUNK,
) -> BootstrapComponents:
    """Bootstrap averages g12*, g2*, g3* (and J* when weights are given).

    Replicate b uses the stream ``seed.child(STREAM_BOOTSTRAP, b)``; chunks
    are fixed, so the result does not depend on ``workers``. Replicates whose
    re-fit fails are dropped and counted; more than 10% dropped is an error.
    """
    if replicates < 1:
        raise DomainError("replicates must be >= 1")
    if np.ndim(data.y) != 1:
        raise DomainError("bootstrap expects a single dataset")
    params = fit.params if isinstance(fit, FitResult) else fit
    seed = _as_seed(seed)
    w = None
    if weights is not None:
        w = weights.w
        if w.shape[0] != data.m:
            raise DataValidationError("weights do not match the number of areas")
    refit = refit or _default_refit
    options = fit_options or FitOptions()
    n = np.asarray(data.n, dtype=float)
    tasks = [(params, data.z, n, seed, lo, hi, w, refit, options) for lo, hi in chunk_ranges(replicates, chunk)]
    parts = ordered_map(_boot_chunk, tasks, workers)
    g12 = np.concatenate([p[0] for p in parts])
    d2 = np.concatenate([p[1] for p in parts])
    g3 = np.concatenate([p[2] for p in parts])
    ok = np.concatenate([p[4] for p in parts])
    conv = np.concatenate([p[5] for p in parts])
    dropped = int(np.sum(~ok))
    if dropped > MAX_DROP_FRACTION * replicates:
        raise BootstrapError(f"{dropped} of {replicates} bootstrap re-fits failed (limit 10%)")
    j = None
    if w is not None:
        j = np.concatenate([p[3] for p in parts])[ok].mean(axis=0)
    return BootstrapComponents(
        g12=g12[ok].mean(axis=0),
        g2=d2[ok].mean(axis=0),
        g3=g3[ok].mean(axis=0),
        j_star=j,
        replicates=replicates,
        used=int(ok.sum()),
        dropped=dropped,
        nonconverged=int(np.sum(ok & ~conv)),
    )


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MseReport:
    area_ids: tuple[str, ...]
    g11_hat: np.ndarray
    g12_star: np.ndarray
    g2_star: np.ndarray
    g3_star: np.ndarray
    mse_aeb: np.ndarray
    replicates: int
    seed: RngSeed
    dropped: int = 0
    nonconverged: int = 0
    squared_gap: Optional[float] = None
    j_star: Optional[np.ndarray] = None
    mse_cab: Optional[np.ndarray] = None
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.replicates < 1:
            raise DomainError("replicates must be >= 1")


def _aeb_gap(params: ModelParams, data: AreaData, w: np.ndarray) -> float:
    mu = data.z @ params.beta
    b = shrinkage_factor(params.tau2, params.alpha, params.gamma, data.v, data.n)
    aeb = mu + (1.0 - b) * (data.y - mu)
    return float(np.dot(w, data.y) - np.dot(w, aeb))


def _report(fit, data, replicates, seed, weights, **kw) -> MseReport:
    params = fit.params if isinstance(fit, FitResult) else fit
    seed = _as_seed(seed)
    g11 = g11_hat(params, data)
    comp = bootstrap_mse_components(params, data, replicates, seed, weights=weights, **kw)
    mse = g11 - comp.g12 + comp.g2 - 2.0 * comp.g3
    ids = data.area_ids or tuple(str(i + 1) for i in range(data.m))
    warns = []
    if comp.dropped:
        warns.append(f"{comp.dropped} bootstrap replicate(s) dropped after failed re-fit")
    extra = {}
    if weights is not None:
        w = weights.w
        ss = float(np.dot(w, w))
        gap = _aeb_gap(params, data, w)
        extra = dict(
            squared_gap=gap * gap,
            j_star=comp.j_star,
            mse_cab=mse + (w / ss) ** 2 * gap * gap + 2.0 * (w / ss) * comp.j_star,
        )
    return MseReport(
        area_ids=ids,
        g11_hat=g11,
        g12_star=comp.g12,
        g2_star=comp.g2,
        g3_star=comp.g3,
        mse_aeb=mse,
        replicates=replicates,
        seed=seed,
        dropped=comp.dropped,
        nonconverged=comp.nonconverged,
        warnings=tuple(warns),
        **extra,
    )


def mse_aeb(fit, data: AreaData, replicates: int = 1000, seed=0, **kw) -> MseReport:
    """g11-hat - g12* + g2* - 2 g3* for every area."""
    return _report(fit, data, replicates, seed, None, **kw)


def mse_cab(fit, data: AreaData, weights: BenchmarkWeights, replicates: int = 1000, seed=0, **kw) -> MseReport:
    """AEB report extended with the benchmarked predictor's MSE estimate.

    mse_cab_i = mse_aeb_i + (w_i / S)^2 gap^2 + 2 (w_i / S) J*_i with
    S = sum w^2 and gap = ybar_w - sum w xi-hat^AEB. J* shares the bootstrap
    replicates used for g12, g2 and g3.
    """
    return _report(fit, data, replicates, seed, weights, **kw)


def j_star(fit, data: AreaData, weights: BenchmarkWeights, replicates: int = 1000, seed=0, **kw) -> np.ndarray:
    """Bootstrap mean of (xi-hat^AEB* - xi*) (ybar_w* - sum w xi-hat^AEB*)."""
    params = fit.params if isinstance(fit, FitResult) else fit
    return bootstrap_mse_components(params, data, replicates, seed, weights=weights, **kw).j_star
