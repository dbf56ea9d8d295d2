"""Moment estimators of (beta, tau2, alpha, gamma) and the fitting loop.

Every estimator has a batched core working on ``(k, m)`` arrays (k datasets
sharing one design) so that bootstrap and simulation re-fits run vectorised.
Rows are frozen as soon as they converge, which makes each row's answer
independent of the rest of the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import (
    ConvergenceError,
    DomainError,
    FHRDError,
    NoRootError,
    NumericalError,
    SingularDesignError,
)
from .model import AreaData, ModelParams

__all__ = [
    "FitOptions",
    "FitResult",
    "BatchFit",
    "estimate_beta_ols",
    "estimate_beta_gls",
    "estimate_tau2",
    "estimate_alpha",
    "estimate_gamma",
    "alpha_quadratic_coefficients",
    "fit",
    "fit_batch",
]


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 100
    tol: float = 1e-8
    alpha0: float = 4.0
    tau_floor_mult: float = 1e-8
    alpha_bracket: tuple[float, float] = (1e-4, 1e3)
    alpha_floor: float = 1e-4
    gamma_rtol: float = 1e-10
    gamma_max_iter: int = 200
    # "ols": tau2 from OLS residuals (default). "gls": re-iterate tau2 with
    # GLS residuals until beta and tau2 settle; an alternative, not the default.
    tau2_residuals: str = "ols"

    def __post_init__(self):
        if self.tau2_residuals not in ("ols", "gls"):
            raise DomainError("tau2_residuals must be 'ols' or 'gls'")
        if self.max_iter < 1 or self.gamma_max_iter < 1:
            raise DomainError("iteration limits must be >= 1")
        if not (self.tol > 0 and self.gamma_rtol > 0 and self.tau_floor_mult >= 0):
            raise DomainError("tolerances must be positive")
        lo, hi = self.alpha_bracket
        if not 0 < lo < hi:
            raise DomainError("alpha bracket must satisfy 0 < lo < hi")


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    ols_beta: np.ndarray
    iterations: int
    converged: bool
    tau2_truncated: bool
    alpha_fallback_used: bool
    residual_norm: float
    tau2_raw: float = float("nan")
    polished: bool = False
    gamma_bracket: tuple[float, float] = (float("nan"), float("nan"))
    warnings: tuple[str, ...] = field(default=())

    def diagnostics(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "tau2_truncated": self.tau2_truncated,
            "tau2_raw": self.tau2_raw,
            "alpha_fallback_used": self.alpha_fallback_used,
            "polished": self.polished,
            "residual_norm": self.residual_norm,
            "gamma_bracket": list(self.gamma_bracket),
            "ols_beta": [float(b) for b in self.ols_beta],
            "warnings": list(self.warnings),
        }


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _as_batch(data: AreaData):
    y = np.atleast_2d(np.asarray(data.y, dtype=float))
    v = np.atleast_2d(np.asarray(data.v, dtype=float))
    n = np.broadcast_to(np.asarray(data.n, dtype=float), y.shape)
    return y, v, n, np.asarray(data.z, dtype=float)


def _check_design(z: np.ndarray):
    m, p = z.shape
    if m < p or np.linalg.matrix_rank(z) < p:
        raise SingularDesignError(f"design matrix of shape {z.shape} is rank deficient")


def _ols(y, z):
    # y (k, m), z (m, p) -> (k, p)
    return np.linalg.solve(z.T @ z, z.T @ y.T).T


def _gls(y, v, n, z, tau2, alpha, gamma):
    # Weights 1 - B_j are proportional to A_j / (1 + tau2 A_j); the tau2
    # factor cancels, which keeps the tau2 -> 0 limit well defined.
    a = (n + 1.0 + alpha[:, None]) / (v + gamma[:, None])
    w = a / (1.0 + tau2[:, None] * a)
    mat = np.einsum("km,mp,mq->kpq", w, z, z)
    rhs = np.einsum("km,mp,km->kp", w, z, y)
    try:
        return np.linalg.solve(mat, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise SingularDesignError("weighted design matrix is singular") from None


def _tau2(y, v, n, z, alpha, gamma, beta_ols, floor_mult):
    if np.any(n + alpha[:, None] <= 2):
        raise DomainError("tau2 estimator needs n_i + alpha > 2 for every area")
    resid = y - beta_ols @ z.T
    num = np.sum(resid**2 / (v + gamma[:, None]) - 1.0 / (n + alpha[:, None] - 2.0), axis=-1)
    den = np.sum((alpha / gamma)[:, None] / (n + alpha[:, None]), axis=-1)
    raw = num / den
    floor = floor_mult * np.mean(v / n, axis=-1)
    return np.maximum(raw, floor), raw < floor, raw


def alpha_quadratic_coefficients(v, n, gamma):
    """Coefficients (a, b, c) of a*alpha^2 + b*alpha - c = 0 (batched)."""
    v = np.atleast_2d(v)
    n = np.broadcast_to(n, v.shape)
    g = np.asarray(gamma, dtype=float).reshape(-1, 1)
    log_vg = np.log(v + g)
    r = v + g
    a = np.sum(v / r * log_vg, axis=-1)
    b = np.sum(n * (v - g) / r * log_vg, axis=-1)
    c = np.sum(n * (n * g / r * log_vg + 2.0), axis=-1)
    return a, b, c


def _positive_quadratic_root(a, b, c):
    """Unique positive root of a x^2 + b x - c = 0 where it exists, else nan."""
    disc = b * b + 4.0 * a * c
    ok = (a > 0) & (disc >= 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    sign_b = np.where(b >= 0, 1.0, -1.0)
    q = -0.5 * (b + sign_b * sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(ok, q / np.where(a != 0, a, 1.0), np.nan)
        r2 = np.where(ok & (q != 0), -c / np.where(q != 0, q, 1.0), np.nan)
    pos1 = r1 > 0
    pos2 = r2 > 0
    one = ok & (pos1 ^ pos2)
    root = np.where(pos1, r1, r2)
    return np.where(one, root, np.nan)


def _alpha_moment_identity(alpha, v, n, gamma):
    # Averaged identity E[V/(V+g) log(V+g)] = n/(n+a) (E[log(V+g)] + 2/(n+a)).
    log_vg = np.log(v + gamma)
    r = n / (n + alpha)
    return float(np.sum(v / (v + gamma) * log_vg - r * (log_vg + 2.0 / (n + alpha))))


def _alpha_fallback(v, n, gamma, bracket):
    lo, hi = bracket
    f_lo = _alpha_moment_identity(lo, v, n, gamma)
    f_hi = _alpha_moment_identity(hi, v, n, gamma)
    if not (np.isfinite(f_lo) and np.isfinite(f_hi)) or f_lo * f_hi > 0:
        raise NoRootError(
            f"alpha moment identity has no sign change on [{lo}, {hi}] (gamma={gamma:.6g})"
        )
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    return optimize.brentq(
        _alpha_moment_identity, lo, hi, args=(v, n, gamma), xtol=1e-14, rtol=1e-14, maxiter=500
    )


def _alpha_batch(v, n, gamma, opts: FitOptions):
    """alpha-hat for every row given gamma; returns (alpha, fallback, error)."""
    a, b, c = alpha_quadratic_coefficients(v, n, gamma)
    root = _positive_quadratic_root(a, b, c)
    fallback = ~np.isfinite(root)
    err = np.zeros(root.shape, dtype=bool)
    for i in np.flatnonzero(fallback):
        try:
            root[i] = _alpha_fallback(v[i], n[i], float(gamma[i]), opts.alpha_bracket)
        except NoRootError:
            err[i] = True
    return np.maximum(root, opts.alpha_floor), fallback, err


def _gamma_bracket(v, n, alpha):
    target = np.sum(n / (n + alpha[:, None]), axis=-1)
    m = v.shape[-1]
    ratio = (m - target) / target
    return np.min(v, axis=-1) * ratio, np.max(v, axis=-1) * ratio, target


def _gamma_batch(v, n, alpha, rtol, max_iter, start=None):
    """Root of sum v/(v+g) = sum n/(n+alpha) for each row.

    Safeguarded Newton in log(g) inside a closed-form bracket.
    Returns (gamma, converged, lo, hi).
    """
    lo, hi, target = _gamma_bracket(v, n, alpha)
    k = v.shape[0]
    u_lo = np.log(lo)
    u_hi = np.log(hi)
    if start is None:
        u = 0.5 * (u_lo + u_hi)
    else:
        u = np.clip(np.log(start), u_lo, u_hi)
    done = (u_hi - u_lo) <= 1e-15 * np.maximum(1.0, np.abs(u_hi))
    u = np.where(done, u_lo, u)
    active = np.flatnonzero(~done)
    for _ in range(max_iter):
        if active.size == 0:
            break
        va = v[active]
        g = np.exp(u[active])[:, None]
        r = va / (va + g)
        f = np.sum(r, axis=-1) - target[active]
        dfdu = -np.sum(r * (1.0 - r), axis=-1)
        # f is decreasing in u: f > 0 means the root lies above u
        pos = f > 0
        u_lo[active] = np.where(pos, u[active], u_lo[active])
        u_hi[active] = np.where(pos, u_hi[active], u[active])
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(f == 0, 0.0, -f / dfdu)
        tiny = np.abs(step) <= rtol * 1e-2
        cand = u[active] + step
        bad = ~tiny & (~np.isfinite(cand) | (cand <= u_lo[active]) | (cand >= u_hi[active]))
        cand = np.where(bad, 0.5 * (u_lo[active] + u_hi[active]), cand)
        u[active] = cand
        fin = tiny | ((u_hi[active] - u_lo[active]) <= rtol * 1e-3)
        done[active[fin]] = True
        active = active[~fin]
    return np.exp(u), done, lo, hi


def _fixed_point_residual(alpha, gamma, v, n, opts):
    a_next, fb, err = _alpha_batch(v, n, gamma, opts)
    return np.abs(a_next - alpha) / alpha, fb, err


def _phi_batch(v, n, alpha, opts: FitOptions):
    """alpha -> A(G(alpha)) - alpha for each row; nan where a sub-solve fails."""
    g, ok, _, _ = _gamma_batch(v, n, alpha, opts.gamma_rtol, opts.gamma_max_iter)
    a_next, _, err = _alpha_batch(v, n, g, opts)
    return np.where(ok & ~err, a_next - alpha, np.nan)


def _polish_batch(v, n, alpha, opts: FitOptions, max_expand=60, max_iter=200):
    """Solve alpha = A(G(alpha)) row-wise with a bracketed 1-d search.

    The bracket grows geometrically from the alternation iterate, then
    Illinois regula falsi closes it. Rows are independent; returns
    (alpha, ok).
    """
    lo_lim, hi_lim = opts.alpha_bracket
    k = alpha.shape[0]
    a0 = np.clip(alpha, lo_lim, hi_lim)
    f0 = _phi_batch(v, n, a0, opts)
    ok = np.isfinite(f0)
    done = ok & (f0 == 0)
    out = a0.copy()
    factor = np.where(f0 > 0, 1.25, 0.8)
    a_lo, f_lo, a_hi, f_hi = a0.copy(), f0.copy(), a0.copy(), f0.copy()
    bracketed = done.copy()
    prev, fprev = a0.copy(), f0.copy()
    search = np.flatnonzero(ok & ~done)
    for _ in range(max_expand):
        if search.size == 0:
            break
        a1 = np.clip(prev[search] * factor[search], lo_lim, hi_lim)
        f1 = _phi_batch(v[search], n[search], a1, opts)
        bad = ~np.isfinite(f1)
        ok[search[bad]] = False
        hit = ~bad & (np.sign(f1) != np.sign(fprev[search]))
        zero = ~bad & (f1 == 0)
        j = search[hit]
        a_lo[j] = np.minimum(prev[j], a1[hit])
        a_hi[j] = np.maximum(prev[j], a1[hit])
        first_low = prev[j] < a1[hit]
        f_lo[j] = np.where(first_low, fprev[j], f1[hit])
        f_hi[j] = np.where(first_low, f1[hit], fprev[j])
        bracketed[j] = True
        out[search[zero]] = a1[zero]
        done[search[zero]] = True
        edge = (a1 <= lo_lim) | (a1 >= hi_lim)
        ok[search[edge & ~hit & ~bad]] = False
        prev[search], fprev[search] = a1, f1
        search = search[~bad & ~hit & ~edge]
    ok[search] = False
    act = np.flatnonzero(ok & bracketed & ~done)
    side = np.zeros(k, dtype=int)
    for _ in range(max_iter):
        if act.size == 0:
            break
        lo, hi, flo, fhi = a_lo[act], a_hi[act], f_lo[act], f_hi[act]
        c = (lo * fhi - hi * flo) / (fhi - flo)
        c = np.where((c > lo) & (c < hi), c, 0.5 * (lo + hi))
        fc = _phi_batch(v[act], n[act], c, opts)
        bad = ~np.isfinite(fc)
        ok[act[bad]] = False
        same_lo = np.sign(fc) == np.sign(flo)
        # Illinois: halve the retained end's value when the same end survives twice
        a_lo[act] = np.where(same_lo, c, lo)
        f_lo[act] = np.where(same_lo, fc, np.where(side[act] == -1, 0.5 * flo, flo))
        a_hi[act] = np.where(same_lo, hi, c)
        f_hi[act] = np.where(same_lo, np.where(side[act] == 1, 0.5 * fhi, fhi), fc)
        side[act] = np.where(same_lo, 1, -1)
        out[act] = c
        fin = bad | (fc == 0) | (np.abs(fc) <= 1e-3 * opts.tol * c) | (a_hi[act] - a_lo[act] <= 4e-16 * c)
        act = act[~fin]
    ok[act] = False
    return out, ok


# ---------------------------------------------------------------------------
# batched fit
# ---------------------------------------------------------------------------


@dataclass
class BatchFit:
    """Fits of k datasets sharing a design; row i failed if ``errors[i]``."""

    beta: np.ndarray
    tau2: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    ols_beta: np.ndarray
    tau2_raw: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    tau2_truncated: np.ndarray
    alpha_fallback: np.ndarray
    polished: np.ndarray
    residual: np.ndarray
    gamma_lo: np.ndarray
    gamma_hi: np.ndarray
    errors: list
    min_n: np.ndarray

    @property
    def failed(self) -> np.ndarray:
        return np.array([e is not None for e in self.errors], dtype=bool)

    def __len__(self):
        return len(self.errors)

    def result(self, i: int) -> FitResult:
        if self.errors[i] is not None:
            raise self.errors[i]
        warns = []
        if self.min_n[i] + self.alpha[i] <= 4:
            warns.append("min(n_i) + alpha <= 4: MSE approximations may be unreliable")
        if not self.converged[i]:
            warns.append("alpha/gamma iteration did not converge")
        return FitResult(
            params=ModelParams(self.beta[i], self.tau2[i], self.alpha[i], self.gamma[i]),
            ols_beta=self.ols_beta[i].copy(),
            iterations=int(self.iterations[i]),
            converged=bool(self.converged[i]),
            tau2_truncated=bool(self.tau2_truncated[i]),
            alpha_fallback_used=bool(self.alpha_fallback[i]),
            residual_norm=float(self.residual[i]),
            tau2_raw=float(self.tau2_raw[i]),
            polished=bool(self.polished[i]),
            gamma_bracket=(float(self.gamma_lo[i]), float(self.gamma_hi[i])),
            warnings=tuple(warns),
        )


def fit_batch(data: AreaData, options: FitOptions | None = None) -> BatchFit:
    """Fit every dataset in a (k, m) batch; failures are recorded per row."""
    opts = options or FitOptions()
    y, v, n, z = _as_batch(data)
    k, m = y.shape
    p = z.shape[1]
    if m < p + 1:
        raise DomainError(f"need at least p + 1 = {p + 1} areas, got {m}")
    _check_design(z)
    if np.any(~np.isfinite(y)) or np.any(~(v > 0)):
        raise DomainError("y must be finite and v positive")

    errors: list = [None] * k
    beta_ols = _ols(y, z)

    alpha = np.full(k, float(opts.alpha0))
    gamma = (opts.alpha0 - 2.0) * np.mean(v / n, axis=-1)
    if opts.alpha0 <= 2:
        gamma = np.mean(v / n, axis=-1)
    iterations = np.zeros(k, dtype=int)
    fallback = np.zeros(k, dtype=bool)
    failed = np.zeros(k, dtype=bool)
    active = np.arange(k)
    for it in range(1, opts.max_iter + 1):
        if active.size == 0:
            break
        va, na = v[active], n[active]
        a_new, fb, err = _alpha_batch(va, na, gamma[active], opts)
        g_new, ok, _, _ = _gamma_batch(
            va, na, a_new, opts.gamma_rtol, opts.gamma_max_iter, start=gamma[active]
        )
        bad = err | ~ok | ~np.isfinite(a_new) | ~np.isfinite(g_new)
        for j in np.flatnonzero(bad):
            i = active[j]
            failed[i] = True
            errors[i] = (
                NoRootError("alpha update found no root")
                if err[j]
                else ConvergenceError("gamma equation did not converge")
            )
        change = np.maximum(
            np.abs(a_new - alpha[active]) / alpha[active],
            np.abs(g_new - gamma[active]) / gamma[active],
        )
        alpha[active] = a_new
        gamma[active] = g_new
        fallback[active] = fb
        iterations[active] = it
        keep = ~bad & ~(change < opts.tol)
        active = active[keep]

    ok_rows = np.flatnonzero(~failed)
    residual = np.full(k, np.nan)
    polished = np.zeros(k, dtype=bool)
    if ok_rows.size:
        res, _, err = _fixed_point_residual(alpha[ok_rows], gamma[ok_rows], v[ok_rows], n[ok_rows], opts)
        residual[ok_rows] = np.where(err, np.inf, res)
    rows = np.flatnonzero(~failed & ~(residual < opts.tol))
    if rows.size:
        # alternation budget spent: finish the same fixed point in alpha
        a_star, ok = _polish_batch(v[rows], n[rows], alpha[rows], opts)
        good = rows[ok]
        if good.size:
            g_star, gok, _, _ = _gamma_batch(v[good], n[good], a_star[ok], opts.gamma_rtol, opts.gamma_max_iter)
            good, a_good, g_good = good[gok], a_star[ok][gok], g_star[gok]
            res, fb, err = _fixed_point_residual(a_good, g_good, v[good], n[good], opts)
            better = ~err & (res < residual[good])
            good = good[better]
            alpha[good], gamma[good] = a_good[better], g_good[better]
            residual[good], fallback[good] = res[better], fb[better]
            polished[good] = True
    converged = residual < opts.tol

    g_lo, g_hi, _ = _gamma_bracket(v, n, alpha)

    tau2 = np.full(k, np.nan)
    tau2_raw = np.full(k, np.nan)
    truncated = np.zeros(k, dtype=bool)
    beta = np.full((k, p), np.nan)
    rows = np.flatnonzero(~failed)
    bad_df = np.any(n[rows] + alpha[rows, None] <= 2, axis=-1)
    for j in np.flatnonzero(bad_df):
        i = rows[j]
        failed[i] = True
        errors[i] = DomainError("tau2 estimator needs n_i + alpha > 2 for every area")
    rows = rows[~bad_df]
    if rows.size:
        t2, tr, raw = _tau2(
            y[rows], v[rows], n[rows], z, alpha[rows], gamma[rows], beta_ols[rows], opts.tau_floor_mult
        )
        b = _gls(y[rows], v[rows], n[rows], z, t2, alpha[rows], gamma[rows])
        if opts.tau2_residuals == "gls":
            for _ in range(opts.max_iter):
                t2_new, tr, raw = _tau2(
                    y[rows], v[rows], n[rows], z, alpha[rows], gamma[rows], b, opts.tau_floor_mult
                )
                b = _gls(y[rows], v[rows], n[rows], z, t2_new, alpha[rows], gamma[rows])
                change = np.max(np.abs(t2_new - t2) / t2)
                t2 = t2_new
                if change < opts.tol:
                    break
        tau2[rows], truncated[rows], tau2_raw[rows] = t2, tr, raw
        beta[rows] = b

    return BatchFit(
        beta=beta,
        tau2=tau2,
        alpha=alpha,
        gamma=gamma,
        ols_beta=beta_ols,
        tau2_raw=tau2_raw,
        iterations=iterations,
        converged=converged & ~failed,
        tau2_truncated=truncated,
        alpha_fallback=fallback,
        polished=polished,
        residual=residual,
        gamma_lo=g_lo,
        gamma_hi=g_hi,
        errors=errors,
        min_n=np.min(n, axis=-1),
    )


def fit(data: AreaData, options: FitOptions | None = None) -> FitResult:
    """Fit one dataset.

    Alternates alpha <- estimate_alpha(gamma), gamma <- estimate_gamma(alpha)
    from alpha0 = 4, gamma0 = (alpha0 - 2) mean(V/n) until the relative change
    drops below ``tol``. If the iteration budget runs out first, the same
    fixed point is finished with a bracketed one-dimensional root search in
    alpha. tau2 then comes from the OLS residuals and beta from GLS.
    """
    if np.ndim(data.y) != 1:
        raise DomainError("fit expects a single dataset; use fit_batch for batches")
    return fit_batch(data, options).result(0)


# ---------------------------------------------------------------------------
# single-dataset estimators
# ---------------------------------------------------------------------------


def estimate_beta_ols(data: AreaData) -> np.ndarray:
    """(sum z z')^{-1} sum z y."""
    y, _, _, z = _as_batch(data)
    _check_design(z)
    return _ols(y, z)[0]


def estimate_beta_gls(data: AreaData, theta) -> np.ndarray:
    """GLS estimate of beta with weights 1 - B_j(theta)."""
    tau2, alpha, gamma = theta
    if tau2 < 0 or alpha <= 0 or gamma <= 0:
        raise DomainError("invalid theta")
    y, v, n, z = _as_batch(data)
    _check_design(z)
    return _gls(y, v, n, z, np.array([tau2]), np.array([alpha]), np.array([gamma]))[0]


def estimate_tau2(data: AreaData, alpha, gamma, beta_ols, floor_mult=1e-8):
    """Moment estimate of tau2, truncated below at ``floor_mult * mean(V/n)``.

    Returns ``(tau2, truncated)``.
    """
    y, v, n, z = _as_batch(data)
    t2, tr, _ = _tau2(
        y, v, n, z, np.array([float(alpha)]), np.array([float(gamma)]),
        np.atleast_2d(beta_ols), floor_mult,
    )
    return float(t2[0]), bool(tr[0])


def estimate_alpha(data: AreaData, gamma, options: FitOptions | None = None):
    """Positive root of the alpha quadratic; returns ``(alpha, fallback_used)``."""
    opts = options or FitOptions()
    if not gamma > 0:
        raise DomainError("gamma must be > 0")
    _, v, n, _ = _as_batch(data)
    a, fb, err = _alpha_batch(v, n, np.array([float(gamma)]), opts)
    if err[0]:
        raise NoRootError(f"alpha moment identity has no root in {opts.alpha_bracket}")
    return float(a[0]), bool(fb[0])


def estimate_gamma(data: AreaData, alpha, options: FitOptions | None = None) -> float:
    """The unique gamma > 0 with sum V/(V+gamma) = sum n/(n+alpha)."""
    opts = options or FitOptions()
    if not alpha > 0:
        raise DomainError("alpha must be > 0")
    _, v, n, _ = _as_batch(data)
    g, ok, _, _ = _gamma_batch(v, n, np.array([float(alpha)]), opts.gamma_rtol, opts.gamma_max_iter)
    if not ok[0]:
        raise ConvergenceError("gamma equation did not reach tolerance")
    return float(g[0])
