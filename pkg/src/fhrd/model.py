"""Domain types, shrinkage coefficients, densities and moments of the
Fay-Herriot random dispersion (FHRD) model.

The model, for areas i = 1..m::

    y_i | xi_i, sigma_i^2  ~ N(xi_i, sigma_i^2)
    xi_i                   ~ N(z_i' beta, tau2)
    V_i / sigma_i^2        ~ chi^2_{n_i}
    eta_i = 1 / sigma_i^2  ~ Gamma(shape alpha/2, scale 2/gamma)

All densities are returned on the log scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataValidationError, DomainError
from .special import digamma, log_gamma, trigamma

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AreaRecord:
    """Observables for one small area."""

    area_id: str
    y: float
    v: float
    n: int
    z: tuple[float, ...]

    def __post_init__(self):
        if not (math.isfinite(self.v) and self.v > 0):
            raise DataValidationError(f"area {self.area_id!r}: v must be > 0, got {self.v}")
        if int(self.n) != self.n or self.n < 1:
            raise DataValidationError(f"area {self.area_id!r}: n must be an integer >= 1, got {self.n}")
        if not math.isfinite(self.y):
            raise DataValidationError(f"area {self.area_id!r}: y must be finite")
        if len(self.z) == 0 or self.z[0] != 1:
            raise DataValidationError(f"area {self.area_id!r}: z[0] must be 1")
        object.__setattr__(self, "z", tuple(float(c) for c in self.z))
        object.__setattr__(self, "n", int(self.n))


@dataclass(frozen=True)
class AreaData:
    """Column-oriented view of a dataset of ``m`` areas.

    ``y``, ``v`` and ``n`` may carry a leading batch axis (shape ``(k, m)``)
    when many datasets share the same design; ``z`` is always ``(m, p)``.
    """

    y: np.ndarray
    v: np.ndarray
    n: np.ndarray
    z: np.ndarray
    area_ids: tuple[str, ...] = field(default=())

    @classmethod
    def from_records(cls, records: Sequence[AreaRecord]) -> "AreaData":
        if not records:
            raise DataValidationError("dataset is empty")
        p = len(records[0].z)
        for r in records:
            if len(r.z) != p:
                raise DataValidationError(
                    f"area {r.area_id!r}: expected {p} covariates, got {len(r.z)}"
                )
        return cls(
            y=np.array([r.y for r in records], dtype=float),
            v=np.array([r.v for r in records], dtype=float),
            n=np.array([r.n for r in records], dtype=float),
            z=np.array([r.z for r in records], dtype=float),
            area_ids=tuple(r.area_id for r in records),
        )

    @property
    def m(self) -> int:
        return self.z.shape[0]

    @property
    def p(self) -> int:
        return self.z.shape[1]

    def to_records(self) -> list[AreaRecord]:
        if self.y.ndim != 1:
            raise ValueError("to_records needs an unbatched dataset")
        ids = self.area_ids or tuple(str(i + 1) for i in range(self.m))
        return [
            AreaRecord(ids[i], float(self.y[i]), float(self.v[i]), int(self.n[i]), tuple(self.z[i]))
            for i in range(self.m)
        ]


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Parameter vector (beta, tau2, alpha, gamma)."""

    beta: np.ndarray
    tau2: float
    alpha: float
    gamma: float

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if beta.ndim != 1 or not np.all(np.isfinite(beta)):
            raise DomainError("beta must be a finite vector")
        object.__setattr__(self, "beta", beta)
        for name in ("tau2", "alpha", "gamma"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (math.isfinite(self.tau2) and self.tau2 >= 0):
            raise DomainError(f"tau2 must be >= 0, got {self.tau2}")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise DomainError(f"alpha must be > 0, got {self.alpha}")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise DomainError(f"gamma must be > 0, got {self.gamma}")

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return np.array_equal(self.beta, other.beta) and self.theta == other.theta

    __hash__ = None

    @property
    def theta(self) -> tuple[float, float, float]:
        return (self.tau2, self.alpha, self.gamma)

    def to_dict(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "tau2": self.tau2,
            "alpha": self.alpha,
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        try:
            return cls(beta=d["beta"], tau2=d["tau2"], alpha=d["alpha"], gamma=d["gamma"])
        except KeyError as exc:
            raise DataValidationError(f"parameter set is missing {exc.args[0]!r}") from None


@dataclass(frozen=True)
class ShrinkageCoefficients:
    a: float
    b: float


@dataclass(frozen=True)
class LatentState:
    xi: float
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise DomainError("sigma2 must be > 0")


# ---------------------------------------------------------------------------
# Shrinkage
# ---------------------------------------------------------------------------


def _check_theta(tau2, alpha, gamma):
    if not (np.all(np.isfinite(tau2)) and np.all(np.asarray(tau2) >= 0)):
        raise DomainError(f"tau2 must be >= 0, got {tau2}")
    if not (np.all(np.isfinite(alpha)) and np.all(np.asarray(alpha) > 0)):
        raise DomainError(f"alpha must be > 0, got {alpha}")
    if not (np.all(np.isfinite(gamma)) and np.all(np.asarray(gamma) > 0)):
        raise DomainError(f"gamma must be > 0, got {gamma}")


def _check_vn(v, n):
    if not (np.all(np.isfinite(v)) and np.all(np.asarray(v) > 0)):
        raise DomainError("v must be > 0")
    if not np.all(np.asarray(n) >= 1):
        raise DomainError("n must be >= 1")


def precision_weight(alpha, gamma, v, n):
    """A = (n + 1 + alpha) / (v + gamma), elementwise, no validation."""
    return (n + 1.0 + alpha) / (v + gamma)


def shrinkage_factor(tau2, alpha, gamma, v, n):
    """B = 1 / (1 + tau2 * A), elementwise, no validation."""
    return 1.0 / (1.0 + tau2 * precision_weight(alpha, gamma, v, n))


def shrinkage(theta, v, n) -> ShrinkageCoefficients:
    """Shrinkage coefficients (A_i, B_i) for one area.

    ``theta`` is ``(tau2, alpha, gamma)``.
    """
    tau2, alpha, gamma = theta
    _check_theta(tau2, alpha, gamma)
    _check_vn(v, n)
    a = precision_weight(alpha, gamma, v, n)
    return ShrinkageCoefficients(a=float(a), b=float(1.0 / (1.0 + tau2 * a)))


def dual_shrunk_scale(alpha, gamma, v, n) -> float:
    """(v + gamma) / (n + 1 + alpha).

    Equals a convex combination of the raw scale v/(n+1) and the prior scale
    gamma/alpha with weight (n+1)/(n+1+alpha) on the raw scale.
    """
    _check_theta(0.0, alpha, gamma)
    _check_vn(v, n)
    value = (v + gamma) / (n + 1.0 + alpha)
    w = (n + 1.0) / (n + 1.0 + alpha)
    w_prior = alpha / (n + 1.0 + alpha)  # 1 - w without cancellation
    combo = w * v / (n + 1.0) + w_prior * gamma / alpha
    if abs(value - combo) > 1e-12 * max(1.0, abs(value)):
        raise ArithmeticError("convex-combination identity violated")
    return float(value)


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


def log_marginal_v_density(alpha, gamma, n, v):
    """Log of the marginal density of V (a scaled beta-prime law)."""
    _check_theta(0.0, alpha, gamma)
    if not np.all(np.asarray(v) > 0):
        raise DomainError("v must be > 0")
    v = np.asarray(v, dtype=float)
    out = (
        log_gamma((n + alpha) / 2.0)
        - log_gamma(n / 2.0)
        - log_gamma(alpha / 2.0)
        + 0.5 * alpha * np.log(gamma)
        + (0.5 * n - 1.0) * np.log(v)
        - 0.5 * (n + alpha) * np.log(v + gamma)
    )
    return float(out) if out.ndim == 0 else out


def log_joint_y_v_eta_density(params: ModelParams, z, y, v, eta, n):
    """Log joint density of (y, V, eta) with xi integrated out.

    Includes the normalising constant, so it integrates to one over
    (y, V, eta).
    """
    if not np.all(np.asarray(eta) > 0):
        raise DomainError("eta must be > 0")
    if not np.all(np.asarray(v) > 0):
        raise DomainError("v must be > 0")
    eta = np.asarray(eta, dtype=float)
    tau2, alpha, gamma = params.theta
    mu = float(np.dot(np.asarray(z, dtype=float), params.beta))
    d2 = (y - mu) ** 2
    u = tau2 * eta + 1.0
    log_c = -LOG_2PI - 0.5 * n * math.log(2.0) - log_gamma(n / 2.0)
    out = (
        log_c
        + 0.5 * alpha * math.log(gamma / 2.0)
        - log_gamma(alpha / 2.0)
        + (0.5 * n - 1.0) * math.log(v)
        + (0.5 * (n + 1.0 + alpha) - 1.0) * np.log(eta)
        + 0.5 * LOG_2PI
        - 0.5 * np.log(u)
        - 0.5 * eta * (v + gamma + d2 / u)
    )
    return float(out) if out.ndim == 0 else out


def conditional_sigma2_mean(alpha, gamma, n, v):
    """E[sigma^2 | V = v] = (v + gamma) / (n + alpha - 2); needs n + alpha > 2."""
    if np.any(np.asarray(n) + alpha <= 2):
        raise DomainError("E[1/eta | V] is infinite unless n + alpha > 2")
    return (v + gamma) / (n + alpha - 2.0)


# ---------------------------------------------------------------------------
# Closed-form moments of V
# ---------------------------------------------------------------------------


def _moment_log_factor(alpha, gamma, n, l, k):
    a1 = n / 2.0 + l
    a2 = alpha / 2.0 + k - l
    if a1 <= 0 or a2 <= 0:
        raise DomainError(
            f"E[V^{l}/(V+gamma)^{k}] diverges for n={n}, alpha={alpha}"
        )
    s = (n + alpha) / 2.0
    return (
        log_gamma(s)
        - log_gamma(s + k)
        + log_gamma(a1)
        - log_gamma(n / 2.0)
        + log_gamma(a2)
        - log_gamma(alpha / 2.0)
        + (l - k) * math.log(gamma)
    )


def analytic_moment_v(alpha, gamma, n, l, k) -> float:
    """E[V^l / (V + gamma)^k] under the marginal law of V."""
    _check_theta(0.0, alpha, gamma)
    return math.exp(_moment_log_factor(alpha, gamma, n, l, k))


def analytic_moment_v_log(alpha, gamma, n, l, k) -> float:
    """E[V^l / (V + gamma)^k * log(V + gamma)]."""
    _check_theta(0.0, alpha, gamma)
    base = math.exp(_moment_log_factor(alpha, gamma, n, l, k))
    s = (n + alpha) / 2.0
    return base * (digamma(s + k) - digamma(alpha / 2.0 + k - l) + math.log(gamma))


def mean_log_v_shift(alpha, gamma, n) -> float:
    """E[log(V + gamma)] = psi((n+alpha)/2) - psi(alpha/2) + log(gamma)."""
    _check_theta(0.0, alpha, gamma)
    return digamma((n + alpha) / 2.0) - digamma(alpha / 2.0) + math.log(gamma)


def var_log_v_shift(alpha, gamma, n) -> float:
    """Var[log(V + gamma)] = psi'(alpha/2) - psi'((n+alpha)/2).

    log(V + gamma) - log(gamma) is minus the log of a Beta(alpha/2, n/2)
    variable, so the variance is positive; the opposite sign would not be.
    """
    _check_theta(0.0, alpha, gamma)
    return trigamma(alpha / 2.0) - trigamma((n + alpha) / 2.0)


def second_moment_log_v_shift(alpha, gamma, n) -> float:
    """E[log(V + gamma)^2]."""
    return mean_log_v_shift(alpha, gamma, n) ** 2 + var_log_v_shift(alpha, gamma, n)
