import math

import numpy as np
import pytest
from scipy import integrate, stats

from fhrd.errors import DataValidationError, DomainError
from fhrd.model import (
    AreaData,
    AreaRecord,
    ModelParams,
    analytic_moment_v,
    analytic_moment_v_log,
    conditional_sigma2_mean,
    dual_shrunk_scale,
    log_joint_y_v_eta_density,
    log_marginal_v_density,
    mean_log_v_shift,
    second_moment_log_v_shift,
    shrinkage,
    var_log_v_shift,
)
from fhrd.special import digamma, trigamma

GRID = [(a, g, n) for a in (1.0, 4.0) for g in (1.0, 2.0) for n in (5, 10, 30)]


# --- domain types ----------------------------------------------------------

def test_area_record_validation():
    AreaRecord("a", 1.0, 2.0, 3, (1.0, 0.5))
    with pytest.raises(DataValidationError):
        AreaRecord("a", 1.0, 0.0, 3, (1.0,))
    with pytest.raises(DataValidationError):
        AreaRecord("a", 1.0, 1.0, 0, (1.0,))
    with pytest.raises(DataValidationError):
        AreaRecord("a", 1.0, 1.0, 3, (2.0,))


def test_area_data_round_trip():
    recs = [AreaRecord(f"r{i}", float(i), 1.0 + i, 5, (1.0, 0.1 * i)) for i in range(4)]
    data = AreaData.from_records(recs)
    assert data.m == 4 and data.p == 2
    assert data.to_records() == recs


def test_model_params_validation():
    with pytest.raises(DomainError):
        ModelParams([1.0], -1.0, 1.0, 1.0)
    with pytest.raises(DomainError):
        ModelParams([1.0], 1.0, 0.0, 1.0)
    with pytest.raises(DomainError):
        ModelParams([np.nan], 1.0, 1.0, 1.0)
    p = ModelParams([1.0, 2.0], 0.5, 3.0, 2.0)
    assert ModelParams.from_dict(p.to_dict()) == p


# --- shrinkage ---------------------------------------------------------------

def test_shrinkage_hand_values():
    s = shrinkage((1.0, 1.0, 1.0), 11.0, 10)
    assert s.a == pytest.approx(1.0, abs=1e-15) and s.b == pytest.approx(0.5, abs=1e-15)
    assert shrinkage((0.0, 4.0, 1.0), 7.0, 10).b == 1.0
    assert shrinkage((1.0, 4.0, 1.0), 11.0, 10).b == pytest.approx(12 / 27, abs=1e-15)


@pytest.mark.parametrize("theta,v,n", [((-1, 1, 1), 1, 1), ((1, 0, 1), 1, 1), ((1, 1, 0), 1, 1),
                                       ((1, 1, 1), 0, 1), ((1, 1, 1), 1, 0)])
def test_shrinkage_domain(theta, v, n):
    with pytest.raises(DomainError):
        shrinkage(theta, v, n)


def test_dual_shrunk_scale():
    assert dual_shrunk_scale(2.0, 2.0, 10.0, 9) == pytest.approx(1.0, abs=1e-15)
    assert dual_shrunk_scale(2.0, 1.0, 5.5, 10) == pytest.approx(0.5, abs=1e-15)
    # alpha -> 0: the weight on v/(n+1) tends to 1 but (1-w) gamma/alpha tends
    # to gamma/(n+1), so the value tends to (v + gamma)/(n+1)
    assert dual_shrunk_scale(1e-12, 3.0, 22.0, 10) == pytest.approx(25.0 / 11.0, rel=1e-10)
    assert dual_shrunk_scale(1e-12, 1e-14, 22.0, 10) == pytest.approx(2.0, rel=1e-10)
    with pytest.raises(DomainError):
        dual_shrunk_scale(1.0, 1.0, -1.0, 3)


# --- marginal density of V ---------------------------------------------------

@pytest.mark.parametrize("alpha,gamma,n", GRID)
def test_marginal_v_density_normalises(alpha, gamma, n):
    # x = V/(V+gamma) has a Beta(n/2, alpha/2) law; x = 1 - (1-u)^q with
    # q = 4/alpha removes the endpoint singularity, then Simpson on a dense u grid
    q = 4.0 / alpha
    u = np.linspace(0.0, 1.0, 400_001)[1:-1]
    one_minus_x = (1.0 - u) ** q
    x_ = 1.0 - one_minus_x
    v = gamma * x_ / one_minus_x
    dv_du = gamma / one_minus_x**2 * q * (1.0 - u) ** (q - 1.0)
    f = np.exp(log_marginal_v_density(alpha, gamma, n, v)) * dv_du
    x = u
    total = integrate.simpson(f, x=x)
    assert abs(total - 1.0) < 1e-8


def test_marginal_v_moments():
    # E[V/(V+gamma)] = n/(n+alpha) against independent draws of V
    rng = np.random.default_rng(1)
    alpha, gamma, n = 4.0, 1.0, 10
    eta = rng.gamma(alpha / 2, 2 / gamma, 400_000)
    v = rng.chisquare(n, eta.size) / eta
    r = v / (v + gamma)
    assert abs(r.mean() - n / (n + alpha)) < 4 * r.std() / math.sqrt(r.size)
    assert analytic_moment_v(4.0, 2.0, 10, 0, 1) == pytest.approx(1 / 7, rel=1e-14)


def test_marginal_v_domain():
    with pytest.raises(DomainError):
        log_marginal_v_density(1.0, 1.0, 5, 0.0)


# --- joint density -------------------------------------------------------------

PARAMS = ModelParams([10.0], 1.0, 4.0, 1.0)


def test_joint_density_finite():
    assert math.isfinite(log_joint_y_v_eta_density(PARAMS, [1.0], 10.0, 2.0, 1.0, 10))


def test_joint_density_ratio_in_y():
    tau2, eta = PARAMS.tau2, 0.7
    a = log_joint_y_v_eta_density(PARAMS, [1.0], 12.0, 2.0, eta, 10)
    b = log_joint_y_v_eta_density(PARAMS, [1.0], 9.0, 2.0, eta, 10)
    expected = -eta * ((12.0 - 10.0) ** 2 - (9.0 - 10.0) ** 2) / (2 * (tau2 * eta + 1))
    assert a - b == pytest.approx(expected, abs=1e-13)


@pytest.mark.parametrize("y,v,n,params", [
    (12.0, 11.0, 10, ModelParams([10.0], 1.0, 1.0, 1.0)),
    (7.5, 3.0, 5, ModelParams([10.0], 4.0, 4.0, 2.0)),
    (10.2, 0.4, 30, ModelParams([10.0], 0.3, 2.5, 0.5)),
])
def test_joint_density_integrates_to_marginal(y, v, n, params):
    # oracle: y | eta ~ N(mu, tau2 + 1/eta), V | eta ~ chi2_n / eta, eta ~ Ga(alpha/2, 2/gamma)
    tau2, alpha, gamma = params.theta
    mu = params.beta[0]

    def oracle_integrand(eta):
        return (stats.norm.pdf(y, mu, math.sqrt(tau2 + 1 / eta))
                * stats.chi2.pdf(v * eta, n) * eta
                * stats.gamma.pdf(eta, alpha / 2, scale=2 / gamma))

    def ours(eta):
        return math.exp(log_joint_y_v_eta_density(params, [1.0], y, v, eta, n))

    upper = 200.0 * (n + alpha) / (v + gamma)
    ref = integrate.quad(oracle_integrand, 0, upper, limit=500, epsabs=0, epsrel=1e-12, points=[(n + alpha) / (v + gamma)])[0]
    got = integrate.quad(ours, 0, upper, limit=500, epsabs=0, epsrel=1e-12, points=[(n + alpha) / (v + gamma)])[0]
    assert got == pytest.approx(ref, rel=1e-6)


def test_joint_density_domain():
    with pytest.raises(DomainError):
        log_joint_y_v_eta_density(PARAMS, [1.0], 1.0, 1.0, 0.0, 10)
    with pytest.raises(DomainError):
        log_joint_y_v_eta_density(PARAMS, [1.0], 1.0, -1.0, 1.0, 10)


# --- conditional moments ---------------------------------------------------------

def test_conditional_sigma2_mean():
    assert conditional_sigma2_mean(4.0, 2.0, 10, 10.0) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(DomainError):
        conditional_sigma2_mean(1.0, 1.0, 1, 1.0)


def test_conditional_sigma2_mean_monte_carlo():
    rng = np.random.default_rng(2)
    alpha, gamma, n, v = 3.0, 1.5, 8, 4.0
    eta = rng.gamma((n + alpha) / 2, 2 / (v + gamma), 500_000)
    s2 = 1 / eta
    target = conditional_sigma2_mean(alpha, gamma, n, v)
    assert abs(s2.mean() - target) < 3 * s2.std() / math.sqrt(s2.size)


# --- closed-form moments of V -------------------------------------------------------

def test_moment_a1_hand_value():
    assert analytic_moment_v(4.0, 1.0, 10, 1, 1) == pytest.approx(5 / 7, rel=1e-14)


@pytest.mark.parametrize("alpha,gamma,n", GRID)
def test_moment_a2_matches_digamma_identity(alpha, gamma, n):
    # E[V/(V+g) log(V+g)] = n/(n+a) {E[log(V+g)] + 2/(n+a)}
    lhs = analytic_moment_v_log(alpha, gamma, n, 1, 1)
    rhs = n / (n + alpha) * (mean_log_v_shift(alpha, gamma, n) + 2 / (n + alpha))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("alpha,gamma,n", GRID)
@pytest.mark.parametrize("l,k", [(0, 1), (1, 1), (1, 2), (2, 2), (0.5, 1)])
def test_moments_against_quadrature(alpha, gamma, n, l, k):
    def dens(v):
        return math.exp(log_marginal_v_density(alpha, gamma, n, v))

    f = lambda v: v**l / (v + gamma) ** k * dens(v)
    g = lambda v: f(v) * math.log(v + gamma)
    mode = max(gamma * (n - 2) / (alpha + 2), 1e-3)
    ref = sum(integrate.quad(f, a, b, limit=400, epsabs=0, epsrel=1e-11)[0] for a, b in ((0, mode), (mode, np.inf)))
    ref_log = sum(integrate.quad(g, a, b, limit=400, epsabs=0, epsrel=1e-11)[0] for a, b in ((0, mode), (mode, np.inf)))
    assert analytic_moment_v(alpha, gamma, n, l, k) == pytest.approx(ref, rel=1e-8)
    assert analytic_moment_v_log(alpha, gamma, n, l, k) == pytest.approx(ref_log, rel=1e-8, abs=1e-12)


def test_moment_domain():
    with pytest.raises(DomainError):
        analytic_moment_v(1.0, 1.0, 10, 2, 1)   # alpha/2 + k - l <= 0
    with pytest.raises(DomainError):
        analytic_moment_v(1.0, 1.0, 2, -1, 0)   # n/2 + l <= 0


@pytest.mark.parametrize("alpha,gamma,n", GRID)
def test_log_moments_via_beta_representation(alpha, gamma, n):
    # log(V + gamma) - log(gamma) = -log X with X ~ Beta(alpha/2, n/2)
    x = stats.beta(alpha / 2, n / 2)
    mean = -x.expect(np.log, epsabs=0, epsrel=1e-12)
    second = x.expect(lambda t: np.log(t) ** 2, epsabs=0, epsrel=1e-12)
    assert mean_log_v_shift(alpha, gamma, n) - math.log(gamma) == pytest.approx(mean, rel=1e-9)
    assert var_log_v_shift(alpha, gamma, n) == pytest.approx(second - mean**2, rel=1e-8)
    assert var_log_v_shift(alpha, gamma, n) > 0
    # the opposite sign convention would give a negative variance
    assert trigamma((n + alpha) / 2) - trigamma(alpha / 2) < 0
    assert second_moment_log_v_shift(alpha, gamma, n) == pytest.approx(
        mean_log_v_shift(alpha, gamma, n) ** 2 + var_log_v_shift(alpha, gamma, n), rel=1e-15)


def test_digamma_identity_value():
    assert mean_log_v_shift(2.0, 1.0, 4) == pytest.approx(digamma(3.0) - digamma(1.0), rel=1e-15)
