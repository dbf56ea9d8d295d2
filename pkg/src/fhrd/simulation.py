"""Monte Carlo studies: predictor accuracy, estimator sampling distributions
and relative bias of the bootstrap MSE estimator.

Each cell gets its own stream key derived from its parameters, and each
replication its own substream, so a cell's numbers do not depend on which
other cells run, on their order, or on the number of workers.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ._parallel import chunk_ranges, flatten, ordered_map
from .errors import BootstrapError, DataValidationError, DomainError
from .estimation import FitOptions, fit_batch
from .model import AreaData, ModelParams, shrinkage_factor
from .prediction import QuadratureOptions, bayes_shrinkage_array
from .sampling import (
    STREAM_TABLE1,
    STREAM_TABLE2,
    STREAM_TABLE3_EST,
    STREAM_TABLE3_TRUE,
    Design,
    RngSeed,
    generate_many,
)
from .uncertainty import bootstrap_mse_components, g_values

__all__ = [
    "STUDIES",
    "ExperimentSpec",
    "Metric",
    "ExperimentResult",
    "default_cells",
    "build_specs",
    "run_predictor_study",
    "run_estimator_study",
    "run_mse_study",
    "run_study",
]

STUDIES = ("table1", "table2", "table3", "custom")
KINDS = {"table1": "predictor", "table2": "estimator", "table3": "mse"}

FULL = {"replications": {"table1": 5000, "table2": 1000, "table3": 1000}, "true_replications": 5000, "bootstrap": 1000}
DESK = {"replications": {"table1": 1000, "table2": 1000, "table3": 200}, "true_replications": 1000, "bootstrap": 200}

REP_CHUNK = 100
RUN_CHUNK = 4


@dataclass(frozen=True)
class ExperimentSpec:
    """One simulation cell."""

    which: str
    m: int
    tau2: float
    alpha: float
    gamma: float = 1.0
    beta: tuple[float, ...] = (10.0,)
    n: int = 10
    replications: int = 1000
    true_replications: int = 5000
    bootstrap: int = 1000
    seed: int = 0
    kind: str = ""

    def __post_init__(self):
        if self.which not in STUDIES:
            raise DataValidationError(f"unknown study {self.which!r}; expected one of {', '.join(STUDIES)}")
        kind = self.kind or KINDS.get(self.which, "")
        if kind not in ("predictor", "estimator", "mse"):
            raise DataValidationError("custom studies need kind = predictor, estimator or mse")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "beta", tuple(float(b) for b in np.atleast_1d(self.beta)))
        if self.m < len(self.beta) + 1:
            raise DataValidationError("m must exceed the number of covariates")
        if min(self.replications, self.true_replications, self.bootstrap) < 1:
            raise DataValidationError("replication counts must be >= 1")
        if self.n < 1:
            raise DataValidationError("n must be >= 1")
        ModelParams(self.beta, self.tau2, self.alpha, self.gamma)

    @property
    def params(self) -> ModelParams:
        return ModelParams(np.array(self.beta), self.tau2, self.alpha, self.gamma)

    @property
    def design(self) -> Design:
        p = len(self.beta)
        z = np.ones((self.m, p))
        if p > 1:
            # extra covariates on a fixed grid so the design is reproducible
            grid = np.linspace(-1.0, 1.0, self.m)
            for j in range(1, p):
                z[:, j] = grid**j
        return Design(z, np.full(self.m, self.n))

    def cell_key(self) -> int:
        """64-bit key from the model settings (not from counts or seed)."""
        desc = json.dumps([self.m, self.tau2, self.alpha, self.gamma, list(self.beta), self.n], sort_keys=True)
        return int.from_bytes(hashlib.sha256(desc.encode()).digest()[:8], "little")

    def label(self) -> str:
        return f"m={self.m} alpha={self.alpha:g} tau2={self.tau2:g}"


@dataclass(frozen=True)
class Metric:
    value: float
    se: float


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    metrics: dict[str, Metric]
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "metrics": {k: {"value": v.value, "se": v.se} for k, v in self.metrics.items()},
            "counts": dict(self.counts),
        }


def default_cells() -> list[tuple[int, float, float]]:
    """(m, alpha, tau2) grid used throughout the study tables."""
    return [(m, a, t) for m in (30, 60) for a in (1.0, 4.0) for t in (1.0, 4.0)]


def build_specs(which: str, desk: bool = False, seed: int = 0, cells=None, **overrides) -> list[ExperimentSpec]:
    if which not in STUDIES:
        raise DataValidationError(f"unknown study {which!r}; expected one of {', '.join(STUDIES)}")
    budget = DESK if desk else FULL
    base = dict(
        replications=budget["replications"].get(which, budget["replications"]["table2"]),
        true_replications=budget["true_replications"],
        bootstrap=budget["bootstrap"],
        seed=seed,
    )
    base.update({k: v for k, v in overrides.items() if v is not None})
    out = []
    for c in cells or default_cells():
        if isinstance(c, dict):
            kw = dict(base)
            kw.update(c)
            out.append(ExperimentSpec(which=which, **kw))
        else:
            m, a, t = c
            out.append(ExperimentSpec(which=which, m=int(m), alpha=float(a), tau2=float(t), **base))
    return out


def _mean_se(x: np.ndarray) -> Metric:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return Metric(float("nan"), float("nan"))
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")
    return Metric(float(np.mean(x)), se)


def _sd_se(x: np.ndarray) -> Metric:
    # SE of the sample SD under a normal approximation with kurtosis correction
    x = np.asarray(x, dtype=float)
    k = x.size
    if k < 3:
        return Metric(float(np.std(x, ddof=1)) if k > 1 else float("nan"), float("nan"))
    sd = float(np.std(x, ddof=1))
    c = x - x.mean()
    m4 = float(np.mean(c**4))
    var_s2 = (m4 - sd**4 * (k - 3) / (k - 1)) / k
    return Metric(sd, math.sqrt(max(var_s2, 0.0)) / (2 * sd) if sd > 0 else 0.0)


def _srmse(per_rep_mse: np.ndarray) -> Metric:
    mse = _mean_se(per_rep_mse)
    root = math.sqrt(max(mse.value, 0.0))
    return Metric(root, mse.se / (2 * root) if root > 0 else float("nan"))


def _seeds(spec: ExperimentSpec, purpose: int, lo: int, hi: int) -> list[RngSeed]:
    root = RngSeed(spec.seed, (purpose, spec.cell_key()))
    return [root.child(r) for r in range(lo, hi)]


# ---------------------------------------------------------------------------
# predictor study (known parameters)
# ---------------------------------------------------------------------------


def _predictor_chunk(task):
    spec, lo, hi, quad = task
    params, design = spec.params, spec.design
    ds = generate_many(params, design, _seeds(spec, STREAM_TABLE1, lo, hi))
    y, v, n, xi = ds.data.y, ds.data.v, ds.data.n, ds.xi
    mu = design.z @ params.beta
    b = shrinkage_factor(params.tau2, params.alpha, params.gamma, v, n)
    e = bayes_shrinkage_array(params.tau2, params.alpha, params.gamma, mu, y, v, n, quad)
    err_ab = mu + (1.0 - b) * (y - mu) - xi
    err_b = mu + (1.0 - e) * (y - mu) - xi
    err_syn = mu - xi
    return np.stack(
        [err_b.mean(1), (err_b**2).mean(1), err_ab.mean(1), (err_ab**2).mean(1),
         err_syn.mean(1), (err_syn**2).mean(1), (e >= b - 1e-9).all(1).astype(float)],
        axis=1,
    )


def run_predictor_study(spec: ExperimentSpec, workers: int | None = 1,
                        quad: QuadratureOptions | None = None) -> ExperimentResult:
    """Bias and SRMSE of the Bayes and AB predictors under known parameters.

    Errors are averaged over areas and replications; SEs treat replications
    as the independent units.
    """
    tasks = [(spec, lo, hi, quad) for lo, hi in chunk_ranges(spec.replications, REP_CHUNK)]
    rows = np.concatenate(ordered_map(_predictor_chunk, tasks, workers))
    metrics = {
        "bias_bayes": _mean_se(rows[:, 0]),
        "srmse_bayes": _srmse(rows[:, 1]),
        "bias_ab": _mean_se(rows[:, 2]),
        "srmse_ab": _srmse(rows[:, 3]),
        "srmse_synthetic": _srmse(rows[:, 5]),
        # paired difference of MSEs; negative means Bayes dominates
        "mse_diff_bayes_minus_ab": _mean_se(rows[:, 1] - rows[:, 3]),
    }
    return ExperimentResult(spec, metrics, {"replications": spec.replications,
                                            "prop1_violations": int(np.sum(rows[:, 6] == 0))})


# ---------------------------------------------------------------------------
# estimator study
# ---------------------------------------------------------------------------


def _estimator_chunk(task):
    spec, lo, hi, options = task
    ds = generate_many(spec.params, spec.design, _seeds(spec, STREAM_TABLE2, lo, hi))
    bf = fit_batch(ds.data, options)
    return np.column_stack(
        [bf.beta[:, 0], bf.tau2, bf.alpha, bf.gamma, bf.failed, bf.converged, bf.tau2_truncated, bf.polished]
    )


def run_estimator_study(spec: ExperimentSpec, workers: int | None = 1,
                        options: FitOptions | None = None) -> ExperimentResult:
    """Mean and SD of (beta_0, tau2, alpha, gamma) over repeated fits."""
    tasks = [(spec, lo, hi, options) for lo, hi in chunk_ranges(spec.replications, REP_CHUNK)]
    rows = np.concatenate(ordered_map(_estimator_chunk, tasks, workers))
    ok = rows[:, 4] == 0
    metrics = {}
    for j, name in enumerate(("beta", "tau2", "alpha", "gamma")):
        metrics[f"{name}_mean"] = _mean_se(rows[ok, j])
        metrics[f"{name}_sd"] = _sd_se(rows[ok, j])
    counts = {
        "replications": spec.replications,
        "failed": int(np.sum(~ok)),
        "nonconverged": int(np.sum(ok & (rows[:, 5] == 0))),
        "tau2_truncated": int(np.sum(ok & (rows[:, 6] == 1))),
        "polished": int(np.sum(ok & (rows[:, 7] == 1))),
    }
    return ExperimentResult(spec, metrics, counts)


# ---------------------------------------------------------------------------
# MSE study
# ---------------------------------------------------------------------------


def _true_mse_chunk(task):
    spec, lo, hi, options = task
    ds = generate_many(spec.params, spec.design, _seeds(spec, STREAM_TABLE3_TRUE, lo, hi))
    bf = fit_batch(ds.data, options)
    z = spec.design.z
    mu = bf.beta @ z.T
    b = shrinkage_factor(bf.tau2[:, None], bf.alpha[:, None], bf.gamma[:, None], ds.data.v, ds.data.n)
    err = mu + (1.0 - b) * (ds.data.y - mu) - ds.xi
    sq = (err**2).mean(1)
    sq[bf.failed] = np.nan
    return sq


def _mse_run(task):
    spec, t, options = task
    seed = _seeds(spec, STREAM_TABLE3_EST, t, t + 1)[0]
    ds = generate_many(spec.params, spec.design, [seed])
    bf = fit_batch(ds.data, options)
    if bf.failed[0]:
        return (np.nan, 1, 0)
    fitted = bf.result(0).params
    data = AreaData(y=ds.data.y[0], v=ds.data.v[0], n=ds.data.n[0], z=ds.data.z)
    try:
        comp = bootstrap_mse_components(fitted, data, spec.bootstrap, seed, fit_options=options, chunk=spec.bootstrap)
    except BootstrapError:
        return (np.nan, 0, 1)
    g11 = g_values(fitted.tau2, fitted.alpha, fitted.gamma, data.v, data.n)
    mse = g11 - comp.g12 + comp.g2 - 2.0 * comp.g3
    return (float(np.mean(mse)), 0, 0)


def _mse_chunk(task):
    spec, lo, hi, options = task
    return [_mse_run((spec, t, options)) for t in range(lo, hi)]


def run_mse_study(spec: ExperimentSpec, workers: int | None = 1,
                  options: FitOptions | None = None) -> ExperimentResult:
    """True MSE of the AEB predictor against the mean bootstrap estimate.

    True MSE: ``true_replications`` fresh datasets, each fitted and predicted.
    Estimate: ``replications`` fresh datasets, each with ``bootstrap``
    bootstrap replicates. Both are averaged over areas.
    """
    tasks = [(spec, lo, hi, options) for lo, hi in chunk_ranges(spec.true_replications, REP_CHUNK)]
    sq = np.concatenate(ordered_map(_true_mse_chunk, tasks, workers))
    tasks = [(spec, lo, hi, options) for lo, hi in chunk_ranges(spec.replications, RUN_CHUNK)]
    runs = flatten(ordered_map(_mse_chunk, tasks, workers))
    est = np.array([r[0] for r in runs])
    true = _mean_se(sq[np.isfinite(sq)])
    mean_est = _mean_se(est[np.isfinite(est)])
    rb = 100.0 * (mean_est.value - true.value) / true.value
    ratio = mean_est.value / true.value
    rb_se = 100.0 * math.sqrt(mean_est.se**2 + ratio**2 * true.se**2) / true.value
    metrics = {"true_mse": true, "mean_mse_hat": mean_est, "rb_percent": Metric(rb, rb_se)}
    counts = {
        "true_replications": spec.true_replications,
        "true_failed": int(np.sum(~np.isfinite(sq))),
        "runs": spec.replications,
        "bootstrap": spec.bootstrap,
        "run_fit_failed": int(sum(r[1] for r in runs)),
        "run_bootstrap_failed": int(sum(r[2] for r in runs)),
    }
    return ExperimentResult(spec, metrics, counts)


def run_study(specs: Sequence[ExperimentSpec], workers: int | None = 1) -> list[ExperimentResult]:
    runners = {"predictor": run_predictor_study, "estimator": run_estimator_study, "mse": run_mse_study}
    return [runners[s.kind](s, workers=workers) for s in specs]
