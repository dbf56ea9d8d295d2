"""Command-line front end: ``fhrd fit | predict | mse | simulate``.

Exit codes: 0 success, 2 input or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import sys
from dataclasses import fields, replace

import numpy as np

from . import __version__
from .errors import DataValidationError, DomainError, NumericalError
from .estimation import FitOptions, fit
from .io import RawNumber, dumps, read_dataset, read_params, read_spec, read_weights, write_text
from .prediction import QuadratureOptions, benchmark_cab, predict
from .simulation import ExperimentResult, build_specs, run_study
from .uncertainty import mse_aeb, mse_cab

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
DEFAULT_SEED = 20240601
BENCHMARK_TOL = 1e-10

_FIT_KEYS = {f.name for f in fields(FitOptions)}
_QUAD_KEYS = {"quad_" + f.name for f in fields(QuadratureOptions)}


def _u64(text):
    try:
        x = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a decimal integer: {text!r}") from None
    if not 0 <= x < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return x


def _positive_int(text):
    try:
        x = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if x < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return x


def _options(tol_overrides):
    """FitOptions and QuadratureOptions from NAME=VALUE overrides."""
    fit_kw, quad_kw = {}, {}
    for item in tol_overrides or ():
        if "=" not in item:
            raise DataValidationError(f"--tol expects NAME=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key == "alpha_bracket":
            try:
                lo, hi = (float(x) for x in value.split(","))
            except ValueError:
                raise DataValidationError("alpha_bracket expects LO,HI") from None
            fit_kw[key] = (lo, hi)
            continue
        target = fit_kw if key in _FIT_KEYS else quad_kw if key in _QUAD_KEYS else None
        if target is None:
            known = sorted(_FIT_KEYS | _QUAD_KEYS)
            raise DataValidationError(f"unknown --tol name {key!r}; known: {', '.join(known)}")
        name = key[5:] if target is quad_kw else key
        default = getattr(FitOptions() if target is fit_kw else QuadratureOptions(), name)
        try:
            target[name] = type(default)(float(value)) if isinstance(default, (int, float)) else value
        except ValueError:
            raise DataValidationError(f"bad value for {key}: {value!r}") from None
    return FitOptions(**fit_kw), QuadratureOptions(**quad_kw)


def _fit_section(args, data, fopts):
    if args.params:
        params = read_params(args.params)
        if params.beta.shape[0] != data.p:
            raise DataValidationError("--params beta length does not match the covariates")
        return params, {"source": "params"}
    res = fit(data, fopts)
    diag = res.diagnostics()
    diag["source"] = "fit"
    return res.params, diag


def _fit_json(params, diag):
    return {"beta": list(params.beta), "tau2": params.tau2, "alpha": params.alpha, "gamma": params.gamma,
            "diagnostics": diag}


def _meta(seed=None, replicates=None, **extra):
    out = {"seed": seed, "replicates": replicates, "version": __version__}
    out.update(extra)
    return out


def cmd_fit(args) -> int:
    ds = read_dataset(args.dataset)
    fopts, _ = _options(args.tol)
    params, diag = _fit_section(args, ds.data, fopts)
    write_text(dumps({"fit": _fit_json(params, diag), "meta": _meta()}), args.out)
    return EXIT_OK


def _prediction_rows(ds, pred, delta=None):
    rows = []
    for i, aid in enumerate(pred.area_ids):
        row = {"area_id": aid, "y": RawNumber(ds.raw["y"][i]), "synthetic": pred.synthetic[i],
               "b_i": pred.b[i], "xi_aeb": pred.xi_aeb[i]}
        if pred.e is not None:
            row["e_i"] = pred.e[i]
            row["xi_bayes"] = pred.xi_bayes[i]
        if delta is not None:
            row["delta_cab"] = delta[i]
        rows.append(row)
    return rows


def _benchmark(ds, pred, path):
    weights = read_weights(path, ds.data.area_ids)
    delta = benchmark_cab(pred, ds.data, weights)
    target = float(np.dot(weights.w, ds.data.y))
    if abs(float(np.dot(weights.w, delta)) - target) > BENCHMARK_TOL * max(1.0, abs(target)):
        raise NumericalError("benchmark constraint not met to 1e-10")
    return weights, delta


def cmd_predict(args) -> int:
    ds = read_dataset(args.dataset)
    fopts, qopts = _options(args.tol)
    params, diag = _fit_section(args, ds.data, fopts)
    pred = predict(params, ds.data, bayes=args.bayes, quad=qopts)
    delta = _benchmark(ds, pred, args.benchmark)[1] if args.benchmark else None
    doc = {"fit": _fit_json(params, diag), "predictions": _prediction_rows(ds, pred, delta), "meta": _meta()}
    write_text(dumps(doc), args.out)
    return EXIT_OK


def cmd_mse(args) -> int:
    ds = read_dataset(args.dataset)
    fopts, qopts = _options(args.tol)
    params, diag = _fit_section(args, ds.data, fopts)
    pred = predict(params, ds.data, bayes=args.bayes, quad=qopts)
    weights = delta = None
    if args.benchmark:
        weights, delta = _benchmark(ds, pred, args.benchmark)
    kw = dict(replicates=args.replicates, seed=args.seed, workers=args.workers, fit_options=fopts)
    rep = mse_cab(params, ds.data, weights, **kw) if weights is not None else mse_aeb(params, ds.data, **kw)
    rows = []
    for i, aid in enumerate(rep.area_ids):
        row = {"area_id": aid, "g11": rep.g11_hat[i], "g12": rep.g12_star[i], "g2": rep.g2_star[i],
               "g3": rep.g3_star[i], "mse_aeb": rep.mse_aeb[i]}
        if rep.mse_cab is not None:
            row["j_star"] = rep.j_star[i]
            row["mse_cab"] = rep.mse_cab[i]
        rows.append(row)
    meta = _meta(args.seed, args.replicates, dropped=rep.dropped, nonconverged=rep.nonconverged,
                 drop_fraction=rep.dropped / rep.replicates)
    if rep.squared_gap is not None:
        meta["squared_gap"] = rep.squared_gap
    doc = {"fit": _fit_json(params, diag), "predictions": _prediction_rows(ds, pred, delta), "mse": rows,
           "meta": meta}
    write_text(dumps(doc), args.out)
    for w in rep.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

_SPEC_KEYS = {"study", "desk", "seed", "cells", "replications", "true_replications", "bootstrap",
              "gamma", "beta", "n", "kind", "workers"}


def _results_csv(results: list[ExperimentResult]) -> str:
    names = []
    for r in results:
        for k in r.metrics:
            if k not in names:
                names.append(k)
    cols = ["study", "kind", "m", "alpha", "tau2", "gamma", "n", "replications", "true_replications",
            "bootstrap", "seed"]
    header = cols + [x for k in names for x in (k, k + "_se")]
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in results:
        s = r.spec
        row = [s.which, s.kind, s.m, repr(s.alpha), repr(s.tau2), repr(s.gamma), s.n, s.replications,
               s.true_replications, s.bootstrap, s.seed]
        for k in names:
            m = r.metrics.get(k)
            row += [repr(m.value), repr(m.se)] if m else ["", ""]
        w.writerow(row)
    return buf.getvalue()


def _results_dat(results: list[ExperimentResult]) -> str:
    # gnuplot-friendly: whitespace separated, one block per study kind
    lines = []
    names = list(results[0].metrics) if results else []
    lines.append("# " + " ".join(["m", "alpha", "tau2"] + [x for k in names for x in (k, k + "_se")]))
    for r in results:
        vals = [str(r.spec.m), repr(r.spec.alpha), repr(r.spec.tau2)]
        for k in names:
            m = r.metrics[k]
            vals += [repr(m.value), repr(m.se)]
        lines.append(" ".join(vals))
    return "\n".join(lines) + "\n"


def cmd_simulate(args) -> int:
    spec = read_spec(args.spec)
    unknown = set(spec) - _SPEC_KEYS
    if unknown:
        raise DataValidationError(f"unknown spec field(s): {', '.join(sorted(unknown))}")
    if "study" not in spec:
        raise DataValidationError("spec field 'study' is required")
    desk = bool(spec.get("desk", False)) or args.desk
    seed = args.seed if args.seed is not None else spec.get("seed", DEFAULT_SEED)
    try:
        seed = _u64(str(seed))
    except argparse.ArgumentTypeError as exc:
        raise DataValidationError(f"spec field 'seed': {exc}") from None
    extra = {k: spec.get(k) for k in ("replications", "true_replications", "bootstrap", "gamma", "beta", "n", "kind")}
    if args.replicates is not None:
        extra["replications"] = args.replicates
    cells = spec.get("cells")
    if cells is not None and not isinstance(cells, list):
        raise DataValidationError("spec field 'cells' must be a list")
    try:
        specs = build_specs(spec["study"], desk=desk, seed=seed, cells=cells, **extra)
    except TypeError as exc:
        raise DataValidationError(f"bad cell definition: {exc}") from None
    workers = args.workers if args.workers is not None else spec.get("workers", 1)
    results = run_study(specs, workers=workers)
    doc = {"study": spec["study"], "desk": desk, "meta": _meta(seed, None),
           "results": [r.to_dict() for r in results]}
    if args.out:
        write_text(_results_csv(results), args.out + ".csv")
        write_text(dumps(doc), args.out + ".json")
        write_text(_results_dat(results), args.out + ".dat")
    else:
        write_text(_results_csv(results))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fhrd", description="Small-area estimation under the FHRD model.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--tol", action="append", metavar="NAME=VALUE",
                        help="override a fit or quadrature setting (repeatable), e.g. tol=1e-10, quad_rtol=1e-12")
    common.add_argument("--params", help="JSON file or inline JSON with beta, tau2, alpha, gamma; skips fitting")

    f = sub.add_parser("fit", parents=[common], help="estimate model parameters")
    f.add_argument("dataset")
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", parents=[common], help="AEB (and optional Bayes / benchmarked) predictions")
    pr.add_argument("dataset")
    pr.add_argument("--bayes", action="store_true", help="add quadrature Bayes predictions")
    pr.add_argument("--benchmark", metavar="WEIGHTS_CSV", help="add benchmarked predictions")
    pr.set_defaults(func=cmd_predict)

    m = sub.add_parser("mse", parents=[common], help="bootstrap MSE estimates")
    m.add_argument("dataset")
    m.add_argument("--replicates", type=_positive_int, default=1000)
    m.add_argument("--seed", type=_u64, default=DEFAULT_SEED)
    m.add_argument("--workers", type=int, default=1)
    m.add_argument("--bayes", action="store_true")
    m.add_argument("--benchmark", metavar="WEIGHTS_CSV")
    m.set_defaults(func=cmd_mse)

    s = sub.add_parser("simulate", help="run a simulation study from a JSON/YAML spec")
    s.add_argument("spec")
    s.add_argument("--desk", action="store_true", help="reduced replication budget")
    s.add_argument("--seed", type=_u64)
    s.add_argument("--replicates", type=_positive_int, help="override the replication count")
    s.add_argument("--workers", type=int)
    s.add_argument("--out", help="output prefix; writes PREFIX.csv, PREFIX.json and PREFIX.dat")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DataValidationError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (UnicodeDecodeError, OSError) as exc:
        # unreadable input or unwritable output path
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
