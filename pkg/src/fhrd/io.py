"""Dataset, weight, parameter and result files.

Dataset CSV: header ``area_id,y,v,n,z1..zp`` with ``z1`` equal to 1. Lines
starting with ``#`` are comments. Results are JSON; floats are written with
``repr`` (shortest text that round-trips to the same double) and values read
from input files are echoed with their original decimal text.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DataValidationError
from .model import AreaData, ModelParams
from .prediction import BenchmarkWeights

WEIGHT_SUM_TOL = 1e-9


class RawNumber(str):
    """Decimal text copied from an input file and written back verbatim."""


@dataclass(frozen=True)
class DatasetFile:
    data: AreaData
    raw: dict  # column name -> tuple of original strings
    path: str


def _rows(path):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataValidationError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or (row[0].lstrip().startswith("#")) or all(not c.strip() for c in row):
                continue
            yield lineno, [c.strip() for c in row]


def _number(text, what, lineno, path):
    try:
        x = float(text)
    except ValueError:
        raise DataValidationError(f"{path}:{lineno}: {what} is not a number: {text!r}") from None
    if not math.isfinite(x):
        raise DataValidationError(f"{path}:{lineno}: {what} must be finite, got {text!r}")
    return x


def read_dataset(path) -> DatasetFile:
    """Parse and validate a dataset CSV; errors name the file line."""
    path = str(path)
    rows = _rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise DataValidationError(f"{path}: file is empty") from None
    head = [h.lower() for h in header]
    if head[:4] != ["area_id", "y", "v", "n"] or len(head) < 5:
        raise DataValidationError(f"{path}:{lineno}: header must be area_id,y,v,n,z1[,z2,...]")
    zcols = head[4:]
    if zcols != [f"z{j}" for j in range(1, len(zcols) + 1)]:
        raise DataValidationError(f"{path}:{lineno}: covariate columns must be named z1..zp")
    ids, ys, vs, ns, zs = [], [], [], [], []
    raw = {c: [] for c in head}
    seen = set()
    for lineno, row in rows:
        if len(row) != len(head):
            raise DataValidationError(f"{path}:{lineno}: expected {len(head)} fields, got {len(row)}")
        if any(c == "" for c in row):
            raise DataValidationError(f"{path}:{lineno}: missing value")
        aid = row[0]
        if aid in seen:
            raise DataValidationError(f"{path}:{lineno}: duplicate area_id {aid!r}")
        seen.add(aid)
        y = _number(row[1], "y", lineno, path)
        v = _number(row[2], "v", lineno, path)
        if not v > 0:
            raise DataValidationError(f"{path}:{lineno}: v must be > 0, got {row[2]!r}")
        n = _number(row[3], "n", lineno, path)
        if n != int(n) or n < 1:
            raise DataValidationError(f"{path}:{lineno}: n must be an integer >= 1, got {row[3]!r}")
        z = [_number(c, f"z{j + 1}", lineno, path) for j, c in enumerate(row[4:])]
        if z[0] != 1:
            raise DataValidationError(f"{path}:{lineno}: z1 must be 1, got {row[4]!r}")
        ids.append(aid)
        ys.append(y)
        vs.append(v)
        ns.append(n)
        zs.append(z)
        for c, text in zip(head, row):
            raw[c].append(text)
    if not ids:
        raise DataValidationError(f"{path}: no data rows")
    data = AreaData(
        y=np.array(ys), v=np.array(vs), n=np.array(ns), z=np.array(zs), area_ids=tuple(ids)
    )
    return DatasetFile(data=data, raw={k: tuple(v) for k, v in raw.items()}, path=path)


def read_weights(path, area_ids) -> BenchmarkWeights:
    """Weights CSV ``area_id,w`` matched to ``area_ids``.

    The weights must cover every area exactly once and sum to 1 within 1e-9;
    they are then rescaled to sum to 1 at full precision.
    """
    path = str(path)
    rows = _rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise DataValidationError(f"{path}: file is empty") from None
    if [h.lower() for h in header] != ["area_id", "w"]:
        raise DataValidationError(f"{path}:{lineno}: header must be area_id,w")
    found = {}
    for lineno, row in rows:
        if len(row) != 2 or row[1] == "":
            raise DataValidationError(f"{path}:{lineno}: expected area_id,w")
        if row[0] in found:
            raise DataValidationError(f"{path}:{lineno}: duplicate area_id {row[0]!r}")
        w = _number(row[1], "w", lineno, path)
        if w < 0:
            raise DataValidationError(f"{path}:{lineno}: weight must be >= 0")
        found[row[0]] = w
    missing = [a for a in area_ids if a not in found]
    extra = [a for a in found if a not in set(area_ids)]
    if missing or extra:
        raise DataValidationError(
            f"{path}: weights do not match the dataset areas (missing {missing[:5]}, unknown {extra[:5]})"
        )
    w = np.array([found[a] for a in area_ids])
    total = math.fsum(w)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise DataValidationError(f"{path}: weights sum to {total!r}, not 1 (tolerance 1e-9)")
    return BenchmarkWeights(w / total)


def read_params(source) -> ModelParams:
    """ModelParams from a JSON file path or an inline JSON object."""
    text = str(source)
    if not text.lstrip().startswith("{"):
        try:
            text = Path(text).read_text()
        except OSError as exc:
            raise DataValidationError(f"cannot read {source}: {exc.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"parameters are not valid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise DataValidationError("parameters must be a JSON object")
    return ModelParams.from_dict(obj)


def read_spec(path) -> dict:
    """Simulation spec from JSON or YAML."""
    import yaml

    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataValidationError(f"cannot read {path}: {exc.strerror}") from None
    try:
        obj = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise DataValidationError(f"{path}: cannot parse spec: {exc}") from None
    if not isinstance(obj, dict):
        raise DataValidationError(f"{path}: spec must be a mapping")
    return obj


# ---------------------------------------------------------------------------
# JSON writing
# ---------------------------------------------------------------------------


def _emit(obj, out: list, indent: int, level: int):
    pad = "\n" + " " * (indent * (level + 1))
    end = "\n" + " " * (indent * level)
    if isinstance(obj, RawNumber):
        out.append(str(obj))
    elif obj is None or isinstance(obj, (bool, np.bool_)):
        out.append("null" if obj is None else ("true" if obj else "false"))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        out.append(repr(x) if math.isfinite(x) else "null")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            out.append(("," if i else "") + pad + json.dumps(str(k)) + ": ")
            _emit(v, out, indent, level + 1)
        out.append(end + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            out.append("[]")
            return
        out.append("[")
        for i, v in enumerate(obj):
            out.append(("," if i else "") + pad)
            _emit(v, out, indent, level + 1)
        out.append(end + "]")
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON text with full-precision floats; non-finite floats become null."""
    out: list = []
    _emit(obj, out, indent, 0)
    return "".join(out) + "\n"


def write_text(text: str, path=None):
    if path is None or str(path) == "-":
        import sys

        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def result_schema() -> dict:
    return json.loads(resources.files("fhrd").joinpath("data/result.schema.json").read_text())


def bundled_dataset_path():
    """Path of the synthetic 47-area example dataset shipped with the package."""
    return resources.files("fhrd").joinpath("data/synthetic_47_areas.csv")
