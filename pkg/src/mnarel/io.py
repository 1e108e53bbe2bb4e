"""CSV datasets, model-spec files and report serialisation."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .errors import SpecError
from .model import Dataset, ModelSpec

MISSING_TOKENS = ("", "NA")
DIGITS = 17


def fmt(value) -> str:
    """Float at 17 significant digits (exact round trip for float64)."""
    v = float(value)
    if math.isnan(v):
        return "NaN"
    if math.isinf(v):
        return "Infinity" if v > 0 else "-Infinity"
    return format(v, f".{DIGITS}g")


# ---------------------------------------------------------------------------
# CSV data
# ---------------------------------------------------------------------------

def _recode_value(raw: str, mapping: dict | None) -> str:
    if not mapping:
        return raw
    for src, dst in mapping.items():
        try:
            if float(raw) == float(src):
                return str(dst)
        except ValueError:
            if raw == str(src):
                return str(dst)
    return raw


def read_csv(path, response: str = "y", covariates=None, recode: dict | None = None) -> Dataset:
    """Read a dataset with a header row; an empty or ``NA`` response is missing.

    Parameters
    ----------
    response : str
        Name of the response column.
    covariates : sequence of str, optional
        Columns to keep as covariates, in order (default: every other column).
    recode : dict, optional
        ``{column: {old: new}}`` value replacements applied before parsing.

    Raises
    ------
    SpecError
        With the offending line number, on a missing column, a missing
        covariate value or a non-numeric field.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise SpecError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SpecError(f"{path}:1: empty file") from None
        if response not in header:
            raise SpecError(f"{path}:1: response column {response!r} not in header {header}")
        names = [h for h in header if h != response] if covariates is None else list(covariates)
        for name in names:
            if name not in header:
                raise SpecError(f"{path}:1: covariate column {name!r} not in header")
        pos = {h: i for i, h in enumerate(header)}
        recode = recode or {}
        rows, ys = [], []
        for line_no, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise SpecError(f"{path}:{line_no}: expected {len(header)} fields, got {len(rec)}")
            vals = []
            for name in names:
                raw = _recode_value(rec[pos[name]].strip(), recode.get(name))
                if raw in MISSING_TOKENS:
                    raise SpecError(f"{path}:{line_no}: covariate {name!r} is missing")
                try:
                    vals.append(float(raw))
                except ValueError:
                    raise SpecError(f"{path}:{line_no}: {name!r} is not numeric: {raw!r}") from None
            raw = _recode_value(rec[pos[response]].strip(), recode.get(response))
            if raw in MISSING_TOKENS:
                ys.append(math.nan)
            else:
                try:
                    ys.append(float(raw))
                except ValueError:
                    raise SpecError(
                        f"{path}:{line_no}: {response!r} is not numeric: {raw!r}") from None
            rows.append(vals)
    if not rows:
        raise SpecError(f"{path}: no data rows")
    y = np.array(ys)
    X = np.array(rows, dtype=float).reshape(len(rows), len(names))
    d = (~np.isnan(y)).astype(np.int8)
    return Dataset(X, d, y, tuple(names))


def write_csv(data: Dataset, path, response: str = "y") -> None:
    """Write ``data`` with missing responses as empty fields."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*data.columns, response])
        for x, d, y in zip(data.x, data.d, data.y):
            w.writerow([*(fmt(v) for v in x), fmt(y) if d else ""])


# ---------------------------------------------------------------------------
# model specifications
# ---------------------------------------------------------------------------

SPEC_KEYS = {"response", "covariates", "propensity", "mean", "logvar", "mean_link", "family",
             "instrument", "recode"}


def load_config(path) -> dict:
    """Parse a JSON or YAML model-spec file into a dict."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpecError(f"{path}: cannot open ({exc.strerror})") from exc
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        try:
            cfg = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise SpecError(f"{path}: invalid YAML: {exc}") from exc
    else:
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise SpecError(f"{path}: model spec must be a mapping")
    unknown = set(cfg) - SPEC_KEYS
    if unknown:
        raise SpecError(f"{path}: unknown model-spec keys {sorted(unknown)}")
    return cfg


def build_spec(cfg: dict, columns, instrument: str | None = None) -> ModelSpec:
    """Normal-family :class:`ModelSpec` from a parsed config over ``columns``."""
    family = cfg.get("family", "normal")
    if family != "normal":
        raise SpecError(f"unsupported family {family!r} (only 'normal' is available)")
    for key in ("propensity", "mean", "logvar"):
        if key not in cfg:
            raise SpecError(f"model spec lacks {key!r}")
        if not isinstance(cfg[key], list):
            raise SpecError(f"model spec {key!r} must be a list")
    link = cfg.get("mean_link", "identity")
    if link not in ("identity", "log"):
        raise SpecError(f"unknown mean_link {link!r}")
    return ModelSpec.normal(columns, [str(c) for c in cfg["propensity"]],
                            [str(t) for t in cfg["mean"]], [str(t) for t in cfg["logvar"]],
                            mean_link=link, instrument=instrument or cfg.get("instrument"))


def spec_config(spec: ModelSpec, response: str = "y") -> dict:
    """Inverse of :func:`build_spec` for normal-family specs."""
    cfg = {"response": response, "covariates": list(spec.columns),
           "propensity": [spec.columns[j] for j in spec.propensity],
           "mean": list(spec.mean_text), "logvar": list(spec.logvar_text),
           "mean_link": getattr(spec.outcome, "mean_link", "identity"), "family": "normal"}
    if spec.instrument is not None:
        cfg["instrument"] = spec.instrument
    return cfg


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _json(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_json(v, indent, level + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + _json(v, indent, level + 1) for v in seq) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return fmt(v) if math.isfinite(v) else "null"
    return json.dumps(str(obj))


def to_json(obj, indent: int = 2) -> str:
    """JSON text with every float at 17 significant digits; non-finite floats become null."""
    return _json(obj, indent, 0) + "\n"


def rows_to_csv(rows: list[dict]) -> str:
    """CSV text for a list of same-keyed dicts, floats at 17 significant digits."""
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for r in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else ("" if v is None else v)
                    for v in (r.get(k) for k in keys)])
    return buf.getvalue()


def rows_to_table(rows: list[dict], digits: int = 4) -> str:
    """Fixed-width text table for the terminal."""
    if not rows:
        return ""
    keys = list(rows[0])

    def cell(v):
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.{digits}f}"
        return "" if v is None else str(v)

    body = [[cell(r.get(k)) for k in keys] for r in rows]
    widths = [max(len(k), *(len(b[i]) for b in body)) for i, k in enumerate(keys)]
    out = ["  ".join(k.rjust(w) for k, w in zip(keys, widths))]
    out += ["  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(out) + "\n"
