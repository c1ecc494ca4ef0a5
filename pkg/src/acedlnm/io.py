"""CSV ingestion with row-level diagnostics and deterministic artifact writers."""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .model import DataSet

SCHEMA_VERSION = 1


class InputError(ValueError):
    """Malformed input file or configuration."""


# ---------------------------------------------------------------- reading
def _parse_time(text: str, row: int) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return _dt.date.fromisoformat(text).toordinal()
    except ValueError:
        raise InputError(f"row {row}: cannot parse time {text!r} (integer day index or ISO-8601 date)") from None


def _parse_number(text: str, row: int, column: str) -> float:
    text = text.strip()
    if text == "":
        raise InputError(f"row {row}: missing value in column {column!r}")
    try:
        v = float(text)
    except ValueError:
        raise InputError(f"row {row}: non-numeric value {text!r} in column {column!r}") from None
    if not math.isfinite(v):
        raise InputError(f"row {row}: non-finite value {text!r} in column {column!r}")
    return v


def read_table(path, columns) -> dict:
    """Read the named columns of a headed UTF-8 CSV as raw strings.

    Row numbers in diagnostics count data rows from 1 (the header is row 0).
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        except (csv.Error, UnicodeDecodeError) as exc:
            raise InputError(f"{path}: {exc}") from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise InputError(f"{path}: missing column(s) {missing}; header has {header}")
        pos = {c: header.index(c) for c in columns}
        out = {c: [] for c in columns}
        try:
            for i, rec in enumerate(reader, start=1):
                if not rec or all(not f.strip() for f in rec):
                    continue
                if len(rec) != len(header):
                    raise InputError(f"row {i}: expected {len(header)} fields, found {len(rec)}")
                for c in columns:
                    out[c].append((i, rec[pos[c]]))
        except (csv.Error, UnicodeDecodeError) as exc:
            raise InputError(f"{path}: {exc}") from None
    if not out[columns[0]]:
        raise InputError(f"{path}: no data rows")
    return out


def read_dataset(path, time: str, response: str, exposure: str, covariates=()) -> DataSet:
    """Load a daily series. Times must be consecutive days; every value finite;
    counts nonnegative integers."""
    covariates = [c for c in dict.fromkeys(covariates) if c not in (time, response, exposure)]
    cols = [time, response, exposure] + covariates
    table = read_table(path, cols)
    times = np.array([_parse_time(v, r) for r, v in table[time]], dtype=float)
    rows = [r for r, _ in table[time]]
    for k in range(1, len(times)):
        if times[k] != times[k - 1] + 1:
            gap = "missing day(s)" if times[k] > times[k - 1] + 1 else "times not increasing"
            raise InputError(f"row {rows[k]}: {gap} in column {time!r} (series must be daily and gap-free)")
    x = np.array([_parse_number(v, r, exposure) for r, v in table[exposure]])
    y = np.array([_parse_number(v, r, response) for r, v in table[response]])
    bad = np.flatnonzero((y < 0) | (y != np.round(y)))
    if len(bad):
        raise InputError(f"row {rows[bad[0]]}: response {y[bad[0]]!r} is not a nonnegative integer count")
    cov = {c: np.array([_parse_number(v, r, c) for r, v in table[c]]) for c in covariates}
    return DataSet(times - times[0] + 1.0, y, x, cov)


# ---------------------------------------------------------------- writing
def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=1) + "\n"


def config_hash(config: dict) -> str:
    canon = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    Path(path).write_text(dumps(obj), encoding="utf-8")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if not math.isfinite(v) else repr(v)
    return str(v)


def write_csv(path, header, rows):
    """Rows are dicts keyed by header names; absent and non-finite values are blank."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(h)) for h in header])


CURVE_HEADER = ["curve", "x", "point", "lower", "upper"]


def curve_rows(curves):
    for c in curves:
        for i, x in enumerate(c.grid):
            yield {"curve": c.kind, "x": float(x), "point": float(c.point[i]),
                   "lower": None if c.lower is None else float(c.lower[i]),
                   "upper": None if c.upper is None else float(c.upper[i])}


def write_curves(path, curves):
    write_csv(path, CURVE_HEADER, curve_rows(curves))


def read_curves(path) -> dict:
    """curves.csv back into {curve: array of (x, point, lower, upper)} (NaN for blanks)."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            vals = [float(rec[k]) if rec[k] != "" else np.nan for k in CURVE_HEADER[1:]]
            out.setdefault(rec["curve"], []).append(vals)
    return {k: np.array(v) for k, v in out.items()}
