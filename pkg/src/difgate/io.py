"""Reading response files and configs, writing reports and simulation output."""

import csv
import json
import math
import os

import numpy as np

from .errors import ConfigError, EmptyFile, SchemaError
from .estimation import ResponseDataset

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

RESERVED = ("group", "cluster")


def _cell(text, row, col, threshold):
    text = text.strip()
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise SchemaError(f"row {row}, column {col!r}: {text!r} is not a number") from None
    if threshold is not None and math.isfinite(value):
        return float(value >= threshold)
    if value not in (0.0, 1.0):
        hint = "" if threshold is not None else " (use --binarize-threshold to recode)"
        raise SchemaError(f"row {row}, column {col!r}: value {text!r} is not 0, 1 or empty{hint}")
    return value


def ingest_csv(path, binarize_threshold=None):
    """Read a wide response file: one person per row, a ``group`` column of 0/1.

    Every column other than ``group`` and ``cluster`` is an item. Empty cells
    are missing responses. Rows are numbered from 1 for the first data row.
    """
    path = os.fspath(path)
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path}: file is empty")
        header = [h.strip() for h in header]
        seen = set()
        for h in header:
            if h in seen:
                raise SchemaError(f"{path}: duplicate column {h!r}")
            seen.add(h)
        if "group" not in header:
            raise SchemaError(f"{path}: missing required column 'group'")
        items = [h for h in header if h not in RESERVED]
        if not items:
            raise SchemaError(f"{path}: no item columns")
        col = {h: j for j, h in enumerate(header)}
        rows, groups, clusters = [], [], []
        for r, line in enumerate(reader, start=1):
            if not any(c.strip() for c in line):
                continue
            if len(line) != len(header):
                raise SchemaError(f"row {r}: expected {len(header)} fields, found {len(line)}")
            g = line[col["group"]].strip()
            if g not in ("0", "1"):
                raise SchemaError(f"row {r}, column 'group': {g!r} is not 0 or 1")
            groups.append(int(g))
            rows.append([_cell(line[col[h]], r, h, binarize_threshold) for h in items])
            if "cluster" in col:
                clusters.append(line[col["cluster"]].strip())
    if not rows:
        raise EmptyFile(f"{path}: no data rows")
    cluster = np.array(clusters) if "cluster" in col else None
    return ResponseDataset(np.array(rows, dtype=float), np.array(groups), tuple(items), cluster)


def write_csv(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2)
        fh.write("\n")


ITEM_COLUMNS = (
    "item", "delta_hat", "se", "se_null", "weight", "influence", "threshold", "flagged", "a0", "b0", "a1", "b1",
)


def write_report(report, out_dir, stem="report", fmt="both"):
    """Write the JSON report and/or the per-item CSV; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if fmt in ("json", "both"):
        paths.append(os.path.join(out_dir, f"{stem}.json"))
        write_json(paths[-1], report)
    if fmt in ("csv", "both"):
        paths.append(os.path.join(out_dir, f"{stem}_items.csv"))
        write_csv(paths[-1], report["items"], ITEM_COLUMNS)
    return paths


SUMMARY_COLUMNS = (
    "p", "n_dif", "replications", "failures", "rejection_rate",
    "mean_delta_U", "sd_delta_U", "mean_delta_R", "sd_delta_R",
    "mean_Delta", "sd_Delta", "mean_se_Delta", "bias_U", "bias_R",
)
SAMPLE_COLUMNS = ("p", "rep", "delta_U", "delta_R", "Delta", "se_Delta", "z", "rejected")


def write_simulation(summary, out_dir, fmt="both", keep_reps=False, tool_version=None):
    """Summary CSV (one row per condition), summary JSON, estimator samples CSV."""
    os.makedirs(out_dir, exist_ok=True)
    stem = f"simulation_{summary.config.study}"
    paths = []
    rows = [c.as_dict() for c in summary.conditions]
    if fmt in ("csv", "both"):
        paths.append(os.path.join(out_dir, f"{stem}_summary.csv"))
        write_csv(paths[-1], rows, SUMMARY_COLUMNS)
        paths.append(os.path.join(out_dir, f"{stem}_samples.csv"))
        samples = [r.as_dict() for r in summary.records if r.ok]
        write_csv(paths[-1], samples, SAMPLE_COLUMNS)
    if fmt in ("json", "both"):
        doc = {"schema": "difgate/1", "tool_version": tool_version, "config": summary.config.as_dict(), "conditions": rows}
        if keep_reps:
            doc["replications"] = [r.as_dict() for r in summary.records]
        paths.append(os.path.join(out_dir, f"{stem}.json"))
        write_json(paths[-1], doc)
    return paths


def load_config(path):
    """Read a TOML or JSON mapping of simulation settings."""
    path = os.fspath(path)
    try:
        if path.endswith(".json"):
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        else:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as err:
        raise ConfigError(f"{path}: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    return data.get("simulation", data)
