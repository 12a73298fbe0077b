"""CSV and sidecar-JSON readers/writers for targets, features and predictions.

Floats are written with ``repr`` so every file round-trips exactly.
"""
from __future__ import annotations

import csv
import json
import os

import numpy as np

from .features import N_FEATURES, SCHEMA_VERSION, feature_names, feature_schema


class TableError(ValueError):
    pass


def _fmt(x) -> str:
    return repr(float(x))


def write_id_values(values: dict, path, column: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patch_id", column])
        for pid, v in values.items():
            writer.writerow([pid, _fmt(v)])


def read_id_values(path, column: str) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "patch_id" or column not in header:
            raise TableError(f"{path}: expected columns patch_id,...,{column}")
        col = header.index(column)
        out = {}
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if row[0] in out:
                raise TableError(f"{path}: row {row_no}: duplicate patch_id {row[0]!r}")
            try:
                out[row[0]] = float(row[col])
            except (ValueError, IndexError):
                raise TableError(f"{path}: row {row_no}: bad {column} value") from None
    return out


def write_targets(values: dict, path) -> None:
    write_id_values(values, path, "true_cellularity")


def read_targets(path) -> dict:
    return read_id_values(path, "true_cellularity")


def schema_path(features_path) -> str:
    root, _ = os.path.splitext(str(features_path))
    return root + ".schema.json"


def write_features(ids, X, path, targets=None) -> None:
    """Feature CSV ``patch_id,f000..f080[,target]`` plus its column-schema sidecar."""
    X = np.asarray(X, dtype=np.float64).reshape(len(ids), N_FEATURES)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patch_id"] + feature_names() + (["target"] if targets is not None else []))
        for i, pid in enumerate(ids):
            row = [pid] + [_fmt(v) for v in X[i]]
            if targets is not None:
                row.append(_fmt(targets[i]))
            writer.writerow(row)
    with open(schema_path(path), "w", encoding="utf-8") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "columns": feature_schema()}, fh, indent=1)
        fh.write("\n")


def read_features(path) -> tuple:
    """``(ids, X, targets or None, schema_version or None)`` from a feature CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "patch_id":
            raise TableError(f"{path}: missing patch_id header")
        has_target = header[-1] == "target"
        names = header[1:-1] if has_target else header[1:]
        ids, rows, targets = [], [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise TableError(f"{path}: row {row_no}: expected {len(header)} fields, got {len(row)}")
            try:
                values = [float(v) for v in row[1:]]
            except ValueError:
                raise TableError(f"{path}: row {row_no}: non-numeric value") from None
            ids.append(row[0])
            if has_target:
                rows.append(values[:-1])
                targets.append(values[-1])
            else:
                rows.append(values)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    version = None
    if os.path.exists(schema_path(path)):
        with open(schema_path(path), encoding="utf-8") as fh:
            version = json.load(fh).get("schema_version")
    return ids, X, (np.array(targets) if has_target else None), version
