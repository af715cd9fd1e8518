"""CSV ingestion and result serialization for the command line tools.

The data schema is fixed: a UTF-8 CSV with header ``y,w,delta,z1,...,zd``,
decimal points, no thousands separators.  Floats are written with ``repr``
so a round trip through disk is value-identical.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, is_dataclass

import numpy as np

from .errors import DataError
from .model import Dataset


def read_dataset_csv(path) -> Dataset:
    """Read a dataset, reporting the offending line on any malformed row."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if len(header) < 4 or header[:3] != ["y", "w", "delta"]:
            raise DataError(f"{path}: header must start with y,w,delta,z1,...")
        d = len(header) - 3
        expect_z = [f"z{i + 1}" for i in range(d)]
        if header[3:] != expect_z:
            raise DataError(f"{path}: covariate columns must be {expect_z}")
        y, w, delta, z = [], [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, "
                                f"got {len(rec)}")
            try:
                y.append(float(rec[0]))
                w.append(float(rec[1]))
                dv = float(rec[2])
                z.append([float(v) for v in rec[3:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if dv not in (0.0, 1.0):
                raise DataError(f"{path}:{lineno}: delta must be 0 or 1, got {rec[2]}")
            delta.append(int(dv))
        if not y:
            raise DataError(f"{path}: no data rows")
        try:
            return Dataset(y=np.array(y), w=np.array(w),
                           delta=np.array(delta), z=np.array(z))
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from None


def write_dataset_csv(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "w", "delta"] + [f"z{i + 1}" for i in range(dataset.d)])
        for i in range(dataset.n):
            writer.writerow([repr(float(dataset.y[i])), repr(float(dataset.w[i])),
                             int(dataset.delta[i])]
                            + [repr(float(v)) for v in dataset.z[i]])


def scale_to_unit(dataset: Dataset, z_cols=()) -> tuple[Dataset, dict]:
    """Min-max transform of w (and the listed z columns) to [0, 1].

    Returns the transformed dataset and the per-column (min, range) pairs
    so the transform is reproducible.
    """
    transforms = {}

    def scaled(values, name):
        lo = float(np.min(values))
        rng = float(np.max(values) - lo)
        if rng <= 0:
            raise DataError(f"cannot scale constant column {name}")
        transforms[name] = {"min": lo, "range": rng}
        return (values - lo) / rng

    w = scaled(dataset.w, "w")
    z = dataset.z.copy()
    for col in z_cols:
        j = int(col) - 1
        if not 0 <= j < dataset.d:
            raise DataError(f"no covariate column z{col}")
        z[:, j] = scaled(z[:, j], f"z{col}")
    return Dataset(y=dataset.y, w=w, delta=dataset.delta, z=z), transforms


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return _jsonable(obj.item())
    if is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, allow_nan=False)
        fh.write("\n")
