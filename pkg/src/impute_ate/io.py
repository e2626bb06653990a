"""CSV and JSON serialization for datasets, weights, and reports."""

from __future__ import annotations

import csv
import hashlib
import json

import numpy as np

from .data import DataError, Dataset


def read_csv_dataset(path: str) -> Dataset:
    """Read a dataset from CSV with header ``x1,...,xd,d,y``.

    Every cell must be present and numeric; the treatment column holds 0 or
    1. Errors name the offending file line (the header is line 1).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[-2:] != ["d", "y"]:
            raise DataError("header must be x1,...,xd,d,y")
        d = len(header) - 2
        if header[:d] != [f"x{k + 1}" for k in range(d)]:
            raise DataError("header must be x1,...,xd,d,y")
        covs, flags, ys = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != d + 2:
                raise DataError(f"expected {d + 2} cells (line {line_no})")
            cells = [c.strip() for c in row]
            if any(c == "" for c in cells):
                raise DataError(f"missing cell (line {line_no})")
            try:
                values = [float(c) for c in cells]
            except ValueError:
                raise DataError(f"non-numeric cell (line {line_no})") from None
            if values[d] not in (0.0, 1.0):
                raise DataError(f"treatment must be 0 or 1 (line {line_no})")
            covs.append(values[:d])
            flags.append(values[d])
            ys.append(values[d + 1])
    if not covs:
        raise DataError("no data rows")
    return Dataset(
        np.asarray(covs, dtype=np.float64),
        np.asarray(flags),
        np.asarray(ys, dtype=np.float64),
    )


def write_csv_dataset(ds: Dataset, path: str) -> None:
    """Write a dataset in the canonical CSV format; floats round-trip exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{k + 1}" for k in range(ds.d)] + ["d", "y"])
        for i in range(ds.n):
            writer.writerow(
                [repr(float(v)) for v in ds.covariates[i]]
                + [int(ds.treatment[i]), repr(float(ds.outcome[i]))]
            )


def dataset_fingerprint(ds: Dataset) -> str:
    """Stable content hash of the sample, for report provenance."""
    h = hashlib.sha256()
    h.update(np.asarray([ds.n, ds.d], dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(ds.covariates).tobytes())
    h.update(np.ascontiguousarray(ds.treatment).tobytes())
    h.update(np.ascontiguousarray(ds.outcome).tobytes())
    return h.hexdigest()


def write_json(obj: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def read_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_weights_csv(entries, path: str) -> None:
    """Dump weight triplets as ``i,j,w`` with 1-based unit ids."""
    rows, cols, vals = entries
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "w"])
        for i, j, w in zip(rows, cols, vals):
            writer.writerow([int(i) + 1, int(j) + 1, repr(float(w))])


def write_mc_rows_csv(reports: dict, path: str) -> None:
    """Flat per-replication table across all sample sizes."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "replication", "tau_hat", "sigma2_hat", "covered", "redraws"])
        for n in sorted(reports):
            for row in reports[n].rows():
                writer.writerow(
                    [
                        row["n"],
                        row["replication"],
                        repr(row["tau_hat"]),
                        repr(row["sigma2_hat"]),
                        row["covered"],
                        row["redraws"],
                    ]
                )
