"""Synthetic datasets and the CSV on-disk format.

Points live on the unit sphere: each one is a cluster direction plus isotropic
Gaussian noise scaled by 1/sqrt(concentration), re-normalized. The CSV header is
dim_0,...,dim_{d-1} with an optional trailing `truth` column of 1-indexed
cluster labels. Floats are written with repr (shortest round-trip), so
save/load is lossless. Instance identities used in training are row indices and
are never persisted.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, InvalidSpecError, ParseError
from .numcore import make_rng, normalize_rows
from .prototypes import max_mahalanobis_centers


@dataclass(frozen=True)
class SyntheticSpec:
    num_clusters: int
    input_dim: int
    points_per_cluster: int
    concentration: float
    seed: int = 0

    def __post_init__(self):
        if self.num_clusters < 1:
            raise InvalidSpecError("num_clusters must be >= 1")
        if self.input_dim < 1:
            raise InvalidSpecError("input_dim must be >= 1")
        if self.points_per_cluster < 1:
            raise InvalidSpecError("points_per_cluster must be >= 1")
        if not self.concentration > 0.0:
            raise InvalidSpecError("concentration must be > 0")


@dataclass
class Dataset:
    points: np.ndarray  # (N, d) float64
    truth: np.ndarray | None = None  # (N,) int labels 1..K, or None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise DimensionMismatchError(f"points must be (N, d), got {self.points.shape}")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.int64)
            if self.truth.shape != (self.points.shape[0],):
                raise DimensionMismatchError("truth length must match the number of points")


def generate(spec: SyntheticSpec) -> Dataset:
    """Unit-sphere clusters around maximally dispersed directions.

    Directions come from the equiangular construction when num_clusters fits in
    input_dim + 1, otherwise they are seeded random unit vectors (near-orthogonal
    in high dimension). Points are grouped by cluster, truth labels 1..K.
    """
    rng = make_rng(spec.seed)
    k, d, n = spec.num_clusters, spec.input_dim, spec.points_per_cluster
    if 2 <= k <= d + 1:
        directions = max_mahalanobis_centers(k, d)
    else:
        directions = normalize_rows(rng.standard_normal((k, d)))
    noise = rng.standard_normal((k * n, d)) / np.sqrt(spec.concentration)
    raw = np.repeat(directions, n, axis=0) + noise
    points = normalize_rows(raw)
    truth = np.repeat(np.arange(1, k + 1), n)
    return Dataset(points, truth)


def save_dataset(dataset: Dataset, path) -> None:
    d = dataset.points.shape[1]
    header = ",".join(f"dim_{i}" for i in range(d))
    if dataset.truth is not None:
        header += ",truth"
    lines = [header]
    for i in range(dataset.points.shape[0]):
        row = ",".join(repr(float(x)) for x in dataset.points[i])
        if dataset.truth is not None:
            row += f",{int(dataset.truth[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    """Parse a CSV written by save_dataset; errors carry 1-based line numbers."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [line for line in text.splitlines()]
    if not lines:
        raise ParseError("line 1: empty dataset file")
    header = lines[0].split(",")
    has_truth = header[-1] == "truth"
    dim_columns = header[:-1] if has_truth else header
    if not dim_columns:
        raise ParseError("line 1: no data columns in header")
    for i, name in enumerate(dim_columns):
        if name != f"dim_{i}":
            raise ParseError(f"line 1: expected column dim_{i}, found {name!r}")
    d = len(dim_columns)
    expected_fields = d + (1 if has_truth else 0)
    points = []
    truth = [] if has_truth else None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != expected_fields:
            raise DimensionMismatchError(
                f"line {lineno}: expected {expected_fields} fields, found {len(fields)}"
            )
        try:
            row = [float(x) for x in fields[:d]]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
        if not all(np.isfinite(row)):
            raise ParseError(f"line {lineno}: non-finite value")
        points.append(row)
        if has_truth:
            raw_label = fields[d].strip()
            if not re.fullmatch(r"\d+", raw_label) or int(raw_label) < 1:
                raise ParseError(f"line {lineno}: truth label {raw_label!r} is not a positive integer")
            truth.append(int(raw_label))
    if not points:
        raise ParseError("line 2: dataset has a header but no rows")
    pts = np.asarray(points, dtype=np.float64)
    return Dataset(pts, np.asarray(truth, dtype=np.int64) if has_truth else None)
