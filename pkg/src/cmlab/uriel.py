"""Syntactic language distances and the distance -> base-lr division factor."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError

# Least-squares line through the six (average distance, division factor)
# published pairs (en de es fr hi th).
PUBLISHED_SLOPE = 477.2486410721002
PUBLISHED_INTERCEPT = -157.62167675179194


@dataclass(frozen=True)
class SyntacticVector:
    language: str
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))


@dataclass(frozen=True)
class DistanceMatrix:
    languages: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "languages", tuple(self.languages))
        object.__setattr__(self, "values", vals)
        n = len(self.languages)
        if vals.shape != (n, n):
            raise InputError(f"distance matrix shape {vals.shape} does not match {n} languages")
        if len(set(self.languages)) != n:
            raise InputError("duplicate language in distance matrix")
        if not np.all(np.isfinite(vals)):
            raise InputError("distance matrix entries must be finite")
        if np.any(np.abs(np.diag(vals)) > 0):
            raise InputError("distance matrix diagonal must be zero")
        if np.max(np.abs(vals - vals.T), initial=0.0) > 1e-12:
            raise InputError("distance matrix must be symmetric")

    def index(self, language: str) -> int:
        try:
            return self.languages.index(language)
        except ValueError:
            raise InputError(f"language {language!r} not in distance matrix") from None

    def __getitem__(self, pair: tuple[str, str]) -> float:
        a, b = pair
        return float(self.values[self.index(a), self.index(b)])


@dataclass(frozen=True)
class DivisionFactorFn:
    slope: float = PUBLISHED_SLOPE
    intercept: float = PUBLISHED_INTERCEPT
    step: float = 5.0
    min_factor: float = 1.0

    def __call__(self, d: float) -> float:
        return division_factor(d, self)

    @classmethod
    def spanning(cls, d_min: float, d_max: float, lo: float = 35.0, hi: float = 100.0,
                 step: float = 5.0) -> "DivisionFactorFn":
        """Line sending ``d_min`` to ``lo`` and ``d_max`` to ``hi``."""
        if not d_max > d_min:
            raise InputError("need d_max > d_min to span a factor range")
        slope = (hi - lo) / (d_max - d_min)
        return cls(slope, lo - slope * d_min, step, min(lo, hi))

    @classmethod
    def for_matrix(cls, D: "DistanceMatrix", lo: float = 35.0, hi: float = 100.0,
                   step: float = 5.0) -> "DivisionFactorFn":
        """Calibrate so the closest language gets ``lo`` and the most distant ``hi``."""
        avg = [avg_distance_to_rest(lang, D) for lang in D.languages]
        return cls.spanning(min(avg), max(avg), lo, hi, step)


def cosine_distance(u, v) -> float:
    """``1 - cos(u, v)``, in [0, 2]."""
    u = np.asarray(getattr(u, "values", u), dtype=np.float64)
    v = np.asarray(getattr(v, "values", v), dtype=np.float64)
    if u.shape != v.shape:
        raise InputError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu2, nv2 = float(np.dot(u, u)), float(np.dot(v, v))
    if nu2 == 0 or nv2 == 0:
        raise InputError("cosine distance is undefined for a zero-norm vector")
    # single sqrt of the product keeps u == v exact: dot / sqrt(dot**2) == 1
    cos = float(np.dot(u, v)) / math.sqrt(nu2 * nv2)
    return min(2.0, max(0.0, 1.0 - cos))


def distance_matrix(vectors: Sequence[SyntacticVector]) -> DistanceMatrix:
    n = len(vectors)
    vals = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            vals[i, j] = vals[j, i] = cosine_distance(vectors[i], vectors[j])
    return DistanceMatrix(tuple(v.language for v in vectors), vals)


def avg_distance_to_rest(language: str, D: DistanceMatrix) -> float:
    if len(D.languages) < 2:
        raise InputError("average distance needs at least two languages")
    i = D.index(language)
    row = np.delete(D.values[i], i)
    return float(row.mean())


def round_to_step(x: float, step: float) -> float:
    """Nearest multiple of ``step``, halves rounded up (no banker's rounding)."""
    return step * math.floor(x / step + 0.5)


def division_factor(d: float, fn: DivisionFactorFn = DivisionFactorFn()) -> float:
    if d < 0:
        raise InputError("average distance must be non-negative")
    raw = fn.slope * d + fn.intercept
    rounded = round_to_step(raw, fn.step) if fn.step > 0 else raw
    return float(max(fn.min_factor, rounded))


def fit_division_factor(distances, factors, step: float = 5.0, min_factor: float = 1.0) -> DivisionFactorFn:
    """Least-squares line through (distance, factor) pairs."""
    d = np.asarray(distances, dtype=np.float64)
    f = np.asarray(factors, dtype=np.float64)
    A = np.stack([d, np.ones_like(d)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, f, rcond=None)
    return DivisionFactorFn(float(slope), float(intercept), step, min_factor)


def matrix_from_average_distances(averages: Mapping[str, float]) -> DistanceMatrix:
    """A symmetric matrix whose row means (diagonal excluded) equal ``averages``.

    Uses the additive form d(i, j) = x_i + x_j, which has a closed-form
    solution for three or more languages.
    """
    langs = list(averages)
    n = len(langs)
    if n < 3:
        raise InputError("need at least three languages")
    r = np.array([averages[lang] for lang in langs], dtype=np.float64)
    total = r.sum() / 2.0
    x = ((n - 1) * r - total) / (n - 2)
    vals = x[:, None] + x[None, :]
    np.fill_diagonal(vals, 0.0)
    return DistanceMatrix(tuple(langs), vals)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def read_vectors_csv(path) -> list[SyntacticVector]:
    """CSV with header ``lang,f0,f1,...``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "lang":
        raise InputError("vector file header must start with 'lang'")
    out = [SyntacticVector(row[0], np.array([float(x) for x in row[1:]])) for row in body if row]
    dims = {v.values.shape for v in out}
    if len(dims) > 1:
        raise InputError("vectors have differing dimensions")
    return out


def format_vectors_csv(vectors: Sequence[SyntacticVector]) -> str:
    dim = len(vectors[0].values) if vectors else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lang"] + [f"f{i}" for i in range(dim)])
    for v in vectors:
        w.writerow([v.language] + [repr(float(x)) for x in v.values])
    return buf.getvalue()


def read_distance_csv(path) -> DistanceMatrix:
    """Square CSV: header row ``,l1,l2,...`` then one row per language."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    langs = rows[0][1:]
    if [r[0] for r in rows[1:]] != langs:
        raise InputError("distance file row labels must match the header")
    vals = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return DistanceMatrix(tuple(langs), vals)


def format_distance_csv(D: DistanceMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(D.languages))
    for lang, row in zip(D.languages, D.values):
        w.writerow([lang] + [repr(float(x)) for x in row])
    return buf.getvalue()


def write_vectors_csv(vectors, path) -> None:
    from .artifacts import atomic_write_text

    atomic_write_text(Path(path), format_vectors_csv(vectors))


def write_distance_csv(D: DistanceMatrix, path) -> None:
    from .artifacts import atomic_write_text

    atomic_write_text(Path(path), format_distance_csv(D))
