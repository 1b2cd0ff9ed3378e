"""Percent-change matrices and the comparison metrics computed from them.

All functions are pure.  A "row" is a sequence of percent changes, one per
evaluation language, produced by a single continuation stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import CoverageError, InputError, UndefinedBase
from .uriel import DistanceMatrix

INF = math.inf


def percent_change(old: float, new: float) -> float:
    if not old > 0:
        raise UndefinedBase(f"percent change from a non-positive base score {old}")
    return 100.0 * (new - old) / old


@dataclass(frozen=True)
class ChangeMatrix:
    """``values[i, j]``: change on ``languages[j]`` after continuing on ``rows[i]``."""

    languages: tuple[str, ...]
    values: np.ndarray
    rows: tuple[str, ...] | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        rows = tuple(self.languages) if self.rows is None else tuple(self.rows)
        if values.shape != (len(rows), len(self.languages)):
            raise InputError(f"matrix shape {values.shape} does not match the language lists")
        if not np.all(np.isfinite(values)):
            raise InputError("change matrix entries must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "languages", tuple(self.languages))
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "values", values)

    def row(self, language: str) -> np.ndarray:
        return self.values[self.rows.index(language)]

    def cell(self, row: str, col: str) -> float:
        return float(self.values[self.rows.index(row), self.languages.index(col)])


def build_change_matrix(before: Mapping[str, float], after: Mapping[str, Mapping[str, float]]) -> ChangeMatrix:
    languages = sorted(before)
    for row, record in after.items():
        if sorted(record) != languages:
            raise CoverageError(f"evaluation languages after continuing on {row!r} differ from the baseline")
    rows = [lang for lang in languages if lang in after] + sorted(set(after) - set(languages))
    values = [[percent_change(before[j], after[i][j]) for j in languages] for i in rows]
    return ChangeMatrix(tuple(languages), np.array(values, dtype=np.float64).reshape(len(rows), len(languages)),
                        tuple(rows))


def avg_percent_loss(changes) -> float:
    losses = [-float(c) for c in changes if c < 0]
    return math.fsum(losses) / len(losses) if losses else 0.0


def num_improved_langs(changes) -> int:
    return sum(1 for c in changes if c > 0)


def gain_loss_ratios(changes) -> tuple[float, float]:
    """(SumRatio, MaxRatio); both infinite when nothing was lost."""
    gains = [float(c) for c in changes if c > 0]
    losses = [float(c) for c in changes if c < 0]
    if not losses:
        return INF, INF
    if not gains:
        return 0.0, 0.0
    return math.fsum(gains) / abs(math.fsum(losses)), max(gains) / abs(min(losses))


def worst_case_stage(stage_losses: Sequence[float]) -> int:
    """1-based index of the stage with the largest loss; the earliest wins ties."""
    if len(stage_losses) == 0:
        raise InputError("empty trajectory")
    best = 0
    for i, v in enumerate(stage_losses):
        if v > stage_losses[best]:
            best = i
    return best + 1


def change_ordering(languages: Sequence[str], changes) -> list[str]:
    """Languages sorted by change, largest first; ties by language id."""
    return [lang for _, lang in sorted(zip((-float(c) for c in changes), languages))]


def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def ordering_edit_distance(row_a: Mapping[str, float], row_b: Mapping[str, float]) -> int:
    if set(row_a) != set(row_b):
        raise CoverageError("rows cover different languages")
    langs = sorted(row_a)
    order_a = change_ordering(langs, [row_a[k] for k in langs])
    order_b = change_ordering(langs, [row_b[k] for k in langs])
    return levenshtein(order_a, order_b)


def closest_languages(D: DistanceMatrix, language: str, k: int = 2) -> list[str]:
    others = [o for o in D.languages if o != language]
    return sorted(others, key=lambda o: (D[language, o], o))[:k]


def closest_language_check(D: DistanceMatrix, matrix: ChangeMatrix) -> float:
    """Fraction of rows where the nearest language gains at least as much as the second nearest."""
    if len(D.languages) < 3:
        raise InputError("need at least three languages")
    missing = set(matrix.languages) - set(D.languages)
    if missing:
        raise CoverageError(f"distance matrix lacks {sorted(missing)}")
    hits = 0
    for row in matrix.rows:
        l1, l2 = closest_languages(D, row)
        hits += matrix.cell(row, l1) >= matrix.cell(row, l2)
    return hits / len(matrix.rows)


@dataclass
class RowMetrics:
    avg_percent_loss: float
    num_improved_langs: int
    sum_ratio: float
    max_ratio: float

    @classmethod
    def of(cls, changes) -> "RowMetrics":
        s, m = gain_loss_ratios(changes)
        return cls(avg_percent_loss(changes), num_improved_langs(changes), s, m)


def _mean(values) -> float:
    # the mean of any collection containing inf is inf
    values = [float(v) for v in values]
    if any(math.isinf(v) for v in values):
        return INF
    return math.fsum(values) / len(values)


@dataclass
class MetricsReport:
    rows: dict[str, RowMetrics]
    avg_percent_loss: float
    num_improved_langs: float
    sum_ratio: float
    max_ratio: float
    worst_case_stage: int | None = None
    seeds: int = 1
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_matrix(cls, matrix: ChangeMatrix, worst: int | None = None) -> "MetricsReport":
        rows = {r: RowMetrics.of(matrix.values[i]) for i, r in enumerate(matrix.rows)}
        vals = list(rows.values())
        return cls(rows, _mean(v.avg_percent_loss for v in vals), _mean(v.num_improved_langs for v in vals),
                   _mean(v.sum_ratio for v in vals), _mean(v.max_ratio for v in vals), worst)

    def summary(self) -> dict:
        return {"avg_percent_loss": self.avg_percent_loss, "num_improved_langs": self.num_improved_langs,
                "sum_ratio": self.sum_ratio, "max_ratio": self.max_ratio}

    def to_dict(self) -> dict:
        out = dict(self.summary(), seeds=self.seeds, worst_case_stage=self.worst_case_stage,
                   rows={r: vars(m).copy() for r, m in self.rows.items()})
        if self.extra:
            out["extra"] = self.extra
        return out


def aggregate_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Arithmetic mean over seeds of every summary metric and every row."""
    if not reports:
        raise InputError("nothing to aggregate")
    keys = list(reports[0].rows)
    rows = {}
    for k in keys:
        per = [r.rows[k] for r in reports]
        rows[k] = RowMetrics(_mean(p.avg_percent_loss for p in per), _mean(p.num_improved_langs for p in per),
                             _mean(p.sum_ratio for p in per), _mean(p.max_ratio for p in per))
    return MetricsReport(rows,
                         _mean(r.avg_percent_loss for r in reports), _mean(r.num_improved_langs for r in reports),
                         _mean(r.sum_ratio for r in reports), _mean(r.max_ratio for r in reports),
                         None, sum(r.seeds for r in reports))


def mean_matrix(matrices: Sequence[ChangeMatrix]) -> ChangeMatrix:
    first = matrices[0]
    if any(m.languages != first.languages or m.rows != first.rows for m in matrices):
        raise CoverageError("matrices cover different languages")
    return ChangeMatrix(first.languages, np.mean([m.values for m in matrices], axis=0), first.rows)
