"""Cell-level and graph-level scoring of generated DSMs.

Cell metrics (accuracy, precision, recall, F1) come from a confusion count
over all n^2 cells, diagonal included; predicted "unsure" cells (value 2) are
excluded from the counts rather than scored.  Graph metrics are the per-cell
L1 edit distance and the Euclidean distance between sorted eigenvalue
spectra.  Repetitions aggregate as mean and population standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import fmean, pstdev

import numpy as np

from .dsm import CellValue, DimensionMismatch, Dsm


class MetricsError(Exception):
    pass


class GroundTruthContainsUnsure(MetricsError):
    pass


class EmptyInput(MetricsError):
    pass


class EigensolverNoConvergence(MetricsError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int
    excluded: int

    @property
    def evaluated(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def total(self) -> int:
        return self.evaluated + self.excluded


@dataclass(frozen=True)
class CellMetrics:
    """Confusion-derived rates; ``None`` marks an undefined metric.

    A metric is undefined when its denominator is zero (e.g. precision with
    no positive predictions).  Undefined is never silently reported as 0.
    """

    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None

    def as_dict(self) -> dict[str, float | None]:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass(frozen=True)
class GraphDistances:
    edit: float
    spectral: float

    def as_dict(self) -> dict[str, float]:
        return {"edit": self.edit, "spectral": self.spectral}


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    k: int


def confusion_cells(truth_cells, pred_cells) -> ConfusionCounts:
    """Confusion counts over two equal-shape integer grids.

    The grids need not be valid DSMs (the scenario-ii raw path compares
    zero-padded grids whose pad region has no diagonal ones).
    """
    if len(truth_cells) != len(pred_cells):
        raise DimensionMismatch(
            f"truth is {len(truth_cells)}x, prediction is {len(pred_cells)}x"
        )
    tp = tn = fp = fn = excluded = 0
    for truth_row, pred_row in zip(truth_cells, pred_cells):
        if len(truth_row) != len(pred_row):
            raise DimensionMismatch("row lengths differ")
        for t, p in zip(truth_row, pred_row):
            if t == CellValue.UNSURE:
                raise GroundTruthContainsUnsure(
                    "ground truth must not contain unsure cells"
                )
            if p == CellValue.UNSURE:
                excluded += 1
            elif t == 1 and p == 1:
                tp += 1
            elif t == 0 and p == 0:
                tn += 1
            elif t == 0 and p == 1:
                fp += 1
            else:
                fn += 1
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn, excluded=excluded)


def confusion(truth: Dsm, pred: Dsm) -> ConfusionCounts:
    """Confusion counts between two same-size DSMs, diagonal included."""
    if truth.n != pred.n:
        raise DimensionMismatch(f"truth is {truth.n}x{truth.n}, pred is {pred.n}x{pred.n}")
    return confusion_cells(truth.cells, pred.cells)


def cell_metrics(c: ConfusionCounts) -> CellMetrics:
    accuracy = (c.tp + c.tn) / c.evaluated if c.evaluated > 0 else None
    precision = c.tp / (c.tp + c.fp) if (c.tp + c.fp) > 0 else None
    recall = c.tp / (c.tp + c.fn) if (c.tp + c.fn) > 0 else None
    if precision is None or recall is None or (precision + recall) == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return CellMetrics(accuracy=accuracy, precision=precision, recall=recall, f1=f1)


def padded_cells(a: Dsm, b: Dsm) -> tuple[list[list[int]], list[list[int]]]:
    """Embed both cell grids top-left into zero grids of the common size."""
    n = max(a.n, b.n)

    def pad(d: Dsm) -> list[list[int]]:
        grid = [[0] * n for _ in range(n)]
        for i, row in enumerate(d.cells):
            for j, v in enumerate(row):
                grid[i][j] = v
        return grid

    return pad(a), pad(b)


def edit_distance(a: Dsm, b: Dsm) -> float:
    """Per-cell L1 disagreement over the zero-padded common grid.

    Cell disagreement cost is 0 when values are equal and 1 otherwise, which
    matches |a_ij - b_ij| on the binary states and clamps the unsure value
    so a (0 vs 2) cell costs 1, not 2.
    """
    ca, cb = padded_cells(a, b)
    return float(
        sum(1 for ra, rb in zip(ca, cb) for x, y in zip(ra, rb) if x != y)
    )


def _spectrum(cells) -> np.ndarray:
    # Unsure cells carry no confirmed relation; drop them to 0 before eig.
    m = np.array(
        [[0 if v == CellValue.UNSURE else v for v in row] for row in cells],
        dtype=float,
    )
    if m.size == 0:
        return np.array([], dtype=complex)
    try:
        if np.array_equal(m, m.T):
            return np.linalg.eigvalsh(m).astype(complex)
        return np.linalg.eigvals(m)
    except np.linalg.LinAlgError as exc:
        raise EigensolverNoConvergence(str(exc)) from exc


def _canonical(values: np.ndarray, length: int) -> list[complex]:
    padded = list(values) + [0j] * (length - len(values))
    return sorted(padded, key=lambda z: (z.real, z.imag))


def spectral_distance(a: Dsm, b: Dsm) -> float:
    """Euclidean distance between canonically sorted eigenvalue spectra.

    Spectra of different lengths are zero-padded to the common length before
    the canonical sort, so a missing component contributes a zero eigenvalue.
    Complex eigenvalues (asymmetric grids) sort by (real, imag) and differ by
    squared modulus, which reduces to the real formula on symmetric inputs.
    """
    ea = _spectrum(a.cells)
    eb = _spectrum(b.cells)
    length = max(len(ea), len(eb))
    if length == 0:
        return 0.0
    sa = _canonical(ea, length)
    sb = _canonical(eb, length)
    return math.sqrt(sum(abs(x - y) ** 2 for x, y in zip(sa, sb)))


def graph_distances(a: Dsm, b: Dsm) -> GraphDistances:
    return GraphDistances(edit=edit_distance(a, b), spectral=spectral_distance(a, b))


def aggregate(values) -> Aggregate:
    """Mean and population standard deviation over repetition values."""
    values = list(values)
    if not values:
        raise EmptyInput("aggregate of zero values")
    return Aggregate(mean=fmean(values), std=pstdev(values), k=len(values))
