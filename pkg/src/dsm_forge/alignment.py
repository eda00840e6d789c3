"""Matching predicted component names to ground-truth names.

When the model invents its own component list, the predicted DSM cannot be
scored cell-by-cell until each predicted name is paired with a ground-truth
name.  Exact (normalized) name matches pair up first; the rest are matched
one-to-one by embedding cosine similarity, maximizing total similarity.
Pairs under the similarity threshold are discarded, and both matrices are
projected onto the matched set in ground-truth order.  Dropping unmatched
parts shrinks the matrices, which by itself can flatter cell metrics, so
callers are expected to report raw and aligned numbers side by side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dsm import Dsm, new_dsm, normalize_label
from .gateway import GatewayError, cosine


class AlignmentError(Exception):
    pass


class EmbedderFailure(AlignmentError):
    pass


_ATOL = 1e-9


@dataclass(frozen=True)
class AlignConfig:
    threshold: float = 0.5
    exact_match_shortcut: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise AlignmentError(
                f"threshold must be in [0, 1], got {self.threshold}"
            )


@dataclass(frozen=True)
class AlignmentResult:
    mapping: tuple[tuple[int, int, float], ...]
    unmatched_pred: tuple[int, ...]
    unmatched_truth: tuple[int, ...]
    aligned_pred: Dsm
    aligned_truth: Dsm


def _lap_total(matrix: np.ndarray) -> float:
    if matrix.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(matrix, maximize=True)
    return float(matrix[rows, cols].sum())


def assignment(sim) -> list[tuple[int, int]]:
    """One-to-one matching maximizing total similarity.

    Matches min(rows, cols) pairs.  Among matchings whose total is within
    1e-9 of the optimum, returns the one whose (row, col) pair list is
    lexicographically smallest, so ties cannot wobble between runs.
    """
    matrix = np.asarray(sim, dtype=float)
    if matrix.size == 0:
        return []
    if matrix.ndim != 2:
        raise AlignmentError("similarity matrix must be two-dimensional")
    if not np.all(np.isfinite(matrix)):
        raise AlignmentError("similarity matrix must be finite")
    n_rows, n_cols = matrix.shape
    best = _lap_total(matrix)
    fixed: dict[int, int] = {}
    fixed_total = 0.0
    for i in range(n_rows):
        free_rows = [r for r in range(i + 1, n_rows)]
        for j in range(n_cols):
            if j in fixed.values():
                continue
            free_cols = [c for c in range(n_cols) if c not in fixed.values() and c != j]
            rest = matrix[np.ix_(free_rows, free_cols)] if free_rows and free_cols else (
                np.empty((0, 0))
            )
            total = fixed_total + matrix[i, j] + _lap_total(rest)
            if total >= best - _ATOL:
                fixed[i] = j
                fixed_total += matrix[i, j]
                break
    return sorted(fixed.items())


def _submatrix(dsm: Dsm, indices: list[int]) -> Dsm:
    labels = [dsm.labels[i] for i in indices]
    cells = [[dsm.cells[i][j] for j in indices] for i in indices]
    return new_dsm(labels, cells)


def align(pred: Dsm, truth: Dsm, embedder, cfg: AlignConfig | None = None) -> AlignmentResult:
    """Pair predicted components with ground-truth components and project.

    The returned matrices cover exactly the matched pairs, ordered by the
    ground-truth side; their dimension is at most min(pred.n, truth.n).
    """
    cfg = cfg or AlignConfig()
    pairs: list[tuple[int, int, float]] = []
    taken_pred: set[int] = set()
    taken_truth: set[int] = set()

    if cfg.exact_match_shortcut:
        by_norm = {normalize_label(label): i for i, label in enumerate(pred.labels)}
        for t, label in enumerate(truth.labels):
            p = by_norm.get(normalize_label(label))
            if p is not None and p not in taken_pred:
                pairs.append((p, t, 1.0))
                taken_pred.add(p)
                taken_truth.add(t)

    rest_pred = [i for i in range(pred.n) if i not in taken_pred]
    rest_truth = [i for i in range(truth.n) if i not in taken_truth]
    if rest_pred and rest_truth:
        labels = [pred.labels[i] for i in rest_pred] + [
            truth.labels[i] for i in rest_truth
        ]
        try:
            vectors = embedder.embed(labels)
        except GatewayError as exc:
            raise EmbedderFailure(f"embedding failed: {exc}") from exc
        pred_vecs = vectors[: len(rest_pred)]
        truth_vecs = vectors[len(rest_pred) :]
        sim = [
            [cosine(pv, tv) for tv in truth_vecs]
            for pv in pred_vecs
        ]
        for local_p, local_t in assignment(sim):
            pairs.append(
                (rest_pred[local_p], rest_truth[local_t], sim[local_p][local_t])
            )

    kept = [(p, t, s) for p, t, s in pairs if s >= cfg.threshold]
    kept.sort(key=lambda triple: triple[1])

    matched_pred = [p for p, _t, _s in kept]
    matched_truth = [t for _p, t, _s in kept]
    return AlignmentResult(
        mapping=tuple(kept),
        unmatched_pred=tuple(i for i in range(pred.n) if i not in matched_pred),
        unmatched_truth=tuple(i for i in range(truth.n) if i not in matched_truth),
        aligned_pred=_submatrix(pred, matched_pred),
        aligned_truth=_submatrix(truth, matched_truth),
    )
