"""Design Structure Matrix value types, validation, and (de)serialization.

A DSM is a labeled square matrix over system components.  Cells are ternary:
0 = no relationship, 1 = relationship present, 2 = the generating model was
unsure.  Diagonal cells are always 1 (a component relates to itself).
"""

from __future__ import annotations

import csv
import io
import json
import unicodedata
from dataclasses import dataclass
from enum import IntEnum
from importlib import resources


class DsmError(Exception):
    """Base class for DSM construction and serialization errors."""


class DimensionMismatch(DsmError):
    pass


class IllegalCellValue(DsmError):
    pass


class DiagonalNotOne(DsmError):
    pass


class DuplicateLabel(DsmError):
    pass


class InvalidSize(DsmError):
    pass


class MalformedPayload(DsmError):
    pass


class CellValue(IntEnum):
    """Ternary DSM cell state, stable under integer round-trips."""

    ABSENT = 0
    PRESENT = 1
    UNSURE = 2


_LEGAL_CELLS = frozenset((0, 1, 2))


def normalize_label(label: str) -> str:
    """Canonical form used for label comparisons: NFC, trimmed, case-folded."""
    return unicodedata.normalize("NFC", label).strip().casefold()


@dataclass(frozen=True)
class Dsm:
    """Immutable labeled square matrix of ternary cells.

    Instances are validated on construction; use :func:`new_dsm` to build one
    from plain lists.  An empty (0x0) DSM is legal and shows up as the result
    of aligning two component sets with no overlap.
    """

    labels: tuple[str, ...]
    cells: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        n = len(self.labels)
        if len(self.cells) != n:
            raise DimensionMismatch(
                f"{len(self.cells)} rows for {n} labels"
            )
        for label in self.labels:
            if not normalize_label(label):
                raise DsmError(f"blank label {label!r}")
        normalized = [normalize_label(label) for label in self.labels]
        if len(set(normalized)) != n:
            dupes = sorted({x for x in normalized if normalized.count(x) > 1})
            raise DuplicateLabel(f"labels collide after normalization: {dupes}")
        for i, row in enumerate(self.cells):
            if len(row) != n:
                raise DimensionMismatch(f"row {i} has {len(row)} cells, expected {n}")
            for j, value in enumerate(row):
                if isinstance(value, bool) or value not in _LEGAL_CELLS:
                    raise IllegalCellValue(f"cell ({i},{j}) = {value!r}")
            if row[i] != CellValue.PRESENT:
                raise DiagonalNotOne(f"diagonal cell ({i},{i}) = {row[i]}")

    @property
    def n(self) -> int:
        return len(self.labels)

    def cell(self, i: int, j: int) -> int:
        return self.cells[i][j]

    def has_unsure(self) -> bool:
        return any(CellValue.UNSURE in row for row in self.cells)

    def permuted(self, order: list[int] | tuple[int, ...]) -> "Dsm":
        """DSM with rows/columns (and labels) reordered by ``order``."""
        labels = tuple(self.labels[i] for i in order)
        cells = tuple(tuple(self.cells[i][j] for j in order) for i in order)
        return Dsm(labels, cells)


def new_dsm(labels, cells) -> Dsm:
    """Validated constructor from plain sequences.

    Raises DimensionMismatch, IllegalCellValue, DiagonalNotOne, or
    DuplicateLabel when the grid breaks a DSM invariant.
    """
    rows = []
    for row in cells:
        rows.append(tuple(int(v) if isinstance(v, CellValue) else v for v in row))
    return Dsm(tuple(labels), tuple(rows))


def worst_case_dsm(n: int) -> Dsm:
    """All-unsure DSM of size n: diagonal 1, every other cell 2.

    This is the shape the relationship prompts show as the fallback answer
    when the model cannot commit to any off-diagonal cell.
    """
    if n < 1:
        raise InvalidSize(f"worst-case DSM needs n >= 1, got {n}")
    labels = tuple(f"C{i + 1}" for i in range(n))
    cells = tuple(
        tuple(1 if i == j else 2 for j in range(n)) for i in range(n)
    )
    return Dsm(labels, cells)


def dsm_to_json(dsm: Dsm) -> str:
    return json.dumps(
        {"labels": list(dsm.labels), "cells": [list(row) for row in dsm.cells]},
        indent=2,
    )


def dsm_from_json(payload: str) -> Dsm:
    """Parse the ``{"labels": [...], "cells": [[...]]}`` schema.

    Extra keys are tolerated so ground-truth fixture files double as DSM
    payloads.
    """
    try:
        obj = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise MalformedPayload(f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedPayload("expected a JSON object")
    if "labels" not in obj or "cells" not in obj:
        missing = [k for k in ("labels", "cells") if k not in obj]
        raise MalformedPayload(f"missing keys: {missing}")
    labels = obj["labels"]
    cells = obj["cells"]
    if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
        raise MalformedPayload("labels must be a list of strings")
    if not isinstance(cells, list) or not all(isinstance(r, list) for r in cells):
        raise MalformedPayload("cells must be a list of lists")
    return new_dsm(labels, cells)


def dsm_to_csv(dsm: Dsm) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([""] + list(dsm.labels))
    for label, row in zip(dsm.labels, dsm.cells):
        writer.writerow([label] + list(row))
    return buf.getvalue()


def dsm_from_csv(payload: str) -> Dsm:
    """Parse a DSM CSV with a header row and a leading label column."""
    rows = list(csv.reader(io.StringIO(payload)))
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise MalformedPayload("empty CSV")
    header = [c.strip() for c in rows[0][1:]]
    body = rows[1:]
    if len(body) != len(header):
        raise MalformedPayload(
            f"{len(body)} data rows for {len(header)} header labels"
        )
    cells = []
    for k, row in enumerate(body):
        if not row:
            raise MalformedPayload(f"empty row {k}")
        row_label = row[0].strip()
        if normalize_label(row_label) != normalize_label(header[k]):
            raise MalformedPayload(
                f"row label {row_label!r} does not match header {header[k]!r}"
            )
        try:
            cells.append([int(c) for c in row[1:]])
        except ValueError as exc:
            raise MalformedPayload(f"non-integer cell in row {k}: {exc}") from exc
    return new_dsm(header, cells)


@dataclass(frozen=True)
class GroundTruthSet:
    """A reference DSM used as the comparison target for generated DSMs."""

    name: str
    dsm: Dsm
    relationship_type: str
    source_note: str = ""

    def __post_init__(self) -> None:
        if not self.relationship_type:
            raise MalformedPayload("relationship_type must be nonempty")


def ground_truth_from_json(payload: str) -> GroundTruthSet:
    try:
        obj = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise MalformedPayload(f"invalid JSON: {exc}") from exc
    for key in ("name", "relationship_type", "labels", "cells"):
        if key not in obj:
            raise MalformedPayload(f"ground truth missing {key!r}")
    return GroundTruthSet(
        name=obj["name"],
        dsm=dsm_from_json(payload),
        relationship_type=obj["relationship_type"],
        source_note=obj.get("source_note", ""),
    )


def list_ground_truths() -> list[str]:
    names = []
    for entry in resources.files("dsm_forge.fixtures").iterdir():
        if entry.name.endswith(".json"):
            names.append(entry.name[: -len(".json")])
    return sorted(names)


def load_ground_truth(name: str) -> GroundTruthSet:
    """Load a packaged ground-truth fixture by id (e.g. ``power_screwdriver``)."""
    ref = resources.files("dsm_forge.fixtures").joinpath(f"{name}.json")
    try:
        payload = ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise MalformedPayload(
            f"unknown ground truth {name!r}; available: {list_ground_truths()}"
        ) from None
    return ground_truth_from_json(payload)
