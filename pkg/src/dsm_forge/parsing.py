"""Robust extraction of matrices, component lists, and verdicts from model text.

Model responses arrive as free-form text that may wrap the answer in code
fences, LaTeX display math, or chain-of-thought blocks.  The extractors here
strip that scaffolding and scan for the answer payload; they never crash on
arbitrary UTF-8.  A failed parse raises a typed error that the experiment
runner records as the outcome of that repetition.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum


class ParseError(Exception):
    pass


class NoMatrixFound(ParseError):
    pass


class RowLengthMismatch(ParseError):
    pass


class IllegalCell(ParseError):
    pass


class SizeMismatch(ParseError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected {expected}x{expected}, got {got}x{got}")
        self.expected = expected
        self.got = got


class NoListFound(ParseError):
    pass


class CountMismatch(ParseError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected {expected} components, got {got}")
        self.expected = expected
        self.got = got


class EmptyEntry(ParseError):
    pass


@dataclass(frozen=True)
class RawResponse:
    """Verbatim model output plus provenance, kept unmodified for replay."""

    text: str
    model_id: str
    timestamp: str


class Verdict(Enum):
    VALID = "valid"
    INVALID = "invalid"
    UNPARSEABLE = "unparseable"


_THINK_BLOCK = re.compile(r"<think>.*?</think>", re.IGNORECASE | re.DOTALL)
_THINK_TAG = re.compile(r"</?think>", re.IGNORECASE)
_CODE_FENCE = re.compile(r"```[A-Za-z0-9_+-]*")
_LATEX_WRAPPER = re.compile(r"\\\[|\\\]|\\\(|\\\)|\$\$")
_FINAL_RESPONSE = re.compile(r"final[ _]response\s*=\s*", re.IGNORECASE)
_VERDICT = re.compile(r"\b(valid|invalid)\b", re.IGNORECASE)
_INT = re.compile(r"-?\d+")
_FLOAT = re.compile(r"-?\d+\.\d*|-?\.\d+")
_BOOL = re.compile(r"true|false", re.IGNORECASE)


def strip_scaffolding(text: str) -> str:
    """Remove reasoning blocks, code-fence markers, and LaTeX math wrappers.

    Fenced content is kept; only the delimiters go, so an answer inside a
    code block stays scannable.
    """
    text = _THINK_BLOCK.sub(" ", text)
    text = _THINK_TAG.sub(" ", text)
    text = _CODE_FENCE.sub(" ", text)
    text = _LATEX_WRAPPER.sub(" ", text)
    return text


def render_grid(grid) -> str:
    """Canonical one-line rendering: ``[[1, 0],[0, 1]]``."""
    rows = ["[" + ", ".join(str(int(v)) for v in row) + "]" for row in grid]
    return "[" + ",".join(rows) + "]"


def render_components(components) -> str:
    """Canonical one-line rendering: ``["a", "b"]``."""
    return "[" + ", ".join(json.dumps(c) for c in components) + "]"


def _skip_ws(text: str, i: int) -> int:
    while i < len(text) and text[i].isspace():
        i += 1
    return i


def _parse_cell(text: str, i: int):
    """Parse one cell token; returns (value, next_index) or raises."""
    m = _FLOAT.match(text, i)
    if m:
        raise IllegalCell(f"float literal {m.group()!r} is not a legal cell")
    m = _BOOL.match(text, i)
    if m:
        raise IllegalCell(f"boolean literal {m.group()!r} is not a legal cell")
    m = _INT.match(text, i)
    if not m:
        raise _NotACandidate()
    value = int(m.group())
    if value not in (0, 1, 2):
        raise IllegalCell(f"cell value {value} not in {{0, 1, 2}}")
    return value, m.end()


class _NotACandidate(Exception):
    """The bracket run is not a matrix/list at all; keep scanning."""


def _parse_row(text: str, i: int):
    if i >= len(text) or text[i] != "[":
        raise _NotACandidate()
    i = _skip_ws(text, i + 1)
    cells: list[int] = []
    while True:
        if i < len(text) and text[i] == "]":
            return cells, i + 1
        value, i = _parse_cell(text, i)
        cells.append(value)
        i = _skip_ws(text, i)
        if i < len(text) and text[i] == ",":
            i = _skip_ws(text, i + 1)
        elif i < len(text) and text[i] == "]":
            return cells, i + 1
        else:
            raise _NotACandidate()


def _parse_grid(text: str, i: int):
    """Parse a balanced list of integer rows starting at ``text[i] == '['``."""
    if i >= len(text) or text[i] != "[":
        raise _NotACandidate()
    i = _skip_ws(text, i + 1)
    rows: list[list[int]] = []
    while True:
        if i < len(text) and text[i] == "]":
            break
        row, i = _parse_row(text, i)
        if not row:
            raise _NotACandidate()
        rows.append(row)
        i = _skip_ws(text, i)
        if i < len(text) and text[i] == ",":
            i = _skip_ws(text, i + 1)
        elif i < len(text) and text[i] == "]":
            break
        else:
            raise _NotACandidate()
    if not rows:
        raise _NotACandidate()
    width = len(rows[0])
    for k, row in enumerate(rows):
        if len(row) != width:
            raise RowLengthMismatch(
                f"row 0 has {width} cells, row {k} has {len(row)}"
            )
    # a DSM answer is square; consistent-but-rectangular is still malformed
    if len(rows) != width:
        raise RowLengthMismatch(f"{len(rows)} rows of {width} cells is not square")
    return rows, i + 1


def _grid_candidates(text: str):
    """Yield (grid-or-None, error-or-None) for each ``[[`` run in the text."""
    for i in range(len(text)):
        if text[i] != "[":
            continue
        j = _skip_ws(text, i + 1)
        if j >= len(text) or text[j] != "[":
            continue
        try:
            grid, _ = _parse_grid(text, i)
            yield grid, None
        except _NotACandidate:
            pass
        except ParseError as exc:
            yield None, exc


def _validate_json_grid(value):
    if not isinstance(value, list) or not value:
        raise _NotACandidate()
    rows = []
    for row in value:
        if not isinstance(row, list) or not row:
            raise _NotACandidate()
        cells = []
        for v in row:
            if isinstance(v, bool):
                raise IllegalCell(f"boolean literal {v!r} is not a legal cell")
            if isinstance(v, float):
                raise IllegalCell(f"float literal {v!r} is not a legal cell")
            if not isinstance(v, int):
                raise _NotACandidate()
            if v not in (0, 1, 2):
                raise IllegalCell(f"cell value {v} not in {{0, 1, 2}}")
            cells.append(v)
        rows.append(cells)
    width = len(rows[0])
    for k, row in enumerate(rows):
        if len(row) != width:
            raise RowLengthMismatch(
                f"row 0 has {width} cells, row {k} has {len(row)}"
            )
    if len(rows) != width:
        raise RowLengthMismatch(f"{len(rows)} rows of {width} cells is not square")
    return rows


def _json_candidates(text: str):
    decoder = json.JSONDecoder()
    i = 0
    while True:
        i = text.find("{", i)
        if i < 0:
            return
        try:
            obj, _ = decoder.raw_decode(text, i)
        except ValueError:
            i += 1
            continue
        if isinstance(obj, dict) and "final_response" in obj:
            try:
                yield _validate_json_grid(obj["final_response"]), None
            except _NotACandidate:
                pass
            except ParseError as exc:
                yield None, exc
        i += 1


def _literal_candidates(text: str):
    for m in _FINAL_RESPONSE.finditer(text):
        i = _skip_ws(text, m.end())
        try:
            grid, _ = _parse_grid(text, i)
            yield grid, None
        except _NotACandidate:
            pass
        except ParseError as exc:
            yield None, exc


def extract_matrix(text: str, expected_n: int | None = None) -> list[list[int]]:
    """Pull the answer grid out of a model response.

    Candidate sources are tried in order of format confidence: a JSON object
    with a ``final_response`` key, a bare grid after the literal
    ``final response =``, then any balanced list-of-lists.  Within the first
    source that produces candidates, the last complete grid wins (reasoning
    models emit intermediate matrices before the final answer).  With
    ``expected_n`` set, the winning grid must be that size.
    """
    stripped = strip_scaffolding(text)
    for source in (_json_candidates, _literal_candidates, _grid_candidates):
        last_good = None
        last_error = None
        for grid, error in source(stripped):
            if grid is not None:
                last_good = grid
            else:
                last_error = error
        if last_good is not None:
            if expected_n is not None and len(last_good) != expected_n:
                raise SizeMismatch(expected_n, len(last_good))
            return last_good
        if last_error is not None:
            raise last_error
    raise NoMatrixFound("no balanced list-of-lists in response")


_QUOTED = re.compile(r'"((?:[^"\\]|\\.)*)"|\'((?:[^\'\\]|\\.)*)\'')


def _parse_string_list(text: str, i: int):
    if i >= len(text) or text[i] != "[":
        raise _NotACandidate()
    i = _skip_ws(text, i + 1)
    entries: list[str] = []
    while True:
        if i < len(text) and text[i] == "]":
            break
        m = _QUOTED.match(text, i)
        if not m:
            raise _NotACandidate()
        raw = m.group(1) if m.group(1) is not None else m.group(2)
        entries.append(raw.replace('\\"', '"').replace("\\'", "'"))
        i = _skip_ws(text, m.end())
        if i < len(text) and text[i] == ",":
            i = _skip_ws(text, i + 1)
        elif i < len(text) and text[i] == "]":
            break
        else:
            raise _NotACandidate()
    if not entries:
        raise _NotACandidate()
    return entries, i + 1


def extract_components(text: str, expected_k: int | None = None) -> list[str]:
    """Pull the identified component names out of a model response.

    Takes the first balanced list of quoted strings (an identification answer
    appears once; anything after it is commentary).  Entries are trimmed.
    An empty list is not an answer.
    """
    stripped = strip_scaffolding(text)
    i = 0
    while i < len(stripped):
        if stripped[i] == "[":
            try:
                entries, _ = _parse_string_list(stripped, i)
            except _NotACandidate:
                i += 1
                continue
            trimmed = [e.strip() for e in entries]
            if any(not e for e in trimmed):
                raise EmptyEntry("component name is empty after trimming")
            if expected_k is not None and len(trimmed) != expected_k:
                raise CountMismatch(expected_k, len(trimmed))
            return trimmed
        i += 1
    raise NoListFound("no balanced list of quoted strings in response")


def parse_verdict(text: str) -> Verdict:
    """Scan for the first whole-word Valid/Invalid, ignoring reasoning blocks."""
    m = _VERDICT.search(strip_scaffolding(text))
    if m is None:
        return Verdict.UNPARSEABLE
    return Verdict.VALID if m.group(1).lower() == "valid" else Verdict.INVALID
