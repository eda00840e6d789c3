import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsm_forge.dsm import (
    CellValue,
    DiagonalNotOne,
    DimensionMismatch,
    Dsm,
    DsmError,
    DuplicateLabel,
    IllegalCellValue,
    InvalidSize,
    MalformedPayload,
    dsm_from_csv,
    dsm_from_json,
    dsm_to_csv,
    dsm_to_json,
    ground_truth_from_json,
    list_ground_truths,
    load_ground_truth,
    new_dsm,
    normalize_label,
    worst_case_dsm,
)


def test_basic_construction():
    d = new_dsm(["a", "b"], [[1, 0], [2, 1]])
    assert d.n == 2
    assert d.cell(1, 0) == 2
    assert d.has_unsure()
    assert not new_dsm(["a"], [[1]]).has_unsure()


def test_empty_dsm_is_legal():
    d = new_dsm([], [])
    assert d.n == 0
    assert not d.has_unsure()


def test_rejects_non_square():
    with pytest.raises(DimensionMismatch):
        new_dsm(["a", "b"], [[1, 0]])
    with pytest.raises(DimensionMismatch):
        new_dsm(["a", "b"], [[1, 0, 0], [0, 1, 0]])


def test_rejects_illegal_cells():
    with pytest.raises(IllegalCellValue):
        new_dsm(["a", "b"], [[1, 3], [0, 1]])
    with pytest.raises(IllegalCellValue):
        new_dsm(["a", "b"], [[1, -1], [0, 1]])
    # bool is an int subclass; True must not sneak in as 1
    with pytest.raises(IllegalCellValue):
        new_dsm(["a", "b"], [[1, True], [0, 1]])


def test_rejects_bad_diagonal():
    with pytest.raises(DiagonalNotOne):
        new_dsm(["a", "b"], [[0, 1], [1, 1]])
    with pytest.raises(DiagonalNotOne):
        new_dsm(["a", "b"], [[1, 1], [1, 2]])


def test_rejects_label_collisions_after_normalization():
    with pytest.raises(DuplicateLabel):
        new_dsm(["Motor", "motor "], [[1, 0], [0, 1]])
    with pytest.raises(DsmError):
        new_dsm(["", "b"], [[1, 0], [0, 1]])
    with pytest.raises(DsmError):
        new_dsm(["  ", "b"], [[1, 0], [0, 1]])


def test_normalize_label():
    assert normalize_label("  Motor ") == "motor"
    # composed vs decomposed accents compare equal after NFC
    assert normalize_label("Café") == normalize_label("Café")
    assert normalize_label("STRASSE") == normalize_label("strasse")


def test_cell_value_enum():
    assert CellValue.ABSENT == 0
    assert CellValue.PRESENT == 1
    assert CellValue.UNSURE == 2


def test_permuted():
    d = new_dsm(["a", "b", "c"], [[1, 1, 0], [1, 1, 2], [0, 2, 1]])
    p = d.permuted([2, 0, 1])
    assert p.labels == ("c", "a", "b")
    assert p.cells == ((1, 0, 2), (0, 1, 1), (2, 1, 1))
    # diagonal survives any permutation
    assert all(p.cell(i, i) == 1 for i in range(3))


def test_worst_case_dsm():
    d = worst_case_dsm(3)
    assert d.labels == ("C1", "C2", "C3")
    assert d.cells == ((1, 2, 2), (2, 1, 2), (2, 2, 1))
    assert worst_case_dsm(1).cells == ((1,),)
    with pytest.raises(InvalidSize):
        worst_case_dsm(0)


def test_json_round_trip():
    d = new_dsm(["a", "b"], [[1, 2], [0, 1]])
    assert dsm_from_json(dsm_to_json(d)) == d


def test_json_tolerates_extra_keys():
    payload = '{"labels": ["a"], "cells": [[1]], "note": "x"}'
    assert dsm_from_json(payload).labels == ("a",)


def test_json_malformed():
    with pytest.raises(MalformedPayload):
        dsm_from_json("not json")
    with pytest.raises(MalformedPayload):
        dsm_from_json('{"labels": ["a"]}')
    with pytest.raises(MalformedPayload):
        dsm_from_json('[1, 2]')
    with pytest.raises(MalformedPayload):
        dsm_from_json('{"labels": [1], "cells": [[1]]}')


def test_csv_round_trip():
    d = new_dsm(["Bit", "Motor"], [[1, 2], [0, 1]])
    text = dsm_to_csv(d)
    assert text.splitlines()[0] == ",Bit,Motor"
    assert dsm_from_csv(text) == d


def test_csv_rejects_row_label_mismatch():
    bad = ",a,b\na,1,0\nc,0,1\n"
    with pytest.raises(MalformedPayload):
        dsm_from_csv(bad)


def test_csv_rejects_non_integer_cells():
    bad = ",a,b\na,1,x\nb,0,1\n"
    with pytest.raises(MalformedPayload):
        dsm_from_csv(bad)


def test_ground_truth_fixture_listing():
    names = list_ground_truths()
    assert "power_screwdriver" in names
    assert "cubesat" in names


def test_power_screwdriver_ground_truth():
    gt = load_ground_truth("power_screwdriver")
    assert gt.dsm.n == 7
    assert gt.relationship_type == "proximity (in contact)"
    # symmetric contact matrix
    for i in range(7):
        for j in range(7):
            assert gt.dsm.cell(i, j) == gt.dsm.cell(j, i)
    assert not gt.dsm.has_unsure()
    assert sum(v for row in gt.dsm.cells for v in row) == 29


def test_cubesat_ground_truth():
    gt = load_ground_truth("cubesat")
    assert gt.dsm.n == 6
    for i in range(6):
        for j in range(6):
            assert gt.dsm.cell(i, j) == gt.dsm.cell(j, i)
    assert not gt.dsm.has_unsure()
    # 22 present cells drive the published precision/recall denominators
    assert sum(v for row in gt.dsm.cells for v in row) == 22


def test_unknown_ground_truth():
    with pytest.raises(MalformedPayload):
        load_ground_truth("does_not_exist")


def test_ground_truth_payload_requires_keys():
    with pytest.raises(MalformedPayload):
        ground_truth_from_json('{"labels": ["a"], "cells": [[1]]}')


@st.composite
def dsms(draw, max_n=6):
    n = draw(st.integers(min_value=1, max_value=max_n))
    cells = [
        [1 if i == j else draw(st.integers(min_value=0, max_value=2)) for j in range(n)]
        for i in range(n)
    ]
    return new_dsm([f"L{i}" for i in range(n)], cells)


@given(dsms())
def test_json_round_trip_property(d):
    assert dsm_from_json(dsm_to_json(d)) == d


@given(dsms())
def test_csv_round_trip_property(d):
    assert dsm_from_csv(dsm_to_csv(d)) == d


@given(dsms())
def test_permutation_round_trip_property(d):
    order = list(range(d.n))[::-1]
    inverse = [order.index(i) for i in range(d.n)]
    assert d.permuted(order).permuted(inverse) == d


def test_dsm_is_hashable_and_frozen():
    d = new_dsm(["a"], [[1]])
    assert hash(d) == hash(new_dsm(["a"], [[1]]))
    with pytest.raises(AttributeError):
        d.labels = ("b",)
