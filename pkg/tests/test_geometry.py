import math

import pytest
from hypothesis import given, strategies as st

from lesionmine.errors import DataError
from lesionmine.geometry import BBox, area, intersection, iou

from .oracles import box_iou


@pytest.mark.parametrize(
    "coords, expected",
    [([0, 0, 10, 10], 100.0), ([2, 3, 4, 9], 12.0), ([0, 0, 1, 1], 1.0)],
)
def test_area_examples(coords, expected):
    assert area(BBox.from_seq(coords)) == expected


def test_iou_examples():
    a = BBox(0, 0, 10, 10)
    assert iou(a, BBox(0, 0, 10, 10)) == 1.0
    assert iou(a, BBox(20, 20, 30, 30)) == 0.0
    assert iou(a, BBox(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)
    assert intersection(a, BBox(5, 0, 15, 10)) == 50.0


def test_touching_boxes_have_zero_iou():
    assert iou(BBox(0, 0, 10, 10), BBox(10, 0, 20, 10)) == 0.0
    assert iou(BBox(0, 0, 10, 10), BBox(10, 10, 20, 20)) == 0.0


@pytest.mark.parametrize(
    "coords",
    [[0, 0, 0, 10], [5, 0, 1, 10], [0, 0, 10, -1], [0, 0, math.inf, 1], [math.nan, 0, 1, 1]],
)
def test_invalid_boxes_rejected(coords):
    with pytest.raises(DataError):
        BBox.from_seq(coords)


def test_from_seq_needs_four_values():
    with pytest.raises(DataError):
        BBox.from_seq([0, 0, 1])


coord = st.floats(min_value=-1e4, max_value=1e4, allow_nan=False, allow_infinity=False)
extent = st.floats(min_value=1e-2, max_value=1e4, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw):
    x, y = draw(coord), draw(coord)
    return BBox(x, y, x + draw(extent), y + draw(extent))


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(boxes(), boxes())
def test_iou_matches_reference_formula(a, b):
    assert iou(a, b) == pytest.approx(box_iou(a.as_list(), b.as_list()), rel=1e-12, abs=1e-15)


@given(boxes(), boxes(), st.floats(min_value=1e-3, max_value=1e3))
def test_iou_scale_invariant(a, b, s):
    assert abs(iou(a.scaled(s), b.scaled(s)) - iou(a, b)) <= 1e-12


@given(boxes(), boxes())
def test_iou_one_iff_equal(a, b):
    assert iou(a, a) == 1.0
    if a != b:
        assert iou(a, b) < 1.0
