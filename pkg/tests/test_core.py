from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dres3d.core import (
    UNLABELED,
    PhraseMaskSet,
    PointMask,
    Scene,
    iou_fraction,
    masks_from_bits,
    point_iou,
    union_instance_mask,
    validate_scene,
)
from dres3d.exceptions import LengthMismatch, ShapeMismatch, UnknownInstance


def _scene(labels, sid="s"):
    n = len(labels)
    pts = np.column_stack([np.arange(n, dtype=float), np.zeros((n, 2)), np.full((n, 3), 0.5)])
    return Scene(sid, pts, np.array(labels))


def test_scene_arrays_are_read_only():
    s = _scene([0, 0, 1])
    with pytest.raises(ValueError):
        s.points[0, 0] = 3.0
    assert s.xyz.shape == (3, 3) and s.rgb.shape == (3, 3)
    assert s.instance_ids() == [0, 1]


def test_scene_rejects_bad_shapes():
    with pytest.raises(ShapeMismatch):
        Scene("s", np.zeros((3, 5)), np.zeros(3, dtype=int))
    with pytest.raises(ShapeMismatch):
        Scene("s", np.zeros((3, 6)), np.zeros(2, dtype=int))


def test_unlabeled_points_are_not_instances():
    s = _scene([UNLABELED, 2, 2, UNLABELED])
    assert s.instance_ids() == [2]


def test_union_instance_mask():
    s = _scene([1, 2, 2, 3, UNLABELED])
    m = union_instance_mask(s, {1, 3})
    assert m.indices().tolist() == [0, 3]
    with pytest.raises(UnknownInstance):
        union_instance_mask(s, {7})


@pytest.mark.parametrize("a,b,expected", [
    ([1, 1, 0, 0], [1, 0, 1, 0], Fraction(1, 3)),
    ([0, 0, 0], [0, 0, 0], Fraction(1)),
    ([1, 0, 0], [0, 0, 0], Fraction(0)),
    ([1, 1, 1], [1, 1, 1], Fraction(1)),
])
def test_iou_examples(a, b, expected):
    ma, mb = PointMask.from_bits(a, "s"), PointMask.from_bits(b, "s")
    assert iou_fraction(ma, mb) == expected
    assert point_iou(ma, mb) == float(expected)


def test_iou_length_mismatch():
    with pytest.raises(LengthMismatch):
        point_iou(PointMask.empty(3, "s"), PointMask.empty(4, "s"))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=300))
def test_mask_ops_match_numpy(pairs):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    ma, mb = PointMask.from_bits(a, "s"), PointMask.from_bits(b, "s")
    assert np.array_equal(ma.bits, a)
    assert (ma & mb).count() == int((a & b).sum())
    assert (ma | mb).count() == int((a | b).sum())
    u = int((a | b).sum())
    want = Fraction(int((a & b).sum()), u) if u else Fraction(1)
    assert iou_fraction(ma, mb) == want == iou_fraction(mb, ma)


def test_phrase_mask_set_requires_one_scene():
    a, b = PointMask.empty(3, "s"), PointMask.empty(3, "t")
    with pytest.raises(ValueError):
        PhraseMaskSet((a, b))
    assert len(PhraseMaskSet(tuple(masks_from_bits([[1, 0, 0], [0, 1, 1]], "s")))) == 2


def test_validate_scene_names_offending_point():
    pts = np.column_stack([np.arange(3, dtype=float), np.zeros((3, 2)), np.full((3, 3), 0.5)])
    pts[1, 0] = np.nan
    pts[2, 4] = 1.5
    problems = validate_scene(Scene("s", pts, np.array([0, 0, 1])), referenced_ids={0, 9})
    text = "\n".join(problems)
    assert "point 1" in text and "non-finite" in text
    assert "point 2" in text
    assert "9" in text
    assert validate_scene(_scene([0, 1])) == []
