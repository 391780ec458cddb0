import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from dres3d.core import PointMask, Scene
from dres3d.exceptions import DegenerateScene, ShapeMismatch
from dres3d.superpoint import (
    OversegmentConfig,
    Oversegmenter,
    SuperpointPartition,
    broadcast_mask,
    oversegment,
    pool_gt_mask,
    project_features,
    read_partition,
    sp_pool,
    superpoint_fractions,
    write_partition,
)


def _clusters(centers, n_each=20, seed=0, spread=0.05):
    rng = np.random.default_rng(seed)
    xyz = np.concatenate([c + spread * rng.normal(size=(n_each, 3)) for c in centers])
    rgb = np.full_like(xyz, 0.5)
    labels = np.repeat(np.arange(len(centers)), n_each)
    return Scene("c", np.column_stack([xyz, rgb]), labels)


@st.composite
def partitions(draw, max_points=60):
    n_sp = draw(st.integers(1, 12))
    extra = draw(st.lists(st.integers(0, n_sp - 1), max_size=max_points - n_sp))
    a = np.array(list(range(n_sp)) + extra)
    perm = np.random.default_rng(draw(st.integers(0, 2 ** 16))).permutation(len(a))
    return SuperpointPartition("s", a[perm], n_sp)


def test_partition_must_be_surjective():
    with pytest.raises(ValueError):
        SuperpointPartition("s", np.array([0, 0, 2]), 3)
    with pytest.raises(ValueError):
        SuperpointPartition("s", np.array([0, 3]), 2)


def test_far_clusters_are_never_merged():
    scene = _clusters([(0, 0, 0), (5, 0, 0), (0, 5, 0)])
    part = oversegment(scene)
    for s in range(part.n_superpoints):
        assert len(set(scene.instance_labels[part.assignment == s])) == 1


def test_oversegment_is_deterministic_and_numbered_by_first_point():
    scene = _clusters([(0, 0, 0), (3, 0, 0)], seed=4)
    a, b = oversegment(scene), oversegment(scene)
    assert a == b
    firsts = [int(np.flatnonzero(a.assignment == s)[0]) for s in range(a.n_superpoints)]
    assert firsts == sorted(firsts)


@pytest.mark.parametrize("target", [1, 2, 5])
def test_target_cap_is_respected(target):
    scene = _clusters([(0, 0, 0), (4, 0, 0), (0, 4, 0), (4, 4, 0), (8, 8, 8)])
    part = oversegment(scene, OversegmentConfig(min_size=1, scale=0.01, target_max_superpoints=target))
    assert part.n_superpoints <= target


def test_min_size_merges_small_segments():
    scene = _clusters([(0, 0, 0), (0.5, 0, 0)], n_each=15, spread=0.2)
    part = oversegment(scene, OversegmentConfig(min_size=6, scale=0.01))
    assert part.sizes.min() >= 6


def test_degenerate_scenes():
    one = Scene("one", np.array([[0, 0, 0, 0.5, 0.5, 0.5]]), np.array([0]))
    assert oversegment(one).n_superpoints == 1
    same = Scene("same", np.tile([1.0, 1, 1, 0.5, 0.5, 0.5], (4, 1)), np.zeros(4, dtype=int))
    with pytest.raises(DegenerateScene):
        oversegment(same)


def test_estimator_wrapper_matches_function():
    scene = _clusters([(0, 0, 0), (3, 0, 0)])
    est = Oversegmenter(min_size=3)
    assert clone(est).get_params() == est.get_params()
    labels = est.fit_predict(scene.points)
    assert np.array_equal(labels, oversegment(scene, OversegmentConfig(min_size=3)).assignment)
    with pytest.raises(ShapeMismatch):
        est.fit(np.zeros((4, 5)))


def test_partition_file_round_trip(tmp_path):
    part = SuperpointPartition("s", np.array([0, 1, 1, 2, 0]), 3)
    write_partition(part, tmp_path / "s.sp.txt", "abc")
    back, digest = read_partition(tmp_path / "s.sp.txt")
    assert back == part and digest == "abc"


@settings(max_examples=100, deadline=None)
@given(partitions(), st.integers(0, 2 ** 16))
def test_pool_of_broadcast_is_identity(part, seed):
    rng = np.random.default_rng(seed)
    sp_feat = rng.normal(size=(part.n_superpoints, 4))
    assert np.allclose(sp_pool(sp_feat[part.assignment], part), sp_feat, rtol=0, atol=1e-12)
    m = rng.random(part.n_superpoints) < 0.5
    assert np.array_equal(pool_gt_mask(broadcast_mask(m, part), part), m)
    assert np.array_equal(superpoint_fractions(broadcast_mask(m, part), part), m.astype(float))


@settings(max_examples=100, deadline=None)
@given(partitions(), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 16))
def test_pool_is_linear(part, a, b, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(part.n_points, 3))
    y = rng.normal(size=(part.n_points, 3))
    lhs = sp_pool(a * x + b * y, part)
    rhs = a * sp_pool(x, part) + b * sp_pool(y, part)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-11)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-2, 2)))
def test_projection_uses_separate_maps(pooled):
    rng = np.random.default_rng(0)
    W1, W2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    f_v, f_sp = project_features(pooled, W1, W2)
    assert np.allclose(f_v, pooled @ W1) and np.allclose(f_sp, pooled @ W2)


def test_gt_pooling_threshold_is_inclusive():
    part = SuperpointPartition("s", np.array([0, 0, 1, 1, 1]), 2)
    gt = PointMask.from_bits([1, 0, 1, 0, 0], "s")
    assert pool_gt_mask(gt, part).tolist() == [True, False]
    assert pool_gt_mask(gt, part, threshold=0.3).tolist() == [True, True]


def test_pool_rejects_wrong_length():
    part = SuperpointPartition.identity(3, "s")
    with pytest.raises(ShapeMismatch):
        sp_pool(np.zeros((4, 2)), part)
    with pytest.raises(ShapeMismatch):
        broadcast_mask(np.zeros(4), part)
