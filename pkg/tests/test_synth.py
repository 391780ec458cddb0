import numpy as np
import pytest

from dres3d.core import Scene, union_instance_mask
from dres3d.exceptions import ConfigInfeasible, FeatureFileMissing
from dres3d.superpoint import SuperpointPartition, sp_pool
from dres3d.synth import (
    FileFeatures,
    GeometricPointFeatures,
    HashedTokenFeatures,
    SynthConfig,
    gen_dataset,
    gen_scene,
    gen_scenes,
    point_features,
    token_features,
    write_feature_table,
)


def test_single_object_scene():
    s = gen_scene(SynthConfig(objects_per_scene=(1, 1)), 0)
    assert len(s.instance_ids()) == 1


def test_point_count_is_exact():
    s = gen_scene(SynthConfig(objects_per_scene=(3, 3), points_per_object=(50, 50)), 2)
    assert s.n_points == 150 and len(s.instance_ids()) == 3


def test_generation_is_deterministic():
    cfg = SynthConfig(seed=5, num_scenes=3)
    a, b = gen_scenes(cfg), gen_scenes(cfg)
    assert a == b
    assert gen_dataset(cfg, a) == gen_dataset(cfg, b)
    assert gen_scenes(SynthConfig(seed=6, num_scenes=3))[0] != a[0]


def test_infeasible_layout():
    with pytest.raises(ConfigInfeasible):
        gen_scene(SynthConfig(objects_per_scene=(20, 20), grid=2), 0)


def test_phrase_and_length_controls():
    cfg = SynthConfig(num_scenes=4, phrases_per_description=(4, 4), long_text_fraction=1.0)
    descs = gen_dataset(cfg, gen_scenes(cfg))
    assert all(d.is_complex and d.is_long for d in descs)
    short = SynthConfig(num_scenes=4)
    assert not any(d.is_long for d in gen_dataset(short, gen_scenes(short)))


def test_sentence_targets():
    cfg = SynthConfig(num_scenes=3, sentence_level_fraction=1.0)
    for d in gen_dataset(cfg, gen_scenes(cfg)):
        assert d.sentence_target is not None and d.check() == []


def test_ground_truth_is_consistent():
    cfg = SynthConfig(num_scenes=6, descriptions_per_scene=2, adjacent_pair_fraction=1.0)
    scenes = {s.scene_id: s for s in gen_scenes(cfg)}
    descs = gen_dataset(cfg, list(scenes.values()))
    multi = 0
    for d in descs:
        assert d.check() == []
        for p in d.phrases:
            m = union_instance_mask(scenes[d.scene_id], p.target_ids)
            assert m.count() > 0
            multi += len(p.target_ids) > 1
    assert multi > 0


def test_objects_are_separable_after_pooling():
    cfg = SynthConfig(num_scenes=4)
    prov = GeometricPointFeatures(16)
    for s in gen_scenes(cfg):
        labels = s.instance_labels
        ids = s.instance_ids()
        part = SuperpointPartition(s.scene_id, np.searchsorted(ids, labels), len(ids))
        f = point_features(s, prov)
        pooled = sp_pool(f, part)
        spread = max(np.linalg.norm(f[labels == i] - pooled[j], axis=1).mean()
                     for j, i in enumerate(ids))
        gaps = [np.linalg.norm(pooled[a] - pooled[b])
                for a in range(len(ids)) for b in range(a + 1, len(ids))]
        assert min(gaps) > spread


def test_point_features_shape_and_purity():
    pts = np.array([[0, 0, 0, 0.1, 0.2, 0.3]] * 2 + [[1, 0, 0, 0.5, 0.5, 0.5]] * 3, dtype=float)
    s = Scene("s", pts, np.zeros(5, dtype=int))
    f = GeometricPointFeatures(n_features=7, k=2).transform(s)
    assert f.shape == (5, 7)
    assert np.array_equal(f[2], f[3])


def test_file_features(tmp_path):
    s = gen_scene(SynthConfig(), 0)
    table = np.random.default_rng(0).normal(size=(s.n_points, 4))
    write_feature_table(s.scene_id, table, tmp_path / f"{s.scene_id}.feat.txt")
    assert np.array_equal(FileFeatures(str(tmp_path)).transform(s), table)
    other = gen_scene(SynthConfig(), 1)
    with pytest.raises(FeatureFileMissing):
        FileFeatures(str(tmp_path)).transform(other)


def test_token_features():
    prov = HashedTokenFeatures(n_features=8)
    e = token_features(["the", "chair", "the"], prov)
    assert e.shape == (5, 8)
    assert np.array_equal(e[1], e[3])
    assert not np.allclose(e[1], e[2])
    assert np.allclose(np.linalg.norm(e, axis=1), 1.0)
    assert token_features([], prov).shape == (2, 8)
    assert not np.allclose(HashedTokenFeatures(8, seed=1).vector("the"), prov.vector("the"))
