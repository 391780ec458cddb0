import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TOY_MODEL, toy_sample, toy_state
from dres3d.annotation import make_description
from dres3d.exceptions import IndexOutOfRange, ShapeMismatch
from dres3d.model import (
    ModelConfig,
    binarize,
    decoder_layer,
    forward,
    forward_pooled,
    init_queries,
    init_state,
    load_checkpoint,
    parameter_shapes,
    predict_masks,
    save_checkpoint,
)
from dres3d.superpoint import SuperpointPartition
from reference import RefModel

STATE = toy_state()


def _inputs(seed, n_sp=9, n_tok=7, cfg=TOY_MODEL):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n_sp, cfg.d)), rng.normal(size=(n_sp, cfg.d)), rng.normal(size=(n_tok, cfg.e))


def test_parameter_inventory():
    shapes = parameter_shapes(TOY_MODEL)
    assert shapes["W1"] == shapes["W2"] == (16, 32)
    assert shapes["W3"] == (32, 32)
    assert shapes["layers.1.ffn.fc1.weight"] == (32, 128)
    assert shapes["score.fc2.weight"] == (32, 1)
    assert not any(k.startswith("layers.2") for k in shapes)
    assert STATE.n_parameters() == sum(int(np.prod(s)) for s in shapes.values())


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        ModelConfig(d=30, heads=4)


def test_init_is_seeded():
    a, b, c = init_state(TOY_MODEL, 3), init_state(TOY_MODEL, 3), init_state(TOY_MODEL, 4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["W1"], c.params["W1"])


def test_trace_shapes():
    f_v, f_sp, tok = _inputs(0)
    tr = forward(f_v, f_sp, tok, STATE)
    assert tr.n_layers == 2
    assert len(tr.mask_logits) == len(tr.scores) == 3
    assert tr.mask_logits[-1].shape == (7, 9)
    assert tr.cross_attention[0].shape == (2, 7, 9)
    assert tr.self_attention[1].shape == (2, 7, 7)
    assert all(((s > 0) & (s < 1)).all() for s in tr.scores)


def test_matches_reference_forward():
    s = toy_sample(seed=2)
    tr = forward_pooled(s.pooled, s.token_features, STATE)
    snaps, logits, scores, attn = RefModel(STATE.params, TOY_MODEL).forward(s.pooled, s.token_features)
    for i in range(3):
        assert np.allclose(tr.queries[i], snaps[i], rtol=1e-12, atol=1e-12)
        assert np.allclose(tr.mask_logits[i], logits[i], rtol=1e-12, atol=1e-12)
        assert np.allclose(tr.scores[i], scores[i], rtol=1e-12, atol=1e-12)
    assert np.allclose(tr.cross_attention[1], attn[1][0], atol=1e-14)


def test_stepwise_api_matches_forward():
    f_v, f_sp, tok = _inputs(1)
    tr = forward(f_v, f_sp, tok, STATE)
    q = init_queries(tok, STATE.params["W3"])
    assert np.array_equal(q, tr.queries[0])
    for i in range(TOY_MODEL.n_layers):
        q, cross, _ = decoder_layer(q, f_v, STATE, layer=i)
        assert np.allclose(q, tr.queries[i + 1], rtol=0, atol=1e-13)
        assert np.allclose(cross, tr.cross_attention[i], rtol=0, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 16), st.integers(1, 20), st.integers(1, 12))
def test_attention_rows_sum_to_one(seed, n_sp, n_tok):
    f_v, f_sp, tok = _inputs(seed, n_sp, n_tok)
    tr = forward(f_v * 5, f_sp, tok, STATE)
    for a in tr.cross_attention + tr.self_attention:
        assert np.abs(a.sum(axis=-1) - 1.0).max() <= 1e-9
        assert (a >= 0).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 16), st.integers(2, 16))
def test_logits_are_equivariant_to_superpoint_order(seed, n_sp):
    f_v, f_sp, tok = _inputs(seed, n_sp)
    perm = np.random.default_rng(seed).permutation(n_sp)
    a = forward(f_v, f_sp, tok, STATE)
    b = forward(f_v[perm], f_sp[perm], tok, STATE)
    for la, lb in zip(a.mask_logits, b.mask_logits):
        assert np.allclose(la[:, perm], lb, rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(1e-3, 1e3))
def test_binarization_ignores_positive_scaling(seed, alpha):
    f_v, f_sp, tok = _inputs(seed)
    a = forward(f_v, f_sp, tok, STATE)
    b = forward(f_v, alpha * f_sp, tok, STATE)
    for la, lb in zip(a.mask_logits, b.mask_logits):
        # logits exactly at zero are measure-zero for continuous inputs
        assert np.array_equal(binarize(la), binarize(lb))


def test_predict_masks_reads_head_rows():
    desc = make_description("d", "s", "a [b c](1) d [e](2)", sentence_target_ids=[1])
    part = SuperpointPartition("s", np.array([0, 0, 1, 2, 2]), 3)
    n_rows = desc.n_tokens + 2
    logits = -np.ones((n_rows, 3))
    logits[0] = [1, -1, -1]  # [CLS]
    logits[3] = [-1, 1, -1]  # head "c" is token 2
    logits[5] = [-1, -1, 1]  # head "e" is token 4
    tr = type("T", (), {"mask_logits": [logits]})()
    out = predict_masks(tr, desc, part)
    assert [m.indices().tolist() for m in out.masks] == [[0, 1], [2], [3, 4]]
    assert out.sentence_mask.indices().tolist() == [0, 1]
    short = type("T", (), {"mask_logits": [logits[:4]]})()
    with pytest.raises(IndexOutOfRange):
        predict_masks(short, desc, part)


def test_shape_checks():
    f_v, f_sp, tok = _inputs(0)
    with pytest.raises(ShapeMismatch):
        forward(f_v, f_sp[:3], tok, STATE)
    with pytest.raises(ShapeMismatch):
        forward(f_v, f_sp, tok[:, :5], STATE)
    with pytest.raises(ShapeMismatch):
        forward_pooled(np.zeros((4, 3)), tok, STATE)


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    save_checkpoint(STATE, tmp_path / "a.json")
    back = load_checkpoint(tmp_path / "a.json")
    assert back.config == STATE.config
    assert all(np.array_equal(back.params[k], STATE.params[k]) for k in STATE.params)
    save_checkpoint(back, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_checkpoint_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(p)
