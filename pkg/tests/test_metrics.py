import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dres3d.annotation import make_description
from dres3d.core import PhraseMaskSet, PointMask, Scene, union_instance_mask
from dres3d.exceptions import EmptyInput, MissingPrediction, PhraseCountMismatch
from dres3d.metrics import (
    EvalRecord,
    MetricsReport,
    acc_at,
    evaluate,
    miou,
    miou_s,
    read_predictions,
    report,
    write_predictions,
)


def recs(*ious, long=False, complex=False):
    return [EvalRecord(f"d{i}", r, long, complex) for i, r in enumerate(ious)]


def test_flat_versus_sentence_mean():
    r = recs([1.0], [0.0, 0.0, 0.0])
    assert miou(r) == 0.25
    assert miou_s(r) == 0.5


@pytest.mark.parametrize("ious,t,want", [
    ([0.3, 0.2, 0.6], 0.25, 2 / 3),
    ([0.5], 0.5, 0.0),
    ([0.25], 0.25, 0.0),
    ([1.0, 1.0], 0.5, 1.0),
])
def test_acc_is_strict(ious, t, want):
    assert acc_at(recs(ious), t) == want


def test_single_record_examples():
    assert miou(recs([0.3, 0.7])) == 0.5
    assert miou_s(recs([0.3, 0.7])) == 0.5


def test_empty_inputs_raise():
    for f in (miou, miou_s, lambda r: acc_at(r, 0.5)):
        with pytest.raises(EmptyInput):
            f([])
    with pytest.raises(EmptyInput):
        EvalRecord("x", ())


record_sets = st.lists(
    st.lists(st.floats(0, 1), min_size=1, max_size=5), min_size=1, max_size=10)


@settings(max_examples=200, deadline=None)
@given(record_sets)
def test_metric_properties(ious):
    r = recs(*ious)
    flat = [v for row in ious for v in row]
    means = [sum(row) / len(row) for row in ious]
    assert acc_at(r, 0.5) <= acc_at(r, 0.25)
    assert min(flat) - 1e-15 <= miou(r) <= max(flat) + 1e-15
    assert min(means) - 1e-15 <= miou_s(r) <= max(means) + 1e-15
    shuffled = recs(*[list(reversed(row)) for row in reversed(ious)])
    assert miou(shuffled) == miou(r) and miou_s(shuffled) == miou_s(r)
    if all(len(row) == 1 for row in ious):
        assert miou_s(r) == pytest.approx(miou(r), abs=1e-15)


def test_report_marks_empty_subsets_absent():
    rep = report(recs([0.4], [0.9, 0.1]))
    assert rep.long is None and rep.complex is None
    assert rep.overall.n_descriptions == 2 and rep.overall.n_phrases == 3
    assert MetricsReport.from_dict(rep.to_dict()) == rep
    table = rep.to_table("m")
    assert table.splitlines()[-1].split("|")[1].split() == ["-"] * 4


def test_report_two_record_hand_table():
    long_rec = EvalRecord("a", [0.6, 0.2, 0.3, 1.0], long=True, complex=True)
    short = EvalRecord("b", [0.5], long=False, complex=False)
    rep = report([long_rec, short])
    # overall: phrases 0.6 0.2 0.3 1.0 0.5 -> acc@.25 = 4/5, acc@.5 = 2/5, mIoU = 2.6/5
    assert rep.overall.acc_25 == 4 / 5
    assert rep.overall.acc_50 == 2 / 5
    assert rep.overall.miou == pytest.approx(0.52, abs=1e-15)
    assert rep.overall.miou_s == pytest.approx((0.525 + 0.5) / 2, abs=1e-15)
    assert rep.long == rep.complex
    assert rep.long.miou == rep.long.miou_s == pytest.approx(0.525, abs=1e-15)
    assert rep.long.acc_25 == 0.75 and rep.long.acc_50 == 0.5
    row = rep.to_table("m").splitlines()[-1]
    assert row.split("|")[1].split() == ["75.0", "50.0", "52.5", "52.5"]
    assert row.split("|")[3].split() == ["80.0", "40.0", "51.2", "52.0"]
    header = rep.to_table("m").splitlines()
    assert "Long" in header[0] and "Complex" in header[0] and "Overall" in header[0]
    assert header[1].split("|")[1].split() == ["0.25", "0.5", "mIoU-S", "mIoU"]
    assert rep.to_csv().splitlines()[0] == "subset,acc_25,acc_50,miou_s,miou,n_descriptions,n_phrases"


def _scene():
    pts = np.column_stack([np.arange(6.0), np.zeros((6, 2)), np.full((6, 3), 0.5)])
    return Scene("s", pts, np.array([1, 1, 2, 2, 3, 3]))


def test_evaluate_counting_example():
    scene = _scene()
    desc = make_description("d", "s", "[x](1,3) [y](2)")
    # target 1: points {0,1,4,5}; prediction {0,1,2}: overlap 2, union 5
    # target 2: points {2,3}; prediction {3}: overlap 1, union 2
    preds = {"d": [PointMask.from_bits([1, 1, 1, 0, 0, 0], "s"),
                   PointMask.from_bits([0, 0, 0, 1, 0, 0], "s")]}
    assert evaluate(preds, [desc], {"s": scene})[0].ious == (0.4, 0.5)


def test_evaluate_errors():
    scene, desc = _scene(), make_description("d", "s", "[x](1) [y](2)")
    with pytest.raises(MissingPrediction):
        evaluate({}, [desc], {"s": scene})
    with pytest.raises(PhraseCountMismatch):
        evaluate({"d": [PointMask.empty(6, "s")]}, [desc], {"s": scene})


def test_perfect_predictions_score_one():
    scene = _scene()
    descs = [make_description("d", "s", "[x](1) [y](2,3)"), make_description("e", "s", "[z](3)")]
    preds = {d.description_id: [union_instance_mask(scene, p.target_ids) for p in d.phrases]
             for d in descs}
    rep = report(evaluate(preds, descs, {"s": scene}))
    m = rep.overall
    assert (m.acc_25, m.acc_50, m.miou_s, m.miou) == (1.0, 1.0, 1.0, 1.0)


def test_prediction_file_round_trip(tmp_path):
    scene = _scene()
    desc = make_description("d", "s", "[x](1) [y](2)", sentence_target_ids=[1])
    masks = (PointMask.from_bits([1, 0, 0, 0, 0, 1], "s"), PointMask.empty(6, "s"),
             PointMask.from_bits([0, 1, 1, 0, 0, 0], "s"))
    preds = {"d": PhraseMaskSet(masks, PointMask.from_bits([1] * 6, "s"))}
    write_predictions(preds, tmp_path / "p.jsonl")
    back = read_predictions(tmp_path / "p.jsonl", [desc], {"s": scene})
    assert back["d"].masks == masks
    assert back["d"].sentence_mask.count() == 6
