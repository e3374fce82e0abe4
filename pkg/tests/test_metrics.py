import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toothseg.core import LandmarkSet, SegMask
from toothseg.metrics import (
    ConfusionCounts,
    EvalReport,
    ToothResult,
    aggregate,
    classify_tooth,
    dice,
    evaluate_tooth,
    localization_accuracy,
    point_error,
    render_tables,
)


def lms(points: dict):
    c = np.full((32, 3), -1.0)
    for i, p in points.items():
        c[i] = p
    return LandmarkSet(c)


def mask(idx, shape=(10,)):
    m = np.zeros(shape, bool)
    m[list(idx)] = True
    return SegMask.from_bool(m.reshape(-1, 1, 1))


def test_point_error_examples():
    assert point_error((1, 2, 3), (1, 2, 3)) == 0.0
    assert point_error((0, 0, 0), (3, 4, 0)) == pytest.approx(5.0)
    assert point_error((0, 0, 10), (0, 0, 0), (0.4, 0.4, 0.4)) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        point_error((-1, -1, -1), (0, 0, 0))


def test_accuracy_exact_and_nearest_rule():
    gt = lms({0: (0, 0, 0), 1: (10, 0, 0)})
    assert localization_accuracy(gt, gt, 0.1) == 1.0
    pred = lms({0: (7, 0, 0), 1: (10, 0, 0)})  # tooth 0 predicted nearer gt 1
    for r in (0.5, 8.0, 100.0):
        assert localization_accuracy(pred, gt, r) == 0.5


def test_accuracy_strict_radius():
    gt = lms({0: (0, 0, 0)})
    pred = lms({0: (3, 4, 0)})
    assert localization_accuracy(pred, gt, 5.0) == 0.0
    assert localization_accuracy(pred, gt, 5.0 + 1e-9) == 1.0


def test_accuracy_excludes_missing_gt_and_errors():
    gt = lms({0: (0, 0, 0)})
    pred = lms({0: (0, 0, 0), 5: (40, 40, 40)})
    assert localization_accuracy(pred, gt, 1.0) == 1.0
    with pytest.raises(ValueError):
        localization_accuracy(lms({}), lms({}), 1.0)


def test_accuracy_pooled_over_cases():
    gt = lms({0: (0, 0, 0), 1: (10, 0, 0)})
    good = gt
    bad = lms({0: (0, 0, 0), 1: (0, 0, 1)})
    assert localization_accuracy([good, bad], [gt, gt], 2.0) == pytest.approx(3 / 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_accuracy_monotone_in_radius(seed):
    rng = np.random.default_rng(seed)
    g = rng.uniform(0, 50, (32, 3))
    p = g + rng.normal(scale=3.0, size=g.shape)
    radii = np.sort(rng.uniform(0.1, 10, 5))
    accs = [localization_accuracy(LandmarkSet(np.abs(p)), LandmarkSet(g), r) for r in radii]
    assert all(a <= b for a, b in zip(accs, accs[1:]))


def test_dice_examples():
    x = mask(range(3, 7))
    y = mask(range(0, 6))
    assert dice(y, y) == 1.0
    assert dice(mask([0]), mask([1])) == 0.0
    assert dice(x, y) == pytest.approx(0.6)
    assert dice(mask([]), mask([])) == 1.0
    with pytest.raises(ValueError):
        dice(mask([1]), mask([1], (11,)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=12, max_size=12), st.lists(st.booleans(), min_size=12, max_size=12))
def test_dice_properties(a, b):
    x = SegMask.from_bool(np.array(a).reshape(12, 1, 1))
    y = SegMask.from_bool(np.array(b).reshape(12, 1, 1))
    assert dice(x, y) == dice(y, x)
    assert 0.0 <= dice(x, y) <= 1.0
    assert dice(x, x) == 1.0


def test_classify_rules():
    gt = mask([2, 3, 4])
    assert classify_tooth(mask([4, 9]), gt) == "TP"
    assert classify_tooth(mask([]), gt) == "FN"
    assert classify_tooth(mask([8]), gt) == "FN"
    assert classify_tooth(mask([]), mask([])) == "TN"
    assert classify_tooth(mask([1]), mask([])) == "FP"
    region = mask([0, 1, 2])
    assert classify_tooth(mask([8]), mask([]), region) == "TN"
    with pytest.raises(ValueError):
        classify_tooth(mask([1]), mask([1], (11,)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_classification_partitions(rows):
    c = ConfusionCounts()
    for has_lesion, overlap, fires in rows:
        gt = mask([1] if has_lesion else [])
        pred = mask(([1] if overlap else []) + ([5] if fires else []))
        c.add(classify_tooth(pred, gt))
    assert c.tp + c.fn + c.tn + c.fp == len(rows)
    assert c.positives == sum(r[0] for r in rows)
    if c.sensitivity is not None:
        assert c.sensitivity + c.miss_rate == pytest.approx(1.0)
    if c.specificity is not None:
        assert c.specificity + c.fallout == pytest.approx(1.0)


def test_sensitivity_97():
    assert ConfusionCounts(tp=97, fn=3).sensitivity == pytest.approx(0.97)


def test_aggregate_all_tn():
    res = [ToothResult("a", i, "TN", 1.0) for i in range(5)]
    rep = aggregate(res)
    assert rep.specificity == 1.0
    assert rep.sensitivity is None
    assert rep.to_dict()["summary"]["sensitivity"] is None


def test_aggregate_dice_lists_and_folds():
    rng = np.random.default_rng(0)
    res = []
    for i in range(40):
        out = ["TP", "FN", "TN", "FP"][i % 4]
        d = float(rng.uniform(0.2, 0.9)) if out == "TP" else (0.0 if out in ("FN", "FP") else 1.0)
        res.append(ToothResult(f"c{i}", i % 32, out, d, fold=i % 3))
    rep = aggregate(res, label="x")
    tp = [r.dice for r in res if r.outcome == "TP"]
    pos = [r.dice for r in res if r.outcome in ("TP", "FN")]
    assert rep.dice_tp == tp
    assert rep.dice_tp_mean_sd[0] == pytest.approx(np.mean(tp), abs=1e-12)
    assert rep.dice_tp_mean_sd[1] == pytest.approx(np.std(tp, ddof=1), abs=1e-12)
    assert rep.dice_positive_mean_sd[0] == pytest.approx(np.mean(pos), abs=1e-12)
    assert set(rep.per_fold) == {0, 1, 2}
    fold_sens = [rep.per_fold[k]["sensitivity"] for k in range(3)]
    assert rep.fold_mean_sd("sensitivity")[0] == pytest.approx(np.mean(fold_sens))
    assert "Dice (TP)" in rep.render_table()


def test_report_json_roundtrip(tmp_path):
    rep = aggregate([ToothResult("a", 1, "TP", 0.5, 0), ToothResult("b", 2, "FN", 0.0, 1)],
                    point_errors=[1.0, 2.0, 3.0], accuracy={2.0: 0.5, 4.0: 1.0}, label="FL")
    path = tmp_path / "r.json"
    rep.to_json(path)
    back = EvalReport.from_json(path)
    assert back.confusion == rep.confusion
    assert back.accuracy == rep.accuracy
    assert back.point_errors == rep.point_errors
    assert back.per_fold == rep.per_fold
    text = render_tables([back])
    assert "PE mm" in text and "acc r=2mm" in text and "50.0%" in text


def test_evaluate_tooth_region():
    gt = mask([2, 3, 8])
    pred = mask([8])
    region = mask([0, 1, 2, 3, 4])
    r = evaluate_tooth("c", 3, pred, gt, region)
    assert r.outcome == "FN" and r.dice == 0.0
    r = evaluate_tooth("c", 3, pred, gt)
    assert r.outcome == "TP" and r.dice == pytest.approx(0.5)
