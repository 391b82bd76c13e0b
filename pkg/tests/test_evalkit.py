import json
import math

import numpy as np
import pytest

from ltlab import model as M
from ltlab.evalkit import (MetricsReport, accuracy_gain, check_orderings, compare_strategies,
                           evaluate, report_from_predictions, weight_norm_profile,
                           write_rank_value_csv)
from ltlab.synthlt import ShotSplit, generate_glyph_dataset, shot_split


def _split(c, many=(), low=()):
    many, low = frozenset(many), frozenset(low)
    return ShotSplit(many, frozenset(range(c)) - many - low, low, (100, 20), c)


def _balanced(c, per, seed=0):
    return generate_glyph_dataset([per] * c, 8, 0.2, seed=seed)


def _params(c, seed=0):
    return M.init_params(c, (8, 8), 12, 6, np.random.default_rng(seed))


def test_constant_predictor_scores_one_over_c():
    ds = _balanced(5, 4)
    p = _params(5)
    p.blocks["head_cbs.weight"][...] = 0.0
    rep = evaluate(p, ds, _split(5, many=[0], low=[3, 4]))
    assert rep.acc_overall == pytest.approx(1 / 5)
    assert rep.acc_many == 1.0 and rep.acc_low == 0.0
    assert rep.confusion_counts[:, 0].sum() == 20


def test_oracle_predictor_scores_one():
    labels = np.array([0, 1, 2, 2, 1])
    rep = report_from_predictions(labels, labels, 3, _split(3))
    assert rep.acc_overall == 1.0 and np.all(rep.per_class_acc == 1.0)


def test_matches_scalar_loop():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 3, 200)
    preds = rng.integers(0, 3, 200)
    split = _split(3, many=[0], low=[2])
    rep = report_from_predictions(labels, preds, 3, split)
    correct, total = [0, 0, 0], [0, 0, 0]
    for y, p in zip(labels, preds):
        total[y] += 1
        correct[y] += int(y == p)
    assert rep.acc_overall == pytest.approx(sum(correct) / 200)
    assert rep.acc_many == pytest.approx(correct[0] / total[0])
    assert rep.acc_medium == pytest.approx(correct[1] / total[1])
    assert rep.acc_low == pytest.approx(correct[2] / total[2])
    for c in range(3):
        assert rep.per_class_acc[c] == pytest.approx(correct[c] / total[c])
        assert rep.confusion_counts[c].sum() == total[c]


def test_micro_equals_macro_on_balanced_set():
    rng = np.random.default_rng(5)
    labels = np.repeat(np.arange(6), 10)
    preds = np.where(rng.random(60) < 0.6, labels, rng.integers(0, 6, 60))
    rep = report_from_predictions(labels, preds, 6, _split(6, many=[0, 1], low=[4, 5]))
    assert rep.acc_overall == pytest.approx(np.mean(rep.per_class_acc))
    assert rep.acc_many == pytest.approx(rep.acc_many_macro)
    assert rep.acc_low == pytest.approx(rep.acc_low_macro)


def test_micro_and_macro_differ_when_unbalanced():
    labels = np.array([0, 0, 0, 1])
    preds = np.array([0, 0, 0, 0])
    rep = report_from_predictions(labels, preds, 2, _split(2, many=[0, 1]))
    assert rep.acc_many == pytest.approx(0.75)
    assert rep.acc_many_macro == pytest.approx(0.5)


def test_class_mismatch_rejected():
    with pytest.raises(ValueError):
        evaluate(_params(4), _balanced(5, 2), _split(5))


def test_memorizing_model_on_training_set():
    ds = generate_glyph_dataset([6, 5, 4], 8, 0.0, seed=1)
    p = _params(3, seed=2)
    feats = M.forward_features(p, ds.images).data
    # least-squares readout on distinct prototypes separates the three classes
    target = np.eye(3)[ds.labels] * 10
    a = np.hstack([feats, np.ones((len(feats), 1))])
    sol, *_ = np.linalg.lstsq(a, target, rcond=None)
    p.blocks["head_cbs.weight"] = sol[:-1].T
    p.blocks["head_cbs.bias"] = sol[-1]
    assert evaluate(p, ds, shot_split(ds.class_counts, 6, 4)).acc_overall == 1.0


def _report(per_class):
    per_class = np.asarray(per_class, dtype=float)
    c = len(per_class)
    return MetricsReport(float(per_class.mean()), 0, 0, 0, 0, 0, 0, per_class, np.zeros(c),
                         np.zeros((c, c), dtype=np.int64))


def test_gain_self_and_antisymmetry():
    a, b = _report([0.2, 0.5, 0.9, 0.1, 0.4]), _report([0.3, 0.5, 0.6, 0.0, 0.8])
    assert np.all(accuracy_gain(a, a) == 0)
    assert np.array_equal(accuracy_gain(a, b), -accuracy_gain(b, a))


def test_gain_hand_subtraction_and_frequency_order():
    a, b = _report([0.2, 0.5, 0.9, 0.1, 0.4]), _report([0.3, 0.5, 0.6, 0.0, 0.8])
    g = accuracy_gain(a, b)
    assert g[2] == pytest.approx(0.3) and g[4] == pytest.approx(-0.4)
    ordered = accuracy_gain(a, b, class_counts=[5, 50, 7, 100, 1])
    assert ordered.tolist() == pytest.approx([0.1, 0.0, 0.3, -0.1, -0.4])


def test_gain_length_mismatch():
    with pytest.raises(ValueError):
        accuracy_gain(_report([0.1, 0.2]), _report([0.1, 0.2, 0.3]))


def test_weight_norms():
    p = _params(4)
    p.blocks["head_cbs.weight"][...] = 0.0
    norms, summary = weight_norm_profile(p)
    assert np.all(norms == 0) and summary["sd"] == 0
    p.blocks["head_cbs.weight"] = np.eye(4, 6)
    norms, summary = weight_norm_profile(p)
    assert np.all(norms == 1) and summary["max_min_ratio"] == 1
    w = np.random.default_rng(3).normal(size=(4, 6))
    p.blocks["head_cbs.weight"] = w
    norms, _ = weight_norm_profile(p)
    for c in range(4):
        assert norms[c] == pytest.approx(math.sqrt(sum(v * v for v in w[c])), rel=1e-14)
    p.blocks["head_cbs.weight"] = w[:, ::-1]
    assert np.allclose(weight_norm_profile(p)[0], norms, rtol=1e-14)


def test_weight_norms_exclude_bias():
    p = _params(3)
    before, _ = weight_norm_profile(p)
    p.blocks["head_cbs.bias"] += 5.0
    assert np.array_equal(weight_norm_profile(p)[0], before)


def _acc(overall, many=0.0, low=0.0):
    r = _report([overall, overall])
    r.acc_overall, r.acc_many, r.acc_low = overall, many, low
    return r


def test_compare_strategies():
    out = compare_strategies({"a": _acc(0.3), "b": _acc(0.4)})
    assert out["rankings"]["acc_overall"] == ["b", "a"] and out["best"]["acc_overall"] == "b"
    assert out["ties"]["acc_overall"] == []
    tie = compare_strategies({"a": _acc(0.3), "b": _acc(0.3)})
    assert tie["ties"]["acc_overall"] == [["a", "b"]]
    with pytest.raises(ValueError):
        compare_strategies({"a": _acc(0.3)})


def test_compare_matches_sort_oracle():
    rng = np.random.default_rng(9)
    reports = {f"r{i}": _acc(*rng.random(3)) for i in range(7)}
    out = compare_strategies(reports)
    for f in ("acc_overall", "acc_many", "acc_low"):
        oracle = [n for n, _ in sorted(reports.items(), key=lambda kv: getattr(kv[1], f),
                                       reverse=True)]
        assert out["rankings"][f] == oracle


def test_check_orderings():
    reports = {"p": _acc(0.50, many=0.80, low=0.30), "r": _acc(0.45, many=0.90, low=0.20),
               "c": _acc(0.47, many=0.85, low=0.32)}
    flags = check_orderings(reports, "p", "r", "c")
    assert flags == {"many_best": True, "overall_gain": True, "low_gain": True}
    reports["c"] = _acc(0.49, many=0.95)
    flags = check_orderings(reports, "p", "r", "c")
    assert flags["many_best"] is False and flags["overall_gain"] is False


def test_report_json_round_trip():
    rep = report_from_predictions([0, 1, 1], [0, 1, 0], 3, _split(3, low=[2]))
    assert math.isnan(rep.acc_low)
    back = MetricsReport.from_dict(json.loads(rep.to_json()))
    assert back.acc_overall == rep.acc_overall and math.isnan(back.acc_low)
    assert np.array_equal(back.confusion_counts, rep.confusion_counts)


def test_rank_value_csv(tmp_path):
    write_rank_value_csv(tmp_path / "n.csv", [0.5, 0.25], header="norm")
    assert (tmp_path / "n.csv").read_text() == "class_rank,norm\n0,0.5\n1,0.25\n"
