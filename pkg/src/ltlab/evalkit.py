"""Top-1 / shot-wise evaluation, per-class gains and classifier weight norms."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import model as M

SPLITS = ("many", "medium", "low")
REPORT_FIELDS = ("acc_overall", "acc_many", "acc_medium", "acc_low")


@dataclass
class MetricsReport:
    acc_overall: float
    acc_many: float
    acc_medium: float
    acc_low: float
    acc_many_macro: float
    acc_medium_macro: float
    acc_low_macro: float
    per_class_acc: np.ndarray
    weight_norms: np.ndarray
    confusion_counts: np.ndarray

    @property
    def num_classes(self):
        return len(self.per_class_acc)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
            elif isinstance(v, float) and math.isnan(v):
                d[k] = None
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("per_class_acc", "weight_norms"):
            d[k] = np.asarray(d[k], dtype=np.float64)
        d["confusion_counts"] = np.asarray(d["confusion_counts"], dtype=np.int64)
        for k, v in d.items():
            if v is None:
                d[k] = float("nan")
        return cls(**d)

    def summary(self):
        return {k: getattr(self, k) for k in REPORT_FIELDS}


def _split_acc(correct, total, classes):
    idx = sorted(classes)
    if not idx:
        return float("nan"), float("nan")
    n = total[idx].sum()
    micro = float(correct[idx].sum() / n) if n else float("nan")
    seen = [c for c in idx if total[c]]
    macro = float(np.mean(correct[seen] / total[seen])) if seen else float("nan")
    return micro, macro


def report_from_predictions(labels, preds, num_classes, split, weight_norms=None):
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    total = confusion.sum(axis=1)
    correct = np.diag(confusion).copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(total > 0, correct / np.where(total > 0, total, 1), np.nan)
    accs = {s: _split_acc(correct, total, getattr(split, s)) for s in SPLITS}
    if weight_norms is None:
        weight_norms = np.zeros(num_classes)
    return MetricsReport(
        acc_overall=float(correct.sum() / total.sum()) if total.sum() else float("nan"),
        acc_many=accs["many"][0], acc_medium=accs["medium"][0], acc_low=accs["low"][0],
        acc_many_macro=accs["many"][1], acc_medium_macro=accs["medium"][1],
        acc_low_macro=accs["low"][1],
        per_class_acc=per_class, weight_norms=np.asarray(weight_norms, dtype=np.float64),
        confusion_counts=confusion,
    )


def evaluate(params, testset, split):
    """Score ``argmax h(phi(x))`` on ``testset``; the auxiliary heads are unused."""
    if params.num_classes != testset.num_classes:
        raise ValueError(f"model has {params.num_classes} classes, test set has "
                         f"{testset.num_classes}")
    preds = M.predict(params, testset.images)
    norms, _ = weight_norm_profile(params)
    return report_from_predictions(testset.labels, preds, testset.num_classes, split, norms)


def accuracy_gain(report_a, report_b, class_counts=None):
    """Per-class ``acc_a - acc_b``, ordered by descending training frequency."""
    a, b = np.asarray(report_a.per_class_acc), np.asarray(report_b.per_class_acc)
    if a.shape != b.shape:
        raise ValueError(f"class count mismatch: {a.shape[0]} vs {b.shape[0]}")
    gain = a - b
    if class_counts is not None:
        gain = gain[frequency_order(class_counts)]
    return gain


def frequency_order(class_counts):
    return np.argsort(-np.asarray(class_counts), kind="stable")


def weight_norm_profile(params, class_counts=None):
    """L2 norms of head_cbs rows (bias excluded) plus mean / sd / max-min ratio."""
    w = params.blocks[f"{M.HEAD_CBS}.weight"]
    norms = np.sqrt(np.einsum("ij,ij->i", w, w))
    if class_counts is not None:
        norms = norms[frequency_order(class_counts)]
    lo = norms.min()
    summary = {
        "mean": float(norms.mean()),
        "sd": float(norms.std()),
        "max_min_ratio": float(norms.max() / lo) if lo > 0 else float("inf"),
    }
    return norms, summary


def compare_strategies(reports, fields=REPORT_FIELDS):
    """Rank named reports per metric (best first).

    Returns ``{"rankings": {field: [names]}, "ties": {field: [[names], ...]},
    "best": {field: name}}``. Ranking ties keep name order.
    """
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    names = sorted(reports)
    out = {"rankings": {}, "ties": {}, "best": {}}
    for f in fields:
        vals = {n: getattr(reports[n], f) for n in names}
        ranked = sorted(names, key=lambda n: -_sortable(vals[n]))
        out["rankings"][f] = ranked
        out["best"][f] = ranked[0]
        groups = {}
        for n in names:
            groups.setdefault(vals[n], []).append(n)
        out["ties"][f] = [g for g in groups.values() if len(g) > 1]
    return out


def _sortable(v):
    return -math.inf if v is None or (isinstance(v, float) and math.isnan(v)) else v


def write_rank_value_csv(path, values, header="value"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_rank", header])
        for i, v in enumerate(values):
            w.writerow([i, repr(float(v))])


def report_csv_row(name, report):
    return [name] + [repr(float(getattr(report, f))) for f in REPORT_FIELDS]


def check_orderings(reports, proposed, rrs, cbs, overall_margin=0.02, low_margin=0.05):
    """Flags for the expected orderings among a proposed model and two baselines.

    ``many_best``: the RRS baseline has the top many-shot accuracy of the three;
    ``overall_gain``: the proposed model beats both baselines overall by at
    least ``overall_margin``; ``low_gain``: it beats the RRS baseline on
    low-shot classes by at least ``low_margin``.
    """
    p, r, c = reports[proposed], reports[rrs], reports[cbs]
    return {
        "many_best": r.acc_many >= max(p.acc_many, c.acc_many),
        "overall_gain": p.acc_overall - max(r.acc_overall, c.acc_overall) >= overall_margin,
        "low_gain": p.acc_low - r.acc_low >= low_margin,
    }
