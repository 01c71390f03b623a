import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctseverity.errors import ValidationError
from ctseverity.evaluation import (
    CATEGORIES,
    auc_score,
    band_at_points,
    bootstrap_aucs,
    bootstrap_ci,
    bootstrap_roc_band,
    confusion_by_category,
    evaluate_scores,
    operating_point,
    render_confusion,
    roc_curve,
    roc_svg,
    sensitivity_specificity,
)

SVG = "{http://www.w3.org/2000/svg}"


def mann_whitney(scores, labels):
    pos = scores[labels]
    neg = scores[~labels]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def random_scores(r, n):
    labels = r.random(n) < r.uniform(0.2, 0.8)
    labels[0], labels[1] = True, False
    # coarse rounding makes ties common
    scores = np.round(r.normal(size=n) + labels * r.uniform(0, 2), int(r.integers(0, 3)))
    return scores, labels


def test_auc_examples():
    assert auc_score([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc_score([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc_score([0.5] * 4, [0, 1, 0, 1]) == 0.5


@given(st.integers(0, 2**32 - 1), st.integers(2, 200))
def test_auc_matches_mann_whitney(seed, n):
    r = np.random.default_rng(seed)
    scores, labels = random_scores(r, n)
    assert abs(auc_score(scores, labels) - mann_whitney(scores, labels)) <= 1e-12


@given(st.integers(0, 2**32 - 1))
def test_auc_label_flip_symmetry(seed):
    scores, labels = random_scores(np.random.default_rng(seed), 50)
    assert auc_score(scores, labels) + auc_score(scores, ~labels) == pytest.approx(1.0, abs=1e-12)
    assert auc_score(scores, labels) == pytest.approx(auc_score(-scores, ~labels), abs=1e-12)


def test_roc_endpoints_and_monotone():
    scores, labels = random_scores(np.random.default_rng(3), 80)
    roc = roc_curve(scores, labels)
    assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0)
    assert (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
    assert np.isinf(roc.thresholds[0])
    assert len(roc.thresholds) == len(np.unique(scores)) + 1


def test_single_class_rejected():
    with pytest.raises(ValidationError):
        roc_curve([0.1, 0.2], [1, 1])


def exhaustive_operating_point(roc):
    best = None
    for i in range(len(roc.fpr)):
        key = (np.hypot(roc.fpr[i], 1 - roc.tpr[i]), -roc.tpr[i], roc.fpr[i])
        if best is None or key < best[0]:
            best = (key, i)
    i = best[1]
    return roc.thresholds[i], roc.tpr[i], 1 - roc.fpr[i]


@given(st.integers(0, 2**32 - 1))
def test_operating_point_matches_exhaustive_scan(seed):
    r = np.random.default_rng(seed)
    scores, labels = random_scores(r, int(r.integers(4, 120)))
    roc = roc_curve(scores, labels)
    assert operating_point(roc) == exhaustive_operating_point(roc)


def test_operating_point_perfect_classifier():
    roc = roc_curve([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert operating_point(roc) == (0.8, 1.0, 1.0)


def test_bootstrap_deterministic_per_seed():
    scores, labels = random_scores(np.random.default_rng(0), 60)
    a = bootstrap_aucs(scores, labels, 1000, seed=4)
    b = bootstrap_aucs(scores, labels, 1000, seed=4)
    c = bootstrap_aucs(scores, labels, 1000, seed=5)
    assert len(a) == 1000
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_bootstrap_perfect_separation():
    scores = np.r_[np.zeros(20), np.ones(20)]
    labels = scores > 0.5
    assert bootstrap_ci(scores, labels, 1000, seed=0) == (1.0, 1.0)


def test_bootstrap_ci_contains_auc_and_shrinks():
    r = np.random.default_rng(1)
    widths = []
    for n in (40, 400):
        labels = np.arange(n) % 2 == 0
        scores = r.normal(size=n) + labels
        lo, hi = bootstrap_ci(scores, labels, 500, seed=2)
        assert lo <= auc_score(scores, labels) <= hi
        widths.append(hi - lo)
    assert widths[1] < widths[0]


def test_roc_band_brackets_curve():
    scores, labels = random_scores(np.random.default_rng(8), 100)
    base, lower, upper = bootstrap_roc_band(scores, labels, 200, seed=1)
    assert np.all(lower <= upper)
    roc = roc_curve(scores, labels)
    lo, hi = band_at_points(roc, base, lower, upper)
    assert lo.shape == roc.fpr.shape == hi.shape


def test_confusion_table_layout():
    cats = ["covid", "covid", "ild", "pneumonia", "healthy", "healthy"]
    preds = [True, False, True, False, False, True]
    t = confusion_by_category(preds, cats)
    assert t["categories"] == list(CATEGORIES)
    assert t["positive"] == [1, 1, 0, 1]
    assert t["negative"] == [1, 0, 1, 1]
    sens, spec = sensitivity_specificity(t)
    assert sens == 0.5 and spec == 0.5
    text = render_confusion({"M1": t, "M2": t})
    lines = text.splitlines()
    assert lines[2].split("\t")[2:] == ["COVID-19", "ILD", "Pneumonia", "Healthy"]
    rows = [ln for ln in lines[3:]]
    assert len(rows) == 4
    assert rows[0].split("\t")[1:] == ["Positive", "1", "1", "0", "1"]
    assert rows[1].split("\t")[1:] == ["Negative", "1", "0", "1", "1"]


def test_unknown_category_rejected():
    with pytest.raises(ValidationError):
        confusion_by_category([True], ["flu"])


def test_evaluate_scores_consistent():
    r = np.random.default_rng(5)
    cats = list(r.choice(CATEGORIES, size=60))
    cats[:2] = ["covid", "ild"]
    labels = np.array([c == "covid" for c in cats])
    scores = r.normal(size=60) + labels
    rep = evaluate_scores(scores, cats, n_boot=100, seed=0)
    preds = scores >= rep.threshold
    assert rep.sensitivity == pytest.approx(preds[labels].mean())
    assert rep.specificity == pytest.approx((~preds[~labels]).mean())
    d = rep.to_json()
    assert d["roc"]["thresholds"][0] is None
    assert d["auc"] == rep.roc.auc


def test_svg_parses_with_band(tmp_path):
    scores, labels = random_scores(np.random.default_rng(2), 50)
    roc = roc_curve(scores, labels)
    base, lower, upper = bootstrap_roc_band(scores, labels, 100, seed=0)
    band = band_at_points(roc, base, lower, upper)
    out = tmp_path / "roc.svg"
    roc_svg([("M1 <rf>", roc, band), ("flat", roc, None)], out)
    root = ET.parse(out).getroot()
    polys = root.findall(f"{SVG}polygon")
    assert len(polys) == 1
    assert len(polys[0].get("points").split()) == 2 * len(roc.fpr)
    assert len(root.findall(f"{SVG}polyline")) == 2
    legends = [t.text for t in root.findall(f"{SVG}text") if t.get("class") == "legend"]
    assert legends[0].startswith("M1 <rf>")


def test_svg_unwritable(tmp_path):
    roc = roc_curve([0, 1], [0, 1])
    with pytest.raises(ValidationError):
        roc_svg([("m", roc, None)], tmp_path / "missing" / "roc.svg")
