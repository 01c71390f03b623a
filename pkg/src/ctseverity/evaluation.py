"""ROC analysis, bootstrap confidence intervals, operating points and confusion tables."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .errors import ValidationError

CATEGORIES = ("covid", "ild", "pneumonia", "healthy")
CATEGORY_TITLES = {"covid": "COVID-19", "ild": "ILD", "pneumonia": "Pneumonia", "healthy": "Healthy"}


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # first entry is +inf (nothing called positive)
    auc: float

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


@dataclass
class EvalReport:
    roc: RocCurve
    ci: tuple[float, float]
    threshold: float
    sensitivity: float
    specificity: float
    confusion: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "auc": self.roc.auc,
            "ci95": list(self.ci),
            "threshold": _finite(self.threshold),
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "roc": {
                "fpr": self.roc.fpr.tolist(),
                "tpr": self.roc.tpr.tolist(),
                "thresholds": [_finite(t) for t in self.roc.thresholds.tolist()],
            },
            "confusion": self.confusion,
        }


def _finite(x):
    return None if math.isinf(x) else x


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be 1-D arrays of equal length")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise ValidationError("ROC needs both positive and negative labels")
    return scores, labels


def roc_curve(scores, labels) -> RocCurve:
    """ROC with one point per distinct score; ties share a point, so the
    trapezoidal AUC equals the Mann-Whitney statistic with ties counted 1/2."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    last_of_run = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(~y)[last_of_run]
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    tpr = np.r_[0, tp] / n_pos
    fpr = np.r_[0, fp] / n_neg
    thresholds = np.r_[np.inf, s[last_of_run]]
    # integer trapezoids keep the area exact up to one division
    tp_all = np.r_[0, tp].astype(np.int64)
    fp_all = np.r_[0, fp].astype(np.int64)
    area2 = int(np.sum(np.diff(fp_all) * (tp_all[1:] + tp_all[:-1])))
    auc = area2 / (2.0 * n_pos * n_neg)
    return RocCurve(fpr, tpr, thresholds, auc)


def auc_score(scores, labels) -> float:
    return roc_curve(scores, labels).auc


def bootstrap_aucs(scores, labels, n_boot: int = 1000, seed: int = 0) -> np.ndarray:
    """AUCs of ``n_boot`` resamples drawn with replacement; single-class draws are redrawn."""
    scores, labels = _check_binary(scores, labels)
    n = len(scores)
    rng = np.random.default_rng(seed)
    out = np.empty(n_boot)
    i = 0
    while i < n_boot:
        idx = rng.integers(0, n, n)
        lab = labels[idx]
        if lab.all() or not lab.any():
            continue
        out[i] = roc_curve(scores[idx], lab).auc
        i += 1
    return out


def bootstrap_ci(scores, labels, n_boot: int = 1000, seed: int = 0, level: float = 0.95):
    aucs = bootstrap_aucs(scores, labels, n_boot, seed)
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(aucs, [tail, 100.0 - tail])
    return float(lo), float(hi)


def bootstrap_roc_band(scores, labels, n_boot: int = 1000, seed: int = 0, grid: int = 101):
    """Pointwise 2.5/97.5 percentile TPR band over a fixed FPR grid."""
    scores, labels = _check_binary(scores, labels)
    n = len(scores)
    rng = np.random.default_rng(seed)
    base = np.linspace(0.0, 1.0, grid)
    tprs = []
    while len(tprs) < n_boot:
        idx = rng.integers(0, n, n)
        lab = labels[idx]
        if lab.all() or not lab.any():
            continue
        roc = roc_curve(scores[idx], lab)
        tprs.append(np.interp(base, roc.fpr, roc.tpr))
    tprs = np.array(tprs)
    return base, np.percentile(tprs, 2.5, axis=0), np.percentile(tprs, 97.5, axis=0)


def operating_point(roc: RocCurve):
    """ROC point closest to (fpr, tpr) = (0, 1); ties go to higher tpr, then lower fpr.

    Returns ``(threshold, sensitivity, specificity)``.
    """
    if len(roc.fpr) == 0:
        raise ValidationError("empty ROC curve")
    dist = np.hypot(roc.fpr, 1.0 - roc.tpr)
    best = 0
    for i in range(1, len(dist)):
        d, bd = dist[i], dist[best]
        if d < bd or (d == bd and (roc.tpr[i] > roc.tpr[best]
                                   or (roc.tpr[i] == roc.tpr[best] and roc.fpr[i] < roc.fpr[best]))):
            best = i
    return float(roc.thresholds[best]), float(roc.tpr[best]), float(1.0 - roc.fpr[best])


def confusion_by_category(predictions, categories) -> dict:
    """Counts of predicted positive / negative for each cohort category."""
    predictions = np.asarray(predictions).astype(bool)
    categories = list(categories)
    unknown = set(categories) - set(CATEGORIES)
    if unknown:
        raise ValidationError(f"unknown category labels {sorted(unknown)}")
    table = {"positive": [], "negative": []}
    cats = np.array(categories)
    for c in CATEGORIES:
        m = cats == c
        table["positive"].append(int(predictions[m].sum()))
        table["negative"].append(int((~predictions[m]).sum()))
    table["categories"] = list(CATEGORIES)
    return table


def sensitivity_specificity(table: dict) -> tuple[float, float]:
    pos, neg = table["positive"], table["negative"]
    tp, fn = pos[0], neg[0]
    fp, tn = sum(pos[1:]), sum(neg[1:])
    sens = tp / (tp + fn) if tp + fn else float("nan")
    spec = tn / (tn + fp) if tn + fp else float("nan")
    return sens, spec


def render_confusion(tables: dict) -> str:
    """Text table with one Positive/Negative row pair per model, columns by category."""
    head = "\t".join(["", "", CATEGORY_TITLES["covid"]] + [CATEGORY_TITLES[c] for c in CATEGORIES[1:]])
    lines = ["\t\tGround Truth", "\t\tPositive\tNegative", head]
    for model, table in tables.items():
        lines.append("\t".join([f"Predicted ({model})", "Positive"] + [str(v) for v in table["positive"]]))
        lines.append("\t".join(["", "Negative"] + [str(v) for v in table["negative"]]))
    return "\n".join(lines) + "\n"


def evaluate_scores(scores, categories, n_boot: int = 1000, seed: int = 0) -> EvalReport:
    """Full report for binary covid-vs-rest scores."""
    labels = np.array([c == "covid" for c in categories])
    roc = roc_curve(scores, labels)
    ci = bootstrap_ci(scores, labels, n_boot, seed)
    thr, sens, spec = operating_point(roc)
    preds = np.asarray(scores) >= thr
    return EvalReport(roc, ci, thr, sens, spec, confusion_by_category(preds, categories))


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def roc_svg(curves, out, size: int = 400) -> None:
    """Write ROC curves with optional shaded confidence bands.

    ``curves`` is a list of ``(name, RocCurve, band)`` where ``band`` is None
    or ``(lower_tpr, upper_tpr)`` sampled at the curve's own fpr points.
    """
    m = 50
    w = size

    def px(fpr, tpr):
        return f"{m + fpr * w:.3f},{m + (1 - tpr) * w:.3f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w + 2 * m}" height="{w + 2 * m}" '
        f'viewBox="0 0 {w + 2 * m} {w + 2 * m}">',
        f'<rect class="frame" x="{m}" y="{m}" width="{w}" height="{w}" fill="none" stroke="black"/>',
        f'<line class="diagonal" x1="{m}" y1="{m + w}" x2="{m + w}" y2="{m}" stroke="gray" stroke-dasharray="4 4"/>',
        f'<text class="axis-label" x="{m + w / 2}" y="{w + 2 * m - 12}" text-anchor="middle">False positive rate</text>',
        f'<text class="axis-label" x="14" y="{m + w / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {m + w / 2})">True positive rate</text>',
    ]
    for k, (name, roc, band) in enumerate(curves):
        color = _COLORS[k % len(_COLORS)]
        if band is not None:
            lower, upper = band
            pts = [px(f, t) for f, t in zip(roc.fpr, upper)] + [px(f, t) for f, t in zip(roc.fpr[::-1], lower[::-1])]
            parts.append(f'<polygon class="band" points="{" ".join(pts)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(px(f, t) for f, t in zip(roc.fpr, roc.tpr))
        parts.append(f'<polyline class="roc" points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text class="legend" x="{m + w - 10}" y="{m + w - 12 - 16 * k}" text-anchor="end" fill="{color}">'
            f'{escape(name)} (AUC {roc.auc:.3f})</text>'
        )
    parts.append("</svg>")
    try:
        with open(out, "w") as fh:
            fh.write("\n".join(parts) + "\n")
    except OSError as exc:
        raise ValidationError(f"cannot write {out}: {exc}") from exc


def band_at_points(roc: RocCurve, base, lower, upper):
    """Resample a band computed on ``base`` fpr grid onto the curve's fpr points."""
    return np.interp(roc.fpr, base, lower), np.interp(roc.fpr, base, upper)
