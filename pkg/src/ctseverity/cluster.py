"""Feature scaling, recursive feature elimination and average-linkage clustering of cases."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from xml.sax.saxutils import escape

import numpy as np

from . import _kernels
from .errors import ValidationError
from .evaluation import auc_score
from .forest import fit_random_forest

COHORT_COLORS = {"covid": "#d62728", "pneumonia": "#ff7f0e", "ild": "#1f77b4", "healthy": "#2ca02c"}


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (n_cases, n_features), nan = missing
    names: list
    cohorts: list
    splits: list
    case_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n, f = self.values.shape
        if len(self.names) != f or len(set(self.names)) != f:
            raise ValidationError("feature names must be unique, one per column")
        if len(self.cohorts) != n or len(self.splits) != n:
            raise ValidationError("need one cohort and one split per case")
        if not self.case_ids:
            self.case_ids = [str(i) for i in range(n)]

    @property
    def target(self) -> np.ndarray:
        return np.array([c == "covid" for c in self.cohorts], dtype=np.float64)

    def rows(self, split) -> np.ndarray:
        if split is None:
            return np.arange(len(self.values))
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def select(self, columns) -> "FeatureMatrix":
        columns = list(columns)
        return replace(self, values=self.values[:, columns], names=[self.names[c] for c in columns])

    def take(self, rows) -> "FeatureMatrix":
        rows = list(rows)
        return FeatureMatrix(self.values[rows], list(self.names), [self.cohorts[i] for i in rows],
                             [self.splits[i] for i in rows], [self.case_ids[i] for i in rows])


def impute_mean(m: FeatureMatrix, fit_on="train") -> FeatureMatrix:
    rows = m.rows(fit_on)
    if len(rows) == 0:
        raise ValidationError(f"fit split {fit_on!r} is empty")
    vals = m.values.copy()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        means = np.nanmean(vals[rows], axis=0)
    means = np.where(np.isnan(means), 0.0, means)
    miss = np.isnan(vals)
    vals[miss] = np.broadcast_to(means, vals.shape)[miss]
    return replace(m, values=vals)


def standardize_rescale(m: FeatureMatrix, fit_on="train") -> FeatureMatrix:
    """z-score then min-max to [0, 1] with statistics of the ``fit_on`` split.

    Values outside the fit range are clamped. Features constant on the fit
    split are dropped with a warning.
    """
    m = impute_mean(m, fit_on)
    rows = m.rows(fit_on)
    fit = m.values[rows]
    mu = fit.mean(axis=0)
    sd = fit.std(axis=0)
    keep = np.flatnonzero(sd > 0)
    if len(keep) < m.values.shape[1]:
        dropped = [m.names[i] for i in np.flatnonzero(sd <= 0)]
        warnings.warn(f"dropping constant features: {', '.join(dropped)}", stacklevel=2)
    z = (m.values[:, keep] - mu[keep]) / sd[keep]
    zf = z[rows]
    lo, hi = zf.min(axis=0), zf.max(axis=0)
    out = np.clip((z - lo) / (hi - lo), 0.0, 1.0)
    return replace(m, values=out, names=[m.names[i] for i in keep])


# ---------------------------------------------------------------------------
# recursive feature elimination
# ---------------------------------------------------------------------------

RANKER_PARAMS = {"n_trees": 50, "max_depth": 6, "min_leaf": 2}


def _internal_split(n, seed, frac=0.8):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    cut = int(round(frac * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def rfe_path(X, y, seed: int = 0, stop_at: int = 1, ranker_params: dict | None = None):
    """Eliminate one feature per round until ``stop_at`` remain.

    The ranker is a random forest that sees every feature at each split,
    fit on a seeded 80% of the rows; the least important feature goes.
    Split and elimination ties follow a column-content order rather than
    column position, which keeps the result equivariant under feature
    permutation. Returns the surviving feature sets by size and the
    ranker's AUC on the held-out 20% at each size.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    params = {**RANKER_PARAMS, **(ranker_params or {})}
    tr, va = _internal_split(len(X), seed)
    if len(np.unique(y[tr])) < 2:
        raise ValidationError("internal training split lacks one class")
    alive = list(range(X.shape[1]))
    # lexicographic order of the training columns: a position-free tie-break
    content_rank = np.empty(X.shape[1], np.int64)
    content_rank[np.lexsort(X[tr][::-1])] = np.arange(X.shape[1])
    sets, val_auc = {}, {}
    rnd = 0
    while True:
        sub_rank = content_rank[alive]
        forest = fit_random_forest(X[tr][:, alive], y[tr], max_features=None,
                                   seed=[seed, rnd], priority=np.argsort(sub_rank, kind="stable"), **params)
        sets[len(alive)] = list(alive)
        if len(va) and len(np.unique(y[va])) == 2:
            val_auc[len(alive)] = auc_score(forest.predict_score(X[va][:, alive]), y[va])
        if len(alive) <= stop_at:
            break
        imp = forest.feature_importances
        tied = np.flatnonzero(imp == imp.min())
        worst = int(tied[np.argmin(sub_rank[tied])])
        del alive[worst]
        rnd += 1
    return sets, val_auc


def recursive_feature_elimination(m, k: int | None, seed: int = 0, fit_on="train",
                                  ranker_params: dict | None = None) -> list:
    """Indices (ascending) of the ``k`` surviving features; ``k=None`` picks the
    size with the best internal-validation AUC (smallest on ties)."""
    if isinstance(m, FeatureMatrix):
        m = impute_mean(m, fit_on)
        rows = m.rows(fit_on)
        X, y = m.values[rows], m.target[rows]
    else:
        X, y = m
    n_features = np.asarray(X).shape[1]
    if k is not None:
        if k < 1:
            raise ValidationError("k must be >= 1")
        if k > n_features:
            raise ValidationError(f"k={k} exceeds the {n_features} available features")
        if k == n_features:
            return list(range(n_features))
    sets, val_auc = rfe_path(X, y, seed, stop_at=1 if k is None else k, ranker_params=ranker_params)
    if k is None:
        best = max(val_auc.values())
        k = min(s for s, a in val_auc.items() if a == best)
    return sorted(sets[k])


# ---------------------------------------------------------------------------
# distances and linkage
# ---------------------------------------------------------------------------

def distance_matrix(values) -> np.ndarray:
    """Euclidean distances between case rows."""
    X = np.asarray(values.values if isinstance(values, FeatureMatrix) else values, dtype=np.float64)
    diff = X[:, None, :] - X[None, :, :]
    D = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(D, 0.0)
    return D


@dataclass
class Dendrogram:
    merges: np.ndarray  # (n-1, 4): left id, right id, distance, merged size
    leaf_order: list

    @property
    def n_leaves(self) -> int:
        return len(self.merges) + 1

    @property
    def heights(self) -> np.ndarray:
        return self.merges[:, 2]

    def to_json(self, case_ids=None) -> dict:
        return {
            "n_leaves": self.n_leaves,
            "linkage": "average",
            "merges": [
                {"left": int(a), "right": int(b), "distance": float(d), "size": int(s)}
                for a, b, d, s in self.merges
            ],
            "leaf_order": [int(i) for i in self.leaf_order],
            "case_ids": list(case_ids) if case_ids is not None else None,
        }


def _leaf_order(merges, n):
    order = []
    stack = [n + len(merges) - 1] if len(merges) else [0]
    while stack:
        node = stack.pop()
        if node < n:
            order.append(node)
        else:
            a, b = merges[node - n, :2].astype(int)
            stack.append(b)
            stack.append(a)
    return order


def average_linkage(D) -> Dendrogram:
    """Agglomerative clustering with the mean cross-pair distance between clusters.

    Clusters carry scipy-style ids (leaves ``0..n-1``, merge ``i`` creates
    ``n + i``). Equal distances merge the pair with the smallest
    ``(min id, max id)`` first.
    """
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValidationError("distance matrix must be square")
    n = D.shape[0]
    if n < 2:
        raise ValidationError("need at least two cases to cluster")
    if not np.allclose(D, D.T, rtol=0, atol=0):
        raise ValidationError("distance matrix must be symmetric")
    merges = _kernels.average_linkage_merges(D)
    return Dendrogram(merges, _leaf_order(merges, n))


def cut_largest_gap(dendro: Dendrogram) -> np.ndarray:
    """Flat clusters from cutting just above the merge preceding the largest height jump."""
    n = dendro.n_leaves
    h = dendro.heights
    if len(h) < 2:
        return np.zeros(n, np.int64)
    stop = int(np.argmax(np.diff(h)))  # keep merges 0..stop
    parent = list(range(2 * n - 1))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(stop + 1):
        a, b = int(dendro.merges[i, 0]), int(dendro.merges[i, 1])
        parent[find(a)] = n + i
        parent[find(b)] = n + i
    labels = np.empty(n, np.int64)
    seen = {}
    for leaf in range(n):
        labels[leaf] = seen.setdefault(find(leaf), len(seen))
    return labels


# ---------------------------------------------------------------------------
# heatmap
# ---------------------------------------------------------------------------

def gray_fill(v: float) -> str:
    level = int(round(255 * (1.0 - min(1.0, max(0.0, float(v))))))
    return f"#{level:02x}{level:02x}{level:02x}"


def heatmap_svg(m: FeatureMatrix, dendro: Dendrogram, out, cell: int = 14) -> None:
    """Rows in dendrogram leaf order, a cohort colour band on the left, feature names on top."""
    n, f = m.values.shape
    if dendro.n_leaves != n:
        raise ValidationError("dendrogram and feature matrix disagree on case count")
    label_h = 120
    dendro_w = 100
    band_w = cell
    x0 = dendro_w + band_w + 4
    width = x0 + f * cell + 10
    height = label_h + n * cell + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">']
    order = dendro.leaf_order
    row_of = {leaf: r for r, leaf in enumerate(order)}
    # dendrogram links
    hmax = float(dendro.heights.max()) if len(dendro.heights) and dendro.heights.max() > 0 else 1.0
    pos = {leaf: (dendro_w, label_h + (row_of[leaf] + 0.5) * cell) for leaf in range(n)}
    for i, (a, b, d, _) in enumerate(dendro.merges):
        xa, ya = pos[int(a)]
        xb, yb = pos[int(b)]
        x = dendro_w - (d / hmax) * (dendro_w - 4)
        parts.append(f'<path class="dendro-link" d="M{xa:.2f},{ya:.2f} H{x:.2f} V{yb:.2f} H{xb:.2f}" '
                     f'fill="none" stroke="black" stroke-width="0.7"/>')
        pos[n + i] = (x, 0.5 * (ya + yb))
    for r, leaf in enumerate(order):
        y = label_h + r * cell
        color = COHORT_COLORS.get(m.cohorts[leaf], "#999999")
        parts.append(f'<rect class="band" x="{dendro_w + 2}" y="{y}" width="{band_w}" height="{cell}" '
                     f'fill="{color}"><title>{escape(str(m.cohorts[leaf]))}</title></rect>')
        for c in range(f):
            v = m.values[leaf, c]
            parts.append(f'<rect class="cell" x="{x0 + c * cell}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="{gray_fill(v)}"/>')
    for c, name in enumerate(m.names):
        x = x0 + c * cell + cell / 2
        parts.append(f'<text class="feature-label" x="{x}" y="{label_h - 4}" font-size="10" '
                     f'transform="rotate(-60 {x} {label_h - 4})">{escape(str(name))}</text>')
    parts.append("</svg>")
    try:
        with open(out, "w") as fh:
            fh.write("\n".join(parts) + "\n")
    except OSError as exc:
        raise ValidationError(f"cannot write {out}: {exc}") from exc


def write_dendrogram(dendro: Dendrogram, path, case_ids=None) -> None:
    with open(path, "w") as fh:
        json.dump(dendro.to_json(case_ids), fh, indent=1)
        fh.write("\n")
