"""Decision trees, random forest (M1), boosted-tree leaf embedding + logistic regression (M2)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import _kernels
from .errors import ConvergenceError, ValidationError

MODEL_FORMAT = "ctseverity-model"
MODEL_VERSION = 1


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_xy(X, y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ValidationError("X must be (n, d) with one label per row")
    if len(y) < 2:
        raise ValidationError("need at least two samples")
    if not np.all(np.isfinite(X)):
        raise ValidationError("X contains non-finite values")
    y = y.astype(np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be binary 0/1")
    if y.min() == y.max():
        raise ValidationError("both classes must be present")
    return X, y


# ---------------------------------------------------------------------------
# trees
# ---------------------------------------------------------------------------

@dataclass
class Tree:
    """Flat binary tree. Internal nodes have ``feature >= 0``; leaves carry
    ``value`` and a dense ``leaf_index`` numbered depth-first, left first."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    leaf_index: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                break
            rows = np.flatnonzero(inner)
            n = node[rows]
            go_left = X[rows, self.feature[n]] <= self.threshold[n]
            node[rows] = np.where(go_left, self.left[n], self.right[n])
        return self.leaf_index[node]

    def predict(self, X) -> np.ndarray:
        leaves = self.apply(X)
        return self._leaf_values()[leaves]

    def _leaf_values(self) -> np.ndarray:
        vals = np.empty(self.n_leaves)
        is_leaf = self.feature < 0
        vals[self.leaf_index[is_leaf]] = self.value[is_leaf]
        return vals

    def to_json(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "leaf_index": self.leaf_index.tolist(),
        }

    @classmethod
    def from_json(cls, d) -> "Tree":
        return cls(
            np.array(d["feature"], np.int64),
            np.array(d["threshold"], np.float64),
            np.array(d["left"], np.int64),
            np.array(d["right"], np.int64),
            np.array(d["value"], np.float64),
            np.array(d["leaf_index"], np.int64),
        )


def build_tree(X, target, idx, max_depth, min_leaf, max_features, rng, leaf_value=None,
               importances=None, priority=None) -> Tree:
    """Grow a tree on rows ``idx`` greedily minimizing squared error of ``target``.

    With a 0/1 target the criterion is proportional to Gini impurity.
    ``leaf_value(rows)`` overrides the default mean-of-target leaf value.
    Equal-gain splits go to the feature listed first in ``priority``
    (default: ascending feature id).
    """
    n_features = X.shape[1]
    rank = None
    if priority is not None:
        rank = np.empty(n_features, np.int64)
        rank[np.asarray(priority, np.int64)] = np.arange(n_features)
    feature, threshold, left, right, value, leaf_index = [], [], [], [], [], []
    n_leaves = 0
    if leaf_value is None:
        def leaf_value(rows):
            return float(target[rows].mean())

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        leaf_index.append(-1)
        return len(feature) - 1

    def grow(node, rows, depth):
        nonlocal n_leaves
        split = None
        if depth < max_depth and len(rows) >= 2 * min_leaf:
            if max_features is None or max_features >= n_features:
                cand = np.arange(n_features)
            else:
                cand = np.sort(rng.choice(n_features, size=max_features, replace=False))
            if rank is not None:
                cand = cand[np.argsort(rank[cand], kind="stable")]
            f, t, gain = _kernels.best_split(X, target, rows, cand, min_leaf)
            if f >= 0 and gain > 1e-12:
                split = (f, t, gain)
        if split is None:
            value[node] = leaf_value(rows)
            leaf_index[node] = n_leaves
            n_leaves += 1
            return
        f, t, gain = split
        if importances is not None:
            importances[f] += gain
        go_left = X[rows, f] <= t
        feature[node] = f
        threshold[node] = t
        value[node] = float(target[rows].mean())
        lnode = new_node()
        left[node] = lnode
        grow(lnode, rows[go_left], depth + 1)
        rnode = new_node()
        right[node] = rnode
        grow(rnode, rows[~go_left], depth + 1)

    root = new_node()
    grow(root, np.asarray(idx, dtype=np.int64), 0)
    return Tree(
        np.array(feature, np.int64),
        np.array(threshold, np.float64),
        np.array(left, np.int64),
        np.array(right, np.int64),
        np.array(value, np.float64),
        np.array(leaf_index, np.int64),
    )


def _tree_rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# random forest (M1)
# ---------------------------------------------------------------------------

@dataclass
class ForestModel:
    trees: list
    n_features: int
    seed: int = 0
    params: dict = field(default_factory=dict)
    feature_importances: np.ndarray | None = None
    feature_names: list | None = None

    def predict_score(self, X) -> np.ndarray:
        """Mean leaf class-1 frequency across trees."""
        X = _as_rows(X, self.n_features)
        per_tree = np.stack([t.predict(X) for t in self.trees])
        # sorting makes the sum independent of tree order
        return np.sort(per_tree, axis=0).sum(axis=0) / len(self.trees)


def _as_rows(X, n_features):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != n_features:
        raise ValidationError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def _resolve_max_features(max_features, k):
    if max_features == "sqrt":
        return max(1, int(math.sqrt(k)))
    if max_features is None:
        return None
    return int(max_features)


def fit_random_forest(X, y, n_trees: int = 500, max_depth: int = 8, min_leaf: int = 2,
                      max_features="sqrt", seed: int = 0, bootstrap: bool = True,
                      priority=None) -> ForestModel:
    """Bagged Gini trees; tree ``i`` draws its rows and features from the ``i``-th child seed.

    ``priority`` orders features for equal-gain tie-breaks (see :func:`build_tree`).
    """
    X, y = _check_xy(X, y)
    n, k = X.shape
    mf = _resolve_max_features(max_features, k)
    importances = np.zeros(k)
    trees = []
    for rng in _tree_rngs(seed, n_trees):
        idx = rng.integers(0, n, n) if bootstrap else np.arange(n)
        trees.append(build_tree(X, y, idx, max_depth, min_leaf, mf, rng, importances=importances,
                                priority=priority))
    total = importances.sum()
    imp = importances / total if total > 0 else importances
    params = {"n_trees": n_trees, "max_depth": max_depth, "min_leaf": min_leaf,
              "max_features": max_features, "bootstrap": bootstrap}
    return ForestModel(trees, k, seed, params, imp)


# ---------------------------------------------------------------------------
# gradient boosted trees
# ---------------------------------------------------------------------------

def log_loss(y, F) -> float:
    """Mean logistic loss of raw scores ``F``."""
    return float(np.mean(np.logaddexp(0.0, F) - y * F))


@dataclass
class GbtModel:
    trees: list
    init_score: float
    n_features: int
    params: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)

    @property
    def embedding_dim(self) -> int:
        return sum(t.n_leaves for t in self.trees)

    def decision_function(self, X) -> np.ndarray:
        X = _as_rows(X, self.n_features)
        F = np.full(len(X), self.init_score)
        for t in self.trees:
            F += t.predict(X)
        return F

    def leaf_embedding(self, X) -> sp.csr_matrix:
        return leaf_embedding(self, X)


def fit_gbt(X, y, n_estimators: int = 2000, max_depth: int = 3, max_features: int = 3,
            subsample: float = 0.8, learning_rate: float = 0.1, min_leaf: int = 1,
            seed: int = 0) -> GbtModel:
    """Stagewise logistic boosting with Newton leaf values.

    Each tree fits the residuals ``y - p`` on a fresh subsample without
    replacement. After shrinkage, a tree whose step would raise the full
    training loss is halved until it does not (at worst to zero), so the
    recorded loss never increases.
    """
    X, y = _check_xy(X, y)
    n, k = X.shape
    prior = y.mean()
    init = math.log(prior / (1.0 - prior))
    F = np.full(n, init)
    loss = log_loss(y, F)
    history = [loss]
    rng = np.random.default_rng(seed)
    m = max(1, int(round(subsample * n)))
    mf = None if max_features is None or max_features >= k else int(max_features)
    trees = []
    for _ in range(n_estimators):
        p = sigmoid(F)
        resid = y - p
        hess = p * (1.0 - p)
        rows = np.sort(rng.choice(n, size=m, replace=False)) if m < n else np.arange(n)

        def newton(leaf_rows):
            den = hess[leaf_rows].sum()
            if den < 1e-150:
                return 0.0
            return float(resid[leaf_rows].sum() / den)

        tree = build_tree(X, resid, rows, max_depth, min_leaf, mf, rng, leaf_value=newton)
        tree.value *= learning_rate
        step = tree.predict(X)
        new_loss = log_loss(y, F + step)
        scale = 1.0
        for _ in range(40):
            if new_loss <= loss:
                break
            scale *= 0.5
            new_loss = log_loss(y, F + scale * step)
        else:
            scale = 0.0
            new_loss = loss
        if scale != 1.0:
            tree.value *= scale
            step = tree.predict(X)
        F = F + step
        loss = log_loss(y, F) if scale != 0.0 else loss
        trees.append(tree)
        history.append(loss)
    params = {"n_estimators": n_estimators, "max_depth": max_depth, "max_features": max_features,
              "subsample": subsample, "learning_rate": learning_rate, "min_leaf": min_leaf, "seed": seed}
    return GbtModel(trees, init, k, params, history)


def leaf_embedding(model: GbtModel, X) -> sp.csr_matrix:
    """One-hot reached leaf per tree, concatenated; each row has one 1 per tree."""
    X = _as_rows(X, model.n_features)
    n = len(X)
    cols = np.empty((n, len(model.trees)), np.int64)
    offset = 0
    for j, t in enumerate(model.trees):
        cols[:, j] = t.apply(X) + offset
        offset += t.n_leaves
    data = np.ones(cols.size)
    indptr = np.arange(0, cols.size + 1, len(model.trees))
    return sp.csr_matrix((data, cols.ravel(), indptr), shape=(n, offset))


# ---------------------------------------------------------------------------
# L2 logistic regression
# ---------------------------------------------------------------------------

def balanced_class_weights(y) -> dict:
    y = np.asarray(y)
    n = len(y)
    return {c: n / (2.0 * int((y == c).sum())) for c in (0, 1)}


def logistic_objective(w, b, E, y, C, sample_weight):
    """``(1/C)·½‖w‖² + Σ cw_i·logloss_i`` with its gradient ``(g_w, g_b)``."""
    z = E @ w + b
    loss = float(np.sum(sample_weight * (np.logaddexp(0.0, z) - y * z)))
    obj = 0.5 * float(w @ w) / C + loss
    r = sample_weight * (sigmoid(z) - y)
    gw = w / C + E.T @ r
    gb = float(r.sum())
    return obj, np.asarray(gw).ravel(), gb


@dataclass
class LinearModel:
    w: np.ndarray
    b: float
    C: float
    class_weights: dict
    n_iter: int = 0
    grad_norm: float = 0.0

    def decision_function(self, E) -> np.ndarray:
        return np.asarray(E @ self.w).ravel() + self.b

    def predict_score(self, E) -> np.ndarray:
        return sigmoid(self.decision_function(E))


def fit_logistic(E, y, C: float = 0.2, class_weight="balanced", w0=None, b0: float = 0.0,
                 tol: float = 1e-6, max_iter: int = 200) -> LinearModel:
    """Damped Newton on the regularized weighted log-loss; the bias is not penalized.

    The Newton system is solved in sample space (Woodbury identity plus a
    Schur complement for the bias), so each step costs one n×n Cholesky.
    Stops at ``‖∇‖ < tol``; raises :class:`ConvergenceError` otherwise.
    """
    y = np.asarray(y, dtype=np.float64)
    if E.shape[0] != len(y):
        raise ValidationError("E and y disagree in length")
    if E.shape[1] < 1:
        raise ValidationError("need at least one feature")
    if not C > 0:
        raise ValidationError("C must be positive")
    if class_weight == "balanced":
        cw = balanced_class_weights(y)
    elif class_weight is None:
        cw = {0: 1.0, 1: 1.0}
    else:
        cw = {int(k): float(v) for k, v in dict(class_weight).items()}
    sw = np.where(y == 1, cw[1], cw[0])
    E = sp.csr_matrix(E) if sp.issparse(E) else np.asarray(E, dtype=np.float64)
    d = E.shape[1]
    lam = 1.0 / C
    w = np.zeros(d) if w0 is None else np.asarray(w0, dtype=np.float64).copy()
    b = float(b0)
    G = E @ E.T
    G = G.toarray() if sp.issparse(G) else np.asarray(G)
    n = len(y)
    obj, gw, gb = logistic_objective(w, b, E, y, C, sw)
    gnorm = math.sqrt(float(gw @ gw) + gb * gb)
    it = 0
    while gnorm >= tol:
        if it >= max_iter:
            raise ConvergenceError(f"logistic regression did not converge; |grad| = {gnorm:.3e}", gnorm)
        it += 1
        p = sigmoid(E @ w + b)
        s = np.maximum(sw * p * (1.0 - p), 1e-300)
        root = np.sqrt(s)
        K = lam * np.eye(n) + root[:, None] * G * root[None, :]
        cho = scipy.linalg.cho_factor(K)

        def m_inv(v):
            t = root * np.asarray(E @ v).ravel()
            t = scipy.linalg.cho_solve(cho, t)
            return (v - np.asarray(E.T @ (root * t)).ravel()) / lam

        u = np.asarray(E.T @ s).ravel()
        m_gw = m_inv(gw)
        m_u = m_inv(u)
        schur = s.sum() - float(u @ m_u)
        db = (gb - float(u @ m_gw)) / schur if schur > 0 else 0.0
        dw = m_gw - m_u * db
        # backtracking line search (Armijo)
        slope = float(gw @ dw) + gb * db
        step = 1.0
        while True:
            w_new, b_new = w - step * dw, b - step * db
            obj_new, gw_new, gb_new = logistic_objective(w_new, b_new, E, y, C, sw)
            if obj_new <= obj - 1e-4 * step * slope or step < 1e-10:
                break
            step *= 0.5
        w, b, obj, gw, gb = w_new, b_new, obj_new, gw_new, gb_new
        gnorm = math.sqrt(float(gw @ gw) + gb * gb)
    return LinearModel(w, b, C, cw, it, gnorm)


# ---------------------------------------------------------------------------
# M2 = boosted-tree embedding + logistic regression
# ---------------------------------------------------------------------------

@dataclass
class EmbeddedLogisticModel:
    gbt: GbtModel
    linear: LinearModel
    include_raw: bool = False
    feature_names: list | None = None

    def features(self, X):
        X = _as_rows(X, self.gbt.n_features)
        E = leaf_embedding(self.gbt, X)
        if self.include_raw:
            E = sp.hstack([E, sp.csr_matrix(X)], format="csr")
        return E

    def predict_score(self, X) -> np.ndarray:
        return self.linear.predict_score(self.features(X))


def fit_m2(X, y, gbt_params: dict | None = None, C: float = 0.2, include_raw: bool = False,
           seed: int = 0) -> EmbeddedLogisticModel:
    gbt = fit_gbt(X, y, seed=seed, **(gbt_params or {}))
    model = EmbeddedLogisticModel(gbt, None, include_raw)
    lin = fit_logistic(model.features(X), y, C=C)
    model.linear = lin
    return model


def predict_score(model, X) -> np.ndarray:
    return model.predict_score(X)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def model_to_json(model) -> dict:
    head = {"format": MODEL_FORMAT, "version": MODEL_VERSION}
    if isinstance(model, ForestModel):
        return {
            **head,
            "kind": "m1",
            "n_features": model.n_features,
            "seed": model.seed,
            "params": model.params,
            "feature_names": model.feature_names,
            "feature_importances": None if model.feature_importances is None else model.feature_importances.tolist(),
            "trees": [t.to_json() for t in model.trees],
        }
    if isinstance(model, EmbeddedLogisticModel):
        g, lin = model.gbt, model.linear
        return {
            **head,
            "kind": "m2",
            "feature_names": model.feature_names,
            "include_raw": model.include_raw,
            "gbt": {
                "n_features": g.n_features,
                "init_score": g.init_score,
                "params": g.params,
                "trees": [t.to_json() for t in g.trees],
            },
            "linear": {
                "w": lin.w.tolist(),
                "b": lin.b,
                "C": lin.C,
                "class_weights": {str(k): v for k, v in lin.class_weights.items()},
            },
        }
    raise ValidationError(f"cannot serialize {type(model).__name__}")


def model_from_json(d: dict):
    if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
        raise ValidationError("not a ctseverity model file")
    if d.get("version") != MODEL_VERSION:
        raise ValidationError(f"unsupported model version {d.get('version')!r}")
    try:
        if d["kind"] == "m1":
            imp = d.get("feature_importances")
            return ForestModel(
                [Tree.from_json(t) for t in d["trees"]],
                int(d["n_features"]),
                int(d["seed"]),
                d.get("params", {}),
                None if imp is None else np.array(imp),
                d.get("feature_names"),
            )
        if d["kind"] == "m2":
            g = d["gbt"]
            gbt = GbtModel([Tree.from_json(t) for t in g["trees"]], float(g["init_score"]),
                           int(g["n_features"]), g.get("params", {}))
            lin = d["linear"]
            linear = LinearModel(np.array(lin["w"], np.float64), float(lin["b"]), float(lin["C"]),
                                 {int(k): v for k, v in lin["class_weights"].items()})
            return EmbeddedLogisticModel(gbt, linear, bool(d.get("include_raw", False)), d.get("feature_names"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed model file: {exc}") from exc
    raise ValidationError(f"unknown model kind {d.get('kind')!r}")


def serialize_model(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_json(model), fh)


def deserialize_model(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"cannot parse model file {path}: {exc}") from exc
    except OSError as exc:
        raise ValidationError(f"cannot read model file {path}: {exc}") from exc
    return model_from_json(d)
