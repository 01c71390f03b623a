import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from ctseverity.errors import ConvergenceError, ValidationError
from ctseverity.evaluation import auc_score
from ctseverity.forest import (
    MODEL_VERSION,
    ForestModel,
    Tree,
    balanced_class_weights,
    deserialize_model,
    fit_gbt,
    fit_logistic,
    fit_m2,
    fit_random_forest,
    leaf_embedding,
    log_loss,
    logistic_objective,
    predict_score,
    serialize_model,
    sigmoid,
)


def threshold_data(seed=0, n=80):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, 4))
    y = (X[:, 0] > 0.2).astype(float)
    return X, y


def xor_data(seed=0, n=200):
    r = np.random.default_rng(seed)
    X = r.uniform(-1, 1, size=(n, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(float)
    return X, y


def constant_tree(value):
    return Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                np.array([float(value)]), np.array([0]))


# --------------------------------------------------------------------- forest

def test_forest_separable_training_accuracy():
    X, y = threshold_data()
    rf = fit_random_forest(X, y, n_trees=50, seed=1)
    pred = predict_score(rf, X) >= 0.5
    assert np.mean(pred == y.astype(bool)) == 1.0


def test_stump_is_class_prior():
    X, y = threshold_data()
    rf = fit_random_forest(X, y, n_trees=1, max_depth=0, bootstrap=False)
    assert np.allclose(rf.predict_score(X), y.mean())


def test_xor_auc():
    X, y = xor_data()
    rf = fit_random_forest(X, y, n_trees=100, max_depth=6, max_features=None, seed=3)
    assert auc_score(rf.predict_score(X), y) > 0.95


def test_constant_trees_score_one():
    model = ForestModel([constant_tree(1.0)] * 5, n_features=3)
    assert np.all(model.predict_score(np.zeros((4, 3))) == 1.0)


def test_forest_deterministic_and_tree_order_invariant():
    X, y = xor_data(1, 120)
    a = fit_random_forest(X, y, n_trees=20, seed=7)
    b = fit_random_forest(X, y, n_trees=20, seed=7)
    Xq = np.random.default_rng(0).uniform(-1, 1, size=(50, 2))
    s = a.predict_score(Xq)
    assert np.array_equal(s, b.predict_score(Xq))
    shuffled = ForestModel(a.trees[::-1], a.n_features)
    assert np.array_equal(s, shuffled.predict_score(Xq))


def test_trees_well_formed():
    X, y = xor_data(2, 150)
    rf = fit_random_forest(X, y, n_trees=10, seed=0)
    for t in rf.trees:
        inner = t.feature >= 0
        assert np.all(t.feature[inner] < rf.n_features)
        assert np.all(np.isfinite(t.threshold))
        assert sorted(t.leaf_index[~inner]) == list(range(t.n_leaves))


@pytest.mark.parametrize("bad_y", [np.zeros(10), np.ones(10)])
def test_single_class_rejected(bad_y):
    with pytest.raises(ValidationError):
        fit_random_forest(np.zeros((10, 2)), bad_y)
    with pytest.raises(ValidationError):
        fit_gbt(np.zeros((10, 2)), bad_y, n_estimators=2)


def test_dimension_mismatch():
    X, y = threshold_data()
    rf = fit_random_forest(X, y, n_trees=3)
    with pytest.raises(ValidationError):
        rf.predict_score(np.zeros((2, 3)))


def node_rows(tree, X):
    """Training rows reaching each node."""
    out = {0: np.arange(len(X))}
    for node in range(len(tree.feature)):
        f = tree.feature[node]
        if f < 0 or node not in out:
            continue
        rows = out[node]
        left = X[rows, f] <= tree.threshold[node]
        out[tree.left[node]] = rows[left]
        out[tree.right[node]] = rows[~left]
    return out


@given(st.integers(0, 10_000))
def test_monotone_transform_preserves_routing(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(60, 3))
    y = (X[:, 0] + X[:, 1] ** 2 + 0.3 * r.normal(size=60) > 0.5).astype(float)
    if y.min() == y.max():
        return
    g = np.cbrt  # strictly increasing
    Xg = g(X)
    a = fit_random_forest(X, y, n_trees=5, seed=seed, bootstrap=False)
    b = fit_random_forest(Xg, y, n_trees=5, seed=seed, bootstrap=False)
    for ta, tb in zip(a.trees, b.trees):
        assert np.array_equal(ta.feature, tb.feature)
        assert np.array_equal(ta.apply(X), tb.apply(Xg))
        rows = node_rows(ta, X)
        for node in np.flatnonzero(ta.feature >= 0):
            col = X[rows[node], ta.feature[node]]
            below = col[col <= ta.threshold[node]].max()
            above = col[col > ta.threshold[node]].min()
            # the refit threshold separates the mapped neighbours
            assert g(below) <= tb.threshold[node] < g(above)


# ----------------------------------------------------------------------- GBT

def test_gbt_initial_log_odds():
    X, y = threshold_data(3)
    g = fit_gbt(X, y, n_estimators=0)
    p = y.mean()
    assert g.init_score == pytest.approx(np.log(p / (1 - p)), abs=1e-15)
    assert np.allclose(g.decision_function(X), g.init_score)


@given(st.integers(0, 10_000))
def test_gbt_loss_nonincreasing(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(50, 5))
    y = (r.random(50) < 0.5).astype(float)
    y[:2] = [0, 1]
    g = fit_gbt(X, y, n_estimators=40, seed=seed)
    h = np.array(g.loss_history)
    assert np.all(np.diff(h) <= 0)
    assert h[-1] == pytest.approx(log_loss(y, g.decision_function(X)), rel=1e-12)


def test_gbt_separable_one_feature():
    X = np.linspace(-1, 1, 60)[:, None]
    y = (X[:, 0] > 0.1).astype(float)
    g = fit_gbt(X, y, n_estimators=200, max_features=1, seed=0)
    assert auc_score(g.decision_function(X), y) == 1.0


def test_gbt_shape_contract():
    r = np.random.default_rng(0)
    X = r.normal(size=(80, 32))
    y = (X[:, 0] > 0).astype(float)
    g = fit_gbt(X, y, n_estimators=30, seed=2)
    assert len(g.trees) == 30
    assert all(t.n_leaves <= 8 for t in g.trees)
    assert g.embedding_dim == sum(t.n_leaves for t in g.trees)


def test_gbt_deterministic():
    X, y = xor_data(4, 100)
    a = fit_gbt(X, y, n_estimators=20, max_features=2, seed=5)
    b = fit_gbt(X, y, n_estimators=20, max_features=2, seed=5)
    assert np.array_equal(a.decision_function(X), b.decision_function(X))


# ------------------------------------------------------------------ embedding

@given(st.integers(0, 10_000))
def test_embedding_one_hot_per_tree(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(40, 4))
    y = (X[:, 0] * X[:, 1] > 0).astype(float)
    y[:2] = [0, 1]
    g = fit_gbt(X, y, n_estimators=15, max_features=2, seed=seed)
    Xq = r.normal(scale=100.0, size=(25, 4))
    E = leaf_embedding(g, Xq)
    assert sp.issparse(E)
    assert E.shape == (25, g.embedding_dim)
    assert np.all(E.data == 1.0)
    assert np.all(np.diff(E.indptr) == len(g.trees))
    offsets = np.cumsum([0] + [t.n_leaves for t in g.trees])
    cols = E.indices.reshape(25, -1)
    for j in range(len(g.trees)):
        assert np.all((cols[:, j] >= offsets[j]) & (cols[:, j] < offsets[j + 1]))


def test_embedding_same_leaves_same_vector():
    X, y = threshold_data(5)
    g = fit_gbt(X, y, n_estimators=10, seed=0)
    E = leaf_embedding(g, np.vstack([X[0], X[0] + 1e-12])).toarray()
    assert np.array_equal(E[0], E[1])


def test_embedding_dimension_mismatch():
    X, y = threshold_data()
    g = fit_gbt(X, y, n_estimators=3)
    with pytest.raises(ValidationError):
        leaf_embedding(g, np.zeros(3))


# ------------------------------------------------------------------- logistic

def test_balanced_weights():
    assert balanced_class_weights([0, 1, 0, 1]) == {0: 1.0, 1: 1.0}
    assert balanced_class_weights([0, 0, 0, 1]) == {0: 4 / 6, 1: 2.0}


def fd_check(E, y, C, sw, seed):
    r = np.random.default_rng(seed)
    w = r.normal(size=E.shape[1])
    b = float(r.normal())
    _, gw, gb = logistic_objective(w, b, E, y, C, sw)
    eps = 1e-6
    num = np.empty(len(w) + 1)
    for i in range(len(w)):
        d = np.zeros_like(w)
        d[i] = eps
        num[i] = (logistic_objective(w + d, b, E, y, C, sw)[0] - logistic_objective(w - d, b, E, y, C, sw)[0]) / (2 * eps)
    num[-1] = (logistic_objective(w, b + eps, E, y, C, sw)[0] - logistic_objective(w, b - eps, E, y, C, sw)[0]) / (2 * eps)
    ana = np.r_[gw, gb]
    return np.max(np.abs(ana - num)) / max(np.max(np.abs(num)), 1e-12)


@given(st.integers(0, 10_000))
def test_logistic_gradient_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    E = r.normal(size=(30, 5))
    y = (r.random(30) < 0.4).astype(float)
    sw = r.uniform(0.5, 2.0, size=30)
    assert fd_check(E, y, 0.2, sw, seed) < 1e-6


def test_logistic_converges_independent_of_start():
    r = np.random.default_rng(0)
    E = sp.csr_matrix((r.random((60, 40)) < 0.2).astype(float))
    y = (r.random(60) < 0.3).astype(float)
    y[:2] = [0, 1]
    a = fit_logistic(E, y, C=0.2)
    b = fit_logistic(E, y, C=0.2, w0=r.normal(size=40) * 3, b0=-2.0)
    assert a.grad_norm < 1e-6 and b.grad_norm < 1e-6
    sw = np.where(y == 1, a.class_weights[1], a.class_weights[0])
    fa = logistic_objective(a.w, a.b, E, y, 0.2, sw)[0]
    fb = logistic_objective(b.w, b.b, E, y, 0.2, sw)[0]
    assert abs(fa - fb) < 1e-8


def test_logistic_separable_finite():
    E = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0, 0, 1, 1.0])
    m = fit_logistic(E, y, C=0.2)
    assert np.all(np.isfinite(m.w)) and np.isfinite(m.b)
    assert m.w[0] > 0


def test_logistic_nonconvergence_reports_gradient():
    E = np.random.default_rng(0).normal(size=(20, 3))
    y = np.r_[np.zeros(10), np.ones(10)]
    with pytest.raises(ConvergenceError) as info:
        fit_logistic(E, y, C=1e6, max_iter=1, tol=1e-300)
    assert "grad" in str(info.value)


def test_logistic_rejects_empty_features():
    with pytest.raises(ValidationError):
        fit_logistic(np.zeros((4, 0)), np.array([0, 1, 0, 1.0]))


def test_zero_weights_score_half():
    X, y = threshold_data()
    m = fit_m2(X, y, gbt_params={"n_estimators": 5})
    m.linear.w[:] = 0.0
    m.linear.b = 0.0
    assert np.all(m.predict_score(X) == 0.5)


def test_m2_score_recomputed_independently():
    X, y = xor_data(6, 80)
    m = fit_m2(X, y, gbt_params={"n_estimators": 20, "max_features": 2}, seed=1)
    x = X[3]
    # route by hand through every tree
    e = []
    for t in m.gbt.trees:
        node = 0
        while t.feature[node] >= 0:
            node = t.left[node] if x[t.feature[node]] <= t.threshold[node] else t.right[node]
        one_hot = np.zeros(t.n_leaves)
        one_hot[t.leaf_index[node]] = 1.0
        e.append(one_hot)
    e = np.concatenate(e)
    expected = 1.0 / (1.0 + np.exp(-(e @ m.linear.w + m.linear.b)))
    assert m.predict_score(x)[0] == pytest.approx(expected, rel=1e-12)


def test_m2_include_raw_widens_features():
    X, y = threshold_data()
    m = fit_m2(X, y, gbt_params={"n_estimators": 4}, include_raw=True)
    assert len(m.linear.w) == m.gbt.embedding_dim + X.shape[1]


def test_sigmoid_stable():
    s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.array_equal(s, [0.0, 0.5, 1.0])


# -------------------------------------------------------------- serialization

@pytest.mark.parametrize("kind", ["m1", "m2"])
def test_round_trip_bit_identical(tmp_path, kind):
    X, y = xor_data(7, 100)
    if kind == "m1":
        model = fit_random_forest(X, y, n_trees=15, seed=2)
    else:
        model = fit_m2(X, y, gbt_params={"n_estimators": 15, "max_features": 2}, seed=2)
    path = tmp_path / "model.json"
    serialize_model(model, path)
    back = deserialize_model(path)
    Xq = np.random.default_rng(1).normal(size=(100, 2))
    assert np.array_equal(model.predict_score(Xq), back.predict_score(Xq))


def test_truncated_file(tmp_path):
    X, y = threshold_data()
    path = tmp_path / "m.json"
    serialize_model(fit_random_forest(X, y, n_trees=2), path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(ValidationError, match="parse"):
        deserialize_model(path)


def test_version_mismatch(tmp_path):
    X, y = threshold_data()
    path = tmp_path / "m.json"
    serialize_model(fit_random_forest(X, y, n_trees=2), path)
    d = json.loads(path.read_text())
    d["version"] = MODEL_VERSION + 1
    path.write_text(json.dumps(d))
    with pytest.raises(ValidationError, match="unsupported model version"):
        deserialize_model(path)
