import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flexifal.core import Box
from flexifal.dtree import (TIE_RTOL, ContractError, DecisionTree, TreeNode, TreeParams, best_split,
                            explanation_box, find_falsifying_leaves, find_nearest_leaves, fit, gen_explanation,
                            predict)

from oracles import exhaustive_split

NAN = float("nan")


def leaf(i, parent, value, count=1):
    return TreeNode(i, parent, -1, NAN, -1, -1, value, count)


def inner(i, parent, feature, threshold, left, right, value=0.0, count=2):
    return TreeNode(i, parent, feature, threshold, left, right, value, count)


def falsifying_figure_tree():
    # root: phi <= 7.525; its left child: phi <= 4.18 whose left leaf predicts a violation
    nodes = [inner(0, -1, 0, 7.525, 1, 4), inner(1, 0, 0, 4.18, 2, 3), leaf(2, 1, -2.97), leaf(3, 1, 1.4),
             leaf(4, 0, 5.2)]
    return DecisionTree(nodes, 2, ["phi", "psi"])


def nearest_figure_tree():
    # no negative leaf; the one closest to zero sits right of psi <= 5.38 then right of phi <= 7.525
    nodes = [inner(0, -1, 1, 5.38, 1, 2), leaf(1, 0, 6.1), inner(2, 0, 0, 7.525, 3, 4), leaf(3, 2, 4.7),
             leaf(4, 2, 3.51)]
    return DecisionTree(nodes, 2, ["phi", "psi"])


def test_figure_explanation_from_falsifying_leaf():
    tree = falsifying_figure_tree()
    assert find_falsifying_leaves(tree) == [2]
    assert gen_explanation(tree, 2).render() == "(phi ≤ 4.18 ∧ phi ≤ 7.525)"


def test_figure_explanation_from_nearest_leaf():
    tree = nearest_figure_tree()
    assert find_falsifying_leaves(tree) == []
    assert find_nearest_leaves(tree) == [4]
    assert gen_explanation(tree, 4).render() == "(phi > 7.525 ∧ psi > 5.38)"


def test_nearest_leaves_refused_when_falsifying_exist():
    with pytest.raises(ContractError):
        find_nearest_leaves(falsifying_figure_tree())


def test_nearest_leaves_uses_absolute_value_and_keeps_ties():
    nodes = [inner(0, -1, 0, 1.0, 1, 2), leaf(1, 0, 0.5), leaf(2, 0, 0.5)]
    assert find_nearest_leaves(DecisionTree(nodes, 1)) == [1, 2]


def test_root_leaf_explanation_is_true():
    tree = fit(np.zeros((3, 1)), np.ones(3))
    assert len(tree) == 1
    exp = gen_explanation(tree, 0)
    assert exp.render() == "True"
    assert explanation_box(exp, Box([0], [1])) == Box([0], [1])


def test_falsifying_leaves_sorted_by_value_then_id():
    nodes = [inner(0, -1, 0, 1.0, 1, 2), leaf(1, 0, -1.0), inner(2, 0, 0, 2.0, 3, 4), leaf(3, 2, -3.0),
             leaf(4, 2, -1.0)]
    assert find_falsifying_leaves(DecisionTree(nodes, 1)) == [3, 1, 4]


def test_collapsed_intervals():
    exp = gen_explanation(falsifying_figure_tree(), 2)
    assert exp.intervals() == {0: (-np.inf, 4.18)}
    assert exp.collapsed().render(ascii=True) == "(phi <= 4.18)"


def test_explanation_box_empty_intersection():
    exp = gen_explanation(nearest_figure_tree(), 4)
    assert explanation_box(exp, Box([0, 0], [7.0, 10.0])) is None


def test_strict_bound_is_excluded_from_box():
    exp = gen_explanation(nearest_figure_tree(), 4)
    box = explanation_box(exp, Box([0, 0], [10.0, 10.0]))
    assert box.lows[0] > 7.525 and box.lows[1] > 5.38


def test_fit_single_split_exact():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([1.0, 1.0, 5.0, 5.0])
    tree = fit(X, y)
    assert len(tree) == 3 and tree.nodes[0].threshold == 1.5
    assert tree.predict(X).tolist() == y.tolist()


def test_threshold_when_midpoint_rounds_onto_upper_value():
    a = 1.0
    b = np.nextafter(a, 2.0)
    tree = fit(np.array([[a], [b]]), np.array([0.0, 1.0]))
    assert tree.predict(np.array([[a], [b]])).tolist() == [0.0, 1.0]


def test_params_limit_growth():
    rng = np.random.default_rng(0)
    X, y = rng.uniform(size=(60, 2)), rng.normal(size=60)
    assert fit(X, y, TreeParams(max_depth=2)).depth <= 2
    t = fit(X, y, TreeParams(min_samples_leaf=10))
    assert min(t.nodes[i].count for i in t.leaves) >= 10
    t = fit(X, y, TreeParams(min_samples_split=30))
    assert all(t.nodes[i].count >= 30 for i in range(len(t)) if not t.nodes[i].is_leaf)


def test_json_round_trip_and_render():
    rng = np.random.default_rng(3)
    X, y = rng.uniform(size=(30, 3)), rng.normal(size=30)
    tree = fit(X, y, feature_names=["a", "b", "c"])
    again = DecisionTree.from_json(json.loads(tree.dumps()))
    assert again == tree
    assert np.array_equal(again.predict(X), tree.predict(X))
    assert "a <=" in tree.render() or "b <=" in tree.render() or "c <=" in tree.render()


def test_preorder_numbering():
    rng = np.random.default_rng(5)
    tree = fit(rng.uniform(size=(40, 2)), rng.normal(size=40))
    for nd in tree.nodes:
        if not nd.is_leaf:
            assert nd.left == nd.id + 1 and nd.right > nd.left


def _random_dataset(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 21))
    d = int(rng.integers(1, 4))
    # coarse grids make ties and duplicate values common
    X = rng.integers(0, 4, size=(n, d)).astype(float) / 2
    y = rng.integers(-3, 4, size=n).astype(float)
    return X, y


def _oracle_choice(X, y, min_leaf=1):
    parent, cands = exhaustive_split(X, y, min_leaf)
    if not cands or parent <= 0:
        return None
    gmax = max(g for g, _, _ in cands)
    tol = TIE_RTOL * parent
    if gmax <= tol:
        return None
    best = [(f, t) for g, f, t in cands if g >= gmax - tol]
    return min(best)


@given(st.integers(0, 2**32 - 1))
def test_split_matches_exhaustive_enumeration(seed):
    X, y = _random_dataset(seed)
    got = best_split(X, y)
    want = _oracle_choice(X, y)
    if want is None:
        assert got is None
    else:
        assert got is not None and (got[1], got[2]) == want


@given(st.integers(0, 2**32 - 1))
def test_every_node_split_and_leaf_mean(seed):
    X, y = _random_dataset(seed)
    tree = fit(X, y)
    ids = tree.apply(X)
    for nd in tree.nodes:
        rows = _rows_of(tree, X, nd.id)
        assert nd.count == len(rows)
        if nd.is_leaf:
            assert nd.value == np.mean(y[rows])
            assert np.all(ids[rows] == nd.id)
        else:
            assert (nd.feature, nd.threshold) == _oracle_choice(X[rows], y[rows])


def _rows_of(tree, X, node_id):
    path = []
    cur = tree.nodes[node_id]
    while cur.parent >= 0:
        par = tree.nodes[cur.parent]
        path.append((par.feature, par.threshold, par.left == cur.id))
        cur = par
    mask = np.ones(len(X), dtype=bool)
    for f, t, left in path:
        mask &= (X[:, f] <= t) if left else (X[:, f] > t)
    return np.flatnonzero(mask)


@given(st.integers(0, 2**32 - 1))
def test_predict_one_matches_vectorised(seed):
    rng = np.random.default_rng(seed)
    X, y = rng.uniform(size=(25, 2)), rng.normal(size=25)
    tree = fit(X, y)
    Q = rng.uniform(-0.2, 1.2, size=(20, 2))
    assert [predict(tree, q) for q in Q] == tree.predict(Q).tolist()


@given(st.integers(0, 2**32 - 1))
def test_explanation_box_routes_to_its_leaf(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    X = rng.uniform(-1, 1, size=(40, d))
    y = np.sin(3 * X).sum(axis=1) + rng.normal(scale=0.1, size=40)
    tree = fit(X, y, TreeParams(max_depth=int(rng.integers(1, 6))))
    space = Box(-np.ones(d), np.ones(d))
    for lf in tree.leaves:
        exp = gen_explanation(tree, lf)
        box = explanation_box(exp, space)
        if box is None:
            continue
        pts = box.sample(rng, 200)
        assert np.all(tree.apply(pts) == lf)
        assert all(exp.holds(p) for p in pts)
