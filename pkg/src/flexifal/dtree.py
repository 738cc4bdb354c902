"""CART regression trees over robustness data, falsifying-leaf search and explanations.

Routing convention: ``x[feature] <= threshold`` goes left, otherwise right.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Box

GREATER_NUDGE = 1e-9
# gains within this fraction of the node's SSE are treated as ties
TIE_RTOL = 1e-9


class ContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class TreeParams:
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_depth: int | None = None

    def __post_init__(self):
        if self.min_samples_split < 2 or self.min_samples_leaf < 1:
            raise ValueError("min_samples_split >= 2 and min_samples_leaf >= 1 required")


@dataclass(frozen=True)
class TreeNode:
    id: int
    parent: int  # -1 at the root
    feature: int  # -1 for leaves
    threshold: float
    left: int
    right: int
    value: float  # mean target of the training rows routed here
    count: int

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


def _sse(y: np.ndarray) -> float:
    c = y - y.mean()
    return float(c @ c)


def best_split(X: np.ndarray, y: np.ndarray, min_leaf: int = 1):
    """Exhaustive best split ``(gain, feature, threshold)`` by SSE decrease, or ``None``.

    Ties (within ``TIE_RTOL`` of the node SSE) go to the lowest feature index,
    then the lowest threshold.
    """
    n, d = X.shape
    parent = _sse(y)
    if n < 2 * min_leaf or parent <= 0.0:
        return None
    yc = y - y.mean()
    cands = []  # (feature, thresholds, gains)
    for f in range(d):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], yc[order]
        cs, cs2 = np.cumsum(ys), np.cumsum(ys * ys)
        p = np.arange(1, n)
        valid = (xs[:-1] < xs[1:]) & (p >= min_leaf) & (n - p >= min_leaf)
        if not valid.any():
            continue
        p = p[valid]
        sl, sl2 = cs[p - 1], cs2[p - 1]
        sr, sr2 = cs[-1] - sl, cs2[-1] - sl2
        sse_l = sl2 - sl * sl / p
        sse_r = sr2 - sr * sr / (n - p)
        gains = parent - sse_l - sse_r
        lo, hi = xs[p - 1], xs[p]
        thr = (lo + hi) / 2.0
        thr = np.where(thr >= hi, lo, thr)
        cands.append((f, thr, gains))
    if not cands:
        return None
    gmax = max(float(g.max()) for _, _, g in cands)
    tol = TIE_RTOL * parent
    if gmax <= tol:
        return None
    for f, thr, gains in cands:
        ok = gains >= gmax - tol
        if ok.any():
            return float(gains[ok].max()), f, float(thr[ok].min())
    return None


class DecisionTree:
    """Array-backed binary regression tree."""

    def __init__(self, nodes: Sequence[TreeNode], n_features: int, feature_names: Sequence[str] | None = None):
        self.nodes = list(nodes)
        self.n_features = n_features
        self.feature_names = list(feature_names) if feature_names else [f"f{i}" for i in range(n_features)]
        self._feature = np.array([nd.feature for nd in self.nodes], dtype=int)
        self._threshold = np.array([nd.threshold for nd in self.nodes], dtype=np.float64)
        self._left = np.array([nd.left for nd in self.nodes], dtype=int)
        self._right = np.array([nd.right for nd in self.nodes], dtype=int)
        self._value = np.array([nd.value for nd in self.nodes], dtype=np.float64)

    def __len__(self):
        return len(self.nodes)

    def __eq__(self, other):
        if not isinstance(other, DecisionTree) or self.n_features != other.n_features or len(self) != len(other):
            return False
        # leaf thresholds are NaN, so compare node fields with NaN == NaN
        return all(np.array_equal(getattr(self, a), getattr(other, a), equal_nan=True)
                   for a in ("_feature", "_threshold", "_left", "_right", "_value")) and \
            [(n.parent, n.count) for n in self.nodes] == [(n.parent, n.count) for n in other.nodes]

    @property
    def leaves(self) -> list[int]:
        return [nd.id for nd in self.nodes if nd.is_leaf]

    @property
    def depth(self) -> int:
        def d(i):
            nd = self.nodes[i]
            return 0 if nd.is_leaf else 1 + max(d(nd.left), d(nd.right))
        return d(0)

    def apply(self, X) -> np.ndarray:
        """Leaf id reached by every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        node = np.zeros(X.shape[0], dtype=int)
        while True:
            feat = self._feature[node]
            inner = feat >= 0
            if not inner.any():
                return node
            rows = np.flatnonzero(inner)
            go_left = X[rows, feat[rows]] <= self._threshold[node[rows]]
            node[rows] = np.where(go_left, self._left[node[rows]], self._right[node[rows]])

    def predict(self, X) -> np.ndarray:
        return self._value[self.apply(X)]

    def predict_one(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_features,):
            raise ValueError(f"expected {self.n_features} features, got shape {x.shape}")
        return float(self.predict(x[None, :])[0])

    # ----------------------------------------------------------- serialization

    def to_json(self) -> dict:
        out = []
        for nd in self.nodes:
            if nd.is_leaf:
                out.append({"id": nd.id, "value": nd.value, "count": nd.count})
            else:
                out.append({"id": nd.id, "feature": nd.feature, "threshold": nd.threshold,
                            "left": nd.left, "right": nd.right, "value": nd.value, "count": nd.count})
        return {"n_features": self.n_features, "feature_names": self.feature_names, "nodes": out}

    @classmethod
    def from_json(cls, obj: dict) -> "DecisionTree":
        raw = {n["id"]: n for n in obj["nodes"]}
        parent = {i: -1 for i in raw}
        for n in raw.values():
            if "feature" in n:
                parent[n["left"]] = n["id"]
                parent[n["right"]] = n["id"]
        nodes = []
        for i in sorted(raw):
            n = raw[i]
            if i != len(nodes):
                raise ValueError("node ids must be 0..len-1")
            if "feature" in n:
                nodes.append(TreeNode(i, parent[i], int(n["feature"]), float(n["threshold"]), int(n["left"]),
                                      int(n["right"]), float(n.get("value", "nan")), int(n.get("count", 0))))
            else:
                nodes.append(TreeNode(i, parent[i], -1, float("nan"), -1, -1, float(n["value"]), int(n.get("count", 0))))
        return cls(nodes, int(obj["n_features"]), obj.get("feature_names"))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    def render(self) -> str:
        """Indented text rendering, one node per line."""
        lines = []

        def walk(i, depth):
            nd = self.nodes[i]
            pad = "  " * depth
            if nd.is_leaf:
                lines.append(f"{pad}leaf #{i}: rho = {nd.value:.6g} (samples = {nd.count})")
                return
            name = self.feature_names[nd.feature]
            lines.append(f"{pad}#{i}: {name} <= {nd.threshold!r} (samples = {nd.count})")
            walk(nd.left, depth + 1)
            walk(nd.right, depth + 1)

        walk(0, 0)
        return "\n".join(lines)


def fit(X, y, params: TreeParams | None = None, feature_names: Sequence[str] | None = None) -> DecisionTree:
    """Greedy CART on squared error; leaves predict the mean target. Deterministic."""
    params = params or TreeParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("cannot fit a tree on an empty dataset")
    if X.shape[0] != y.shape[0]:
        raise ValueError("feature and target row counts differ")
    specs: list[dict] = []
    stack = [(np.arange(X.shape[0]), -1, 0, None)]  # rows, parent, depth, side
    while stack:
        rows, parent, depth, side = stack.pop()
        i = len(specs)
        if parent >= 0:
            specs[parent][side] = i
        ys = y[rows]
        spec = {"parent": parent, "value": float(np.mean(ys)), "count": len(rows), "feature": -1,
                "threshold": float("nan"), "left": -1, "right": -1}
        specs.append(spec)
        split = None
        if len(rows) >= params.min_samples_split and (params.max_depth is None or depth < params.max_depth) \
                and np.ptp(ys) > 0:
            split = best_split(X[rows], ys, params.min_samples_leaf)
        if split is None:
            continue
        _, f, thr = split
        spec["feature"], spec["threshold"] = f, thr
        mask = X[rows, f] <= thr
        # right pushed first so the left subtree gets the lower ids
        stack.append((rows[~mask], i, depth + 1, "right"))
        stack.append((rows[mask], i, depth + 1, "left"))
    nodes = [TreeNode(i, s["parent"], s["feature"], s["threshold"], s["left"], s["right"], s["value"], s["count"])
             for i, s in enumerate(specs)]
    return DecisionTree(nodes, X.shape[1], feature_names)


def predict(tree: DecisionTree, x) -> float:
    return tree.predict_one(x)


def find_falsifying_leaves(tree: DecisionTree) -> list[int]:
    """Leaves predicting rho < 0, most negative first."""
    leaves = [i for i in tree.leaves if tree.nodes[i].value < 0]
    return sorted(leaves, key=lambda i: (tree.nodes[i].value, i))


def find_nearest_leaves(tree: DecisionTree) -> list[int]:
    """All leaves whose |rho| is minimal. Only meaningful when no leaf predicts rho < 0."""
    if find_falsifying_leaves(tree):
        raise ContractError("tree has falsifying leaves; nearest leaves are defined only without them")
    leaves = tree.leaves
    m = min(abs(tree.nodes[i].value) for i in leaves)
    return [i for i in leaves if abs(tree.nodes[i].value) == m]


@dataclass(frozen=True)
class Constraint:
    feature: int
    op: str  # "<=" or ">"
    threshold: float

    def holds(self, x) -> bool:
        v = x[self.feature]
        return bool(v <= self.threshold) if self.op == "<=" else bool(v > self.threshold)


@dataclass(frozen=True)
class Explanation:
    """Conjunction of threshold constraints, in leaf-to-root order."""

    constraints: tuple[Constraint, ...]
    feature_names: tuple[str, ...] = ()

    def holds(self, x) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return all(c.holds(x) for c in self.constraints)

    def intervals(self) -> dict[int, tuple[float, float]]:
        """Tightest ``(lo, hi]`` per constrained feature (``-inf``/``inf`` when open)."""
        out: dict[int, tuple[float, float]] = {}
        for c in self.constraints:
            lo, hi = out.get(c.feature, (-np.inf, np.inf))
            if c.op == "<=":
                hi = min(hi, c.threshold)
            else:
                lo = max(lo, c.threshold)
            out[c.feature] = (lo, hi)
        return out

    def collapsed(self) -> "Explanation":
        cons = []
        for f, (lo, hi) in sorted(self.intervals().items()):
            if lo > -np.inf:
                cons.append(Constraint(f, ">", lo))
            if hi < np.inf:
                cons.append(Constraint(f, "<=", hi))
        return Explanation(tuple(cons), self.feature_names)

    def _name(self, f):
        return self.feature_names[f] if f < len(self.feature_names) else f"f{f}"

    def render(self, ascii: bool = False) -> str:
        if not self.constraints:
            return "True"
        le, conj = ("<=", " & ") if ascii else ("≤", " ∧ ")
        parts = [f"{self._name(c.feature)} {le if c.op == '<=' else '>'} {c.threshold!r}" for c in self.constraints]
        return "(" + conj.join(parts) + ")"

    def __str__(self):
        return self.render()

    def to_json(self) -> list:
        return [{"feature": c.feature, "name": self._name(c.feature), "op": c.op, "threshold": c.threshold}
                for c in self.constraints]


def gen_explanation(tree: DecisionTree, leaf: int) -> Explanation:
    """Walk from ``leaf`` to the root, conjoining each parent's condition (negated on right edges)."""
    if not 0 <= leaf < len(tree) or not tree.nodes[leaf].is_leaf:
        raise ValueError(f"node {leaf} is not a leaf of this tree")
    cons = []
    cur = tree.nodes[leaf]
    while cur.parent >= 0:
        par = tree.nodes[cur.parent]
        op = "<=" if par.left == cur.id else ">"
        cons.append(Constraint(par.feature, op, par.threshold))
        cur = par
    return Explanation(tuple(cons), tuple(tree.feature_names))


def explanation_box(exp: Explanation, search: Box) -> Box | None:
    """Intersect the explanation with the search box; ``None`` when the result is empty.

    Strict ``>`` bounds are moved up by 1e-9 (at least one ulp) so the box is closed.
    """
    lo, hi = search.lows.copy(), search.highs.copy()
    for f, (a, b) in exp.intervals().items():
        if a > -np.inf:
            lo[f] = max(lo[f], max(a + GREATER_NUDGE, np.nextafter(a, np.inf)))
        if b < np.inf:
            hi[f] = min(hi[f], b)
    if np.any(lo > hi):
        return None
    return Box(lo, hi)
