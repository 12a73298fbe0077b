"""Gradient-boosted regression trees (L2 loss), grown leaf-wise with exact splits.

Every round fits one tree to the current residuals. Growth is best-first:
the leaf whose best split gains the most is split next, until the tree has
``max_leaves`` leaves, no eligible leaf is shallower than ``max_depth``, or no
split has positive gain. The gain of a split is the drop in squared error,
``S_L**2/n_L + S_R**2/n_R - S_P**2/n_P`` with ``S`` the residual sum of a
partition. Leaves predict the mean residual they hold.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

MAGIC = "CGMODEL1"
FORMAT_VERSION = 1

# splits whose gain is below this fraction of the parent's squared residual
# norm are rounding noise (e.g. constant residuals)
_REL_GAIN_FLOOR = 1e-12


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GbtParams:
    n_rounds: int = 600
    learning_rate: float = 0.01
    max_depth: int = 5
    max_leaves: int = 8
    min_samples_leaf: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_rounds", "max_depth", "max_leaves", "min_samples_leaf"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class RegressionTree:
    """Flat binary tree; node 0 is the root and ``feature == -1`` marks a leaf.

    Samples with ``x[feature] <= threshold`` go to ``left``.
    """

    feature: list = field(default_factory=lambda: [-1])
    threshold: list = field(default_factory=lambda: [0.0])
    left: list = field(default_factory=lambda: [-1])
    right: list = field(default_factory=lambda: [-1])
    value: list = field(default_factory=lambda: [0.0])
    gain: list = field(default_factory=lambda: [0.0])

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return sum(1 for f in self.feature if f < 0)

    def depth(self) -> int:
        def walk(node):
            if self.feature[node] < 0:
                return 0
            return 1 + max(walk(self.left[node]), walk(self.right[node]))
        return walk(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.intp)
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold, dtype=np.float64)
        left, right = np.asarray(self.left), np.asarray(self.right)
        active = feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = X[idx, feature[n]] <= threshold[n]
            node[idx] = np.where(go_left, left[n], right[n])
            active = feature[node] >= 0
        return node

    def predict(self, X) -> np.ndarray:
        return np.asarray(self.value, dtype=np.float64)[self.apply(X)]

    def _add(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        self.gain.append(0.0)
        return len(self.feature) - 1

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] < 0:
                nodes.append({"leaf": True, "value": self.value[i]})
            else:
                nodes.append({"leaf": False, "feature": self.feature[i], "threshold": self.threshold[i],
                              "left": self.left[i], "right": self.right[i], "gain": self.gain[i],
                              "value": self.value[i]})
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        tree = cls([], [], [], [], [], [])
        for node in d["nodes"]:
            if node["leaf"]:
                tree._add(float(node["value"]))
            else:
                i = tree._add(float(node.get("value", 0.0)))
                tree.feature[i] = int(node["feature"])
                tree.threshold[i] = float(node["threshold"])
                tree.left[i] = int(node["left"])
                tree.right[i] = int(node["right"])
                tree.gain[i] = float(node["gain"])
        if not tree.feature:
            raise ModelFormatError("tree with no nodes")
        return tree


@dataclass
class GbtModel:
    base_score: float
    trees: list
    feature_gain: np.ndarray
    params: GbtParams
    n_features: int
    feature_schema: str | None = None
    train_mse: list = field(default_factory=list)

    def predict_raw(self, X) -> np.ndarray:
        X = _check_matrix(X, self.n_features)
        score = np.full(X.shape[0], self.base_score, dtype=np.float64)
        lr = self.params.learning_rate
        for tree in self.trees:
            score += lr * tree.predict(X)
        return score

    def predict(self, X) -> np.ndarray:
        """Clamped predictions for a matrix (or a single vector) of features."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        out = np.clip(self.predict_raw(X[None] if single else X), 0.0, 1.0)
        return float(out[0]) if single else out


def _check_matrix(X, n_features=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {X.shape}")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"feature width mismatch: model has {n_features}, input has {X.shape[1]}")
    if not np.isfinite(X).all():
        raise ValueError("features must be finite")
    return X


def _midpoint(a: float, b: float) -> float:
    mid = (a + b) / 2.0
    return a if mid >= b else mid


def split_gain(residuals_left, residuals_right) -> float:
    """Exact (correctly rounded sums) gain of one partition of the residuals."""
    nl, nr = len(residuals_left), len(residuals_right)
    sl, sr = math.fsum(residuals_left), math.fsum(residuals_right)
    sp = math.fsum([sl, sr])
    return sl * sl / nl + sr * sr / nr - sp * sp / (nl + nr)


def _gain_floor(residuals) -> float:
    r = np.asarray(residuals, dtype=np.float64)
    return _REL_GAIN_FLOOR * float(np.dot(r, r))


def best_split(values, residuals, min_samples_leaf: int = 1):
    """Best threshold for one feature column, as ``(threshold, gain)``, or ``None``.

    Candidates are midpoints between consecutive distinct values with at least
    ``min_samples_leaf`` samples on each side. Among equal gains the lowest
    threshold wins.
    """
    values = np.asarray(values, dtype=np.float64)
    residuals = np.asarray(residuals, dtype=np.float64)
    n = values.size
    if n < 2 * min_samples_leaf:
        return None
    order = np.argsort(values, kind="stable")
    v, r = values[order], residuals[order]
    found = _scan(v[None], r[None], min_samples_leaf)
    if found is None:
        return None
    _, pos, _ = found
    thr = _midpoint(float(v[pos]), float(v[pos + 1]))
    gain = split_gain(r[:pos + 1].tolist(), r[pos + 1:].tolist())
    if not gain > _gain_floor(residuals):
        return None
    return thr, gain


def _scan(v: np.ndarray, r: np.ndarray, min_leaf: int):
    """Vectorized candidate search over rows of sorted values ``v`` with residuals ``r``.

    Returns ``(row, position, approximate gain)`` of the best candidate, or
    ``None``; splitting after ``position`` puts ``position + 1`` samples left.
    """
    m = v.shape[1]
    if m < 2 * min_leaf:
        return None
    csum = np.cumsum(r, axis=1)
    total = csum[:, -1:]
    nl = np.arange(1, m, dtype=np.float64)
    sl = csum[:, :-1]
    sr = total - sl
    gain = sl * sl / nl + sr * sr / (m - nl) - total * total / m
    valid = v[:, :-1] < v[:, 1:]
    valid[:, :min_leaf - 1] = False
    if min_leaf > 1:
        valid[:, m - min_leaf:] = False
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain))  # first max: lowest feature, then lowest threshold
    row, pos = divmod(flat, m - 1)
    if not np.isfinite(gain[row, pos]) or gain[row, pos] <= 0:
        return None
    return row, pos, float(gain[row, pos])


class _Grower:
    """Fits one tree to residuals with feature columns presorted once per fit."""

    def __init__(self, X: np.ndarray, sorted_idx: np.ndarray, params: GbtParams):
        self.X = X
        self.sorted_idx = sorted_idx  # (n_features, n_samples)
        self.params = params

    def _candidate(self, members: np.ndarray, residuals: np.ndarray, depth: int):
        """Best split of a leaf as ``(gain, feature, threshold, left_members, right_members)``."""
        p = self.params
        m = members.size
        if depth >= p.max_depth or m < 2 * p.min_samples_leaf:
            return None
        in_leaf = np.zeros(self.X.shape[0], dtype=bool)
        in_leaf[members] = True
        idx = self.sorted_idx
        if m < self.X.shape[0]:
            idx = idx[in_leaf[idx]].reshape(self.X.shape[1], m)
        v = np.take_along_axis(self.X.T, idx, axis=1)
        r = residuals[idx]
        found = _scan(v, r, p.min_samples_leaf)
        if found is None:
            return None
        feat, pos, _ = found
        left, right = idx[feat, :pos + 1], idx[feat, pos + 1:]
        gain = split_gain(residuals[left].tolist(), residuals[right].tolist())
        if not gain > _gain_floor(residuals[members]):
            return None
        thr = _midpoint(float(v[feat, pos]), float(v[feat, pos + 1]))
        return gain, int(feat), thr, np.sort(left), np.sort(right)

    def grow(self, residuals: np.ndarray) -> RegressionTree:
        p = self.params
        tree = RegressionTree([], [], [], [], [], [])
        root = np.arange(self.X.shape[0])
        tree._add(_mean(residuals[root]))
        # open leaves: node id -> (members, depth, candidate)
        open_leaves = {0: (root, 0, self._candidate(root, residuals, 0))}
        n_leaves = 1
        while n_leaves < p.max_leaves:
            best_node, best = None, None
            for node in sorted(open_leaves):
                cand = open_leaves[node][2]
                if cand is not None and (best is None or cand[0] > best[0]):
                    best_node, best = node, cand
            if best is None:
                break
            _, depth, _ = open_leaves.pop(best_node)
            gain, feat, thr, left, right = best
            li, ri = tree._add(_mean(residuals[left])), tree._add(_mean(residuals[right]))
            tree.feature[best_node], tree.threshold[best_node] = feat, thr
            tree.left[best_node], tree.right[best_node] = li, ri
            tree.gain[best_node] = gain
            open_leaves[li] = (left, depth + 1, self._candidate(left, residuals, depth + 1))
            open_leaves[ri] = (right, depth + 1, self._candidate(right, residuals, depth + 1))
            n_leaves += 1
        return tree


def _mean(x: np.ndarray) -> float:
    return math.fsum(x.tolist()) / x.size


def _mse(residuals: np.ndarray) -> float:
    return math.fsum((residuals * residuals).tolist()) / residuals.size


def fit(X, y, params: GbtParams = GbtParams(), feature_schema: str | None = None) -> GbtModel:
    """Fit a boosted ensemble to ``X`` (n_samples x n_features) and targets ``y``.

    ``train_mse`` on the result records the training MSE before the first
    round and after every round.
    """
    X = _check_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0 or y.shape != (X.shape[0],):
        raise ValueError(f"need a non-empty sample set with one target per row, got X{X.shape}, y{y.shape}")
    if not np.isfinite(y).all():
        raise ValueError("targets must be finite")
    if X.shape[0] < 2 * params.min_samples_leaf:
        raise ValueError(f"need at least {2 * params.min_samples_leaf} samples, got {X.shape[0]}")
    base = float(y[0]) if np.all(y == y[0]) else _mean(y)
    score = np.full(y.shape, base)
    sorted_idx = np.argsort(X, axis=0, kind="stable").T.copy()
    grower = _Grower(X, sorted_idx, params)
    trees, gains = [], np.zeros(X.shape[1])
    history = [_mse(y - score)]
    for _ in range(params.n_rounds):
        tree = grower.grow(y - score)
        score += params.learning_rate * tree.predict(X)
        for f, g in zip(tree.feature, tree.gain):
            if f >= 0:
                gains[f] += g
        trees.append(tree)
        history.append(_mse(y - score))
    model = GbtModel(base, trees, gains, params, X.shape[1], feature_schema, history)
    model._train_scores = score
    return model


def predict(model: GbtModel, X):
    return model.predict(X)


def group_folds(groups, k: int, seed: int = 0) -> np.ndarray:
    """Fold index per sample; every member of a group lands in the same fold.

    Distinct groups are shuffled with ``seed`` and dealt round-robin.
    """
    groups = list(groups)
    unique = sorted(set(groups))
    if k < 2 or k > len(unique):
        raise ValueError(f"need 2 <= folds <= {len(unique)} groups, got {k}")
    order = np.random.default_rng(seed).permutation(len(unique))
    fold_of = {unique[g]: i % k for i, g in enumerate(order)}
    return np.array([fold_of[g] for g in groups], dtype=np.intp)


def cross_validate(X, y, groups, params: GbtParams = GbtParams(), k: int = 5) -> list:
    """Held-out MSE of each of ``k`` group-respecting folds."""
    X = _check_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    folds = group_folds(groups, k, params.seed)
    scores = []
    for f in range(k):
        test = folds == f
        model = fit(X[~test], y[~test], params)
        scores.append(_mse(model.predict(X[test]) - y[test]))
    return scores


def feature_importance(model: GbtModel) -> list:
    """``(feature index, total gain)`` pairs, largest gain first (ties by index)."""
    gains = np.asarray(model.feature_gain, dtype=np.float64)
    order = sorted(range(gains.size), key=lambda i: (-gains[i], i))
    return [(i, float(gains[i])) for i in order]


def total_gain(model: GbtModel) -> float:
    return math.fsum(g for tree in model.trees for f, g in zip(tree.feature, tree.gain) if f >= 0)


def model_to_dict(model: GbtModel) -> dict:
    return {
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        "feature_schema": model.feature_schema,
        "n_features": model.n_features,
        "params": asdict(model.params),
        "base_score": model.base_score,
        "feature_gain": [float(g) for g in model.feature_gain],
        "train_mse": [float(m) for m in model.train_mse],
        "trees": [t.to_dict() for t in model.trees],
    }


def save_model(model: GbtModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1, sort_keys=True)
        fh.write("\n")


def model_from_dict(d: dict) -> GbtModel:
    if not isinstance(d, dict) or d.get("magic") != MAGIC:
        raise ModelFormatError("not a CGMODEL1 model file")
    if d.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {d.get('format_version')!r}")
    try:
        params = GbtParams(**d["params"])
        gains = np.array(d["feature_gain"], dtype=np.float64)
        n_features = int(d["n_features"])
        trees = [RegressionTree.from_dict(t) for t in d["trees"]]
        model = GbtModel(float(d["base_score"]), trees, gains, params, n_features,
                         d.get("feature_schema"), list(d.get("train_mse", [])))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from None
    if gains.shape != (n_features,):
        raise ModelFormatError("feature_gain length does not match n_features")
    return model


def load_model(path) -> GbtModel:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: malformed JSON: {exc}") from None
    return model_from_dict(d)
