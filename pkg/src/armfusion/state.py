"""State-to-next-state regressors: a bagged CART forest and a linear model fit by gradient descent."""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from math import ceil

import numpy as np

from .io import FormatError
from .nn import NonFiniteError, ShapeError
from .parallel import worker_count


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 50
    max_depth: int = 12
    min_samples_leaf: int = 2
    feature_subsample: int | None = None  # None -> ceil(F / 3)
    bootstrap: bool = True


class RegressionTree:
    """Array-backed binary tree. ``feature[k] == -1`` marks a leaf."""

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float32)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)
        self.leaf_samples: dict[int, np.ndarray] | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, k: int) -> bool:
        return self.feature[k] < 0

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        X = np.asarray(X, dtype=np.float32)
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            k = node[active]
            go_left = X[active, self.feature[k]] <= self.threshold[k]
            node[active] = np.where(go_left, self.left[k], self.right[k])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]


def _best_split(X, Y, idx, features, min_leaf, mtry):
    """Scan features in the given order; stop after ``mtry`` non-constant ones."""
    best = None  # (score, feature, threshold); larger score is a better split
    n = len(idx)
    visited = 0
    for f in features:
        xs_all = X[idx, f]
        if xs_all.min() == xs_all.max():
            continue
        visited += 1
        order = np.argsort(xs_all, kind="stable")
        xs = xs_all[order]
        ys = Y[idx[order]]
        csum = np.cumsum(ys, axis=0)
        n_left = np.arange(1, n + 1, dtype=np.float64)
        lo, hi = min_leaf - 1, n - min_leaf  # split after position i means left = 0..i
        if hi > lo:
            pos = np.arange(lo, hi)
            valid = xs[pos] < xs[pos + 1]
            if valid.any():
                pos = pos[valid]
                sl = csum[pos]
                sr = csum[-1] - sl
                nl = n_left[pos]
                # SSE = total - (|S_l|^2/n_l + |S_r|^2/n_r); maximize the bracket
                score = (sl * sl).sum(axis=1) / nl + (sr * sr).sum(axis=1) / (n - nl)
                i = int(np.argmax(score))
                a, b = xs[pos[i]], xs[pos[i] + 1]
                thr = np.float32((np.float64(a) + np.float64(b)) / 2)
                if thr >= b:
                    thr = a
                cand = (float(score[i]), int(f), thr)
                if best is None or cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
                    best = cand
        if visited >= mtry:
            break
    return best


def fit_tree(X, Y, params: ForestParams, rng: np.random.Generator, sample_idx=None,
             record_leaves=False) -> RegressionTree:
    X = np.asarray(X, dtype=np.float32)
    Y = np.asarray(Y, dtype=np.float64)
    n_features = X.shape[1]
    mtry = params.feature_subsample or ceil(n_features / 3)
    mtry = min(max(mtry, 1), n_features)
    idx0 = np.arange(len(X)) if sample_idx is None else np.asarray(sample_idx)

    feature, threshold, left, right, value = [], [], [], [], []
    leaves = {}

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(None)
        return len(feature) - 1

    stack = [(new_node(), idx0, 0)]
    while stack:
        node, idx, depth = stack.pop()
        ys = Y[idx]
        value[node] = ys.mean(axis=0)
        if record_leaves:
            leaves[node] = idx
        if depth >= params.max_depth or len(idx) < 2 * params.min_samples_leaf or np.all(ys == ys[0]):
            continue
        split = _best_split(X, Y, idx, rng.permutation(n_features), params.min_samples_leaf, mtry)
        if split is None:
            continue
        _, f, thr = split
        mask = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        l, r = new_node(), new_node()
        left[node], right[node] = l, r
        if record_leaves:
            leaves.pop(node)
        # right pushed first so the left subtree is numbered first (depth-first order)
        stack.append((r, idx[~mask], depth + 1))
        stack.append((l, idx[mask], depth + 1))
    tree = RegressionTree(feature, threshold, left, right, np.array(value))
    if record_leaves:
        tree.leaf_samples = leaves
    return tree


class RandomForest:
    def __init__(self, trees: list[RegressionTree], params: ForestParams, seed: int,
                 n_features: int, n_targets: int):
        self.trees = trees
        self.params = params
        self.seed = seed
        self.n_features = n_features
        self.n_targets = n_targets

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X)
        single = X.ndim == 1
        X2 = X[None] if single else X
        if X2.shape[1] != self.n_features:
            raise ShapeError(f"forest expects {self.n_features} features, got {X2.shape[1]}")
        out = np.zeros((len(X2), self.n_targets))
        for tree in self.trees:
            out += tree.predict(X2)
        out /= len(self.trees)
        return out[0] if single else out

    # checkpoint section: u32 trees, u32 F, u32 T, then nodes in depth-first order
    def to_bytes(self) -> bytes:
        parts = [struct.pack("<III", len(self.trees), self.n_features, self.n_targets)]
        for tree in self.trees:
            stack = [0]
            while stack:
                k = stack.pop()
                if tree.is_leaf(k):
                    parts.append(struct.pack("<BI", 1, self.n_targets))
                    parts.append(tree.value[k].astype("<f4").tobytes())
                else:
                    parts.append(struct.pack("<BIf", 0, int(tree.feature[k]), float(tree.threshold[k])))
                    stack.append(int(tree.right[k]))
                    stack.append(int(tree.left[k]))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, payload: bytes, params: ForestParams, seed: int) -> "RandomForest":
        n_trees, n_features, n_targets = struct.unpack_from("<III", payload, 0)
        off = 12
        trees = []
        for _ in range(n_trees):
            feature, threshold, left, right, value = [], [], [], [], []
            pending = [None]  # (parent, is_left) slots waiting for a child
            while pending:
                slot = pending.pop()
                k = len(feature)
                if slot is not None:
                    parent, is_left = slot
                    (left if is_left else right)[parent] = k
                if off >= len(payload):
                    raise FormatError("truncated forest section")
                kind = payload[off]
                if kind == 1:
                    (dims,) = struct.unpack_from("<I", payload, off + 1)
                    off += 5
                    vals = np.frombuffer(payload, dtype="<f4", count=dims, offset=off).astype(np.float64)
                    off += 4 * dims
                    feature.append(-1)
                    threshold.append(0.0)
                    value.append(vals)
                elif kind == 0:
                    f, thr = struct.unpack_from("<If", payload, off + 1)
                    off += 9
                    feature.append(f)
                    threshold.append(thr)
                    value.append(np.zeros(n_targets))
                    pending.append((k, False))
                    pending.append((k, True))
                else:
                    raise FormatError(f"unknown node kind {kind}")
                left.append(-1)
                right.append(-1)
            trees.append(RegressionTree(feature, threshold, left, right, np.array(value)))
        if off != len(payload):
            raise FormatError("trailing bytes in forest section")
        return cls(trees, params, seed, n_features, n_targets)


def _tree_seed(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))


def fit_forest(X, Y, params: ForestParams = ForestParams(), seed: int = 0, record_leaves=False) -> RandomForest:
    """Bagged regression trees with vector-valued leaves."""
    X = np.asarray(X, dtype=np.float32)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or len(X) != len(Y):
        raise ShapeError(f"X {X.shape} and Y {Y.shape} do not pair up")
    if len(X) < 2:
        raise ValueError("need at least two samples to fit a forest")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("training data contains NaN or Inf")

    def one(k):
        rng = _tree_seed(seed, k)
        idx = rng.integers(0, len(X), len(X)) if params.bootstrap else None
        return fit_tree(X, Y, params, rng, idx, record_leaves)

    workers = min(worker_count(), params.n_trees)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trees = list(pool.map(one, range(params.n_trees)))
    else:
        trees = [one(k) for k in range(params.n_trees)]
    return RandomForest(trees, params, seed, X.shape[1], Y.shape[1])


def predict_forest(model: RandomForest, x) -> np.ndarray:
    return model.predict(x)


# --------------------------------------------------------------------------
# Gradient-descent linear regressor


@dataclass(frozen=True)
class GDConfig:
    lr: float = 0.05
    epochs: int = 1000
    l2: float = 0.0


@dataclass
class GDRegressor:
    weights: np.ndarray  # [T, F]
    bias: np.ndarray  # [T]
    config: GDConfig
    history: list

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.weights.shape[1]:
            raise ShapeError(f"regressor expects {self.weights.shape[1]} features, got {X.shape[-1]}")
        return X @ self.weights.T + self.bias


def fit_gd(X, Y, config: GDConfig = GDConfig()) -> GDRegressor:
    """Full-batch gradient descent on per-output MSE plus ``l2 * ||W||^2``.

    The recorded loss is the element-wise mean squared residual plus the L2 term
    divided by the number of outputs.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or len(X) != len(Y):
        raise ShapeError(f"X {X.shape} and Y {Y.shape} do not pair up")
    n, t = len(X), Y.shape[1]
    W = np.zeros((t, X.shape[1]))
    b = np.zeros(t)
    history = []
    for epoch in range(config.epochs + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            resid = X @ W.T + b - Y
            loss = float(np.mean(resid * resid) + config.l2 * np.sum(W * W) / t)
        if not np.isfinite(loss):
            raise NonFiniteError(f"gradient descent diverged at epoch {epoch}")
        history.append(loss)
        if epoch == config.epochs:
            break
        W -= config.lr * (2.0 / n * resid.T @ X + 2.0 * config.l2 * W)
        b -= config.lr * (2.0 / n * resid.sum(axis=0))
    return GDRegressor(W, b, config, history)


def predict_gd(model: GDRegressor, x) -> np.ndarray:
    return model.predict(x)


# --------------------------------------------------------------------------
# Persistence


def state_model_to_checkpoint(model) -> tuple[list[np.ndarray], dict[bytes, bytes], dict]:
    """Split a regressor into checkpoint tensors, sections and a JSON description."""
    if isinstance(model, RandomForest):
        meta = {"kind": "forest", "params": asdict(model.params), "seed": model.seed}
        return [], {b"TREE": model.to_bytes()}, meta
    meta = {"kind": "gd", "config": asdict(model.config)}
    return [model.weights, model.bias], {}, meta


def state_model_from_checkpoint(tensors, sections, meta):
    if meta["kind"] == "forest":
        if b"TREE" not in sections:
            raise FormatError("checkpoint has no forest section")
        return RandomForest.from_bytes(sections[b"TREE"], ForestParams(**meta["params"]), meta["seed"])
    if len(tensors) != 2:
        raise FormatError(f"linear regressor checkpoint needs 2 tensors, got {len(tensors)}")
    w, b = tensors
    return GDRegressor(w.astype(np.float64), b.astype(np.float64), GDConfig(**meta["config"]), [])
