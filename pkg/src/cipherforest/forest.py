"""Classical decision trees and forests: a minimal CART trainer, routing,
leaf-count padding and a portable JSON model format.

Trees are stored flat: internal node k holds (feature[k], threshold[k]) and
two child references.  A child reference >= 0 points at another internal
node; ref < 0 encodes leaf number -(ref+1).  Comparisons route right when
x[feature] >= threshold, so a value exactly at the threshold goes right.

Tree outputs follow the network convention used downstream: the returned
vector is leaf_value - sum(leaf_values)/2 + beta with beta the half-mean of
the training targets, which is exactly what the three-layer encoding of the
tree computes.  Forest prediction is the alpha-weighted sum of tree outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SchemaError

FOREST_FORMAT = "cipherforest-forest"
FOREST_VERSION = 1


@dataclass
class Dataset:
    features: np.ndarray          # (rows, d), values in [0, 1]
    labels: np.ndarray            # class indices (classification) or reals
    feature_names: list[str]
    task: str = "classification"
    n_classes: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError("features must be a 2-D matrix")
        if self.features.shape[0] != len(self.labels):
            raise DimensionError("features and labels disagree on row count")
        if self.features.size and (
            self.features.min() < -1e-9 or self.features.max() > 1 + 1e-9
        ):
            raise SchemaError("feature values must lie in [0, 1]")
        if self.task == "classification":
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.n_classes == 0:
                self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        else:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            self.n_classes = 1

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass
class DecisionTree:
    feature: np.ndarray       # (K-1,) int
    threshold: np.ndarray     # (K-1,) float in [0, 1]
    left: np.ndarray          # (K-1,) child refs
    right: np.ndarray         # (K-1,) child refs
    root: int                 # child-ref encoding; -1 when the tree is one leaf
    leaf_values: np.ndarray   # (K, C)
    leaf_counts: np.ndarray   # (K,)

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.leaf_values = np.atleast_2d(np.asarray(self.leaf_values, dtype=np.float64))
        self.leaf_counts = np.asarray(self.leaf_counts, dtype=np.int64)
        self.validate()

    # -- structure ---------------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return self.leaf_values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.leaf_values.shape[1]

    def validate(self) -> None:
        k = self.n_leaves
        if self.n_nodes != k - 1:
            raise SchemaError(
                f"binary tree with {k} leaves must have {k - 1} internal nodes, "
                f"found {self.n_nodes}"
            )
        if self.n_nodes and (self.threshold.min() < 0 or self.threshold.max() > 1):
            bad = int(np.argmax((self.threshold < 0) | (self.threshold > 1)))
            raise SchemaError(
                f"threshold[{bad}] = {self.threshold[bad]} outside [0, 1]"
            )
        # every node and leaf must be referenced exactly once
        refs = [self.root] if k > 1 else []
        refs += list(self.left) + list(self.right)
        nodes = sorted(r for r in refs if r >= 0)
        leaves = sorted(-(r + 1) for r in refs if r < 0)
        if k > 1 and (nodes != list(range(k - 1)) or leaves != list(range(k))):
            raise SchemaError("tree children do not form a single binary tree")

    def leaf_paths(self) -> list[list[tuple[int, int]]]:
        """Per leaf: the (node, went_right) pairs from root to that leaf."""
        paths: list[list[tuple[int, int]]] = [None] * self.n_leaves
        if self.n_leaves == 1:
            paths[0] = []
            return paths
        stack = [(self.root, [])]
        while stack:
            ref, trail = stack.pop()
            if ref < 0:
                paths[-(ref + 1)] = trail
            else:
                stack.append((int(self.left[ref]), trail + [(int(ref), 0)]))
                stack.append((int(self.right[ref]), trail + [(int(ref), 1)]))
        return paths

    def path_lengths(self) -> np.ndarray:
        return np.array([len(p) for p in self.leaf_paths()], dtype=np.int64)

    # -- prediction ----------------------------------------------------------

    def output_offset(self) -> np.ndarray:
        """beta - sum(W): the affine part the network convention adds."""
        total = self.leaf_counts.sum()
        beta = (
            (self.leaf_values * self.leaf_counts[:, None]).sum(axis=0) / (2 * total)
            if total > 0
            else np.zeros(self.n_outputs)
        )
        return beta - 0.5 * self.leaf_values.sum(axis=0)

    def route(self, x: np.ndarray) -> np.ndarray:
        """Leaf index for each row of x."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != 0 and self.n_nodes and x.shape[1] <= self.feature.max():
            raise DimensionError(
                f"input has {x.shape[1]} features, tree uses index {self.feature.max()}"
            )
        current = np.full(x.shape[0], self.root, dtype=np.int64)
        while True:
            active = current >= 0
            if not active.any():
                break
            idx = current[active]
            go_right = x[active, self.feature[idx]] >= self.threshold[idx]
            current[active] = np.where(go_right, self.right[idx], self.left[idx])
        return -(current + 1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Network-convention output vector(s) for x (2-D in, 2-D out)."""
        leaves = self.route(x)
        return self.leaf_values[leaves] + self.output_offset()


@dataclass
class Forest:
    trees: list[DecisionTree]
    alphas: np.ndarray
    task: str = "classification"
    n_classes: int = 0
    n_features: int = 0

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if len(self.alphas) != len(self.trees):
            raise SchemaError("one alpha per tree required")
        if np.any(self.alphas <= 0):
            raise SchemaError("tree weights must be positive")

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.zeros((x.shape[0], self.trees[0].n_outputs))
        for alpha, tree in zip(self.alphas, self.trees):
            out += alpha * tree.predict(x)
        return out

    def predict_class(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict(x), axis=1)


# ---------------------------------------------------------------------------
# CART training
# ---------------------------------------------------------------------------

def _gini(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return 1.0 - float(np.square(p).sum())


class _Builder:
    """Accumulates flat node/leaf arrays during recursive splitting."""

    def __init__(self, data: Dataset, max_depth, min_samples_leaf, features_per_split, rng):
        self.data = data
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.features_per_split = features_per_split
        self.rng = rng
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.leaf_values: list[np.ndarray] = []
        self.leaf_counts: list[int] = []

    def leaf_value(self, idx: np.ndarray) -> np.ndarray:
        y = self.data.labels[idx]
        if self.data.task == "classification":
            counts = np.bincount(y, minlength=self.data.n_classes)
            return counts / counts.sum()
        return np.array([y.mean()])

    def impurity(self, idx: np.ndarray) -> float:
        y = self.data.labels[idx]
        if self.data.task == "classification":
            return _gini(np.bincount(y, minlength=self.data.n_classes))
        return float(np.var(y))

    def best_split(self, idx: np.ndarray):
        """Scan every feature with sorted prefix statistics: cost of all
        candidate midpoints in one vectorized pass per feature."""
        x = self.data.features[idx]
        y = self.data.labels[idx]
        n = len(idx)
        d = self.data.n_features
        n_try = min(self.features_per_split or d, d)
        candidates = (
            np.sort(self.rng.permutation(d)[:n_try]) if n_try < d else np.arange(d)
        )
        classify = self.data.task == "classification"
        best = (np.inf, -1, 0.0)
        for f in candidates:
            order = np.argsort(x[:, f], kind="stable")
            xs = x[order, f]
            ys = y[order]
            cut = np.nonzero(xs[:-1] < xs[1:])[0]  # split between cut and cut+1
            if len(cut) == 0:
                continue
            n_left = cut + 1
            n_right = n - n_left
            valid = (n_left >= self.min_samples_leaf) & (n_right >= self.min_samples_leaf)
            if not valid.any():
                continue
            if classify:
                onehot = np.zeros((n, self.data.n_classes))
                onehot[np.arange(n), ys] = 1.0
                prefix = np.cumsum(onehot, axis=0)[cut]
                suffix = onehot.sum(axis=0) - prefix
                gini_l = 1.0 - np.square(prefix / n_left[:, None]).sum(axis=1)
                gini_r = 1.0 - np.square(suffix / n_right[:, None]).sum(axis=1)
                cost = (n_left * gini_l + n_right * gini_r) / n
            else:
                s1 = np.cumsum(ys)[cut]
                s2 = np.cumsum(ys * ys)[cut]
                t1 = ys.sum()
                t2 = (ys * ys).sum()
                var_l = s2 / n_left - np.square(s1 / n_left)
                var_r = (t2 - s2) / n_right - np.square((t1 - s1) / n_right)
                cost = (n_left * var_l + n_right * var_r) / n
            cost = np.where(valid, cost, np.inf)
            pick = int(np.argmin(cost))
            if cost[pick] < best[0] - 1e-15:
                best = (float(cost[pick]), int(f), float((xs[cut[pick]] + xs[cut[pick] + 1]) / 2))
        return best

    def grow(self, idx: np.ndarray, depth: int) -> int:
        """Returns the child reference of the subtree over the given rows."""
        pure = self.impurity(idx) <= 0.0
        if depth >= self.max_depth or len(idx) < 2 * self.min_samples_leaf or pure:
            return self.new_leaf(idx)
        cost, f, t = self.best_split(idx)
        if f < 0:
            return self.new_leaf(idx)
        node = len(self.feature)
        self.feature.append(f)
        self.threshold.append(t)
        self.left.append(0)
        self.right.append(0)
        mask = self.data.features[idx, f] >= t
        self.left[node] = self.grow(idx[~mask], depth + 1)
        self.right[node] = self.grow(idx[mask], depth + 1)
        return node

    def new_leaf(self, idx: np.ndarray) -> int:
        leaf = len(self.leaf_values)
        self.leaf_values.append(self.leaf_value(idx))
        self.leaf_counts.append(len(idx))
        return -(leaf + 1)


def train_cart(
    data: Dataset,
    max_depth: int = 6,
    min_samples_leaf: int = 1,
    features_per_split: int | None = None,
    rng_seed: int = 0,
) -> DecisionTree:
    """Greedy CART: Gini impurity for classification, variance for regression;
    thresholds are midpoints of consecutive sorted feature values."""
    if data.n_rows == 0:
        raise SchemaError("cannot train on an empty dataset")
    if max_depth < 1:
        raise SchemaError("max_depth must be >= 1")
    rng = np.random.default_rng(rng_seed)
    b = _Builder(data, max_depth, min_samples_leaf, features_per_split, rng)
    root = b.grow(np.arange(data.n_rows), 0)
    return DecisionTree(
        feature=np.array(b.feature, dtype=np.int64),
        threshold=np.array(b.threshold, dtype=np.float64),
        left=np.array(b.left, dtype=np.int64),
        right=np.array(b.right, dtype=np.int64),
        root=root,
        leaf_values=np.vstack(b.leaf_values),
        leaf_counts=np.array(b.leaf_counts, dtype=np.int64),
    )


def train_forest(
    data: Dataset,
    n_trees: int = 50,
    max_depth: int = 6,
    min_samples_leaf: int = 1,
    features_per_split: int | None = None,
    rng_seed: int = 0,
    bootstrap: bool = True,
) -> Forest:
    """Bagged CART forest with uniform tree weights."""
    rng = np.random.default_rng(rng_seed)
    trees = []
    for _ in range(n_trees):
        tree_seed = int(rng.integers(0, 2**31 - 1))
        if bootstrap:
            rows = rng.integers(0, data.n_rows, data.n_rows)
            sample = Dataset(
                data.features[rows], data.labels[rows], data.feature_names,
                task=data.task, n_classes=data.n_classes,
            )
        else:
            sample = data
        trees.append(
            train_cart(sample, max_depth, min_samples_leaf, features_per_split, tree_seed)
        )
    return Forest(
        trees=trees,
        alphas=np.full(n_trees, 1.0 / n_trees),
        task=data.task,
        n_classes=data.n_classes,
        n_features=data.n_features,
    )


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------

def _inert_subtree(b_feature, b_threshold, b_left, b_right, new_leaf, count: int) -> int:
    """A balanced subtree of `count` unreachable leaves behind x[0] >= 0 splits."""
    if count == 1:
        return new_leaf()
    node = len(b_feature)
    b_feature.append(0)
    b_threshold.append(0.0)
    b_left.append(0)
    b_right.append(0)
    half = count // 2
    b_left[node] = _inert_subtree(b_feature, b_threshold, b_left, b_right, new_leaf, half)
    b_right[node] = _inert_subtree(b_feature, b_threshold, b_left, b_right, new_leaf, count - half)
    return node


def pad_to_leaf_count(tree: DecisionTree, k_target: int) -> DecisionTree:
    """Append inert leaves until the tree has `k_target` of them.

    The shallowest existing leaf is replaced by a split on x[0] >= 0, whose
    right child is that leaf and whose left child is a balanced subtree of
    zero-valued leaves.  Since features live in [0, 1] the comparison always
    routes right, so predictions are unchanged; the inert leaves demand an
    impossible comparison outcome and can never win the matching layer.
    """
    k = tree.n_leaves
    if k_target < k:
        raise SchemaError(f"cannot pad {k} leaves down to {k_target}")
    if k_target == k:
        return tree
    extra = k_target - k

    feature = list(tree.feature)
    threshold = list(tree.threshold)
    left = list(tree.left)
    right = list(tree.right)
    leaf_values = list(tree.leaf_values)
    leaf_counts = list(tree.leaf_counts)
    width = tree.leaf_values.shape[1]

    def new_leaf() -> int:
        leaf = len(leaf_values)
        leaf_values.append(np.zeros(width))
        leaf_counts.append(0)
        return -(leaf + 1)

    target_leaf = int(np.argmin(tree.path_lengths()))
    target_ref = -(target_leaf + 1)

    gate = len(feature)
    feature.append(0)
    threshold.append(0.0)
    left.append(0)
    right.append(target_ref)
    left[gate] = _inert_subtree(feature, threshold, left, right, new_leaf, extra)

    if tree.n_leaves == 1:
        root = gate
    else:
        root = tree.root
        # splice the gate where the target leaf used to hang
        if root == target_ref:
            root = gate
        else:
            for arr in (left, right):
                for i in range(tree.n_nodes):
                    if arr[i] == target_ref:
                        arr[i] = gate
    return DecisionTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        root=root,
        leaf_values=np.vstack(leaf_values),
        leaf_counts=np.array(leaf_counts, dtype=np.int64),
    )


def pad_forest(forest: Forest, k_target: int | None = None) -> Forest:
    """Pad every tree to a shared leaf count (the forest maximum by default)."""
    k = max(t.n_leaves for t in forest.trees)
    if k_target is not None:
        if k_target < k:
            raise SchemaError(f"k_target {k_target} below forest maximum {k}")
        k = k_target
    return Forest(
        trees=[pad_to_leaf_count(t, k) for t in forest.trees],
        alphas=forest.alphas.copy(),
        task=forest.task,
        n_classes=forest.n_classes,
        n_features=forest.n_features,
    )


# ---------------------------------------------------------------------------
# JSON model format
# ---------------------------------------------------------------------------

def forest_to_json(forest: Forest) -> str:
    doc = {
        "format": FOREST_FORMAT,
        "version": FOREST_VERSION,
        "task": forest.task,
        "n_classes": forest.n_classes,
        "n_features": forest.n_features,
        "alphas": forest.alphas.tolist(),
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "root": int(t.root),
                "leaf_values": t.leaf_values.tolist(),
                "leaf_counts": t.leaf_counts.tolist(),
            }
            for t in forest.trees
        ],
    }
    return json.dumps(doc, indent=1)


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise SchemaError(f"missing field '{key}' in {where}")
    return doc[key]


def forest_from_json(text: str) -> Forest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc}") from exc
    if _require(doc, "format", "document") != FOREST_FORMAT:
        raise SchemaError(f"unknown format '{doc.get('format')}'")
    if _require(doc, "version", "document") != FOREST_VERSION:
        raise SchemaError(f"unsupported version {doc.get('version')}")
    trees = []
    for i, td in enumerate(_require(doc, "trees", "document")):
        where = f"trees[{i}]"
        try:
            trees.append(
                DecisionTree(
                    feature=_require(td, "feature", where),
                    threshold=_require(td, "threshold", where),
                    left=_require(td, "left", where),
                    right=_require(td, "right", where),
                    root=_require(td, "root", where),
                    leaf_values=_require(td, "leaf_values", where),
                    leaf_counts=_require(td, "leaf_counts", where),
                )
            )
        except SchemaError as exc:
            raise SchemaError(f"{where}: {exc}") from exc
    return Forest(
        trees=trees,
        alphas=np.asarray(_require(doc, "alphas", "document"), dtype=np.float64),
        task=_require(doc, "task", "document"),
        n_classes=int(doc.get("n_classes", 0)),
        n_features=int(doc.get("n_features", 0)),
    )
