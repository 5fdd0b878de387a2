"""Exact three-layer network encoding of decision trees.

Layer 1 evaluates every comparison of the tree at once: u = act(x[tau] - t).
Layer 2 matches the comparison pattern against each leaf's path: the row for
leaf k' carries +1/-1 for comparisons taken right/left on the path and bias
-l + 1/2 (l = path length), so the pre-activation is +1/2 exactly on the
leaf containing x and at most -1/2 elsewhere.  Layer 3 is linear: half the
leaf value vectors as weights plus a half-mean bias.

With the sign activation the network reproduces tree routing exactly; with
tanh(a*.) it becomes differentiable so the output layer can be fine-tuned;
after normalization (rows divided by 2l) every pre-activation lies in
[-1, 1], the domain of the polynomial activation the encrypted path uses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DimensionError,
    NormalizationError,
    SchemaError,
    UnsupportedTaskError,
)
from .forest import DecisionTree, Forest

NRF_FORMAT = "cipherforest-network"
NRF_VERSION = 1


def sign_activation(z: np.ndarray) -> np.ndarray:
    """2*1[z >= 0] - 1: the exact routing nonlinearity (ties go right)."""
    return 2.0 * (z >= 0) - 1.0


@dataclass
class TreeNetwork:
    tau: np.ndarray            # (K-1,) feature index per comparison
    thresholds: np.ndarray     # (K-1,)
    match_weights: np.ndarray  # (K, K-1); +-1 pattern, scaled once normalized
    match_bias: np.ndarray     # (K,)
    out_weights: np.ndarray    # (C, K)
    out_bias: np.ndarray       # (C,)
    path_lengths: np.ndarray   # (K,)
    normalized: bool = False

    @property
    def n_leaves(self) -> int:
        return self.match_weights.shape[0]

    @property
    def n_comparisons(self) -> int:
        return self.match_weights.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.out_weights.shape[0]

    def comparison_pre(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return x[:, self.tau] - self.thresholds

    def match_pre(self, u: np.ndarray) -> np.ndarray:
        return u @ self.match_weights.T + self.match_bias

    def preactivation_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Symbolic extremes of the matching layer over u in {-1,+1}^(K-1)."""
        reach = np.abs(self.match_weights).sum(axis=1)
        return self.match_bias - reach, self.match_bias + reach


def convert_tree(tree: DecisionTree) -> TreeNetwork:
    """Exact network encoding; leaf k' is wired to the comparisons on its path."""
    k = tree.n_leaves
    v = np.zeros((k, tree.n_nodes))
    lengths = np.zeros(k, dtype=np.int64)
    for leaf, path in enumerate(tree.leaf_paths()):
        lengths[leaf] = len(path)
        for node, went_right in path:
            v[leaf, node] = 1.0 if went_right else -1.0
    bias = -lengths + 0.5
    total = tree.leaf_counts.sum()
    beta = (
        (tree.leaf_values * tree.leaf_counts[:, None]).sum(axis=0) / (2 * total)
        if total > 0
        else np.zeros(tree.n_outputs)
    )
    return TreeNetwork(
        tau=tree.feature.copy(),
        thresholds=tree.threshold.copy(),
        match_weights=v,
        match_bias=bias,
        out_weights=tree.leaf_values.T / 2.0,
        out_bias=beta,
        path_lengths=lengths,
    )


def normalize(net: TreeNetwork) -> TreeNetwork:
    """Divide each matching row and bias by 2*l so pre-activations land in
    [-1, 1]; the positive scaling preserves signs and the argmax leaf."""
    if net.normalized:
        raise NormalizationError("network is already normalized")
    scale = np.maximum(1.0, 2.0 * net.path_lengths)[:, None]
    return replace(
        net,
        match_weights=net.match_weights / scale,
        match_bias=net.match_bias / scale[:, 0],
        normalized=True,
    )


@dataclass
class ForestNetwork:
    """L tree networks with shared leaf count plus tree weights: the neural
    form of a forest."""

    networks: list[TreeNetwork]
    alphas: np.ndarray
    task: str = "classification"
    n_classes: int = 0
    n_features: int = 0
    dilatation: float = 4.0

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        ks = {net.n_leaves for net in self.networks}
        if len(ks) != 1:
            raise SchemaError(f"tree networks disagree on leaf count: {sorted(ks)}")

    @property
    def n_trees(self) -> int:
        return len(self.networks)

    @property
    def n_leaves(self) -> int:
        return self.networks[0].n_leaves

    @property
    def normalized(self) -> bool:
        return all(net.normalized for net in self.networks)


def convert_forest(forest: Forest, dilatation: float = 4.0) -> ForestNetwork:
    return ForestNetwork(
        networks=[convert_tree(t) for t in forest.trees],
        alphas=forest.alphas.copy(),
        task=forest.task,
        n_classes=forest.n_classes,
        n_features=forest.n_features,
        dilatation=dilatation,
    )


def normalize_forest(model: ForestNetwork) -> ForestNetwork:
    return replace(model, networks=[normalize(net) for net in model.networks])


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _resolve_activation(model: ForestNetwork, activation):
    """Returns act(z) for 'hard', ('tanh', a), a bare float a, or any object
    with an eval_clear method (a fitted polynomial)."""
    if activation == "hard":
        return sign_activation
    if activation == "tanh":
        a = model.dilatation
        return lambda z: np.tanh(a * z)
    if isinstance(activation, (int, float)):
        a = float(activation)
        return lambda z: np.tanh(a * z)
    if isinstance(activation, tuple) and activation[0] == "tanh":
        a = float(activation[1])
        return lambda z: np.tanh(a * z)
    if hasattr(activation, "eval_clear"):
        if not model.normalized:
            raise NormalizationError(
                "polynomial activation requires a normalized model"
            )
        return activation.eval_clear
    raise ValueError(f"unknown activation {activation!r}")


def _check_input(model: ForestNetwork, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if model.n_features and x.shape[1] != model.n_features:
        raise DimensionError(
            f"input has {x.shape[1]} features, model expects {model.n_features}"
        )
    return x

def tree_forward(net: TreeNetwork, x: np.ndarray, act) -> np.ndarray:
    u = act(net.comparison_pre(x))
    v = act(net.match_pre(u))
    return v @ net.out_weights.T + net.out_bias


def forward(model: ForestNetwork, x: np.ndarray, activation) -> np.ndarray:
    """Forest output sum_l alpha_l T_l(x) under the given activation."""
    x = _check_input(model, x)
    act = _resolve_activation(model, activation)
    out = np.zeros((x.shape[0], model.n_classes or 1))
    for alpha, net in zip(model.alphas, model.networks):
        out += alpha * tree_forward(net, x, act)
    return out


def forward_hard(model_or_net, x: np.ndarray) -> np.ndarray:
    if isinstance(model_or_net, TreeNetwork):
        return tree_forward(model_or_net, np.atleast_2d(x), sign_activation)
    return forward(model_or_net, x, "hard")


def forward_soft(model: ForestNetwork, x: np.ndarray, activation="tanh") -> np.ndarray:
    return forward(model, x, activation)


def leaf_features(model: ForestNetwork, x: np.ndarray, activation="tanh") -> np.ndarray:
    """Concatenated alpha-weighted matching-layer outputs: the frozen inputs
    of last-layer fine-tuning, shape (rows, L*K)."""
    x = _check_input(model, x)
    act = _resolve_activation(model, activation)
    cols = []
    for alpha, net in zip(model.alphas, model.networks):
        u = act(net.comparison_pre(x))
        cols.append(alpha * act(net.match_pre(u)))
    return np.hstack(cols)


# ---------------------------------------------------------------------------
# last-layer fine-tuning
# ---------------------------------------------------------------------------

def smoothed_targets(labels: np.ndarray, n_classes: int, eps: float) -> np.ndarray:
    t = np.full((len(labels), n_classes), eps / max(n_classes - 1, 1))
    t[np.arange(len(labels)), labels] = 1.0 - eps
    return t


def xent_loss_grad(weights, bias, feats, targets):
    """Mean softmax cross-entropy and its gradients w.r.t. weights and bias."""
    logits = feats @ weights.T + bias
    zmax = logits.max(axis=1, keepdims=True)
    logp = logits - zmax - np.log(np.exp(logits - zmax).sum(axis=1, keepdims=True))
    loss = -(targets * logp).sum(axis=1).mean()
    gz = (np.exp(logp) - targets) / len(feats)
    return loss, gz.T @ feats, gz.sum(axis=0)


def finetune_last_layer(
    model: ForestNetwork,
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int = 20,
    lr: float = 0.5,
    label_smoothing_eps: float = 0.1,
    rng_seed: int = 0,
    batch_size: int = 128,
) -> ForestNetwork:
    """Mini-batch SGD on the joint output layer over all trees.

    The first two layers stay frozen: tanh leaf features are precomputed,
    and only the concatenated output weights and the shared bias move.
    """
    if model.task != "classification":
        raise UnsupportedTaskError("fine-tuning supports classification only")
    x = _check_input(model, features)
    labels = np.asarray(labels, dtype=np.int64)
    c = model.n_classes
    k = model.n_leaves

    feats = leaf_features(model, x, "tanh")
    targets = smoothed_targets(labels, c, label_smoothing_eps)

    weights = np.hstack([net.out_weights for net in model.networks])  # (C, L*K)
    bias = sum(
        alpha * net.out_bias for alpha, net in zip(model.alphas, model.networks)
    ).astype(np.float64)

    rng = np.random.default_rng(rng_seed)
    n = len(feats)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            _, gw, gb = xent_loss_grad(weights, bias, feats[rows], targets[rows])
            weights = weights - lr * gw
            bias = bias - lr * gb

    new_nets = []
    l = model.n_trees
    for i, (alpha, net) in enumerate(zip(model.alphas, model.networks)):
        new_nets.append(
            replace(
                net,
                out_weights=weights[:, i * k : (i + 1) * k].copy(),
                out_bias=bias / (l * alpha),
            )
        )
    return replace(model, networks=new_nets)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def network_to_json(model: ForestNetwork) -> str:
    doc = {
        "format": NRF_FORMAT,
        "version": NRF_VERSION,
        "task": model.task,
        "n_classes": model.n_classes,
        "n_features": model.n_features,
        "dilatation": model.dilatation,
        "alphas": model.alphas.tolist(),
        "networks": [
            {
                "tau": net.tau.tolist(),
                "thresholds": net.thresholds.tolist(),
                "match_weights": net.match_weights.tolist(),
                "match_bias": net.match_bias.tolist(),
                "out_weights": net.out_weights.tolist(),
                "out_bias": net.out_bias.tolist(),
                "path_lengths": net.path_lengths.tolist(),
                "normalized": net.normalized,
            }
            for net in model.networks
        ],
    }
    return json.dumps(doc, indent=1)


def network_from_json(text: str) -> ForestNetwork:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc}") from exc
    if doc.get("format") != NRF_FORMAT or doc.get("version") != NRF_VERSION:
        raise SchemaError("not a cipherforest network checkpoint")
    nets = []
    for nd in doc["networks"]:
        nets.append(
            TreeNetwork(
                tau=np.asarray(nd["tau"], dtype=np.int64),
                thresholds=np.asarray(nd["thresholds"], dtype=np.float64),
                match_weights=np.atleast_2d(np.asarray(nd["match_weights"], dtype=np.float64)),
                match_bias=np.asarray(nd["match_bias"], dtype=np.float64),
                out_weights=np.atleast_2d(np.asarray(nd["out_weights"], dtype=np.float64)),
                out_bias=np.asarray(nd["out_bias"], dtype=np.float64),
                path_lengths=np.asarray(nd["path_lengths"], dtype=np.int64),
                normalized=bool(nd["normalized"]),
            )
        )
    return ForestNetwork(
        networks=nets,
        alphas=np.asarray(doc["alphas"], dtype=np.float64),
        task=doc["task"],
        n_classes=int(doc["n_classes"]),
        n_features=int(doc["n_features"]),
        dilatation=float(doc["dilatation"]),
    )
