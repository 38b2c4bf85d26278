"""Tabular baselines: random forest and Newton-step gradient boosting.

Both are built on one greedy CART routine with midpoint thresholds between
sorted distinct feature values and deterministic tie-breaking (lowest
feature index, then lowest threshold). The forest averages per-tree leaf
class frequencies; boosting is an additive model on the log-odds with
logistic loss, each round fitting a depth-limited regression tree to the
negative gradient and setting leaf values by a Newton step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .rng import derive_seed

FOREST_MAGIC = b"FRST1"
BOOST_MAGIC = b"BSTR1"


class TreeError(Exception):
    pass


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 8
    min_leaf: int = 2
    features_per_split: int | None = None  # None: ceil(sqrt(p))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("counts must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> "ForestConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown forest config keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class BoostConfig:
    n_rounds: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("counts must be positive")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")

    @classmethod
    def from_dict(cls, raw: dict) -> "BoostConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown boost config keys: {sorted(unknown)}")
        return cls(**raw)


# ---------------------------------------------------------------------------
# CART core
#
# Nodes are plain dicts: internal {"feature", "threshold", "left", "right"},
# leaves {"value": [...]}. Traversal goes left when x[feature] < threshold.


def _best_split(X, target_stats, idx, features, min_leaf, cost_fn):
    """Scan candidate features for the lowest weighted impurity.

    ``target_stats`` supplies per-sample statistics whose prefix sums define
    the impurity: class one-hots for Gini, (r, r^2) columns for variance.
    Returns (cost, feature, threshold) with cost = inf when no valid split
    exists. Features are scanned in ascending order and thresholds ascending
    within a feature, so the first strict improvement implements the
    lowest-feature / lowest-threshold tie rule.
    """
    n = len(idx)
    best = (math.inf, -1, 0.0)
    for f in features:
        v = X[idx, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        stats = target_stats[idx[order]]
        boundaries = np.flatnonzero(vs[:-1] != vs[1:])
        if len(boundaries) == 0:
            continue
        prefix = np.cumsum(stats, axis=0)
        left_n = boundaries + 1
        right_n = n - left_n
        valid = (left_n >= min_leaf) & (right_n >= min_leaf)
        if not valid.any():
            continue
        left = prefix[boundaries]
        total = prefix[-1]
        right = total - left
        cost = cost_fn(left, right, left_n, right_n, n)
        cost[~valid] = math.inf
        j = int(np.argmin(cost))
        if cost[j] < best[0]:
            threshold = (vs[boundaries[j]] + vs[boundaries[j] + 1]) / 2.0
            best = (float(cost[j]), int(f), float(threshold))
    return best


def _gini_cost(left, right, left_n, right_n, n):
    gl = 1.0 - np.sum((left / left_n[:, None]) ** 2, axis=1)
    gr = 1.0 - np.sum((right / right_n[:, None]) ** 2, axis=1)
    return (left_n * gl + right_n * gr) / n


def _variance_cost(left, right, left_n, right_n, n):
    # stats columns: (r, r^2); impurity = within-node sum of squared deviations
    sse_l = left[:, 1] - left[:, 0] ** 2 / left_n
    sse_r = right[:, 1] - right[:, 0] ** 2 / right_n
    return (sse_l + sse_r) / n


def _grow_tree(X, target_stats, idx, depth, cfg, rng, leaf_value, cost_fn):
    """Recursive greedy growth shared by classification and regression."""
    n = len(idx)
    pure = bool(np.all(target_stats[idx] == target_stats[idx[0]]))
    if depth >= cfg["max_depth"] or n < 2 * cfg["min_leaf"] or pure:
        return {"value": leaf_value(idx)}
    p = X.shape[1]
    k = cfg["features_per_split"]
    if k >= p:
        features = np.arange(p)
    else:
        features = np.sort(rng.choice(p, size=k, replace=False))
    cost, feature, threshold = _best_split(X, target_stats, idx, features, cfg["min_leaf"], cost_fn)
    if not math.isfinite(cost):
        return {"value": leaf_value(idx)}
    mask = X[idx, feature] < threshold
    return {
        "feature": feature,
        "threshold": threshold,
        "left": _grow_tree(X, target_stats, idx[mask], depth + 1, cfg, rng, leaf_value, cost_fn),
        "right": _grow_tree(X, target_stats, idx[~mask], depth + 1, cfg, rng, leaf_value, cost_fn),
    }


def _tree_apply(node, X, idx, out):
    if "value" in node:
        out[idx] = node["value"]
        return
    mask = X[idx, node["feature"]] < node["threshold"]
    _tree_apply(node["left"], X, idx[mask], out)
    _tree_apply(node["right"], X, idx[~mask], out)


def train_cart(X, y, max_depth=8, min_leaf=2, features_per_split=None, rng=None, n_classes=None):
    """Plain greedy CART with Gini impurity; the forest's building block."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    C = int(n_classes if n_classes is not None else y.max() + 1)
    onehot = np.zeros((len(y), C))
    onehot[np.arange(len(y)), y] = 1.0
    cfg = {
        "max_depth": max_depth,
        "min_leaf": min_leaf,
        "features_per_split": features_per_split if features_per_split is not None else X.shape[1],
    }
    rng = rng or np.random.default_rng(0)

    def leaf_value(idx):
        counts = onehot[idx].sum(axis=0)
        return (counts / counts.sum()).tolist()

    return _grow_tree(X, onehot, np.arange(len(y)), 0, cfg, rng, leaf_value, _gini_cost)


# ---------------------------------------------------------------------------
# random forest


@dataclass
class ForestModel:
    trees: list
    n_features: int
    n_classes: int
    config: ForestConfig


def train_random_forest(X, y, config: ForestConfig | None = None) -> ForestModel:
    """Bootstrap-aggregated CART trees with a random feature subset per split."""
    config = config or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) < 2:
        raise TreeError("need at least 2 training rows")
    classes = np.unique(y)
    if len(classes) < 2:
        raise TreeError("training labels contain a single class")
    C = int(y.max() + 1)
    p = X.shape[1]
    k = config.features_per_split or math.ceil(math.sqrt(p))
    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng(derive_seed(config.seed, f"tree-{t}"))
        if config.bootstrap:
            idx = rng.integers(0, len(X), size=len(X))
        else:
            idx = np.arange(len(X))
        tree = train_cart(
            X[idx], y[idx], max_depth=config.max_depth, min_leaf=config.min_leaf,
            features_per_split=k, rng=rng, n_classes=C,
        )
        trees.append(tree)
    return ForestModel(trees=trees, n_features=p, n_classes=C, config=config)


# ---------------------------------------------------------------------------
# gradient boosting


@dataclass
class BoostModel:
    trees: list
    base_score: float  # initial log-odds
    n_features: int
    config: BoostConfig
    train_loss: list  # log-loss per round, position 0 = before any round


def train_gradient_boosting(X, y, config: BoostConfig | None = None) -> BoostModel:
    """Logistic-loss boosting: each round fits a regression tree to the
    negative gradient; leaf values are Newton steps sum(y-p)/sum(p(1-p))
    scaled by the learning rate."""
    config = config or BoostConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) < 2:
        raise TreeError("need at least 2 training rows")
    if len(np.unique(y)) < 2:
        raise TreeError("training labels contain a single class")
    if not np.all((y == 0) | (y == 1)):
        raise TreeError("boosting requires binary labels {0, 1}")

    prior = y.mean()
    F = np.full(len(y), math.log(prior / (1.0 - prior)))
    base = float(F[0])
    losses = [_log_loss(y, _sigmoid(F))]
    rng = np.random.default_rng(config.seed)
    cfg = {"max_depth": config.max_depth, "min_leaf": config.min_leaf, "features_per_split": X.shape[1]}
    trees = []
    for _ in range(config.n_rounds):
        prob = _sigmoid(F)
        residual = y - prob  # negative gradient of logistic loss
        hessian = prob * (1.0 - prob)
        stats = np.stack([residual, residual * residual], axis=1)

        def leaf_value(idx):
            h = hessian[idx].sum()
            return float(residual[idx].sum() / h) if h > 0 else 0.0

        tree = _grow_tree(X, stats, np.arange(len(y)), 0, cfg, rng, leaf_value, _variance_cost)
        step = np.zeros(len(y))
        _tree_apply(tree, X, np.arange(len(y)), step)
        F = F + config.learning_rate * step
        losses.append(_log_loss(y, _sigmoid(F)))
        trees.append(tree)
    return BoostModel(trees=trees, base_score=base, n_features=X.shape[1], config=config, train_loss=losses)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def _log_loss(y, p):
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


# ---------------------------------------------------------------------------
# prediction and serialization


def predict_tabular(model, X) -> np.ndarray:
    """Class probabilities for a forest or boosting model; rows sum to 1."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != model.n_features:
        raise TreeError(f"feature count {X.shape[1]} does not match training ({model.n_features})")
    if isinstance(model, ForestModel):
        acc = np.zeros((len(X), model.n_classes))
        out = np.zeros((len(X), model.n_classes))
        for tree in model.trees:
            _tree_apply(tree, X, np.arange(len(X)), out)
            acc += out
        return acc / len(model.trees)
    if isinstance(model, BoostModel):
        F = np.full(len(X), model.base_score)
        step = np.zeros(len(X))
        for tree in model.trees:
            _tree_apply(tree, X, np.arange(len(X)), step)
            F += model.config.learning_rate * step
        p = _sigmoid(F)
        return np.stack([1.0 - p, p], axis=1)
    raise TreeError(f"unknown model type {type(model).__name__}")


def save_model(path: str, model) -> None:
    if isinstance(model, ForestModel):
        magic, payload = FOREST_MAGIC, {
            "trees": model.trees,
            "n_features": model.n_features,
            "n_classes": model.n_classes,
            "config": asdict(model.config),
        }
    elif isinstance(model, BoostModel):
        magic, payload = BOOST_MAGIC, {
            "trees": model.trees,
            "base_score": model.base_score,
            "n_features": model.n_features,
            "config": asdict(model.config),
            "train_loss": model.train_loss,
        }
    else:
        raise TreeError(f"cannot serialize {type(model).__name__}")
    body = json.dumps(payload, sort_keys=True).encode("ascii")
    from .dataset import _atomic_write

    _atomic_write(path, magic + len(body).to_bytes(8, "little") + body)


def load_model(path: str):
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, size = blob[:5], int.from_bytes(blob[5:13], "little")
    payload = json.loads(blob[13 : 13 + size].decode("ascii"))
    if magic == FOREST_MAGIC:
        return ForestModel(
            trees=payload["trees"],
            n_features=payload["n_features"],
            n_classes=payload["n_classes"],
            config=ForestConfig(**payload["config"]),
        )
    if magic == BOOST_MAGIC:
        return BoostModel(
            trees=payload["trees"],
            base_score=payload["base_score"],
            n_features=payload["n_features"],
            config=BoostConfig(**payload["config"]),
            train_loss=payload["train_loss"],
        )
    raise TreeError(f"{path}: unknown model magic {magic!r}")
