"""Evaluation harness: stratified splits, binary metrics, and
quantile-surrogate hyperparameter search."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np


class HarnessError(Exception):
    pass


@dataclass
class SplitMasks:
    """Boolean train/val/test masks over nodes; unlabeled nodes are in none."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        if np.any(self.train & self.val) or np.any(self.train & self.test) or np.any(self.val & self.test):
            raise HarnessError("split masks overlap")


def stratified_split(labels: np.ndarray, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitMasks:
    """Per-class shuffle-and-cut split over the labeled nodes.

    Each class contributes floor(r_train * n_c) train and floor(r_val * n_c)
    validation nodes; the remainder goes to test. Unlabeled nodes (label < 0)
    stay outside all three masks.
    """
    labels = np.asarray(labels)
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise HarnessError("split ratios must sum to 1")
    n = len(labels)
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    classes = sorted(int(c) for c in np.unique(labels[labels >= 0]))
    if not classes:
        raise HarnessError("no labeled nodes to split")
    rng = np.random.default_rng(seed)
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            raise HarnessError(f"class {c} is empty")
        idx = idx[rng.permutation(len(idx))]
        n_train = int(math.floor(ratios[0] * len(idx)))
        n_val = int(math.floor(ratios[1] * len(idx)))
        train[idx[:n_train]] = True
        val[idx[n_train : n_train + n_val]] = True
        test[idx[n_train + n_val :]] = True
    return SplitMasks(train=train, val=val, test=test)


def case_stratified_split(labels, sample_ids, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitMasks:
    """Split whole samples (cases) instead of cells.

    Samples are bucketed with the same floor rule, stratified by whether the
    sample contains any tumor cell; every labeled cell inherits its sample's
    bucket.
    """
    labels = np.asarray(labels)
    sample_arr = np.array(sample_ids)
    samples = sorted(set(sample_ids))
    has_tumor = {
        s: bool(np.any(labels[sample_arr == s] == 1)) for s in samples
    }
    rng = np.random.default_rng(seed)
    buckets = {}
    for group in (False, True):
        members = [s for s in samples if has_tumor[s] == group]
        if not members:
            continue
        members = [members[i] for i in rng.permutation(len(members))]
        n_train = int(math.floor(ratios[0] * len(members)))
        n_val = int(math.floor(ratios[1] * len(members)))
        for s in members[:n_train]:
            buckets[s] = "train"
        for s in members[n_train : n_train + n_val]:
            buckets[s] = "val"
        for s in members[n_train + n_val :]:
            buckets[s] = "test"
    n = len(labels)
    masks = {"train": np.zeros(n, dtype=bool), "val": np.zeros(n, dtype=bool), "test": np.zeros(n, dtype=bool)}
    labeled = labels >= 0
    for i in range(n):
        if labeled[i]:
            masks[buckets[sample_arr[i]]][i] = True
    return SplitMasks(**masks)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: float
    tp: int
    fp: int
    fn: int
    tn: int

    def to_dict(self) -> dict:
        out = {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "roc_auc": None if math.isnan(self.roc_auc) else self.roc_auc,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
        }
        return out


def compute_metrics(y_true, probabilities, threshold: float = 0.5) -> Metrics:
    """Binary metrics with tumor (class 1) as the positive class.

    ``probabilities`` is either the positive-class probability vector or an
    (n, 2) matrix. Precision/recall/F1 use the 0/0 -> 0 convention; ROC-AUC
    is the midrank statistic and is NaN (with a warning) when y_true has a
    single class.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim == 2:
        probs = probs[:, 1]
    if len(y_true) == 0 or len(y_true) != len(probs):
        raise HarnessError("y_true and probabilities must be aligned and non-empty")
    pred = probs >= threshold
    pos = y_true == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    accuracy = (tp + tn) / len(y_true)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        warnings.warn("ROC-AUC undefined: y_true contains a single class")
        auc = float("nan")
    else:
        auc = (np.sum(_midranks(probs)[pos]) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return Metrics(
        accuracy=accuracy, precision=precision, recall=recall, f1=f1,
        roc_auc=float(auc), tp=tp, fp=fp, fn=fn, tn=tn,
    )


def _midranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the midrank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.zeros(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


# ---------------------------------------------------------------------------
# hyperparameter search
#
# Parameter space entries:
#   ("uniform", low, high)      continuous
#   ("log_uniform", low, high)  continuous, sampled in log space
#   ("categorical", [choices])


@dataclass
class Trial:
    index: int
    config: dict
    score: float


@dataclass
class SearchResult:
    best: dict
    best_score: float
    trials: list = field(default_factory=list)


def _sample_random(space: dict, rng: np.random.Generator) -> dict:
    config = {}
    for name in sorted(space):
        kind = space[name][0]
        if kind == "uniform":
            _, lo, hi = space[name]
            config[name] = float(rng.uniform(lo, hi))
        elif kind == "log_uniform":
            _, lo, hi = space[name]
            config[name] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        elif kind == "categorical":
            choices = space[name][1]
            config[name] = choices[int(rng.integers(0, len(choices)))]
        else:
            raise HarnessError(f"unknown parameter kind {kind!r} for {name}")
    return config


def _density(value, observed, kind, spec) -> float:
    """Kernel density of one parameter value under a set of observations."""
    if kind == "categorical":
        choices = spec[1]
        counts = {c: 1.0 for c in choices}  # Laplace smoothing
        for obs in observed:
            counts[obs] += 1.0
        total = sum(counts.values())
        return counts[value] / total
    _, lo, hi = spec
    if kind == "log_uniform":
        value, lo, hi = np.log(value), np.log(lo), np.log(hi)
        observed = [np.log(o) for o in observed]
    bw = max((hi - lo) / 5.0, 1e-12)
    base = 1.0 / (hi - lo) if hi > lo else 1.0
    if not observed:
        return base
    kernels = [math.exp(-0.5 * ((value - o) / bw) ** 2) / (bw * math.sqrt(2 * math.pi)) for o in observed]
    return 0.5 * base + 0.5 * sum(kernels) / len(kernels)


def _sample_from_good(space, good_configs, rng) -> dict:
    config = {}
    for name in sorted(space):
        spec = space[name]
        kind = spec[0]
        pick = good_configs[int(rng.integers(0, len(good_configs)))][name]
        if kind == "categorical":
            # mostly reuse a good choice, sometimes explore
            if rng.random() < 0.2:
                choices = spec[1]
                pick = choices[int(rng.integers(0, len(choices)))]
            config[name] = pick
        else:
            _, lo, hi = spec
            if kind == "log_uniform":
                center = np.log(pick)
                bw = (np.log(hi) - np.log(lo)) / 5.0
                config[name] = float(np.exp(np.clip(rng.normal(center, bw), np.log(lo), np.log(hi))))
            else:
                bw = (hi - lo) / 5.0
                config[name] = float(np.clip(rng.normal(pick, bw), lo, hi))
    return config


def hyperparameter_search(space: dict, objective, budget: int, seed: int = 0) -> SearchResult:
    """Maximize ``objective(config)`` over the space within ``budget`` trials.

    The first max(5, budget // 5) trials are random. Afterwards the observed
    trials are split at the best-25% quantile into good/bad sets; candidates
    are drawn around good configurations and ranked by the good/bad density
    ratio. A failing objective records score -inf and the search continues.
    Ties return the earliest trial.
    """
    if budget < 1:
        raise HarnessError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    n_random = max(5, budget // 5)
    trials: list[Trial] = []
    for t in range(budget):
        if t < n_random:
            config = _sample_random(space, rng)
        else:
            scored = [tr for tr in trials if math.isfinite(tr.score)]
            if not scored:
                config = _sample_random(space, rng)
            else:
                ordered = sorted(scored, key=lambda tr: (-tr.score, tr.index))
                n_good = max(1, math.ceil(0.25 * len(ordered)))
                good = [tr.config for tr in ordered[:n_good]]
                bad = [tr.config for tr in ordered[n_good:]]
                best_ratio, config = -math.inf, None
                for _ in range(24):
                    cand = _sample_from_good(space, good, rng)
                    ratio = 0.0
                    for name in sorted(space):
                        l = _density(cand[name], [g[name] for g in good], space[name][0], space[name])
                        g = _density(cand[name], [b[name] for b in bad], space[name][0], space[name])
                        ratio += math.log(l) - math.log(g)
                    if ratio > best_ratio:
                        best_ratio, config = ratio, cand
        try:
            score = float(objective(config))
        except Exception as exc:  # noqa: BLE001 - failures become -inf trials
            warnings.warn(f"trial {t} failed: {exc}")
            score = -math.inf
        trials.append(Trial(index=t, config=config, score=score))
    best = max(trials, key=lambda tr: (tr.score, -tr.index))
    return SearchResult(best=best.config, best_score=best.score, trials=trials)


DEFAULT_SEARCH_SPACES = {
    "grand": {
        "learning_rate": ("log_uniform", 1e-3, 1e-1),
        "drop_rate": ("uniform", 0.0, 0.9),
        "consistency_weight": ("log_uniform", 0.1, 10.0),
        "temperature": ("uniform", 0.1, 1.0),
        "hidden_dim": ("categorical", [16, 32, 64]),
        "prop_order": ("categorical", [2, 4, 8]),
    },
    "random_forest": {
        "n_trees": ("categorical", [50, 100, 200]),
        "max_depth": ("categorical", [4, 6, 8, 12]),
        "min_leaf": ("categorical", [1, 2, 5]),
    },
    "gradient_boosting": {
        "n_rounds": ("categorical", [50, 100, 200]),
        "max_depth": ("categorical", [2, 3, 4]),
        "learning_rate": ("log_uniform", 0.01, 0.5),
    },
}


# ---------------------------------------------------------------------------
# feature standardization (train statistics only)


def standardize_features(X: np.ndarray, train_mask: np.ndarray):
    """Z-score all rows using mean/std of the train rows only.

    Returns (Z, mean, std). Zero-variance columns divide by 1. NaN entries
    (degenerate feature sentinels) become 0 after standardization, with a
    warning counting them; cells are never dropped.
    """
    X = np.asarray(X, dtype=np.float64)
    train_rows = X[np.asarray(train_mask, bool)]
    if len(train_rows) == 0:
        raise HarnessError("empty train mask for standardization")
    mean = np.nanmean(train_rows, axis=0)
    std = np.nanstd(train_rows, axis=0)
    mean = np.where(np.isfinite(mean), mean, 0.0)
    std = np.where(np.isfinite(std) & (std > 0), std, 1.0)
    Z = (X - mean) / std
    n_nan = int(np.isnan(Z).sum())
    if n_nan:
        warnings.warn(f"standardization imputed {n_nan} NaN feature entries with 0")
        Z = np.nan_to_num(Z, nan=0.0)
    return Z, mean, std
