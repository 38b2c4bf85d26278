"""Experiment matrix: feature type x reduction x model on one dataset.

One run extracts both feature families, standardizes with train-split
statistics, applies each requested reduction, and trains every requested
model per reduced representation, scoring the held-out test cells. Every
sub-seed derives from the single experiment seed, so a rerun with the same
configuration reproduces report.json byte for byte; wall-clock timings go
to a separate timings.json for that reason.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dataset as ds
from .dimred import reduce_features
from .expression import expression_profile
from .grand import GrandConfig, predict_grand, train_grand
from .graphs import knn_feature_graph, normalize_adjacency, spatial_knn_graph
from .harness import (
    SplitMasks,
    case_stratified_split,
    compute_metrics,
    standardize_features,
    stratified_split,
)
from .radiomics import RadiomicsConfig, radiomic_feature_table
from .rng import derive_seed
from .trees import BoostConfig, ForestConfig, predict_tabular, train_gradient_boosting, train_random_forest

FEATURE_TYPES = ("expression", "radiomics")
REDUCTIONS = ("none", "pca", "tsne", "umap")
MODELS = ("grand_feature_graph", "grand_spatial_graph", "random_forest", "gradient_boosting")

_CONFIG_KEYS = {
    "data_dir",
    "feature_types",
    "reductions",
    "models",
    "k",
    "reduce_dim",
    "seed",
    "threads",
    "split_by",
    "threshold",
    "grand",
    "forest",
    "boost",
    "tsne",
    "umap",
    "radiomics",
}


class ExperimentError(Exception):
    pass


@dataclass
class ExperimentConfig:
    data_dir: str = ""
    feature_types: tuple = FEATURE_TYPES
    reductions: tuple = REDUCTIONS
    models: tuple = MODELS
    k: int = 5
    reduce_dim: int = 16
    seed: int = 0
    threads: int = 1
    split_by: str = "cell"  # or "case"
    threshold: float = 0.5
    grand: dict = field(default_factory=dict)
    forest: dict = field(default_factory=dict)
    boost: dict = field(default_factory=dict)
    tsne: dict = field(default_factory=dict)
    umap: dict = field(default_factory=dict)
    radiomics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.feature_types = tuple(self.feature_types)
        self.reductions = tuple(self.reductions)
        self.models = tuple(self.models)
        for ft in self.feature_types:
            if ft not in FEATURE_TYPES:
                raise ExperimentError(f"unknown feature type {ft!r}")
        for red in self.reductions:
            if red not in REDUCTIONS:
                raise ExperimentError(f"unknown reduction {red!r}")
        for model in self.models:
            if model not in MODELS:
                raise ExperimentError(f"unknown model {model!r}")
        if self.split_by not in ("cell", "case"):
            raise ExperimentError("split_by must be 'cell' or 'case'")
        if self.threads < 1:
            raise ExperimentError("threads must be >= 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        unknown = set(raw) - _CONFIG_KEYS
        if unknown:
            raise ExperimentError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        # snapshot of result-affecting parameters; thread count is an
        # execution detail and never changes results, so it stays out of
        # the reproducibility record
        return {
            "data_dir": self.data_dir,
            "feature_types": list(self.feature_types),
            "reductions": list(self.reductions),
            "models": list(self.models),
            "k": self.k,
            "reduce_dim": self.reduce_dim,
            "seed": self.seed,
            "split_by": self.split_by,
            "threshold": self.threshold,
            "grand": self.grand,
            "forest": self.forest,
            "boost": self.boost,
            "tsne": self.tsne,
            "umap": self.umap,
            "radiomics": self.radiomics,
        }


@dataclass
class ExperimentReport:
    config: dict
    seed: int
    cells: dict  # "ft|reduction|model" -> {"status", "metrics"/"reason"}

    def to_json(self) -> str:
        return json.dumps(
            {"config": self.config, "seed": self.seed, "cells": self.cells},
            sort_keys=True,
            indent=2,
        ) + "\n"


def cell_key(feature_type: str, reduction: str, model: str) -> str:
    return f"{feature_type}|{reduction}|{model}"


@dataclass
class _PooledFeatures:
    node_keys: list
    sample_ids: list
    X: np.ndarray
    y: np.ndarray
    centroids: np.ndarray


def _extract_features(data: ds.Dataset, feature_type: str, config: ExperimentConfig) -> _PooledFeatures:
    tables = []
    for sample in data.samples:
        labels = {
            int(cid): int(lab)
            for cid, lab in zip(sample.cells.cell_ids, sample.cells.labels)
        }
        if feature_type == "expression":
            tables.append(expression_profile(sample.stack, sample.mask, labels=labels))
        else:
            rconf = RadiomicsConfig.from_dict(config.radiomics) if config.radiomics else RadiomicsConfig()
            tables.append(radiomic_feature_table(sample.stack, sample.mask, rconf, labels=labels))
    rows = []
    for t in tables:
        for i in range(len(t)):
            rows.append((t.sample_ids[i], int(t.cell_ids[i]), t.features[i], int(t.labels[i]), t.centroids[i]))
    rows.sort(key=lambda r: (r[0], r[1]))
    return _PooledFeatures(
        node_keys=[(r[0], r[1]) for r in rows],
        sample_ids=[r[0] for r in rows],
        X=np.array([r[2] for r in rows]),
        y=np.array([r[3] for r in rows], dtype=np.int64),
        centroids=np.array([r[4] for r in rows]),
    )


def _make_split(pooled: _PooledFeatures, config: ExperimentConfig) -> SplitMasks:
    seed = derive_seed(config.seed, "split")
    if config.split_by == "case":
        return case_stratified_split(pooled.y, pooled.sample_ids, seed=seed)
    return stratified_split(pooled.y, seed=seed)


def _run_model(model: str, pooled: _PooledFeatures, X_red: np.ndarray, masks: SplitMasks,
               config: ExperimentConfig, seed: int) -> dict:
    y = pooled.y
    if model in ("grand_feature_graph", "grand_spatial_graph"):
        if model == "grand_feature_graph":
            graph = knn_feature_graph(X_red, config.k, node_keys=pooled.node_keys)
        else:
            graph = spatial_knn_graph(pooled.centroids, pooled.sample_ids, config.k, node_keys=pooled.node_keys)
        adj = normalize_adjacency(graph)
        gconf = GrandConfig.from_dict({**config.grand, "seed": seed})
        trained = train_grand(adj, X_red, y, (masks.train, masks.val), gconf, n_classes=2)
        probs, _ = predict_grand(trained, adj, X_red)
    elif model == "random_forest":
        fconf = ForestConfig.from_dict({**config.forest, "seed": seed})
        forest = train_random_forest(X_red[masks.train], y[masks.train], fconf)
        probs = predict_tabular(forest, X_red)
    else:
        bconf = BoostConfig.from_dict({**config.boost, "seed": seed})
        boost = train_gradient_boosting(X_red[masks.train], y[masks.train], bconf)
        probs = predict_tabular(boost, X_red)
    metrics = compute_metrics(y[masks.test], probs[masks.test], threshold=config.threshold)
    return metrics.to_dict()


def _run_reduction_group(feature_type: str, reduction: str, pooled: _PooledFeatures,
                         masks: SplitMasks, config: ExperimentConfig):
    """All model cells sharing one (feature type, reduction) representation."""
    results = {}
    timings = {}
    try:
        Z, _, _ = standardize_features(pooled.X, masks.train)
        kwargs = {}
        if reduction == "tsne":
            kwargs = dict(config.tsne)
        elif reduction == "umap":
            kwargs = dict(config.umap)
        dim = min(config.reduce_dim, Z.shape[1], Z.shape[0] - 1)
        t0 = time.perf_counter()
        emb = reduce_features(
            Z, reduction, dim,
            seed=derive_seed(config.seed, f"reduce|{feature_type}|{reduction}"), **kwargs
        )
        timings["reduce"] = time.perf_counter() - t0
        X_red = emb.Y
    except Exception as exc:  # noqa: BLE001 - cell failures are recorded, not raised
        reason = f"{type(exc).__name__}: {exc}"
        for model in config.models:
            results[cell_key(feature_type, reduction, model)] = {"status": "failed", "reason": reason}
        return results, timings

    for model in config.models:
        key = cell_key(feature_type, reduction, model)
        seed = derive_seed(config.seed, key)
        t0 = time.perf_counter()
        try:
            metrics = _run_model(model, pooled, X_red, masks, config, seed)
            results[key] = {"status": "ok", "metrics": metrics}
        except Exception as exc:  # noqa: BLE001
            results[key] = {"status": "failed", "reason": f"{type(exc).__name__}: {exc}"}
        timings[key] = time.perf_counter() - t0
    return results, timings


def run_experiment(config: ExperimentConfig, out_dir: str) -> ExperimentReport:
    """Execute the grid and write report.json, table1.csv, and timings.json.

    A failure in any stage marks the affected cells as failed with the
    reason; remaining cells still run. Deterministic for a fixed config and
    seed, including with threads > 1.
    """
    manifest = os.path.join(config.data_dir, "manifest.json")
    if not os.path.isfile(manifest):
        raise ExperimentError(f"dataset manifest not found: {manifest}")
    data = ds.load_dataset(manifest)
    os.makedirs(out_dir, exist_ok=True)
    runs_dir = os.path.join(out_dir, "runs")
    os.makedirs(runs_dir, exist_ok=True)

    cells = {}
    timings = {}
    pooled_by_ft = {}
    masks_by_ft = {}
    for ft in config.feature_types:
        t0 = time.perf_counter()
        try:
            pooled_by_ft[ft] = _extract_features(data, ft, config)
            masks_by_ft[ft] = _make_split(pooled_by_ft[ft], config)
        except Exception as exc:  # noqa: BLE001
            reason = f"{type(exc).__name__}: {exc}"
            for red in config.reductions:
                for model in config.models:
                    cells[cell_key(ft, red, model)] = {"status": "failed", "reason": reason}
        timings[f"extract|{ft}"] = time.perf_counter() - t0

    groups = [
        (ft, red)
        for ft in config.feature_types
        for red in config.reductions
        if ft in masks_by_ft  # both extraction and split succeeded
    ]

    def worker(group):
        ft, red = group
        return _run_reduction_group(ft, red, pooled_by_ft[ft], masks_by_ft[ft], config)

    if config.threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = list(pool.map(worker, groups))
    else:
        outcomes = [worker(g) for g in groups]

    for (ft, red), (results, group_timings) in zip(groups, outcomes):
        cells.update(results)
        for name, dt in group_timings.items():
            timings[f"{ft}|{red}|{name}" if name == "reduce" else name] = dt
        _write_cell_logs(runs_dir, results)

    report = ExperimentReport(config=config.to_dict(), seed=config.seed, cells=cells)
    ds._atomic_write(os.path.join(out_dir, "report.json"), report.to_json().encode("ascii"))
    _write_table_csv(os.path.join(out_dir, "table1.csv"), report)
    ds._atomic_write(
        os.path.join(out_dir, "timings.json"),
        (json.dumps({k: round(v, 6) for k, v in sorted(timings.items())}, indent=2) + "\n").encode("ascii"),
    )
    return report


def _write_cell_logs(runs_dir: str, results: dict) -> None:
    for key, outcome in results.items():
        cell_dir = os.path.join(runs_dir, key.replace("|", "__"))
        os.makedirs(cell_dir, exist_ok=True)
        lines = [f"cell: {key}", f"status: {outcome['status']}"]
        if outcome["status"] == "ok":
            for name, value in sorted(outcome["metrics"].items()):
                lines.append(f"{name}: {value}")
        else:
            lines.append(f"reason: {outcome['reason']}")
        ds._atomic_write(os.path.join(cell_dir, "log.txt"), ("\n".join(lines) + "\n").encode("ascii"))


def _write_table_csv(path: str, report: ExperimentReport) -> None:
    lines = ["feature_type,reduction,model,accuracy,precision,recall,f1,roc_auc,status"]
    for key in sorted(report.cells):
        ft, red, model = key.split("|")
        outcome = report.cells[key]
        if outcome["status"] == "ok":
            m = outcome["metrics"]
            auc = "" if m["roc_auc"] is None else f"{m['roc_auc']:.4f}"
            lines.append(
                f"{ft},{red},{model},{m['accuracy']:.4f},{m['precision']:.4f},"
                f"{m['recall']:.4f},{m['f1']:.4f},{auc},ok"
            )
        else:
            lines.append(f"{ft},{red},{model},,,,,,failed")
    ds._atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def load_report(path: str) -> ExperimentReport:
    with open(path, "r") as fh:
        raw = json.load(fh)
    return ExperimentReport(config=raw["config"], seed=raw["seed"], cells=raw["cells"])
