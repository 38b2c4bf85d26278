"""Command-line entry point for the pipeline stages.

Global flags (--seed, --config, --out) come before the subcommand and
override the matching values in any loaded config file. Exit codes: 0 on
success, 1 on stage errors (structured message on stderr), 2 on usage
errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataset as ds
from .dimred import reduce_features
from .experiment import ExperimentConfig, load_report, run_experiment
from .expression import expression_profile
from .grand import (
    GrandConfig,
    load_checkpoint,
    predict_grand,
    save_checkpoint,
    save_history_csv,
    train_grand,
)
from .graphs import (
    assemble_training_graph,
    normalize_adjacency,
    read_edge_list,
    write_edge_list,
)
from .harness import compute_metrics, standardize_features, stratified_split
from .plots import bar_chart_svg
from .radiomics import RadiomicsConfig, radiomic_feature_table
from .synth import SynthConfig, generate_synthetic_dataset
from .trees import (
    BoostConfig,
    ForestConfig,
    load_model,
    predict_tabular,
    train_gradient_boosting,
    train_random_forest,
)

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "roc_auc")


class StageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellgraph",
        description="Cell classification pipeline: synthesize, extract, embed, train, compare.",
    )
    parser.add_argument("--seed", type=int, default=None, help="global seed, overrides config files")
    parser.add_argument("--config", default=None, help="config file for the chosen stage")
    parser.add_argument("--out", default=None, help="output path, overrides stage flag")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", dest="stage_config", default=None, help="synth config JSON")
    p.add_argument("--out", dest="stage_out", default=None, help="output dataset directory")

    p = sub.add_parser("extract", help="extract per-cell features from a dataset")
    p.add_argument("--data", required=True, help="dataset directory containing manifest.json")
    p.add_argument("--features", required=True, choices=["expression", "radiomics"])
    p.add_argument("--out", dest="stage_out", default=None, help="output feature CSV")

    p = sub.add_parser("graph", help="build a cell graph from a feature table")
    p.add_argument("--features", required=True, help="feature CSV")
    p.add_argument("--kind", required=True, choices=["feature", "spatial"])
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--metric", default="euclidean", choices=["euclidean", "cosine"])
    p.add_argument("--out", dest="stage_out", default=None, help="output edge list")

    p = sub.add_parser("reduce", help="reduce feature dimensionality")
    p.add_argument("--method", required=True, choices=["none", "pca", "tsne", "umap"])
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--in", dest="input", required=True, help="input feature CSV")
    p.add_argument("--out", dest="stage_out", default=None, help="output embedding CSV")

    p = sub.add_parser("train", help="train the graph classifier")
    p.add_argument("--graph", required=True, help="edge-list file")
    p.add_argument("--features", required=True, help="feature CSV")
    p.add_argument("--labels", required=True, help="labels CSV (feature-table schema)")
    p.add_argument("--out", dest="stage_out", default=None, help="model checkpoint path")
    p.add_argument("--history", default=None, help="optional training history CSV")

    p = sub.add_parser("baseline", help="train a tabular baseline")
    p.add_argument("--model", required=True, choices=["random_forest", "gradient_boosting"])
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", dest="stage_out", default=None, help="model file path")

    p = sub.add_parser("evaluate", help="score a trained model on labeled cells")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--graph", default=None, help="edge list (required for graph models)")
    p.add_argument("--predictions", default=None, help="optional per-cell prediction CSV")
    p.add_argument("--out", dest="stage_out", default=None, help="metrics JSON path")

    p = sub.add_parser("experiment", help="run the full comparison matrix")
    p.add_argument("--config", dest="stage_config", default=None, help="experiment config JSON")
    p.add_argument("--data", default=None, help="dataset directory, overrides config")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("--out", dest="stage_out", default=None, help="output report directory")

    p = sub.add_parser("report", help="render a report to CSV and SVG charts")
    p.add_argument("--report", required=True, help="report.json path")
    p.add_argument("--out", dest="stage_out", default=None, help="output directory")

    return parser


def _load_json(path: str) -> dict:
    try:
        with open(path, "r") as fh:
            return json.load(fh)
    except OSError as exc:
        raise StageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise StageError(f"{path}: invalid JSON: {exc}") from exc


def _resolve_out(args, default: str | None = None) -> str:
    out = args.out or getattr(args, "stage_out", None) or default
    if out is None:
        raise StageError("no output path given (use --out)")
    return out


def _load_table_sorted(path: str) -> ds.CellTable:
    if not os.path.isfile(path):
        raise StageError(f"feature table not found: {path}")
    table = ds.read_feature_csv(path)
    order = sorted(range(len(table)), key=lambda i: (table.sample_ids[i], int(table.cell_ids[i])))
    return ds.CellTable(
        cell_ids=table.cell_ids[order],
        sample_ids=[table.sample_ids[i] for i in order],
        centroids=table.centroids[order],
        labels=table.labels[order],
        features=table.features[order],
        feature_names=table.feature_names,
    )


def _label_vector(table: ds.CellTable, labels_path: str) -> np.ndarray:
    labeled = _load_table_sorted(labels_path)
    by_key = {
        (labeled.sample_ids[i], int(labeled.cell_ids[i])): int(labeled.labels[i])
        for i in range(len(labeled))
    }
    out = np.full(len(table), -1, dtype=np.int64)
    for i in range(len(table)):
        key = (table.sample_ids[i], int(table.cell_ids[i]))
        if key in by_key:
            out[i] = by_key[key]
    return out


# ---------------------------------------------------------------------------
# stage implementations


def _cmd_synth(args) -> None:
    raw = _load_json(args.stage_config or args.config) if (args.stage_config or args.config) else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    config = SynthConfig.from_dict(raw)
    out = _resolve_out(args)
    generate_synthetic_dataset(config, out)
    print(f"wrote synthetic dataset to {out}")


def _cmd_extract(args) -> None:
    manifest = os.path.join(args.data, "manifest.json")
    if not os.path.isfile(manifest):
        raise StageError(f"dataset manifest not found: {manifest}")
    data = ds.load_dataset(manifest)
    tables = []
    for sample in data.samples:
        labels = {int(c): int(l) for c, l in zip(sample.cells.cell_ids, sample.cells.labels)}
        if args.features == "expression":
            tables.append(expression_profile(sample.stack, sample.mask, labels=labels))
        else:
            rconf = RadiomicsConfig.from_dict(_load_json(args.config)) if args.config else RadiomicsConfig()
            tables.append(radiomic_feature_table(sample.stack, sample.mask, rconf, labels=labels))
    from .synth import concat_tables

    table = concat_tables(tables)
    out = _resolve_out(args, default=f"{args.features}.csv")
    table.to_csv(out)
    print(f"wrote {len(table)} cells x {len(table.feature_names)} features to {out}")


def _cmd_graph(args) -> None:
    table = _load_table_sorted(args.features)
    graph, _, _ = assemble_training_graph([table], args.kind, args.k, metric=args.metric)
    out = _resolve_out(args, default="graph.edges")
    write_edge_list(out, graph)
    print(f"wrote graph with {graph.n_nodes} nodes, {graph.n_edges} edges to {out}")


def _cmd_reduce(args) -> None:
    table = _load_table_sorted(args.input)
    seed = args.seed if args.seed is not None else 0
    kwargs = _load_json(args.config) if args.config else {}
    emb = reduce_features(table.features, args.method, args.dim, seed=seed, **kwargs)
    out_table = ds.CellTable(
        cell_ids=table.cell_ids,
        sample_ids=table.sample_ids,
        centroids=table.centroids,
        labels=table.labels,
        features=emb.Y,
        feature_names=[f"{args.method}_{i}" for i in range(emb.Y.shape[1])],
    )
    out = _resolve_out(args, default="embedding.csv")
    out_table.to_csv(out)
    print(f"wrote {emb.Y.shape[0]}x{emb.Y.shape[1]} embedding to {out}")


def _cmd_train(args) -> None:
    table = _load_table_sorted(args.features)
    graph = read_edge_list(args.graph)
    if graph.n_nodes != len(table):
        raise StageError(f"graph has {graph.n_nodes} nodes but feature table has {len(table)} rows")
    y = _label_vector(table, args.labels)
    raw = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    config = GrandConfig.from_dict(raw)
    masks = stratified_split(y, seed=config.seed)
    Z, _, _ = standardize_features(table.features, masks.train)
    adj = normalize_adjacency(graph)
    model = train_grand(adj, Z, y, (masks.train, masks.val), config, n_classes=2)
    out = _resolve_out(args, default="grand.ckpt")
    save_checkpoint(out, model)
    if args.history:
        save_history_csv(args.history, model)
    probs, _ = predict_grand(model, adj, Z)
    metrics = compute_metrics(y[masks.test], probs[masks.test])
    print(f"saved checkpoint to {out}; test f1 {metrics.f1:.4f}")


def _cmd_baseline(args) -> None:
    table = _load_table_sorted(args.features)
    y = _label_vector(table, args.labels)
    raw = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    masks = stratified_split(y, seed=raw.get("seed", 0))
    if args.model == "random_forest":
        model = train_random_forest(table.features[masks.train], y[masks.train], ForestConfig.from_dict(raw))
    else:
        model = train_gradient_boosting(table.features[masks.train], y[masks.train], BoostConfig.from_dict(raw))
    from .trees import save_model

    out = _resolve_out(args, default=f"{args.model}.bin")
    save_model(out, model)
    probs = predict_tabular(model, table.features)
    metrics = compute_metrics(y[masks.test], probs[masks.test])
    print(f"saved model to {out}; test f1 {metrics.f1:.4f}")


def _cmd_evaluate(args) -> None:
    table = _load_table_sorted(args.features)
    y = _label_vector(table, args.labels)
    labeled = y >= 0
    if not labeled.any():
        raise StageError("no labeled cells to evaluate")
    with open(args.model, "rb") as fh:
        magic = fh.read(5)
    if magic == b"GRND1":
        if not args.graph:
            raise StageError("graph models need --graph for evaluation")
        graph = read_edge_list(args.graph)
        model = load_checkpoint(args.model, config=GrandConfig())
        # checkpoints hold weights for standardized inputs; without stored
        # statistics the labeled rows provide the scaling
        Z, _, _ = standardize_features(table.features, labeled)
        probs, _ = predict_grand(model, normalize_adjacency(graph), Z)
    else:
        model = load_model(args.model)
        probs = predict_tabular(model, table.features)
    metrics = compute_metrics(y[labeled], probs[labeled])
    out = _resolve_out(args, default="metrics.json")
    payload = json.dumps(metrics.to_dict(), sort_keys=True, indent=2) + "\n"
    ds._atomic_write(out, payload.encode("ascii"))
    if args.predictions:
        lines = ["cell_id,sample_id,prob_healthy,prob_tumor,predicted"]
        for i in range(len(table)):
            lines.append(
                f"{int(table.cell_ids[i])},{table.sample_ids[i]},"
                f"{format(probs[i, 0], '.17g')},{format(probs[i, 1], '.17g')},"
                f"{int(probs[i, 1] >= 0.5)}"
            )
        ds._atomic_write(args.predictions, ("\n".join(lines) + "\n").encode("ascii"))
    print(f"wrote metrics to {out}")


def _cmd_experiment(args) -> None:
    raw = _load_json(args.stage_config or args.config) if (args.stage_config or args.config) else {}
    if args.data is not None:
        raw["data_dir"] = args.data
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.threads is not None:
        raw["threads"] = args.threads
    elif "threads" not in raw:
        raw["threads"] = os.cpu_count() or 1
    config = ExperimentConfig.from_dict(raw)
    out = _resolve_out(args, default="experiment_out")
    report = run_experiment(config, out)
    n_ok = sum(1 for c in report.cells.values() if c["status"] == "ok")
    print(f"experiment complete: {n_ok}/{len(report.cells)} cells ok; report in {out}")


def _cmd_report(args) -> None:
    if not os.path.isfile(args.report):
        raise StageError(f"report not found: {args.report}")
    report = load_report(args.report)
    out = _resolve_out(args, default="report_out")
    os.makedirs(out, exist_ok=True)
    from .experiment import _write_table_csv

    _write_table_csv(os.path.join(out, "table1.csv"), report)
    for metric in METRIC_NAMES:
        bars = []
        for key in sorted(report.cells):
            outcome = report.cells[key]
            if outcome["status"] == "ok" and outcome["metrics"].get(metric) is not None:
                bars.append((key, outcome["metrics"][metric]))
        svg = bar_chart_svg(f"{metric} by pipeline cell", bars)
        ds._atomic_write(os.path.join(out, f"{metric}.svg"), svg.encode("ascii"))
    print(f"wrote table and {len(METRIC_NAMES)} charts to {out}")


_COMMANDS = {
    "synth": _cmd_synth,
    "extract": _cmd_extract,
    "graph": _cmd_graph,
    "reduce": _cmd_reduce,
    "train": _cmd_train,
    "baseline": _cmd_baseline,
    "evaluate": _cmd_evaluate,
    "experiment": _cmd_experiment,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - stage failures map to exit 1
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
