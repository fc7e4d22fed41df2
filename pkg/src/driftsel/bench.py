"""Experiment harness: methods x datasets x seeds, metrics CSV, trade-off sweep, CLI.

Methods:
  full_data        train on every pool batch (all history plus current split)
  current_segment  train on the current segment's training split only
  alg1_only        covariate-shift ranking only (no gradient filtering)
  ours             ranking plus per-epoch gain/disparity segment selection
  quilt_like       gain/disparity segment selection only (no ranking)
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import datagen
from .datagen import SegmentedStream, StreamSpec, split_current_segment
from .forest import ForestConfig, ranking_orders, train_forest
from .model import DivergenceError, MlpClassifier, TrainConfig, evaluate, train
from .selection import (SelectionConfig, build_pool, compute_data_used,
                        run_selection_training, select_best_batches, verify_trace)

METHODS = ("full_data", "current_segment", "alg1_only", "ours", "quilt_like")

CSV_HEADER = ["dataset", "method", "seed", "accuracy", "f1",
              "rf_time_s", "model_time_s", "total_time_s", "data_used"]

# Disparity thresholds per named dataset (the threshold is tuned per dataset
# on validation accuracy; see tune_disparity_threshold for the search).
DEFAULT_DISPARITY = {
    "sea": 1.0,
    "random_rbf": 1.0,
    "sine": 1.0,
    "hyperplane": 1.0,
    "covcon": 1.0,
    "covcon_5m": 1.0,
}


@dataclass
class ExperimentConfig:
    dataset: str
    method: str
    seeds: tuple[int, ...] = (0, 1, 2)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    csv_path: str | None = None
    label_column: str = "label"
    stream_spec: StreamSpec | None = None
    strict_table1: bool = False
    output: str | None = None

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; known: {METHODS}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.dataset == "csv":
            if not self.csv_path or self.stream_spec is None:
                raise ValueError("csv dataset requires csv_path and stream_spec")
        elif self.stream_spec is None and self.dataset not in datagen.NAMED_SPECS:
            raise ValueError(f"unknown dataset {self.dataset!r} and no stream_spec given")


@dataclass
class MetricsRow:
    dataset: str
    method: str
    seed: int
    accuracy: float
    f1: float
    rf_time_s: float
    model_time_s: float
    total_time_s: float
    data_used: float


def build_stream(config: ExperimentConfig, seed: int) -> SegmentedStream:
    if config.dataset == "csv":
        spec = replace(config.stream_spec, generator="csv")
        return datagen.load_csv(config.csv_path, config.label_column, spec,
                                strict=config.strict_table1)
    if config.stream_spec is not None:
        spec = replace(config.stream_spec, seed=seed)
    else:
        spec = datagen.named_spec(config.dataset, seed=seed)
    return datagen.generate(spec, strict=config.strict_table1)


def _seeded_selection(config: ExperimentConfig, seed: int) -> SelectionConfig:
    sel = config.selection
    return replace(sel,
                   train=replace(sel.train, seed=seed),
                   forest=replace(sel.forest, seed=seed))


def _run_single(config: ExperimentConfig, seed: int) -> MetricsRow:
    sel = _seeded_selection(config, seed)
    stream = build_stream(config, seed)
    spec = stream.spec
    split = split_current_segment(stream, sel.split_ratios)
    train_batches, validation, test = split
    pool = build_pool(stream, train_batches)

    t_start = time.monotonic()
    rf_time = 0.0
    model_time = 0.0

    if config.method == "full_data":
        model = MlpClassifier(spec.n_features, spec.n_classes, sel.hidden_dim,
                              seed=sel.train.seed)
        t0 = time.monotonic()
        train(model, pool.batches, validation, sel.train)
        model_time = time.monotonic() - t0
        data_used = 1.0
    elif config.method == "current_segment":
        model = MlpClassifier(spec.n_features, spec.n_classes, sel.hidden_dim,
                              seed=sel.train.seed)
        t0 = time.monotonic()
        train(model, train_batches, validation, sel.train)
        model_time = time.monotonic() - t0
        data_used = compute_data_used((), pool)
    elif config.method == "alg1_only":
        t0 = time.monotonic()
        index = train_forest(pool.batches, sel.forest)
        orders = ranking_orders(index, validation.X)
        all_segments = {s.segment_id for s in stream.segments}
        batch_ids = select_best_batches(validation, index, all_segments,
                                        pool.batch_segment,
                                        fallback_batch_ids=pool.current_batch_ids,
                                        orders=orders)
        rf_time = time.monotonic() - t0
        model = MlpClassifier(spec.n_features, spec.n_classes, sel.hidden_dim,
                              seed=sel.train.seed)
        t0 = time.monotonic()
        train(model, [pool.by_id(b) for b in batch_ids], validation, sel.train)
        model_time = time.monotonic() - t0
        data_used = compute_data_used(batch_ids, pool)
    elif config.method in ("ours", "quilt_like"):
        if config.method == "quilt_like":
            sel = replace(sel, use_ranking_filter=False)
        outcome = run_selection_training(stream, sel, split=split)
        verify_trace(outcome, sel.disparity_threshold,
                     stream.current_segment.segment_id)
        model = outcome.model
        rf_time = outcome.forest_time_s
        model_time = outcome.train_time_s
        data_used = outcome.data_used_fraction
    else:
        raise ValueError(f"unknown method {config.method!r}")

    accuracy, f1 = evaluate(model, test.X, test.y)
    total = time.monotonic() - t_start
    return MetricsRow(config.dataset, config.method, seed, accuracy, f1,
                      rf_time, model_time, total, data_used)


def run_experiment(config: ExperimentConfig) -> list[MetricsRow]:
    """One row per seed; divergence is recorded as a NaN row and the run continues."""
    config.validate()
    rows = []
    for seed in config.seeds:
        try:
            rows.append(_run_single(config, seed))
        except DivergenceError:
            rows.append(MetricsRow(config.dataset, config.method, seed,
                                   float("nan"), float("nan"), 0.0, 0.0, 0.0,
                                   float("nan")))
    if config.output:
        append_rows(rows, config.output)
    return rows


@dataclass
class CurvePoint:
    fraction: float
    accuracy: float
    data_used: float


def run_tradeoff_sweep(config: ExperimentConfig,
                       fractions: tuple[float, ...]) -> list[CurvePoint]:
    """Accuracy vs batch-budget curve: the selector keeps its top-ranked batches only."""
    config.validate()
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must be within (0, 1]")
    if config.method not in ("ours", "alg1_only", "quilt_like"):
        raise ValueError("trade-off sweep requires a selection-based method")
    points = []
    for frac in sorted(fractions):
        accs = []
        used = []
        for seed in config.seeds:
            sel = _seeded_selection(config, seed)
            stream = build_stream(config, seed)
            split = split_current_segment(stream, sel.split_ratios)
            pool = build_pool(stream, split[0])
            budget = max(1, round(frac * len(pool.batches)))
            sel = replace(sel, max_best_batches=budget)
            if config.method == "alg1_only":
                sel = replace(sel, use_gain_filter=False,
                              disparity_threshold=float("inf"))
            elif config.method == "quilt_like":
                sel = replace(sel, use_ranking_filter=False)
            outcome = run_selection_training(stream, sel, split=split)
            acc, _ = evaluate(outcome.model, split[2].X, split[2].y)
            accs.append(acc)
            used.append(outcome.data_used_fraction)
        points.append(CurvePoint(frac, float(np.mean(accs)), float(np.mean(used))))
    return points


@dataclass
class SummaryRow:
    dataset: str
    method: str
    n_seeds: int
    accuracy_mean: float
    accuracy_sd: float
    f1_mean: float
    f1_sd: float
    total_time_mean: float
    data_used_mean: float
    best: bool = False


def summarize(rows: list[MetricsRow]) -> list[SummaryRow]:
    """Mean and standard deviation per (dataset, method); best accuracy flagged."""
    if not rows:
        raise ValueError("no rows to summarize")
    groups: dict[tuple[str, str], list[MetricsRow]] = {}
    for r in rows:
        groups.setdefault((r.dataset, r.method), []).append(r)
    out = []
    for (dataset, method), rs in groups.items():
        acc = np.array([r.accuracy for r in rs])
        f1 = np.array([r.f1 for r in rs])
        out.append(SummaryRow(
            dataset, method, len(rs),
            float(acc.mean()), float(acc.std()),
            float(f1.mean()), float(f1.std()),
            float(np.mean([r.total_time_s for r in rs])),
            float(np.mean([r.data_used for r in rs])),
        ))
    for dataset in {s.dataset for s in out}:
        group = [s for s in out if s.dataset == dataset]
        best = max(group, key=lambda s: (s.accuracy_mean if np.isfinite(s.accuracy_mean)
                                         else -np.inf))
        best.best = True
    return out


def append_rows(rows: list[MetricsRow], path: str) -> None:
    try:
        new_file = open(path).readline() == ""
    except FileNotFoundError:
        new_file = True
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([r.dataset, r.method, r.seed,
                             repr(r.accuracy), repr(r.f1),
                             repr(r.rf_time_s), repr(r.model_time_s),
                             repr(r.total_time_s), repr(r.data_used)])


def read_rows(path: str) -> list[MetricsRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            rows.append(MetricsRow(
                rec["dataset"], rec["method"], int(rec["seed"]),
                float(rec["accuracy"]), float(rec["f1"]),
                float(rec["rf_time_s"]), float(rec["model_time_s"]),
                float(rec["total_time_s"]), float(rec["data_used"])))
    return rows


def _selection_from_dict(d: dict, dataset: str) -> SelectionConfig:
    sel_keys = {f.name for f in fields(SelectionConfig)}
    train_d = d.pop("train", {})
    forest_d = d.pop("forest", {})
    unknown = set(d) - sel_keys
    if unknown:
        raise ValueError(f"unknown selection keys: {sorted(unknown)}")
    if "disparity_threshold" not in d and dataset in DEFAULT_DISPARITY:
        d["disparity_threshold"] = DEFAULT_DISPARITY[dataset]
    if "split_ratios" in d:
        d["split_ratios"] = tuple(d["split_ratios"])
    if "threshold_search" in d and d["threshold_search"] is not None:
        d["threshold_search"] = tuple(d["threshold_search"])
    return SelectionConfig(train=TrainConfig(**train_d),
                           forest=ForestConfig(**forest_d), **d)


def load_config(path: str) -> ExperimentConfig:
    """Parse a JSON experiment config; unknown keys are rejected."""
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    dataset = raw.pop("dataset", None)
    if not dataset:
        raise ValueError(f"{path}: missing 'dataset'")
    method = raw.pop("method", None)
    if not method:
        raise ValueError(f"{path}: missing 'method'")
    seeds = tuple(raw.pop("seeds", (0, 1, 2)))
    sel_dict = raw.pop("selection", {})
    for key in ("train", "forest", "split_ratios"):
        if key in raw:  # allow the sub-configs at top level too
            sel_dict[key] = raw.pop(key)
    stream_spec = raw.pop("stream", None)
    if stream_spec is not None:
        stream_spec = datagen.spec_from_dict(stream_spec)
    config = ExperimentConfig(
        dataset=dataset,
        method=method,
        seeds=seeds,
        selection=_selection_from_dict(sel_dict, dataset),
        csv_path=raw.pop("csv_path", None),
        label_column=raw.pop("label_column", "label"),
        stream_spec=stream_spec,
        strict_table1=bool(raw.pop("strict_table1", False)),
        output=raw.pop("output", None),
    )
    if raw:
        raise ValueError(f"{path}: unknown config keys: {sorted(raw)}")
    config.validate()
    return config


def _format_summary(summaries: list[SummaryRow]) -> str:
    lines = ["dataset,method,n_seeds,accuracy_mean,accuracy_sd,f1_mean,f1_sd,"
             "total_time_mean,data_used_mean,best"]
    for s in summaries:
        lines.append(
            f"{s.dataset},{s.method},{s.n_seeds},{s.accuracy_mean:.4f},"
            f"{s.accuracy_sd:.4f},{s.f1_mean:.4f},{s.f1_sd:.4f},"
            f"{s.total_time_mean:.3f},{s.data_used_mean:.4f},{int(s.best)}")
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="driftsel",
        description="Drift-aware data selection benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--strict-table1", action="store_true")

    p_sweep = sub.add_parser("sweep", help="data-budget vs accuracy curve")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--fractions", required=True,
                         help="comma-separated fractions in (0, 1]")
    p_sweep.add_argument("--out", required=True)

    p_sum = sub.add_parser("summarize", help="aggregate a results CSV")
    p_sum.add_argument("--in", dest="in_path", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            config = load_config(args.config)
            if args.strict_table1:
                config.strict_table1 = True
            config.output = args.out
            rows = run_experiment(config)
            print(f"wrote {len(rows)} rows to {args.out}")
        elif args.command == "sweep":
            config = load_config(args.config)
            fractions = tuple(float(x) for x in args.fractions.split(","))
            points = run_tradeoff_sweep(config, fractions)
            with open(args.out, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["fraction", "accuracy", "data_used"])
                for p in points:
                    writer.writerow([repr(p.fraction), repr(p.accuracy),
                                     repr(p.data_used)])
            print(f"wrote {len(points)} curve points to {args.out}")
        elif args.command == "summarize":
            print(_format_summary(summarize(read_rows(args.in_path))))
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
