"""Synthetic drifting-stream generators, CSV loading, and segment/batch structuring.

A stream is a three-level hierarchy: samples grouped into fixed-size batches,
batches grouped into segments (one concept per segment). Five synthetic
generators inject covariate shift and/or concept drift at segment boundaries;
a CSV loader structures real data the same way.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

GENERATOR_NAMES = ("sea", "random_rbf", "sine", "hyperplane", "covcon", "csv")

# Classic SEA concept schedule: label 1 iff f0 + f1 <= theta, theta cycling
# per segment to create sudden drift.
SEA_THRESHOLDS = (8.0, 9.0, 7.0, 9.5)


@dataclass(frozen=True, eq=False)
class Sample:
    """One labeled observation."""

    features: np.ndarray
    label: int


@dataclass(eq=False)
class Batch:
    """Contiguous block of samples; the unit of ranking and selection."""

    batch_id: int
    X: np.ndarray  # (n, n_features)
    y: np.ndarray  # (n,) integer class labels

    def __len__(self) -> int:
        return len(self.y)

    @property
    def samples(self) -> list[Sample]:
        return [Sample(self.X[i], int(self.y[i])) for i in range(len(self.y))]


@dataclass(eq=False)
class SampleSet:
    """Plain sample collection (validation / test splits)."""

    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass(eq=False)
class Segment:
    """Maximal run of contiguous batches assumed to share one concept."""

    segment_id: int
    batches: list[Batch]

    def __len__(self) -> int:
        return sum(len(b) for b in self.batches)

    @cached_property
    def X(self) -> np.ndarray:
        return np.concatenate([b.X for b in self.batches])

    @cached_property
    def y(self) -> np.ndarray:
        return np.concatenate([b.y for b in self.batches])


@dataclass(frozen=True)
class StreamSpec:
    """Shape and provenance of a stream: generator, sizes, seed, parameters."""

    generator: str
    total_size: int
    n_features: int
    n_classes: int
    num_segments: int
    batches_per_segment: int
    batch_size: int
    seed: int = 0
    generator_params: dict = field(default_factory=dict)

    @property
    def segment_size(self) -> int:
        return self.batches_per_segment * self.batch_size

    @property
    def used_size(self) -> int:
        return self.num_segments * self.segment_size


@dataclass(eq=False)
class SegmentedStream:
    """Immutable-after-construction stream; `current` is the latest segment."""

    spec: StreamSpec
    segments: list[Segment]
    current: int

    @property
    def current_segment(self) -> Segment:
        return self.segments[self.current]

    @property
    def previous_segments(self) -> list[Segment]:
        return self.segments[: self.current]


# Per-dataset defaults: size, features, classes, segments, batches/segment,
# batch size. Users can run any custom shape; strict mode pins these.
NAMED_SPECS: dict[str, StreamSpec] = {
    "sea": StreamSpec("sea", 16_000, 3, 2, 8, 20, 100),
    "random_rbf": StreamSpec("random_rbf", 16_000, 10, 2, 8, 20, 100),
    "sine": StreamSpec("sine", 16_000, 4, 2, 8, 20, 100),
    "hyperplane": StreamSpec("hyperplane", 16_000, 10, 2, 8, 20, 100),
    "covcon": StreamSpec("covcon", 10_000, 2, 2, 5, 2, 1_000),
    "covcon_5m": StreamSpec("covcon", 5_000_000, 2, 2, 10, 10, 50_000),
}


def named_spec(name: str, seed: int = 0) -> StreamSpec:
    """Return the default spec for a named dataset with the given seed."""
    try:
        base = NAMED_SPECS[name]
    except KeyError:
        raise ValueError(f"unknown dataset name {name!r}; known: {sorted(NAMED_SPECS)}")
    return replace(base, seed=seed)


def validate_spec(spec: StreamSpec, strict: bool = False) -> None:
    """Check structural invariants; with strict=True the shape must equal a named default."""
    if spec.generator not in GENERATOR_NAMES:
        raise ValueError(f"unknown generator {spec.generator!r}")
    for name in ("total_size", "n_features", "n_classes", "num_segments",
                 "batches_per_segment", "batch_size"):
        if getattr(spec, name) < 1:
            raise ValueError(f"{name} must be >= 1")
    if spec.seed < 0:
        raise ValueError("seed must be non-negative")
    if spec.used_size > spec.total_size:
        raise ValueError(
            f"num_segments * batches_per_segment * batch_size = {spec.used_size} "
            f"exceeds total_size = {spec.total_size}"
        )
    if strict:
        shape = (spec.generator, spec.total_size, spec.n_features, spec.n_classes,
                 spec.num_segments, spec.batches_per_segment, spec.batch_size)
        known = {
            (s.generator, s.total_size, s.n_features, s.n_classes,
             s.num_segments, s.batches_per_segment, s.batch_size)
            for s in NAMED_SPECS.values()
        }
        if shape not in known:
            raise ValueError(f"strict mode: spec shape {shape} matches no named dataset")


def spec_to_dict(spec: StreamSpec) -> dict:
    return {
        "generator": spec.generator,
        "total_size": spec.total_size,
        "n_features": spec.n_features,
        "n_classes": spec.n_classes,
        "num_segments": spec.num_segments,
        "batches_per_segment": spec.batches_per_segment,
        "batch_size": spec.batch_size,
        "seed": spec.seed,
        "generator_params": dict(spec.generator_params),
    }


def spec_from_dict(d: dict) -> StreamSpec:
    known = set(spec_to_dict(StreamSpec("sea", 1, 1, 1, 1, 1, 1)))
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown spec keys: {sorted(extra)}")
    return StreamSpec(**d)


def save_spec(spec: StreamSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec_to_dict(spec), f, indent=2)


def load_spec(path: str) -> StreamSpec:
    with open(path, encoding="utf-8") as f:
        return spec_from_dict(json.load(f))


def _assemble(spec: StreamSpec, X: np.ndarray, y: np.ndarray) -> SegmentedStream:
    """Slice flat (X, y) arrays into segments and batches with global batch ids."""
    seg_size = spec.segment_size
    segments = []
    bid = 0
    for s in range(spec.num_segments):
        base = s * seg_size
        batches = []
        for b in range(spec.batches_per_segment):
            lo = base + b * spec.batch_size
            hi = lo + spec.batch_size
            batches.append(Batch(bid, X[lo:hi], y[lo:hi].astype(np.int64)))
            bid += 1
        segments.append(Segment(s, batches))
    return SegmentedStream(spec=spec, segments=segments, current=spec.num_segments - 1)


def _require(spec: StreamSpec, generator: str, n_features: int, n_classes: int,
             strict: bool) -> None:
    validate_spec(spec, strict=strict)
    if spec.generator != generator:
        raise ValueError(f"spec.generator is {spec.generator!r}, expected {generator!r}")
    if spec.n_features != n_features:
        raise ValueError(f"{generator} requires {n_features} features, got {spec.n_features}")
    if spec.n_classes != n_classes:
        raise ValueError(f"{generator} requires {n_classes} classes, got {spec.n_classes}")


def gen_sea(spec: StreamSpec, strict: bool = False) -> SegmentedStream:
    """SEA stream: features uniform on [0,10]^3, label 1 iff f0 + f1 <= theta_s.

    The threshold cycles through SEA_THRESHOLDS across segments, producing a
    sudden concept drift at every segment boundary.
    """
    _require(spec, "sea", 3, 2, strict)
    thresholds = spec.generator_params.get("thresholds", SEA_THRESHOLDS)
    rng = np.random.default_rng(spec.seed)
    n = spec.used_size
    X = rng.uniform(0.0, 10.0, size=(n, 3))
    y = np.empty(n, dtype=np.int64)
    seg = spec.segment_size
    for s in range(spec.num_segments):
        theta = thresholds[s % len(thresholds)]
        sl = slice(s * seg, (s + 1) * seg)
        y[sl] = (X[sl, 0] + X[sl, 1] <= theta).astype(np.int64)
    return _assemble(spec, X, y)


def gen_sine(spec: StreamSpec, strict: bool = False) -> SegmentedStream:
    """Sine stream: 4 features on [0,1], two relevant, two pure noise.

    Base rule: label 1 iff x1 < 0.5*sin(2*pi*x0) + 0.5. Odd segments use the
    negated rule, so every boundary is an abrupt full concept reversal.
    """
    _require(spec, "sine", 4, 2, strict)
    rng = np.random.default_rng(spec.seed)
    n = spec.used_size
    X = rng.uniform(0.0, 1.0, size=(n, 4))
    base = X[:, 1] < 0.5 * np.sin(2.0 * np.pi * X[:, 0]) + 0.5
    y = np.empty(n, dtype=np.int64)
    seg = spec.segment_size
    for s in range(spec.num_segments):
        sl = slice(s * seg, (s + 1) * seg)
        y[sl] = (base[sl] ^ (s % 2 == 1)).astype(np.int64)
    return _assemble(spec, X, y)


def gen_random_rbf(spec: StreamSpec, strict: bool = False) -> SegmentedStream:
    """RandomRBF stream: weighted Gaussian centroids with per-segment relabeling.

    Drift is realized by flipping the class of a fraction of centroids at each
    segment boundary, changing P(y|X) while P(X) stays fixed.
    """
    _require(spec, "random_rbf", 10, 2, strict)
    params = spec.generator_params
    k = int(params.get("n_centroids", 50))
    offset_scale = float(params.get("offset_scale", 0.1))
    relabel_fraction = float(params.get("relabel_fraction", 0.3))
    rng = np.random.default_rng(spec.seed)
    d, c = spec.n_features, spec.n_classes
    centers = rng.uniform(0.0, 1.0, size=(k, d))
    weights = rng.uniform(0.1, 1.0, size=k)
    weights /= weights.sum()
    labels = rng.integers(0, c, size=k)

    seg = spec.segment_size
    X = np.empty((spec.used_size, d))
    y = np.empty(spec.used_size, dtype=np.int64)
    n_flip = int(round(relabel_fraction * k))
    for s in range(spec.num_segments):
        if s > 0 and n_flip > 0:
            flip = rng.choice(k, size=n_flip, replace=False)
            labels[flip] = (labels[flip] + 1 + rng.integers(0, c - 1, size=n_flip)) % c
        idx = rng.choice(k, size=seg, p=weights)
        sl = slice(s * seg, (s + 1) * seg)
        X[sl] = centers[idx] + rng.normal(0.0, 1.0, size=(seg, d)) * offset_scale
        y[sl] = labels[idx]
    return _assemble(spec, X, y)


def gen_hyperplane(spec: StreamSpec, strict: bool = False) -> SegmentedStream:
    """Hyperplane stream: gradual drift of two designated weight coordinates.

    Label 1 iff sum_j w_j * x_j > sum_j w_j / 2 (ties -> 0). The drift-feature
    weights move by +-drift_step per drift_block samples, with a small chance
    of reversing direction at each block.
    """
    _require(spec, "hyperplane", 10, 2, strict)
    params = spec.generator_params
    drift_step = float(params.get("drift_step", 0.1))
    flip_prob = float(params.get("flip_prob", 0.1))
    n_drift = int(params.get("n_drift_features", 2))
    block = int(params.get("drift_block", 1_000))
    rng = np.random.default_rng(spec.seed)
    n, d = spec.used_size, spec.n_features
    X = rng.uniform(0.0, 1.0, size=(n, d))
    w = rng.uniform(0.0, 1.0, size=d)
    dirs = np.ones(n_drift)
    y = np.empty(n, dtype=np.int64)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        margin = X[lo:hi] @ w - w.sum() / 2.0
        y[lo:hi] = (margin > 0).astype(np.int64)
        w[:n_drift] += dirs * drift_step
        flips = rng.uniform(size=n_drift) < flip_prob
        dirs[flips] *= -1.0
    return _assemble(spec, X, y)


def covcon_schedule(num_segments: int, params: dict | None = None) -> list[dict]:
    """Per-segment covcon parameters: boundary scale, comparison direction, x0 window.

    The boundary scale grows linearly, the inequality direction flips each
    segment (concept drift), and the x0 sampling window slides (covariate
    shift). Labels are reproducible from these entries alone.
    """
    params = params or {}
    alpha0 = float(params.get("alpha0", 0.8))
    alpha_step = float(params.get("alpha_step", 0.2))
    window_step = float(params.get("window_step", 0.05))
    window_width = float(params.get("window_width", 0.75))
    rows = []
    for s in range(num_segments):
        lo = min(window_step * s, 0.95)
        hi = min(1.0, lo + window_width)
        rows.append({
            "alpha": alpha0 + alpha_step * s,
            "greater": s % 2 == 0,
            "x0_low": lo,
            "x0_high": hi,
        })
    return rows


def covcon_labels(X: np.ndarray, alpha: float, greater: bool) -> np.ndarray:
    """Label rule: compare alpha * sin(pi * x0) against x1; equality -> 0."""
    v = alpha * np.sin(np.pi * X[:, 0])
    hit = v > X[:, 1] if greater else v < X[:, 1]
    return hit.astype(np.int64)


def gen_covcon(spec: StreamSpec, strict: bool = False) -> SegmentedStream:
    """Covcon stream: simultaneous covariate shift and concept drift in 2-D."""
    _require(spec, "covcon", 2, 2, strict)
    schedule = covcon_schedule(spec.num_segments, spec.generator_params)
    rng = np.random.default_rng(spec.seed)
    seg = spec.segment_size
    X = np.empty((spec.used_size, 2))
    y = np.empty(spec.used_size, dtype=np.int64)
    for s, row in enumerate(schedule):
        sl = slice(s * seg, (s + 1) * seg)
        X[sl, 0] = rng.uniform(row["x0_low"], row["x0_high"], size=seg)
        X[sl, 1] = rng.uniform(0.0, 1.0, size=seg)
        y[sl] = covcon_labels(X[sl], row["alpha"], row["greater"])
    return _assemble(spec, X, y)


_GENERATORS = {
    "sea": gen_sea,
    "sine": gen_sine,
    "random_rbf": gen_random_rbf,
    "hyperplane": gen_hyperplane,
    "covcon": gen_covcon,
}


def generate(spec: StreamSpec, strict: bool = False) -> SegmentedStream:
    """Dispatch to the generator named by the spec (CSV specs need load_csv)."""
    if spec.generator == "csv":
        raise ValueError("csv specs are loaded with load_csv, not generated")
    try:
        fn = _GENERATORS[spec.generator]
    except KeyError:
        raise ValueError(f"unknown generator {spec.generator!r}")
    return fn(spec, strict=strict)


def load_csv(path: str, label_column: str, spec: StreamSpec,
             strict: bool = False) -> SegmentedStream:
    """Load a chronologically ordered CSV into a segmented stream.

    Expects a header row, numeric feature columns, and one integer label
    column. Rows are consumed in file order; the first
    num_segments * batches_per_segment * batch_size rows are used.
    """
    validate_spec(spec, strict=strict)
    need = spec.used_size
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: no rows")
        if label_column not in header:
            raise ValueError(f"{path}: label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
        feature_idx = [i for i in range(len(header)) if i != label_idx]
        if len(feature_idx) != spec.n_features:
            raise ValueError(
                f"{path}: {len(feature_idx)} feature columns, spec expects {spec.n_features}"
            )
        X = np.empty((need, spec.n_features))
        y = np.empty(need, dtype=np.int64)
        count = 0
        for row_num, row in enumerate(reader, start=2):  # header is line 1
            if count >= need:
                break
            try:
                for j, i in enumerate(feature_idx):
                    X[count, j] = float(row[i])
                label = int(row[label_idx])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}: row {row_num}: {exc}") from exc
            if not 0 <= label < spec.n_classes:
                raise ValueError(
                    f"{path}: row {row_num}: label {label} outside [0, {spec.n_classes})"
                )
            y[count] = label
            count += 1
    if count == 0:
        raise ValueError(f"{path}: no rows")
    if count < need:
        raise ValueError(f"{path}: only {count} data rows, spec requires {need}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{path}: non-finite feature values")
    return _assemble(spec, X, y)


def write_csv(stream: SegmentedStream, path: str) -> None:
    """Write a stream's samples in time order; floats round-trip exactly."""
    d = stream.spec.n_features
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([f"f{j}" for j in range(d)] + ["label"])
        for segment in stream.segments:
            for batch in segment.batches:
                for i in range(len(batch)):
                    writer.writerow([repr(float(v)) for v in batch.X[i]] + [int(batch.y[i])])


def split_current_segment(
    stream: SegmentedStream,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> tuple[list[Batch], SampleSet, SampleSet]:
    """Chronologically split the current segment into train batches, validation, test.

    The training fraction is re-batched at spec.batch_size with fresh batch ids
    continuing after the stream's largest id; the three parts are disjoint and
    exhaustive.
    """
    if len(ratios) != 3:
        raise ValueError("ratios must have three entries (train, validation, test)")
    if any(r <= 0 for r in ratios):
        raise ValueError(f"all split ratios must be > 0, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    seg = stream.current_segment
    X, y = seg.X, seg.y
    n = len(y)
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"segment of {n} samples too small for ratios {ratios}")
    next_id = max(b.batch_id for s in stream.segments for b in s.batches) + 1
    train_batches = []
    bs = stream.spec.batch_size
    for lo in range(0, n_train, bs):
        hi = min(lo + bs, n_train)
        train_batches.append(Batch(next_id, X[lo:hi], y[lo:hi]))
        next_id += 1
    validation = SampleSet(X[n_train:n_train + n_val], y[n_train:n_train + n_val])
    test = SampleSet(X[n_train + n_val:], y[n_train + n_val:])
    return train_batches, validation, test
