"""Gradient-guided segment filtering and ranked best-batch training.

Each epoch re-scores every previous segment against the validation set under
the current model: the gain score (dot product of mean last-layer gradients)
must be positive and the disparity score (L2 distance between them) must stay
below a threshold for a segment to be kept. Training then updates on the
best-ranked batches, one per validation sample, drawn from the kept segments.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import Batch, SampleSet, SegmentedStream, split_current_segment
from .forest import (ForestConfig, RandomForestIndex, ranking_orders, train_forest)
from .model import (MlpClassifier, TrainConfig, _epoch_pass, make_optimizer,
                    mean_gradient, mean_loss, train)


class SelectionSoundnessError(AssertionError):
    """A per-epoch trace violated the segment selection rule."""


@dataclass
class SelectionConfig:
    disparity_threshold: float = 1.0
    threshold_search: tuple[float, ...] | None = None  # grid for tuning, or None
    train: TrainConfig = field(default_factory=TrainConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    hidden_dim: int = 256
    # Escape hatches for reduction/ablation runs: disabling the gain filter
    # treats every gain as positive; disabling the ranking filter trains on
    # all batches of the kept segments. max_best_batches caps the per-epoch
    # batch list (kept in preference order) for trade-off sweeps.
    use_gain_filter: bool = True
    use_ranking_filter: bool = True
    max_best_batches: int | None = None

    def validate(self) -> None:
        if not self.disparity_threshold > 0:
            raise ValueError("disparity_threshold must be > 0")
        self.train.validate()


@dataclass
class SegmentScore:
    segment_id: int
    gain: float
    disparity: float
    selected: bool


@dataclass(eq=False)
class EpochTrace:
    epoch: int
    scores: list[SegmentScore]
    selected: set[int]
    best_batch_ids: tuple[int, ...]
    validation_loss: float


@dataclass(eq=False)
class SelectionOutcome:
    selected_segments: set[int]
    best_batches: tuple[int, ...]
    data_used_fraction: float
    model: MlpClassifier
    trace: list[EpochTrace]
    best_epoch: int
    split_ratios: tuple[float, float, float]
    forest_time_s: float = 0.0
    train_time_s: float = 0.0


@dataclass(eq=False)
class TrainingPool:
    """All batches available for training plus their segment membership."""

    batches: list[Batch]
    batch_segment: dict[int, int]
    current_segment_id: int
    current_batch_ids: tuple[int, ...]

    @property
    def total_samples(self) -> int:
        return sum(len(b) for b in self.batches)

    def by_id(self, batch_id: int) -> Batch:
        return self._index[batch_id]

    def __post_init__(self) -> None:
        self._index = {b.batch_id: b for b in self.batches}


def build_pool(stream: SegmentedStream, train_batches: list[Batch]) -> TrainingPool:
    """Previous segments' batches plus the current segment's training split."""
    batches: list[Batch] = []
    batch_segment: dict[int, int] = {}
    for seg in stream.previous_segments:
        for b in seg.batches:
            batches.append(b)
            batch_segment[b.batch_id] = seg.segment_id
    cur = stream.current_segment.segment_id
    for b in train_batches:
        batches.append(b)
        batch_segment[b.batch_id] = cur
    return TrainingPool(batches, batch_segment, cur,
                        tuple(b.batch_id for b in train_batches))


def gain_score(g_a: np.ndarray, g_b: np.ndarray) -> float:
    """Dot product of two mean gradient vectors; positive predicts loss reduction."""
    g_a = np.asarray(g_a, dtype=np.float64).ravel()
    g_b = np.asarray(g_b, dtype=np.float64).ravel()
    if g_a.shape != g_b.shape:
        raise ValueError(f"gradient length mismatch: {g_a.shape} vs {g_b.shape}")
    return float(g_a @ g_b)


def disparity_score(g_a: np.ndarray, g_b: np.ndarray) -> float:
    """L2 distance between two mean gradient vectors; proxies drift severity."""
    g_a = np.asarray(g_a, dtype=np.float64).ravel()
    g_b = np.asarray(g_b, dtype=np.float64).ravel()
    if g_a.shape != g_b.shape:
        raise ValueError(f"gradient length mismatch: {g_a.shape} vs {g_b.shape}")
    return float(np.linalg.norm(g_a - g_b))


def select_segments(
    model: MlpClassifier,
    prev_segments: list,
    current_train: list[Batch],
    current_segment_id: int,
    validation: SampleSet,
    disparity_threshold: float,
    use_gain_filter: bool = True,
) -> tuple[set[int], list[SegmentScore]]:
    """Score every segment against the validation gradient; keep the aligned ones.

    A previous segment joins the selection iff its gain is strictly positive
    and its disparity is strictly below the threshold. The current segment is
    always selected.
    """
    if len(validation) == 0:
        raise ValueError("empty validation set")
    g_val = mean_gradient(model, validation.X, validation.y)
    selected: set[int] = set()
    scores: list[SegmentScore] = []
    for seg in prev_segments:
        g_seg = mean_gradient(model, seg.X, seg.y)
        gain = gain_score(g_seg, g_val)
        disparity = disparity_score(g_seg, g_val)
        keep = (gain > 0 or not use_gain_filter) and disparity < disparity_threshold
        scores.append(SegmentScore(seg.segment_id, gain, disparity, keep))
        if keep:
            selected.add(seg.segment_id)
    cur_X = np.concatenate([b.X for b in current_train])
    cur_y = np.concatenate([b.y for b in current_train])
    g_cur = mean_gradient(model, cur_X, cur_y)
    scores.append(SegmentScore(current_segment_id, gain_score(g_cur, g_val),
                               disparity_score(g_cur, g_val), True))
    selected.add(current_segment_id)
    return selected, scores


def select_best_batches(
    validation: SampleSet,
    index: RandomForestIndex,
    selected_segments: set[int],
    batch_segment: dict[int, int],
    fallback_batch_ids: tuple[int, ...] = (),
    orders: np.ndarray | None = None,
) -> list[int]:
    """For each validation sample, take its best-ranked batch from a kept segment.

    Results are deduplicated in first-insertion order. A sample whose entire
    ranking misses the kept segments falls back to the current segment's
    batches.
    """
    if orders is None:
        orders = ranking_orders(index, validation.X)
    batch_ids = index.batch_ids
    in_sel = np.array([batch_segment[int(b)] in selected_segments for b in batch_ids])
    hits = in_sel[orders]                      # (n_val, n_batches) bool
    has_hit = hits.any(axis=1)
    first = hits.argmax(axis=1)
    chosen = batch_ids[orders[np.arange(len(orders)), first]]
    picked: dict[int, None] = {}
    for i in range(len(chosen)):
        if has_hit[i]:
            picked.setdefault(int(chosen[i]), None)
        else:
            for b in fallback_batch_ids:
                picked.setdefault(int(b), None)
    return list(picked)


def compute_data_used(best_batch_ids, pool: TrainingPool) -> float:
    """Fraction of pool samples in (selected batches union current training split)."""
    used = set(int(b) for b in best_batch_ids) | set(pool.current_batch_ids)
    n_used = sum(len(pool.by_id(b)) for b in used)
    return n_used / pool.total_samples


def recount_data_used(outcome: SelectionOutcome, stream: SegmentedStream) -> float:
    """Recompute the outcome's data-used fraction from the stream alone."""
    train_batches, _, _ = split_current_segment(stream, outcome.split_ratios)
    pool = build_pool(stream, train_batches)
    return compute_data_used(outcome.best_batches, pool)


def run_selection_training(
    stream: SegmentedStream,
    config: SelectionConfig,
    split: tuple[list[Batch], SampleSet, SampleSet] | None = None,
) -> SelectionOutcome:
    """Full selection-driven training loop; returns the best-epoch snapshot.

    The forest is built once on all pool batches. Every epoch re-runs segment
    selection under the evolving model, walks the precomputed validation
    rankings for the best batches, performs one pass of updates over them, and
    applies early stopping on validation loss. Data-used accounting keys on
    the epoch whose snapshot is returned.
    """
    config.validate()
    if not stream.segments:
        raise ValueError("stream has no segments")
    if split is None:
        split = split_current_segment(stream, config.split_ratios)
    train_batches, validation, _ = split
    spec = stream.spec
    t_cfg = config.train

    if len(stream.segments) == 1:
        # No history to select from: the loop degenerates to plain training
        # on the current split.
        model = MlpClassifier(spec.n_features, spec.n_classes, config.hidden_dim,
                              seed=t_cfg.seed)
        t0 = time.monotonic()
        train(model, train_batches, validation, t_cfg)
        pool = build_pool(stream, train_batches)
        return SelectionOutcome(
            selected_segments={stream.current_segment.segment_id},
            best_batches=tuple(b.batch_id for b in train_batches),
            data_used_fraction=1.0,
            model=model,
            trace=[],
            best_epoch=0,
            split_ratios=config.split_ratios,
            train_time_s=time.monotonic() - t0,
        )

    pool = build_pool(stream, train_batches)
    prev_segments = stream.previous_segments

    forest_time = 0.0
    orders = None
    index = None
    if config.use_ranking_filter:
        t0 = time.monotonic()
        index = train_forest(pool.batches, config.forest)
        orders = ranking_orders(index, validation.X)
        forest_time = time.monotonic() - t0

    model = MlpClassifier(spec.n_features, spec.n_classes, config.hidden_dim,
                          seed=t_cfg.seed)
    rng = np.random.default_rng(t_cfg.seed)
    t_d = config.disparity_threshold

    t0 = time.monotonic()
    trace: list[EpochTrace] = []
    best_loss = np.inf
    best_params = model.snapshot()
    best_epoch = 0
    best_batches: tuple[int, ...] = tuple(pool.current_batch_ids)
    best_selected: set[int] = {pool.current_segment_id}
    bad = 0
    for epoch in range(1, t_cfg.max_epochs + 1):
        selected, scores = select_segments(
            model, prev_segments, train_batches, pool.current_segment_id,
            validation, t_d, config.use_gain_filter)
        if config.use_ranking_filter:
            batch_ids = select_best_batches(
                validation, index, selected, pool.batch_segment,
                fallback_batch_ids=pool.current_batch_ids, orders=orders)
        else:
            batch_ids = [b.batch_id for b in pool.batches
                         if pool.batch_segment[b.batch_id] in selected]
        if config.max_best_batches is not None:
            batch_ids = batch_ids[:max(1, config.max_best_batches)]
        if any(pool.batch_segment[b] not in selected for b in batch_ids):
            raise SelectionSoundnessError("best batches escaped the selected segments")

        _epoch_pass(model, [pool.by_id(b) for b in batch_ids],
                    t_cfg.learning_rate, rng)
        loss = mean_loss(model, validation.X, validation.y)
        trace.append(EpochTrace(epoch, scores, selected, tuple(batch_ids), loss))
        if loss < best_loss:
            best_loss = loss
            best_params = model.snapshot()
            best_epoch = epoch
            best_batches = tuple(batch_ids)
            best_selected = set(selected)
            bad = 0
        else:
            bad += 1
            if bad >= t_cfg.patience:
                break
    model.restore(best_params)

    return SelectionOutcome(
        selected_segments=best_selected,
        best_batches=best_batches,
        data_used_fraction=compute_data_used(best_batches, pool),
        model=model,
        trace=trace,
        best_epoch=best_epoch,
        split_ratios=config.split_ratios,
        forest_time_s=forest_time,
        train_time_s=time.monotonic() - t0,
    )


def tune_disparity_threshold(stream: SegmentedStream, config: SelectionConfig) -> float:
    """Grid-search the disparity threshold on validation accuracy; ties pick smaller."""
    grid = config.threshold_search
    if not grid:
        raise ValueError("threshold_search grid is empty")
    split = split_current_segment(stream, config.split_ratios)
    _, validation, _ = split
    best_t = None
    best_acc = -np.inf
    for t_d in sorted(float(t) for t in grid):
        outcome = run_selection_training(
            stream, replace(config, disparity_threshold=t_d), split=split)
        preds = np.argmax(outcome.model.logits(validation.X), axis=-1)
        acc = float(np.mean(preds == validation.y))
        if acc > best_acc:
            best_acc = acc
            best_t = t_d
    return best_t


def default_threshold_grid(n: int = 20) -> tuple[float, ...]:
    """Evenly spaced interior points of the open interval (0, 2)."""
    return tuple(np.linspace(0.0, 2.0, n + 2)[1:-1])


def verify_trace(outcome: SelectionOutcome, disparity_threshold: float,
                 current_segment_id: int) -> None:
    """Assert the strict selection rule held in every recorded epoch."""
    for rec in outcome.trace:
        if current_segment_id not in rec.selected:
            raise SelectionSoundnessError(
                f"epoch {rec.epoch}: current segment missing from selection")
        for score in rec.scores:
            if score.segment_id == current_segment_id:
                if not score.selected:
                    raise SelectionSoundnessError(
                        f"epoch {rec.epoch}: current segment marked unselected")
                continue
            rule = score.gain > 0 and score.disparity < disparity_threshold
            if score.selected != rule:
                raise SelectionSoundnessError(
                    f"epoch {rec.epoch}: segment {score.segment_id} selected={score.selected} "
                    f"but gain={score.gain}, disparity={score.disparity}")
            if score.selected != (score.segment_id in rec.selected):
                raise SelectionSoundnessError(
                    f"epoch {rec.epoch}: score/selection set disagree for "
                    f"segment {score.segment_id}")


def write_trace(trace: list[EpochTrace], path: str) -> None:
    """Emit one JSON object per epoch (line-delimited) for downstream tooling."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in trace:
            f.write(json.dumps({
                "epoch": rec.epoch,
                "segments": [
                    {"segment_id": s.segment_id, "gain": s.gain,
                     "disparity": s.disparity, "selected": s.selected}
                    for s in rec.scores
                ],
                "selected": sorted(rec.selected),
                "n_best_batches": len(rec.best_batch_ids),
                "validation_loss": rec.validation_loss,
            }) + "\n")
