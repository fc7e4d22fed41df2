"""Drift-aware training-data selection for streaming classification.

Ranks historical training batches by random-forest leaf co-occupancy with the
test region (covariate shift) and filters drifted segments by gradient gain
and disparity scores (concept drift), then trains only on the selected data.
"""

from .datagen import (Batch, Sample, SampleSet, Segment, SegmentedStream,
                      StreamSpec, generate, load_csv, named_spec,
                      split_current_segment, write_csv)
from .forest import (BatchRanking, DecisionTree, ForestConfig, LeafBatchTable,
                     RandomForestIndex, leaf_of, load_index, rank_batches,
                     save_index, train_forest)
from .model import (DivergenceError, MlpClassifier, TrainConfig, cross_entropy,
                    evaluate, forward, last_layer_gradient, load_model,
                    mean_gradient, predict, save_model, sgd_step, softmax, train)
from .selection import (SelectionConfig, SelectionOutcome, SegmentScore,
                        disparity_score, gain_score, run_selection_training,
                        select_best_batches, select_segments,
                        tune_disparity_threshold, verify_trace)
from .bench import (ExperimentConfig, MetricsRow, run_experiment,
                    run_tradeoff_sweep, summarize)

__version__ = "0.1.0"
