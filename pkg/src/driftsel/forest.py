"""Random-forest batch index: leaf co-occupancy tables and covariate-shift ranking.

A forest is trained on all training batches, then every original sample is
routed through every tree to build per-leaf, per-batch count tables. For each
leaf and batch the stored score counts how many peer batches have strictly
fewer samples in that leaf. Summing those scores over the trees a query lands
in ranks batches from lowest covariate shift (highest co-occupancy) to highest.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

from .datagen import Batch


@dataclass
class ForestConfig:
    n_estimators: int = 50
    max_depth: int = 20
    min_leaf: int = 1
    feature_subsample: int | str = "sqrt"  # per-split feature count, or "sqrt"
    seed: int = 0


@dataclass(eq=False)
class DecisionTree:
    """Array-encoded binary tree; feature < 0 marks a leaf node.

    Routing rule: feature value < threshold goes left, >= goes right.
    Leaf ids are dense in [0, n_leaves).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_id: np.ndarray
    n_leaves: int

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Vectorized leaf routing for a (n, d) matrix."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            f = self.feature[nd]
            go_left = X[active, f] < self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return self.leaf_id[node]


def leaf_of(tree: DecisionTree, query: np.ndarray) -> int:
    """Route one feature vector to its leaf id by threshold descent."""
    x = np.asarray(query, dtype=np.float64).ravel()
    node = 0
    while tree.feature[node] >= 0:
        if x[tree.feature[node]] < tree.threshold[node]:
            node = tree.left[node]
        else:
            node = tree.right[node]
    return int(tree.leaf_id[node])


@dataclass(eq=False)
class LeafBatchTable:
    """Per-tree sparse (n_leaves x n_batches) sample counts and dominance scores."""

    counts: list[sp.csr_matrix] = field(default_factory=list)
    scores: list[sp.csr_matrix] = field(default_factory=list)


@dataclass(eq=False)
class RandomForestIndex:
    trees: list[DecisionTree]
    tables: LeafBatchTable
    batch_ids: np.ndarray
    n_features: int


@dataclass(eq=False)
class BatchRanking:
    """Ranking of training batches for one query, most similar first."""

    order: np.ndarray            # batch ids, descending aggregate score
    aggregate_score: np.ndarray  # aligned with batch_ids
    batch_ids: np.ndarray


@njit(cache=True)
def _grow_tree(X, y, n_classes, max_depth, min_leaf, n_split_features, seed):
    """Grow one Gini tree with an explicit stack; returns node arrays.

    Splits maximize sum(count^2)/n over the two children (equivalent to
    minimizing weighted Gini). Thresholds are midpoints between consecutive
    distinct sorted values; the partition rule is x < threshold -> left.
    """
    n, d = X.shape
    max_nodes = 2 * n + 1
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes, dtype=np.float64)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)

    idx = np.arange(n)
    stack_node = np.empty(max_nodes, dtype=np.int64)
    stack_lo = np.empty(max_nodes, dtype=np.int64)
    stack_hi = np.empty(max_nodes, dtype=np.int64)
    stack_depth = np.empty(max_nodes, dtype=np.int64)
    stack_node[0], stack_lo[0], stack_hi[0], stack_depth[0] = 0, 0, n, 0
    top = 1
    n_nodes = 1

    np.random.seed(seed)
    counts = np.zeros(n_classes, dtype=np.int64)
    left_counts = np.zeros(n_classes, dtype=np.int64)
    vals_buf = np.empty(n, dtype=np.float64)
    tmp = np.empty(n, dtype=np.int64)

    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        depth = stack_depth[top]
        m = hi - lo

        for c in range(n_classes):
            counts[c] = 0
        for i in range(lo, hi):
            counts[y[idx[i]]] += 1
        present = 0
        for c in range(n_classes):
            if counts[c] > 0:
                present += 1
        if depth >= max_depth or present <= 1 or m < 2 * min_leaf:
            continue  # leaf: feature stays -1

        best_h = -1.0
        best_f = -1
        best_thr = 0.0
        perm = np.random.permutation(d)
        k = n_split_features if n_split_features < d else d
        vals = vals_buf[:m]
        for fi in range(k):
            f = perm[fi]
            for i in range(m):
                vals[i] = X[idx[lo + i], f]
            order = np.argsort(vals, kind="mergesort")
            for c in range(n_classes):
                left_counts[c] = 0
            sumsq_l = 0.0
            sumsq_r = 0.0
            for c in range(n_classes):
                sumsq_r += counts[c] * counts[c]
            for i in range(m - 1):
                cls = y[idx[lo + order[i]]]
                lc = left_counts[cls]
                rc = counts[cls] - lc
                sumsq_l += 2.0 * lc + 1.0
                sumsq_r -= 2.0 * rc - 1.0
                left_counts[cls] = lc + 1
                n_l = i + 1
                n_r = m - n_l
                if n_l < min_leaf or n_r < min_leaf:
                    continue
                a = vals[order[i]]
                b = vals[order[i + 1]]
                if a >= b:
                    continue  # no boundary between equal values
                h = sumsq_l / n_l + sumsq_r / n_r
                if h > best_h:
                    best_h = h
                    best_f = f
                    mid = 0.5 * (a + b)
                    if not mid > a:  # float collapse: keep left = values <= a
                        mid = b
                    best_thr = mid
        if best_f < 0:
            continue  # no valid split anywhere: leaf

        nl = 0
        nr = 0
        for i in range(lo, hi):
            j = idx[i]
            if X[j, best_f] < best_thr:
                idx[lo + nl] = j
                nl += 1
            else:
                tmp[nr] = j
                nr += 1
        for i in range(nr):
            idx[lo + nl + i] = tmp[i]

        lchild = n_nodes
        rchild = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lchild
        right[node] = rchild
        stack_node[top], stack_lo[top], stack_hi[top], stack_depth[top] = \
            lchild, lo, lo + nl, depth + 1
        top += 1
        stack_node[top], stack_lo[top], stack_hi[top], stack_depth[top] = \
            rchild, lo + nl, hi, depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy())


def _finish_tree(feature, threshold, left, right) -> DecisionTree:
    leaf_mask = feature < 0
    leaf_id = np.where(leaf_mask, np.cumsum(leaf_mask) - 1, -1)
    return DecisionTree(feature, threshold, left, right, leaf_id,
                        n_leaves=int(leaf_mask.sum()))


def scores_from_counts(counts: sp.csr_matrix) -> sp.csr_matrix:
    """Per-leaf dominance scores: S[k][t] = #{t' != t : N[k][t] > N[k][t']}.

    Zero-count batches are dominated by every positive count, so the score
    matrix shares the count matrix's sparsity pattern.
    """
    n_rows, n_batches = counts.shape
    indptr = counts.indptr
    indices = counts.indices
    data = counts.data
    nnz = len(data)
    if nnz == 0:
        return sp.csr_matrix(counts.shape, dtype=np.int64)
    nnz_per_row = np.diff(indptr)
    rows = np.repeat(np.arange(n_rows), nnz_per_row)
    order = np.lexsort((data, rows))
    rs = rows[order]
    vs = data[order]
    pos = np.arange(nnz)
    new_row = np.empty(nnz, dtype=bool)
    new_row[0] = True
    new_row[1:] = rs[1:] != rs[:-1]
    new_grp = new_row.copy()
    new_grp[1:] |= vs[1:] != vs[:-1]
    row_start = np.maximum.accumulate(np.where(new_row, pos, 0))
    grp_start = np.maximum.accumulate(np.where(new_grp, pos, 0))
    strict_less = grp_start - row_start
    s_sorted = (n_batches - nnz_per_row[rs]) + strict_less
    s = np.empty(nnz, dtype=np.int64)
    s[order] = s_sorted
    return sp.csr_matrix((s, indices.copy(), indptr.copy()), shape=counts.shape)


def _resolve_subsample(rule: int | str, d: int) -> int:
    if rule == "sqrt":
        return int(np.ceil(np.sqrt(d)))
    k = int(rule)
    if k < 1:
        raise ValueError("feature_subsample must be >= 1")
    return min(k, d)


def train_forest(batches: list[Batch], config: ForestConfig) -> RandomForestIndex:
    """Train bootstrap trees, then count original samples per (leaf, batch).

    The counting pass routes the original (non-bootstrap) samples so the
    tables reflect true batch densities. Each tree derives its RNG stream
    from (seed, tree index), so results do not depend on training order.
    """
    if not batches:
        raise ValueError("no training batches")
    if config.n_estimators < 1 or config.max_depth < 1 or config.min_leaf < 1:
        raise ValueError("n_estimators, max_depth and min_leaf must be >= 1")
    if config.seed < 0:
        raise ValueError("seed must be non-negative")
    d = batches[0].X.shape[1]
    for b in batches:
        if b.X.shape[1] != d:
            raise ValueError(f"batch {b.batch_id}: {b.X.shape[1]} features, expected {d}")
    X = np.ascontiguousarray(np.concatenate([b.X for b in batches]), dtype=np.float64)
    y = np.concatenate([b.y for b in batches]).astype(np.int64)
    batch_pos = np.repeat(np.arange(len(batches)), [len(b) for b in batches])
    n = len(y)
    n_classes = int(y.max()) + 1
    if len(np.unique(y)) < 2:
        warnings.warn("single-class training data: trees degenerate to one leaf")
    k = _resolve_subsample(config.feature_subsample, d)

    trees = []
    for i in range(config.n_estimators):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, i]))
        boot = rng.integers(0, n, size=n)
        tree_seed = int(rng.integers(0, 2**31 - 1))
        arrays = _grow_tree(X[boot], y[boot], n_classes, config.max_depth,
                            config.min_leaf, k, tree_seed)
        trees.append(_finish_tree(*arrays))

    tables = LeafBatchTable()
    ones = np.ones(n, dtype=np.int64)
    for tree in trees:
        leaves = tree.apply(X)
        counts = sp.coo_matrix((ones, (leaves, batch_pos)),
                               shape=(tree.n_leaves, len(batches))).tocsr()
        counts.sum_duplicates()
        tables.counts.append(counts)
        tables.scores.append(scores_from_counts(counts))

    return RandomForestIndex(
        trees=trees,
        tables=tables,
        batch_ids=np.array([b.batch_id for b in batches], dtype=np.int64),
        n_features=d,
    )


def _order_desc(scores: np.ndarray, batch_ids: np.ndarray) -> np.ndarray:
    # descending score, ties broken by larger (more recent) batch id
    return np.lexsort((batch_ids, scores))[::-1]


def rank_batches(index: RandomForestIndex, query: np.ndarray) -> BatchRanking:
    """Rank all batches for one query, lowest covariate shift first."""
    x = np.asarray(query, dtype=np.float64).ravel()
    if x.shape[0] != index.n_features:
        raise ValueError(f"query has {x.shape[0]} features, index expects {index.n_features}")
    agg = np.zeros(len(index.batch_ids), dtype=np.int64)
    for tree, scores in zip(index.trees, index.tables.scores):
        kstar = leaf_of(tree, x)
        lo, hi = scores.indptr[kstar], scores.indptr[kstar + 1]
        agg[scores.indices[lo:hi]] += scores.data[lo:hi]
    pos = _order_desc(agg, index.batch_ids)
    return BatchRanking(order=index.batch_ids[pos], aggregate_score=agg,
                        batch_ids=index.batch_ids)


def batch_score_matrix(index: RandomForestIndex, X: np.ndarray) -> np.ndarray:
    """Aggregate scores for many queries at once; rows align with X."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != index.n_features:
        raise ValueError(f"queries have {X.shape[1]} features, index expects {index.n_features}")
    agg = np.zeros((len(X), len(index.batch_ids)), dtype=np.int64)
    for tree, scores in zip(index.trees, index.tables.scores):
        leaves = tree.apply(X)
        agg += scores[leaves].toarray()
    return agg


def ranking_orders(index: RandomForestIndex, X: np.ndarray) -> np.ndarray:
    """Per-query ranking as positions into index.batch_ids, best first."""
    agg = batch_score_matrix(index, X)
    orders = np.empty(agg.shape, dtype=np.int64)
    for i in range(len(agg)):
        orders[i] = _order_desc(agg[i], index.batch_ids)
    return orders


def save_index(index: RandomForestIndex, path: str) -> None:
    """Serialize to a versioned npz archive (lossless round trip)."""
    payload = {
        "format_version": np.int64(1),
        "n_trees": np.int64(len(index.trees)),
        "n_features": np.int64(index.n_features),
        "batch_ids": index.batch_ids,
    }
    for i, (tree, counts) in enumerate(zip(index.trees, index.tables.counts)):
        payload[f"t{i}_feature"] = tree.feature
        payload[f"t{i}_threshold"] = tree.threshold
        payload[f"t{i}_left"] = tree.left
        payload[f"t{i}_right"] = tree.right
        payload[f"t{i}_indptr"] = counts.indptr
        payload[f"t{i}_indices"] = counts.indices
        payload[f"t{i}_counts"] = counts.data
    np.savez_compressed(path, **payload)


def load_index(path: str) -> RandomForestIndex:
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != 1:
            raise ValueError(f"unsupported index format version {version}")
        n_trees = int(z["n_trees"])
        batch_ids = z["batch_ids"]
        n_batches = len(batch_ids)
        trees = []
        tables = LeafBatchTable()
        for i in range(n_trees):
            tree = _finish_tree(z[f"t{i}_feature"], z[f"t{i}_threshold"],
                                z[f"t{i}_left"], z[f"t{i}_right"])
            counts = sp.csr_matrix(
                (z[f"t{i}_counts"], z[f"t{i}_indices"], z[f"t{i}_indptr"]),
                shape=(tree.n_leaves, n_batches),
            )
            trees.append(tree)
            tables.counts.append(counts)
            tables.scores.append(scores_from_counts(counts))
        return RandomForestIndex(trees=trees, tables=tables, batch_ids=batch_ids,
                                 n_features=int(z["n_features"]))
