"""Syscall-anomaly risk assessment.

Each node hands in the syscall trace it produced during the previous
term. Traces become sliding-window n-gram counts, the counts are
weighted by per-column frequency and inverse document frequency, and an
isolation forest over the weighted rows yields an anomaly score in
(0, 1) per node. A node is flagged when its score clears both the 0.5
anomaly boundary and a mean + kappa*sigma band over the cluster.

Everything here is a pure function of its inputs; forests rebuild
bit-identically from their seed.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .core import NodeId, Term

EULER_GAMMA = 0.5772156649


class DegenerateInput(Exception):
    """Too little data to assess; the caller keeps its previous risk list."""


@dataclass(frozen=True)
class SyscallTrace:
    node: NodeId
    term: Term
    calls: tuple[int, ...]


@dataclass(frozen=True)
class RiskConfig:
    window: int = 5
    tree_count: int = 100
    subsample_size: int = 256
    kappa: float = 2.0
    seed: int = 0
    row_normalize: bool = False  # sensitivity mode; column normalization is the default

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.tree_count < 1:
            raise ValueError("tree_count must be >= 1")
        if self.subsample_size < 2:
            raise ValueError("subsample_size must be >= 2")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")


def extract_ngrams(trace: SyscallTrace, window: int) -> Counter:
    """Stride-1 sliding-window n-grams; traces shorter than the window
    yield an empty multiset."""
    calls = trace.calls
    return Counter(
        tuple(calls[i : i + window]) for i in range(len(calls) - window + 1)
    )


@dataclass(frozen=True)
class NgramVocabulary:
    ngrams: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if list(self.ngrams) != sorted(set(self.ngrams)):
            raise ValueError("vocabulary must be sorted and duplicate-free")

    @property
    def size(self) -> int:
        return len(self.ngrams)

    def index(self, ngram: tuple[int, ...]) -> int:
        lookup = self.__dict__.get("_lookup")
        if lookup is None:
            lookup = {g: j for j, g in enumerate(self.ngrams)}
            self.__dict__["_lookup"] = lookup
        return lookup[ngram]


@dataclass(frozen=True, eq=False)
class CountMatrix:
    """Rows are nodes in sorted-NodeId order, columns are vocabulary n-grams."""

    values: np.ndarray  # num x k, non-negative counts
    row_owner: tuple[NodeId, ...]
    vocabulary: NgramVocabulary

    @property
    def num(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class WeightedMatrix:
    values: np.ndarray  # num x k, counts * frequency * idf
    row_owner: tuple[NodeId, ...]


def build_count_matrix(traces, window: int) -> CountMatrix:
    traces = sorted(traces, key=lambda t: t.node)
    owners = tuple(t.node for t in traces)
    if len(set(owners)) != len(owners):
        raise ValueError("one trace per node")
    multisets = [extract_ngrams(t, window) for t in traces]
    vocab = NgramVocabulary(tuple(sorted(set().union(*multisets) if multisets else ())))
    values = np.zeros((len(traces), vocab.size), dtype=float)
    for i, ms in enumerate(multisets):
        for ngram, count in ms.items():
            values[i, vocab.index(ngram)] = count
    return CountMatrix(values, owners, vocab)


def term_frequency(counts: CountMatrix, per_row: bool = False) -> np.ndarray:
    """Share of each count within its column (across nodes); zero-sum
    columns yield 0. per_row switches to within-row normalization for
    sensitivity experiments."""
    values = counts.values
    axis = 1 if per_row else 0
    sums = values.sum(axis=axis, keepdims=True)
    return np.divide(values, sums, out=np.zeros_like(values), where=sums > 0)


def inverse_document_frequency(counts: CountMatrix) -> np.ndarray:
    """ln(num / (d_j + 1)) with d_j the number of nodes using n-gram j.
    Negative values are kept; they down-weight ubiquitous n-grams."""
    d = (counts.values > 0).sum(axis=0)
    return np.log(counts.num / (d + 1.0))


def frequency_weighted_counts(counts: CountMatrix, per_row: bool = False) -> np.ndarray:
    """Intermediate product counts * frequency, before idf is applied."""
    return counts.values * term_frequency(counts, per_row)


def weight_matrix(counts: CountMatrix, per_row: bool = False) -> WeightedMatrix:
    values = frequency_weighted_counts(counts, per_row) * inverse_document_frequency(
        counts
    )
    return WeightedMatrix(values, counts.row_owner)


def c_factor(n: int) -> float:
    """Expected unsuccessful-search path length in a binary tree of n
    points; the credit granted to a truncated leaf. Defined as 0 for
    n <= 1."""
    if n <= 1:
        return 0.0
    return 2.0 * (math.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n


@dataclass(frozen=True)
class TreeLeaf:
    size: int


@dataclass(frozen=True)
class TreeSplit:
    column: int
    value: float
    left: Union["TreeSplit", TreeLeaf]
    right: Union["TreeSplit", TreeLeaf]


def _grow(data: np.ndarray, rng: np.random.Generator, depth: int, limit: int):
    n, k = data.shape
    if n <= 1 or depth >= limit:
        return TreeLeaf(n)
    # uniform column choice by rejection: re-draw while the column is
    # constant in this partition. Touching one column per try keeps the
    # cost O(rows) even when the matrix is very wide.
    for _ in range(64):
        column = int(rng.integers(k))
        col = data[:, column]
        lo, hi = float(col.min()), float(col.max())
        if hi > lo:
            break
    else:
        return TreeLeaf(n)  # no varying column found; treat rows as identical
    value = float(rng.uniform(lo, hi))
    mask = col < value
    left, right = data[mask], data[~mask]
    if left.shape[0] == 0 or right.shape[0] == 0:
        return TreeLeaf(n)  # draw landed on the partition boundary
    return TreeSplit(
        column,
        value,
        _grow(left, rng, depth + 1, limit),
        _grow(right, rng, depth + 1, limit),
    )


@dataclass(frozen=True)
class IsolationForest:
    trees: tuple
    subsample_size: int  # effective size: min(requested, num)
    tree_count: int
    seed: int


def fit_forest(
    matrix: WeightedMatrix, tree_count: int, subsample_size: int, seed: int
) -> IsolationForest:
    values = matrix.values
    num = values.shape[0]
    if num < 2:
        raise DegenerateInput(f"need at least 2 rows to fit a forest, got {num}")
    ss = min(subsample_size, num)
    limit = math.ceil(math.log2(ss))
    if np.all(values == values[0]):
        # fully degenerate input: every tree is a single leaf
        return IsolationForest((TreeLeaf(ss),) * tree_count, ss, tree_count, seed)
    trees = []
    for child_seed in np.random.SeedSequence(seed).spawn(tree_count):
        rng = np.random.default_rng(child_seed)
        rows = rng.choice(num, size=ss, replace=False)
        trees.append(_grow(values[rows], rng, 0, limit))
    return IsolationForest(tuple(trees), ss, tree_count, seed)


def path_length(tree, row: np.ndarray) -> float:
    depth = 0
    while isinstance(tree, TreeSplit):
        tree = tree.left if row[tree.column] < tree.value else tree.right
        depth += 1
    return depth + c_factor(tree.size)


def anomaly_score(forest: IsolationForest, row: np.ndarray, n: int) -> float:
    """2 ** (-mean_path / c(n)); 0.5 marks the indifference point where a
    point is no easier to isolate than average."""
    mean_path = sum(path_length(t, row) for t in forest.trees) / len(forest.trees)
    return 2.0 ** (-mean_path / c_factor(n))


@dataclass(frozen=True)
class RiskReport:
    scores: dict
    flagged: frozenset
    term: Term
    threshold: float
    assumption_violated: bool  # suspicious nodes are at least half the cluster


def assess(traces, config: RiskConfig) -> RiskReport:
    """Full pipeline over one term's traces. Raises DegenerateInput below
    3 traces; callers then keep whatever risk list they already had."""
    traces = sorted(traces, key=lambda t: t.node)
    if len(traces) < 3:
        raise DegenerateInput(f"need at least 3 traces, got {len(traces)}")
    terms = {t.term for t in traces}
    if len(terms) != 1:
        raise ValueError(f"traces span multiple terms: {sorted(terms)}")

    counts = build_count_matrix(traces, config.window)
    weighted = weight_matrix(counts, config.row_normalize)
    forest = fit_forest(weighted, config.tree_count, config.subsample_size, config.seed)
    values = np.array(
        [anomaly_score(forest, row, forest.subsample_size) for row in weighted.values]
    )

    mean, std = float(values.mean()), float(values.std())
    threshold = max(0.5, mean + config.kappa * std)
    flagged = frozenset(
        node for node, s in zip(counts.row_owner, values) if s > threshold
    )
    suspicious = int((values > 0.5).sum())
    return RiskReport(
        scores={node: float(s) for node, s in zip(counts.row_owner, values)},
        flagged=flagged,
        term=terms.pop(),
        threshold=threshold,
        assumption_violated=2 * suspicious >= counts.num,
    )


def load_trace(path, term: Term = 0) -> SyscallTrace:
    """Read one whitespace-separated integer trace file. Files follow the
    node_<id>.txt convention; <id> keeps an org prefix before the first
    dash (falling back to the whole id)."""
    path = Path(path)
    stem = path.stem
    value = stem[len("node_") :] if stem.startswith("node_") else stem
    org = value.split("-")[0] if "-" in value else value
    calls = tuple(int(tok) for tok in path.read_text().split())
    if any(c < 0 for c in calls):
        raise ValueError(f"{path}: syscall symbols must be non-negative")
    return SyscallTrace(NodeId(value, org), term, calls)
