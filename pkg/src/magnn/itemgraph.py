"""Row-normalised item co-occurrence graph built from training sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class ItemGraph:
    """CSR adjacency over ``num_items + 1`` rows; the last row (padding) is empty."""

    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    num_items: int

    @property
    def pad(self) -> int:
        return self.num_items

    @property
    def num_edges(self) -> int:
        return int(self.indices.shape[0])

    def row_sums(self) -> np.ndarray:
        rows = np.repeat(np.arange(self.num_items + 1), np.diff(self.indptr))
        return np.bincount(rows, weights=self.weights, minlength=self.num_items + 1)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.num_items + 1, self.num_items + 1))
        rows = np.repeat(np.arange(self.num_items + 1), np.diff(self.indptr))
        out[rows, self.indices] = self.weights
        return out


def _ragged(sequences: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    ptr = np.zeros(len(sequences) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(s) for s in sequences])
    flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in sequences]) if sequences else np.zeros(0, np.int64)
    return ptr, flat


def build_graph(
    sequences: Sequence[np.ndarray],
    num_items: int,
    lookahead: int = 3,
    symmetric: bool = False,
) -> ItemGraph:
    """Count edges from each item to its next ``lookahead`` items, then row-normalise.

    Counts are summed over every occurrence in every sequence; repeat
    consumption (self-pairs) is ignored.
    """
    if lookahead < 1:
        raise ValueError("lookahead must be >= 1")
    ptr, flat = _ragged(sequences)
    if flat.size and (flat.min() < 0 or flat.max() >= num_items):
        raise ValueError("sequence item index out of range")
    src, dst = _kernels.cooccurrence_pairs(ptr, flat, lookahead)
    if symmetric:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    n_rows = num_items + 1
    keys, counts = np.unique(src * n_rows + dst, return_counts=True)
    rows, cols = keys // n_rows, keys % n_rows
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    indptr[1:] = np.cumsum(np.bincount(rows, minlength=n_rows))
    totals = np.bincount(rows, weights=counts, minlength=n_rows)
    weights = counts / totals[rows]
    return ItemGraph(indptr, cols.astype(np.int64), weights.astype(np.float64), num_items)


def neighbors(graph: ItemGraph, i: int) -> list[tuple[int, float]]:
    if not 0 <= i <= graph.num_items:
        raise IndexError(f"item {i} outside [0, {graph.num_items}]")
    lo, hi = graph.indptr[i], graph.indptr[i + 1]
    return [(int(k), float(w)) for k, w in zip(graph.indices[lo:hi], graph.weights[lo:hi])]


def export_triples(graph: ItemGraph, fh: TextIO) -> None:
    """Write ``i<TAB>k<TAB>weight`` lines sorted by (i, k)."""
    for i in range(graph.num_items + 1):
        for k, w in neighbors(graph, i):
            fh.write(f"{i}\t{k}\t{w!r}\n")
