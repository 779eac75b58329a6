"""Full-catalogue Top-K evaluation with Recall@K and NDCG@K."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import _kernels
from .dataset import SplitDataset
from .itemgraph import ItemGraph
from .model import Batch, ModelConfig, ModelParams, score_all


class NoGroundTruth(ValueError):
    """Raised for a user without held-out items; callers skip that user."""


def recall_at_k(topk: Iterable[int], relevant, k: int = 10) -> float:
    relevant = set(int(x) for x in relevant)
    if not relevant:
        raise NoGroundTruth("empty relevant set")
    hits = sum(1 for x in list(topk)[:k] if int(x) in relevant)
    return hits / len(relevant)


def ndcg_at_k(topk: Iterable[int], relevant, k: int = 10) -> float:
    relevant = set(int(x) for x in relevant)
    if not relevant:
        raise NoGroundTruth("empty relevant set")
    dcg = sum(1.0 / math.log2(r + 2) for r, x in enumerate(list(topk)[:k]) if int(x) in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(relevant))))
    return dcg / idcg


@dataclass
class EvalReport:
    k: int
    split: str
    recall: float
    ndcg: float
    num_users: int
    num_skipped: int
    users: list[int] = field(default_factory=list)
    per_user_recall: list[float] = field(default_factory=list)
    per_user_ndcg: list[float] = field(default_factory=list)
    variant: str = ""
    checkpoint: str = ""
    # recall's denominator is the full held-out set, so users with more than
    # k held-out items cannot reach 1.0
    users_over_k: int = 0

    def summary(self) -> dict:
        out = asdict(self)
        for key in ("users", "per_user_recall", "per_user_ndcg"):
            out.pop(key)
        return out

    def to_json(self, per_user: bool = False) -> str:
        data = asdict(self) if per_user else self.summary()
        return json.dumps(data, indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["user", "recall", "ndcg"])
            for u, r, n in zip(self.users, self.per_user_recall, self.per_user_ndcg):
                w.writerow([u, repr(r), repr(n)])


def input_sequences(split: SplitDataset, mode: str) -> list[np.ndarray]:
    if mode == "val":
        return split.train
    if mode == "test":
        return [np.concatenate([a, b]) for a, b in zip(split.train, split.val)]
    raise ValueError(f"mode must be 'val' or 'test', got {mode!r}")


def ground_truth(split: SplitDataset, mode: str) -> list[np.ndarray]:
    return split.val if mode == "val" else split.test


def eval_batch(sequences: list[np.ndarray], users: np.ndarray, window: int, history: int, pad: int) -> Batch:
    """Last ``window`` items of each input sequence, plus up to ``history`` before them."""
    n = len(users)
    win = np.full((n, window), pad, dtype=np.int64)
    hist = np.full((n, history), pad, dtype=np.int64)
    hlen = np.zeros(n, dtype=np.int64)
    for r, u in enumerate(users):
        s = sequences[u]
        tail = s[-window:]
        win[r, window - len(tail) :] = tail
        before = s[: max(len(s) - window, 0)]
        h = before[max(len(before) - history, 0) :] if history else before[:0]
        hist[r, : len(h)] = h
        hlen[r] = len(h)
    hmask = np.arange(history)[None, :] < hlen[:, None]
    return Batch(np.asarray(users, dtype=np.int64), win, win != pad, hist, hmask)


def _seen_csr(sequences, users):
    parts = [np.unique(sequences[u]) for u in users]
    ptr = np.zeros(len(parts) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(p) for p in parts])
    flat = np.concatenate(parts) if parts else np.zeros(0, np.int64)
    return ptr, flat.astype(np.int64)


def rank_items(
    params: ModelParams,
    graph: ItemGraph,
    split: SplitDataset,
    user: int,
    mode: str,
    config: ModelConfig,
) -> np.ndarray:
    """Every candidate item for ``user`` ordered by score (desc), ties by index (asc).

    Candidates are all items not present in the user's input sequence.
    """
    seqs = input_sequences(split, mode)
    batch = eval_batch(seqs, np.array([user]), config.window, config.history, split.pad)
    scores = score_all(params, graph, batch)
    ptr, seen = _seen_csr(seqs, [user])
    order = _kernels.topk_excluding(scores, ptr, seen, split.num_items)[0]
    return order[order >= 0]


def evaluate(
    params: ModelParams,
    split: SplitDataset,
    graph: ItemGraph,
    config: ModelConfig,
    mode: str = "test",
    k: int = 10,
    chunk: int = 2048,
    checkpoint: str = "",
) -> EvalReport:
    seqs = input_sequences(split, mode)
    truth = ground_truth(split, mode)
    users = np.array([u for u in range(split.num_users) if len(truth[u])], dtype=np.int64)
    skipped = split.num_users - len(users)
    recalls: list[float] = []
    ndcgs: list[float] = []
    for lo in range(0, len(users), chunk):
        part = users[lo : lo + chunk]
        batch = eval_batch(seqs, part, config.window, config.history, split.pad)
        scores = score_all(params, graph, batch)
        ptr, seen = _seen_csr(seqs, part)
        top = _kernels.topk_excluding(scores, ptr, seen, k)
        for row, u in zip(top, part):
            row = row[row >= 0]
            recalls.append(recall_at_k(row, truth[u], k))
            ndcgs.append(ndcg_at_k(row, truth[u], k))
    n = len(recalls)
    return EvalReport(
        k=k,
        split=mode,
        recall=float(np.mean(recalls)) if n else 0.0,
        ndcg=float(np.mean(ndcgs)) if n else 0.0,
        num_users=n,
        num_skipped=skipped,
        users=[int(u) for u in users],
        per_user_recall=recalls,
        per_user_ndcg=ndcgs,
        variant=config.variant,
        checkpoint=checkpoint,
        users_over_k=int(sum(1 for u in users if len(np.unique(truth[u])) > k)),
    )
