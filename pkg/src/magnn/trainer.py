"""Pairwise ranking (BPR) training with Adam."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from . import autodiff as ad
from .dataset import InstanceArrays, SplitDataset, make_training_instances
from .evaluator import evaluate
from .itemgraph import ItemGraph
from .model import Batch, ModelConfig, ModelParams, init_params, user_vectors

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.001
    reg: float = 0.001
    batch_size: int = 4096
    epochs: int = 20
    negatives: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # "touched": embedding rows seen in the batch; "full": whole tensors
    reg_mode: str = "touched"
    patience: int = 10
    log_seconds: bool = True

    def validate(self) -> "TrainConfig":
        if self.lr < 0 or self.reg < 0:
            raise ValueError("lr and reg must be non-negative")
        if self.batch_size < 1 or self.negatives < 1 or self.epochs < 0:
            raise ValueError("batch_size and negatives must be >= 1, epochs >= 0")
        if self.reg_mode not in ("touched", "full"):
            raise ValueError("reg_mode must be 'touched' or 'full'")
        return self


class Adam:
    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# negative sampling
# ---------------------------------------------------------------------------


class ObservedItems:
    """Per-user training item sets as sorted ``user * N + item`` keys."""

    def __init__(self, sequences: list[np.ndarray], num_items: int):
        self.num_items = num_items
        parts = [u * num_items + np.unique(s) for u, s in enumerate(sequences)]
        self.counts = np.array([len(p) for p in parts], dtype=np.int64)
        self.keys = np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, np.int64)

    def contains(self, users, items) -> np.ndarray:
        q = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        return _kernels.member(self.keys, q)


def sample_negative(observed: set, num_items: int, rng: np.random.Generator) -> int:
    """One item drawn uniformly from those not in ``observed``."""
    if len(set(observed) & set(range(num_items))) >= num_items:
        raise ValueError("user has interacted with every item; no negative exists")
    while True:
        k = int(rng.integers(num_items))
        if k not in observed:
            return k


def sample_negatives(observed: ObservedItems, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorised rejection sampling, one negative per entry of ``users``."""
    users = np.asarray(users, dtype=np.int64)
    if users.size and np.any(observed.counts[users] >= observed.num_items):
        raise ValueError("user has interacted with every item; no negative exists")
    out = rng.integers(observed.num_items, size=users.shape[0])
    todo = np.flatnonzero(observed.contains(users, out))
    while todo.size:
        out[todo] = rng.integers(observed.num_items, size=todo.size)
        todo = todo[observed.contains(users[todo], out[todo])]
    return out


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def ranking_loss(pos_scores: ad.Tensor, neg_scores: ad.Tensor) -> ad.Tensor:
    """Mean of ``-log sigmoid(pos - neg)``."""
    return -ad.mean(ad.log_sigmoid(pos_scores - neg_scores))


def regulariser(p: dict[str, ad.Tensor], batch: Batch, items: np.ndarray, pad: int, mode: str) -> ad.Tensor:
    terms = []
    for name, t in p.items():
        if mode == "touched" and name == "P":
            t = ad.gather_rows(t, np.unique(batch.users))
        elif mode == "touched" and name == "Q":
            t = ad.gather_rows(t, np.unique(items))
        elif mode == "touched" and name == "E":
            rows = np.unique(np.concatenate([batch.window.ravel(), batch.history.ravel()]))
            t = ad.gather_rows(t, rows[rows != pad])
        terms.append(ad.sum_squares(t))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def bpr_loss(
    p: dict[str, ad.Tensor],
    graph: ItemGraph,
    batch: Batch,
    rows: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
    reg: float,
    reg_mode: str = "full",
) -> ad.Tensor:
    """BPR objective for triples (batch row, positive, negative) plus L2 penalty.

    ``rows`` indexes into ``batch`` so instances shared by several triples
    are encoded once.
    """
    u = ad.gather_rows(user_vectors(p, graph, batch), rows)
    q_pos = ad.gather_rows(p["Q"], pos)
    q_neg = ad.gather_rows(p["Q"], neg)
    loss = ranking_loss(ad.sum(u * q_pos, axis=-1), ad.sum(u * q_neg, axis=-1))
    if reg > 0:
        items = np.concatenate([pos, neg])
        loss = loss + ad.scale(regulariser(p, batch, items, graph.pad, reg_mode), reg)
    return loss


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    loss: float
    seconds: float
    updates: int


def make_triples(instances: InstanceArrays, order: np.ndarray, negatives: int):
    """(instance, positive) pairs in ``order``; each target is its own positive."""
    n_t = instances.targets.shape[1]
    inst = np.repeat(order, n_t * negatives)
    pos = np.repeat(instances.targets[order], negatives, axis=1).reshape(-1)
    keep = pos != instances.pad
    return inst[keep], pos[keep]


def train_epoch(
    params: ModelParams,
    instances: InstanceArrays,
    graph: ItemGraph,
    observed: ObservedItems,
    config: TrainConfig,
    optimizer: Adam,
    rng: np.random.Generator,
) -> EpochStats:
    if len(instances) == 0:
        raise ValueError("no training instances")
    t0 = time.perf_counter()
    order = rng.permutation(len(instances))
    inst, pos = make_triples(instances, order, config.negatives)
    neg = sample_negatives(observed, instances.users[inst], rng)
    total, updates = 0.0, 0
    for lo in range(0, inst.shape[0], config.batch_size):
        sl = slice(lo, lo + config.batch_size)
        uniq, rows = np.unique(inst[sl], return_inverse=True)
        batch = Batch.from_arrays(instances, uniq)
        with ad.Tape() as tape:
            p = params.as_tensors(requires_grad=True)
            loss = bpr_loss(p, graph, batch, rows, pos[sl], neg[sl], config.reg, config.reg_mode)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss {value} at update {updates} "
                f"(lr={config.lr}, batch rows {lo}..{lo + len(rows)})"
            )
        grads = ad.backward(tape, loss, p.values())
        if "E" in grads:
            grads["E"][params.num_items] = 0.0
        optimizer.step(params.tensors, grads)
        params.zero_padding()
        total += value * len(rows)
        updates += 1
    return EpochStats(total / inst.shape[0], time.perf_counter() - t0, updates)


@dataclass
class FitResult:
    params: ModelParams
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_recall: float = float("-inf")


def fit(
    split: SplitDataset,
    graph: ItemGraph,
    model_config: ModelConfig,
    train_config: TrainConfig,
    log_path=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train, validating every epoch; keeps the params with best validation Recall@10."""
    model_config.validate()
    train_config.validate()
    with ad.precision(model_config.precision):
        instances = make_training_instances(
            split, model_config.window, model_config.targets, 1, model_config.history
        )
        params = init_params(model_config, split.num_users, split.num_items)
        result = FitResult(params.copy())
        if train_config.epochs == 0:
            return result
        observed = ObservedItems(split.train, split.num_items)
        rng = np.random.default_rng(train_config.seed)
        opt = Adam(train_config.lr, train_config.beta1, train_config.beta2, train_config.eps)
        sink = open(log_path, "w", encoding="utf-8") if log_path else None
        stale = 0
        try:
            for epoch in range(1, train_config.epochs + 1):
                stats = train_epoch(params, instances, graph, observed, train_config, opt, rng)
                report = evaluate(params, split, graph, model_config, mode="val", k=10)
                record = {
                    "epoch": epoch,
                    "train_loss": stats.loss,
                    "val_recall10": report.recall,
                    "val_ndcg10": report.ndcg,
                    "seconds": round(stats.seconds, 3) if train_config.log_seconds else None,
                }
                result.log.append(record)
                if sink:
                    sink.write(json.dumps(record) + "\n")
                    sink.flush()
                if on_epoch:
                    on_epoch(record)
                log.info(
                    "epoch %d loss %.5f val R@10 %.4f N@10 %.4f (%.1fs)",
                    epoch, stats.loss, report.recall, report.ndcg, stats.seconds,
                )
                if report.recall > result.best_recall:
                    result.best_recall = report.recall
                    result.best_epoch = epoch
                    result.params = params.copy()
                    stale = 0
                else:
                    stale += 1
                    if stale >= train_config.patience:
                        log.info("early stop after %d epochs without improvement", stale)
                        break
        finally:
            if sink:
                sink.close()
    return result


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
