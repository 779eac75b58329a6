"""Reverse-mode vs central finite-difference gradient comparison."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import SplitDataset
from .itemgraph import ItemGraph, build_graph
from .model import Batch, ModelConfig, ModelParams, init_params
from .trainer import bpr_loss


@dataclass
class Problem:
    params: ModelParams
    graph: ItemGraph
    batch: Batch
    rows: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    reg: float


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(v < self.tol for v in self.max_rel_error.values())

    def lines(self) -> list[str]:
        return [
            f"{name:<6} max_rel_err={err:.3e} {'ok' if err < self.tol else 'FAIL'}"
            for name, err in self.max_rel_error.items()
        ]


def random_problem(
    seed: int = 0,
    d: int = 8,
    h: int = 3,
    m: int = 4,
    window: int = 5,
    history: int = 7,
    num_users: int = 6,
    num_items: int = 12,
    variant: str = "FULL",
    reg: float = 1e-3,
) -> Problem:
    """Small random model, graph and batch.

    The batch mixes full windows and histories with one left-padded window
    and one empty history so the masking paths are exercised.
    """
    rng = np.random.default_rng(seed)
    config = ModelConfig(d=d, h=h, m=m, window=window, history=history, variant=variant,
                         precision="float64", seed=seed)
    seqs = [rng.integers(num_items, size=rng.integers(window + history, window + history + 4))
            for _ in range(num_users)]
    graph = build_graph(seqs, num_items)
    with ad.precision("float64"):
        params = init_params(config, num_users, num_items, rng)
    pad = num_items
    n = num_users
    win = np.stack([s[history : history + window] for s in seqs])
    win[0, :2] = pad
    hist = np.stack([s[:history] for s in seqs])
    hmask = np.ones_like(hist, dtype=bool)
    hmask[0] = False
    hmask[1, : history // 2] = False
    hist[~hmask] = pad
    # history rows are left-aligned: move the real items to the front
    for r in range(n):
        real = hist[r][hmask[r]]
        hist[r] = pad
        hist[r, : len(real)] = real
        hmask[r] = np.arange(history) < len(real)
    batch = Batch(np.arange(n), win, win != pad, hist, hmask)
    rows = np.repeat(np.arange(n), 2)
    pos = rng.integers(num_items, size=rows.size)
    neg = rng.integers(num_items, size=rows.size)
    return Problem(params, graph, batch, rows, pos, neg, reg)


def loss_value(problem: Problem) -> float:
    p = problem.params.as_tensors()
    return float(bpr_loss(p, problem.graph, problem.batch, problem.rows, problem.pos,
                          problem.neg, problem.reg, reg_mode="full").data)


def autodiff_gradients(problem: Problem) -> dict[str, np.ndarray]:
    with ad.Tape() as tape:
        p = problem.params.as_tensors(requires_grad=True)
        loss = bpr_loss(p, problem.graph, problem.batch, problem.rows, problem.pos,
                        problem.neg, problem.reg, reg_mode="full")
    return ad.backward(tape, loss, p.values())


def numeric_gradient(problem: Problem, name: str, eps: float = 1e-4) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    arr = problem.params[name]
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = loss_value(problem)
        flat[i] = keep - eps
        down = loss_value(problem)
        flat[i] = keep
        out[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def gradcheck(
    seed: int = 0,
    eps: float = 1e-4,
    tol: float = 1e-4,
    variant: str = "FULL",
    corrupt: str | None = None,
    **shape,
) -> GradcheckReport:
    """Compare gradients for every parameter tensor in 64-bit precision.

    ``corrupt`` names a tensor whose analytic gradient is deliberately
    perturbed; used to confirm the check can fail.
    """

    t0 = time.perf_counter()
    report = GradcheckReport(tol=tol)
    with ad.precision("float64"):
        problem = random_problem(seed=seed, variant=variant, **shape)
        grads = autodiff_gradients(problem)
        for name in problem.params.names:
            g = grads[name]
            if name == corrupt:
                g = g * 1.01 + 1e-3
            fd = numeric_gradient(problem, name, eps)
            report.max_rel_error[name] = float(relative_error(g, fd).max())
    report.seconds = time.perf_counter() - t0
    return report
