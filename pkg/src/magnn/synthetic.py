"""Synthetic sequential data with a planted first-order Markov structure."""

from __future__ import annotations

import numpy as np

from .dataset import FilteredData, SplitDataset, UserSequence, chronological_split


def transition_matrix(
    num_items: int,
    rng: np.random.Generator,
    steps: tuple[float, ...] = (0.8, 0.15),
    noise: float = 0.05,
) -> np.ndarray:
    """Items sit on a hidden ring (random permutation); from each item the
    walk moves ``k`` places forward with probability ``steps[k - 1]`` and
    jumps uniformly with probability ``noise``."""
    order = rng.permutation(num_items)
    where = np.empty(num_items, dtype=np.int64)
    where[order] = np.arange(num_items)
    probs = np.full((num_items, num_items), noise / (num_items - 1))
    np.fill_diagonal(probs, 0.0)
    weights = np.asarray(steps, dtype=np.float64)
    weights = weights / weights.sum() * (1.0 - noise)
    for i in range(num_items):
        for k, w in enumerate(weights, start=1):
            probs[i, order[(where[i] + k) % num_items]] += w
    return probs / probs.sum(axis=1, keepdims=True)


def markov_sequences(
    num_users: int = 200,
    num_items: int = 50,
    length: int = 40,
    seed: int = 0,
    steps: tuple[float, ...] = (0.8, 0.15),
    noise: float = 0.05,
) -> tuple[list[np.ndarray], np.ndarray]:
    rng = np.random.default_rng(seed)
    probs = transition_matrix(num_items, rng, steps, noise)
    cdf = np.cumsum(probs, axis=1)
    seqs = []
    for _ in range(num_users):
        s = np.empty(length, dtype=np.int64)
        s[0] = rng.integers(num_items)
        draws = rng.random(length)
        for t in range(1, length):
            s[t] = min(np.searchsorted(cdf[s[t - 1]], draws[t], side="right"), num_items - 1)
        seqs.append(s)
    return seqs, probs


def markov_split(num_users=200, num_items=50, length=40, seed=0, **kw) -> SplitDataset:
    seqs, _ = markov_sequences(num_users, num_items, length, seed, **kw)
    data = FilteredData(
        [UserSequence(u, s) for u, s in enumerate(seqs)],
        [f"u{u}" for u in range(num_users)],
        [f"i{i}" for i in range(num_items)],
    )
    return chronological_split(data)
