"""Memory-augmented GNN recommender: parameters and forward pass.

All forward functions work on a :class:`Batch` of B instances and return
:class:`~magnn.autodiff.Tensor` values, so the same code serves training
(under a tape), evaluation and the single-instance reference checks.

The score of item ``j`` factorises as ``user_vector · q_j`` for every
variant, which is what makes full-catalogue ranking a single matmul.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .dataset import InstanceArrays, TrainingInstance
from .itemgraph import ItemGraph

VARIANTS = ("MF", "MF+S", "MF+S+H+gating", "MF+S+H+concat", "FULL")

_ATTENTION = ("Wa1", "Wa2", "Wa3", "K_mem", "V_mem")
_VARIANT_PARAMS = {
    "MF": ("P", "Q"),
    "MF+S": ("P", "Q", "E", "W1", "W2"),
    "MF+S+H+gating": ("P", "Q", "E", "W1", *_ATTENTION, "Wg1", "Wg2", "Wg3"),
    "MF+S+H+concat": ("P", "Q", "E", "W1", *_ATTENTION, "Wc"),
    "FULL": ("P", "Q", "E", "W1", *_ATTENTION, "Wg1", "Wg2", "Wg3", "Wr"),
}
EMBEDDINGS = ("P", "Q", "E")


@dataclass
class ModelConfig:
    d: int = 50
    h: int = 10
    m: int = 10
    window: int = 5
    targets: int = 3
    history: int = 20
    variant: str = "FULL"
    precision: str = "float32"
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        for name in ("d", "h", "m", "window", "targets"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.history < 0:
            raise ValueError("history must be >= 0")
        if self.d % 2:
            raise ValueError("d must be even for the sinusoidal positional encoding")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: ModelConfig, num_users: int, num_items: int) -> dict[str, tuple[int, ...]]:
    d, h, m = config.d, config.h, config.m
    every = {
        "P": (num_users, d),
        "Q": (num_items, d),
        "E": (num_items + 1, d),
        "W1": (d, 2 * d),
        "W2": (d, 2 * d),
        "Wa1": (d, d),
        "Wa2": (d, d),
        "Wa3": (h, d),
        "K_mem": (d, m),
        "V_mem": (d, m),
        "Wg1": (d, d),
        "Wg2": (d, d),
        "Wg3": (d, d),
        "Wr": (d, d),
        "Wc": (d, 2 * d),
    }
    return {name: every[name] for name in _VARIANT_PARAMS[config.variant]}


class ModelParams:
    """Named parameter arrays for one model variant.

    Row ``num_items`` of ``E`` is the padding embedding and stays zero.
    """

    def __init__(self, tensors: dict[str, np.ndarray], num_users: int, num_items: int):
        self.tensors = tensors
        self.num_users = num_users
        self.num_items = num_items

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.num_users, self.num_items)

    def zero_padding(self) -> None:
        if "E" in self.tensors:
            self.tensors["E"][self.num_items] = 0.0

    def as_tensors(self, requires_grad: bool = False) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.tensors.items()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def init_params(config: ModelConfig, num_users: int, num_items: int, rng=None) -> ModelParams:
    """Glorot-uniform initialisation in declared parameter order."""
    if num_users < 1 or num_items < 1:
        raise ValueError("need at least one user and one item")
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    dtype = np.float64 if config.precision == "float64" else np.float32
    tensors = {}
    for name, shape in param_shapes(config, num_users, num_items).items():
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    params = ModelParams(tensors, num_users, num_items)
    params.zero_padding()
    return params


@dataclass
class Batch:
    users: np.ndarray
    window: np.ndarray
    window_mask: np.ndarray
    history: np.ndarray
    history_mask: np.ndarray

    def __len__(self) -> int:
        return int(self.users.shape[0])

    @classmethod
    def from_arrays(cls, inst: InstanceArrays, idx=None) -> "Batch":
        if idx is not None:
            inst = inst.subset(idx)
        return cls(inst.users, inst.window, inst.window_mask, inst.history, inst.history_mask)

    @classmethod
    def single(cls, inst: TrainingInstance, pad: int) -> "Batch":
        hist = np.asarray(inst.history, dtype=np.int64)
        return cls(
            users=np.array([inst.user_index], dtype=np.int64),
            window=np.asarray(inst.window, dtype=np.int64)[None, :],
            window_mask=np.asarray(inst.window_mask, dtype=bool)[None, :],
            history=(hist if hist.size else np.array([pad], dtype=np.int64))[None, :],
            history_mask=(np.ones(hist.size, bool) if hist.size else np.zeros(1, bool))[None, :],
        )


def _tensors(params) -> Mapping[str, ad.Tensor]:
    return params.as_tensors() if isinstance(params, ModelParams) else params


# ---------------------------------------------------------------------------
# short-term interest
# ---------------------------------------------------------------------------


def gnn_item_repr(params, graph: ItemGraph, items) -> ad.Tensor:
    """``tanh(W1 [sum_k A_ik e_k ; e_i])`` for every index in ``items``.

    The padding index has no neighbours and a zero embedding, so it maps to
    the zero vector.
    """
    p = _tensors(params)
    items = np.asarray(items, dtype=np.int64)
    agg = ad.sparse_aggregate(graph.indptr, graph.indices, graph.weights, items, p["E"])
    own = ad.gather_rows(p["E"], items)
    return ad.tanh(ad.concat([agg, own]) @ p["W1"].T)


def short_term_interest(params, graph: ItemGraph, batch: Batch) -> tuple[ad.Tensor | None, ad.Tensor]:
    """Returns ``(p_S, h_mean)``; ``p_S`` is None when the model has no ``W2``."""
    p = _tensors(params)
    if not batch.window_mask.any(axis=1).all():
        raise ValueError("window has no real items")
    h = gnn_item_repr(p, graph, batch.window)
    h_mean = ad.mean_masked(h, batch.window_mask)
    if "W2" not in p:
        return None, h_mean
    pu = ad.gather_rows(p["P"], batch.users)
    return ad.tanh(ad.concat([h_mean, pu]) @ p["W2"].T), h_mean


# ---------------------------------------------------------------------------
# long-term interest
# ---------------------------------------------------------------------------


def positional_encoding(length: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError("positional encoding needs an even dimension")
    pos = np.arange(length, dtype=np.float64)[:, None]
    rates = np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos / rates)
    pe[:, 1::2] = np.cos(pos / rates)
    return pe


def attention_scores(params, batch: Batch) -> tuple[ad.Tensor, ad.Tensor]:
    """Multi-dimensional attention over history: returns ``(S, H_rows)``.

    ``S`` has shape (B, h, |H|); ``H_rows`` (B, |H|, d) are the history item
    embeddings plus positional encodings, oldest item at position 0.
    """
    p = _tensors(params)
    n_hist = batch.history.shape[1]
    d = p["E"].shape[1]
    pe = positional_encoding(n_hist, d).astype(ad.get_dtype())
    rows = ad.gather_rows(p["E"], batch.history) + pe
    pu = ad.gather_rows(p["P"], batch.users)
    user_term = ad.outer_broadcast(pu @ p["Wa2"].T, n_hist)
    hidden = ad.tanh(rows @ p["Wa1"].T + user_term)
    logits = ad.transpose(hidden @ p["Wa3"].T)
    s = ad.softmax(logits, axis=-1, mask=batch.history_mask[:, None, :])
    return s, rows


def long_term_query(params, batch: Batch) -> ad.Tensor:
    """Query ``z`` = mean over attention rows of ``tanh(S · H)``.

    Empty histories get an all-zero attention row and hence ``z = 0``.
    """
    if batch.history.shape[1] == 0:
        p = _tensors(params)
        return ad.Tensor(np.zeros((len(batch), p["E"].shape[1])))
    s, rows = attention_scores(params, batch)
    return ad.mean(ad.tanh(s @ rows), axis=1)


def memory_read(params, z: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    """Key-value memory lookup: returns ``(z + sum_i s_i v_i, s)``."""
    p = _tensors(params)
    s = ad.softmax(z @ p["K_mem"], axis=-1)
    return z + s @ p["V_mem"].T, s


def fuse_interests(params, h_mean: ad.Tensor, p_long: ad.Tensor, pu: ad.Tensor) -> ad.Tensor:
    p = _tensors(params)
    if "Wc" in p:
        return ad.concat([h_mean, p_long]) @ p["Wc"].T
    g = ad.sigmoid(h_mean @ p["Wg1"].T + p_long @ p["Wg2"].T + pu @ p["Wg3"].T)
    return g * h_mean + (1.0 - g) * p_long


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def user_vectors(params, graph: ItemGraph, batch: Batch) -> ad.Tensor:
    """Vector ``u`` with ``score(j) = u · q_j`` for the variant held in ``params``."""
    p = _tensors(params)
    pu = ad.gather_rows(p["P"], batch.users)
    if "E" not in p:
        return pu
    p_short, h_mean = short_term_interest(p, graph, batch)
    if "K_mem" not in p:
        return pu + p_short
    z = long_term_query(p, batch)
    p_long, _ = memory_read(p, z)
    u = pu + fuse_interests(p, h_mean, p_long, pu)
    if "Wr" in p:
        e_mean = ad.mean_masked(ad.gather_rows(p["E"], batch.window), batch.window_mask)
        u = u + e_mean @ p["Wr"]
    return u


def score(params, graph: ItemGraph, batch: Batch, items) -> ad.Tensor:
    """Scores of ``items`` (B,) or (B, k) for each instance in ``batch``."""
    p = _tensors(params)
    u = user_vectors(p, graph, batch)
    items = np.asarray(items, dtype=np.int64)
    if items.ndim == 1:
        return ad.sum(u * ad.gather_rows(p["Q"], items), axis=-1)
    q = ad.gather_rows(p["Q"], items)
    return ad.sum(ad.outer_broadcast(u, items.shape[1]) * q, axis=-1)


def score_all(params: ModelParams, graph: ItemGraph, batch: Batch) -> np.ndarray:
    """Dense (B, N) score matrix; no tape involvement."""
    u = user_vectors(params.as_tensors(), graph, batch).data
    return u @ params["Q"].T
