"""Hot inner loops with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``MAGNN_USE_NUMBA=0`` to force
the numpy path (also used automatically when numba is not importable). Both
implementations of every kernel stay importable as ``<name>_numpy`` and
``<name>_numba`` so tests and the benchmark can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


def _env_flag(name: str, default: bool) -> bool:
    raw = os.environ.get(name)
    if raw is None:
        return default
    return raw.strip().lower() not in ("0", "false", "no", "off", "")


USE_NUMBA = HAVE_NUMBA and _env_flag("MAGNN_USE_NUMBA", True)
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# co-occurrence pair extraction (item graph construction)
# ---------------------------------------------------------------------------


def cooccurrence_pairs_numpy(ptr, items, lookahead):
    """All (source, follower) pairs within ``lookahead`` positions, self-pairs dropped."""
    ptr = np.asarray(ptr, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    n = items.shape[0]
    seq_id = np.repeat(np.arange(ptr.shape[0] - 1), np.diff(ptr))
    src_parts, dst_parts = [], []
    for off in range(1, lookahead + 1):
        if off >= n:
            break
        same = seq_id[:-off] == seq_id[off:]
        s = items[:-off][same]
        t = items[off:][same]
        keep = s != t
        src_parts.append(s[keep])
        dst_parts.append(t[keep])
    if not src_parts:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy()
    return np.concatenate(src_parts), np.concatenate(dst_parts)


@njit(cache=True)
def _cooccurrence_pairs_nb(ptr, items, lookahead):
    total = 0
    for s in range(ptr.shape[0] - 1):
        lo, hi = ptr[s], ptr[s + 1]
        for p in range(lo, hi):
            stop = min(hi, p + lookahead + 1)
            for q in range(p + 1, stop):
                if items[q] != items[p]:
                    total += 1
    src = np.empty(total, dtype=np.int64)
    dst = np.empty(total, dtype=np.int64)
    k = 0
    for s in range(ptr.shape[0] - 1):
        lo, hi = ptr[s], ptr[s + 1]
        for p in range(lo, hi):
            stop = min(hi, p + lookahead + 1)
            for q in range(p + 1, stop):
                if items[q] != items[p]:
                    src[k] = items[p]
                    dst[k] = items[q]
                    k += 1
    return src, dst


def cooccurrence_pairs_numba(ptr, items, lookahead):
    return _cooccurrence_pairs_nb(
        np.ascontiguousarray(ptr, dtype=np.int64),
        np.ascontiguousarray(items, dtype=np.int64),
        int(lookahead),
    )


# ---------------------------------------------------------------------------
# sparse row aggregation: out[r] = sum_k w[r, k] * table[k]
# ---------------------------------------------------------------------------


def _expand_rows(indptr, rows):
    starts = indptr[rows]
    counts = indptr[rows + 1] - starts
    total = int(counts.sum())
    owner = np.repeat(np.arange(rows.shape[0]), counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return owner, np.repeat(starts, counts) + offsets


def csr_aggregate_numpy(indptr, indices, weights, rows, table):
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((rows.shape[0], table.shape[1]), dtype=table.dtype)
    owner, pos = _expand_rows(indptr, rows)
    if pos.size:
        contrib = table[indices[pos]] * weights[pos, None].astype(table.dtype)
        np.add.at(out, owner, contrib)
    return out


@njit(cache=True)
def _csr_aggregate_nb(indptr, indices, weights, rows, table, out):
    d = table.shape[1]
    for r in range(rows.shape[0]):
        i = rows[r]
        for p in range(indptr[i], indptr[i + 1]):
            k = indices[p]
            w = weights[p]
            for c in range(d):
                out[r, c] += w * table[k, c]


def csr_aggregate_numba(indptr, indices, weights, rows, table):
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    table = np.ascontiguousarray(table)
    out = np.zeros((rows.shape[0], table.shape[1]), dtype=table.dtype)
    _csr_aggregate_nb(indptr, indices, weights.astype(table.dtype), rows, table, out)
    return out


def csr_aggregate_backward_numpy(indptr, indices, weights, rows, grad_out, grad_table):
    """Accumulate ``grad_table[k] += w[r, k] * grad_out[r]`` in place."""
    rows = np.asarray(rows, dtype=np.int64)
    owner, pos = _expand_rows(indptr, rows)
    if pos.size:
        contrib = grad_out[owner] * weights[pos, None].astype(grad_table.dtype)
        np.add.at(grad_table, indices[pos], contrib)


@njit(cache=True)
def _csr_aggregate_backward_nb(indptr, indices, weights, rows, grad_out, grad_table):
    d = grad_out.shape[1]
    for r in range(rows.shape[0]):
        i = rows[r]
        for p in range(indptr[i], indptr[i + 1]):
            k = indices[p]
            w = weights[p]
            for c in range(d):
                grad_table[k, c] += w * grad_out[r, c]


def csr_aggregate_backward_numba(indptr, indices, weights, rows, grad_out, grad_table):
    _csr_aggregate_backward_nb(
        indptr,
        indices,
        weights.astype(grad_table.dtype),
        np.ascontiguousarray(rows, dtype=np.int64),
        np.ascontiguousarray(grad_out, dtype=grad_table.dtype),
        grad_table,
    )


# ---------------------------------------------------------------------------
# scatter-add of rows (embedding lookup backward)
# ---------------------------------------------------------------------------


def scatter_add_rows_numpy(target, idx, src):
    np.add.at(target, np.asarray(idx, dtype=np.int64), src)


@njit(cache=True)
def _scatter_add_rows_nb(target, idx, src):
    d = src.shape[1]
    for r in range(idx.shape[0]):
        j = idx[r]
        for c in range(d):
            target[j, c] += src[r, c]


def scatter_add_rows_numba(target, idx, src):
    _scatter_add_rows_nb(
        target,
        np.ascontiguousarray(idx, dtype=np.int64),
        np.ascontiguousarray(src, dtype=target.dtype),
    )


# ---------------------------------------------------------------------------
# membership of (user, item) queries in a sorted key array
# ---------------------------------------------------------------------------


def member_numpy(keys, queries):
    if keys.shape[0] == 0:
        return np.zeros(queries.shape[0], dtype=np.bool_)
    pos = np.searchsorted(keys, queries)
    pos = np.minimum(pos, keys.shape[0] - 1)
    return keys[pos] == queries


@njit(cache=True)
def _member_nb(keys, queries, out):
    n = keys.shape[0]
    for q in range(queries.shape[0]):
        x = queries[q]
        lo, hi = 0, n
        while lo < hi:
            mid = (lo + hi) >> 1
            if keys[mid] < x:
                lo = mid + 1
            else:
                hi = mid
        out[q] = lo < n and keys[lo] == x


def member_numba(keys, queries):
    out = np.zeros(queries.shape[0], dtype=np.bool_)
    _member_nb(
        np.ascontiguousarray(keys, dtype=np.int64),
        np.ascontiguousarray(queries, dtype=np.int64),
        out,
    )
    return out


# ---------------------------------------------------------------------------
# top-k with exclusions; ties broken by ascending item index
# ---------------------------------------------------------------------------


def topk_excluding_numpy(scores, excl_ptr, excl_items, k):
    """Row-wise top-``k`` item indices; excluded items never appear, -1 pads."""
    scores = np.array(scores, dtype=np.float64, copy=True)
    n_rows, n_items = scores.shape
    owner = np.repeat(np.arange(n_rows), np.diff(excl_ptr))
    blocked = np.zeros(scores.shape, dtype=np.bool_)
    blocked[owner, excl_items] = True
    scores[blocked] = -np.inf
    k = min(k, n_items)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    order[np.take_along_axis(blocked, order, axis=1)] = -1
    return order.astype(np.int64)


@njit(cache=True)
def _topk_excluding_nb(scores, excl_ptr, excl_items, k, out):
    n_rows, n_items = scores.shape
    blocked = np.zeros(n_items, dtype=np.bool_)
    best = np.empty(k, dtype=np.float64)
    for r in range(n_rows):
        for p in range(excl_ptr[r], excl_ptr[r + 1]):
            blocked[excl_items[p]] = True
        filled = 0
        # j ascends, so an equal score never displaces an earlier index
        for j in range(n_items):
            if blocked[j]:
                continue
            s = scores[r, j]
            if filled == k and not s > best[k - 1]:
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and s > best[pos - 1]:
                if pos < k:
                    best[pos] = best[pos - 1]
                    out[r, pos] = out[r, pos - 1]
                pos -= 1
            best[pos] = s
            out[r, pos] = j
            if filled < k:
                filled += 1
        for p in range(excl_ptr[r], excl_ptr[r + 1]):
            blocked[excl_items[p]] = False


def topk_excluding_numba(scores, excl_ptr, excl_items, k):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    k = min(int(k), scores.shape[1])
    out = np.full((scores.shape[0], k), -1, dtype=np.int64)
    _topk_excluding_nb(
        scores,
        np.ascontiguousarray(excl_ptr, dtype=np.int64),
        np.ascontiguousarray(excl_items, dtype=np.int64),
        k,
        out,
    )
    return out


KERNELS = (
    "cooccurrence_pairs",
    "csr_aggregate",
    "csr_aggregate_backward",
    "scatter_add_rows",
    "member",
    "topk_excluding",
)

if USE_NUMBA:
    cooccurrence_pairs = cooccurrence_pairs_numba
    csr_aggregate = csr_aggregate_numba
    csr_aggregate_backward = csr_aggregate_backward_numba
    scatter_add_rows = scatter_add_rows_numba
    member = member_numba
    topk_excluding = topk_excluding_numba
else:
    cooccurrence_pairs = cooccurrence_pairs_numpy
    csr_aggregate = csr_aggregate_numpy
    csr_aggregate_backward = csr_aggregate_backward_numpy
    scatter_add_rows = scatter_add_rows_numpy
    member = member_numpy
    topk_excluding = topk_excluding_numpy
