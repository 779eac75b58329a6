"""Interaction parsing, k-core style filtering, chronological splits and
sliding-window training instances."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

log = logging.getLogger(__name__)

DATASET_MAGIC = b"MAGNNDS1"

# Post-filter statistics published for the standard benchmark datasets
# (users, items, interactions). Used only for the prepare diagnostic.
REFERENCE_COUNTS = {
    "cds": (17_052, 35_118, 472_265),
    "books": (52_406, 41_264, 1_856_747),
    "children": (48_296, 32_871, 2_784_423),
    "comics": (34_445, 33_121, 2_411_314),
    "ml20m": (129_797, 13_649, 9_921_393),
}


class DatasetError(Exception):
    pass


class ConfigError(DatasetError):
    pass


class ParseError(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DegenerateDatasetError(DatasetError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_ref: str
    item_ref: str
    rating: float
    timestamp: int


@dataclass(frozen=True)
class FormatConfig:
    user_col: str = "userId"
    item_col: str = "movieId"
    rating_col: str | None = "rating"
    time_col: str = "timestamp"
    delimiter: str = ","
    max_malformed: int = 0


@dataclass
class UserSequence:
    user_index: int
    items: np.ndarray


@dataclass
class FilteredData:
    sequences: list[UserSequence]
    user_ids: list[str]
    item_ids: list[str]
    counts: dict[str, int] = field(default_factory=dict)


@dataclass
class SplitDataset:
    user_ids: list[str]
    item_ids: list[str]
    train: list[np.ndarray]
    val: list[np.ndarray]
    test: list[np.ndarray]

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def pad(self) -> int:
        """Reserved padding item index (one past the last real item)."""
        return len(self.item_ids)

    @property
    def num_interactions(self) -> int:
        return sum(len(a) + len(b) + len(c) for a, b, c in zip(self.train, self.val, self.test))

    def full_sequence(self, user: int) -> np.ndarray:
        return np.concatenate([self.train[user], self.val[user], self.test[user]])

    def stats(self) -> dict:
        m, n, k = self.num_users, self.num_items, self.num_interactions
        return {
            "users": m,
            "items": n,
            "interactions": k,
            "density": k / (m * n) if m and n else 0.0,
            "train_interactions": int(sum(len(s) for s in self.train)),
            "val_interactions": int(sum(len(s) for s in self.val)),
            "test_interactions": int(sum(len(s) for s in self.test)),
        }


@dataclass(frozen=True)
class TrainingInstance:
    user_index: int
    window: np.ndarray
    history: np.ndarray
    targets: np.ndarray
    window_mask: np.ndarray


@dataclass
class InstanceArrays:
    """Columnar store of training instances.

    ``history`` is left-aligned (oldest first) and padded on the right;
    ``history_len`` gives the real length of each row.
    """

    users: np.ndarray
    window: np.ndarray
    window_mask: np.ndarray
    history: np.ndarray
    history_len: np.ndarray
    targets: np.ndarray
    pad: int

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def __getitem__(self, i: int) -> TrainingInstance:
        return TrainingInstance(
            user_index=int(self.users[i]),
            window=self.window[i],
            history=self.history[i, : self.history_len[i]],
            targets=self.targets[i],
            window_mask=self.window_mask[i],
        )

    @property
    def history_mask(self) -> np.ndarray:
        return np.arange(self.history.shape[1])[None, :] < self.history_len[:, None]

    def subset(self, idx) -> "InstanceArrays":
        return InstanceArrays(
            self.users[idx],
            self.window[idx],
            self.window_mask[idx],
            self.history[idx],
            self.history_len[idx],
            self.targets[idx],
            self.pad,
        )


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def parse_interactions(source, fmt: FormatConfig = FormatConfig()) -> list[Interaction]:
    """Read delimited UTF-8 text with a header row.

    ``source`` may be a path, a binary stream or a text stream. Any malformed
    row is an error unless ``fmt.max_malformed`` allows some to be skipped.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return parse_interactions(fh, fmt)
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if not isinstance(source, io.TextIOBase):
        source = io.TextIOWrapper(source, encoding="utf-8", newline="")

    reader = csv.reader(source, delimiter=fmt.delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("input is empty (no header row)", 1) from None
    header = [h.strip() for h in header]
    wanted = [fmt.user_col, fmt.item_col, fmt.time_col]
    if fmt.rating_col is not None:
        wanted.append(fmt.rating_col)
    missing = [c for c in wanted if c not in header]
    if missing:
        raise ConfigError(f"missing column(s) {missing} in header {header}")
    iu, ii, it = (header.index(c) for c in wanted[:3])
    ir = header.index(fmt.rating_col) if fmt.rating_col is not None else None
    width = len(header)

    out: list[Interaction] = []
    bad = 0
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        try:
            if len(row) != width:
                raise ParseError(f"expected {width} fields, got {len(row)}", lineno)
            rating = 1.0 if ir is None else _to_float(row[ir], "rating", lineno)
            ts = _to_int(row[it], "timestamp", lineno)
            if ts < 0:
                raise ParseError(f"negative timestamp {ts}", lineno)
        except ParseError:
            bad += 1
            if bad > fmt.max_malformed:
                raise
            continue
        out.append(Interaction(row[iu].strip(), row[ii].strip(), rating, ts))
    if bad:
        log.warning("skipped %d malformed row(s)", bad)
    return out


def _to_float(text: str, what: str, lineno: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric {what} {text!r}", lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite {what} {text!r}", lineno)
    return value


def _to_int(text: str, what: str, lineno: int) -> int:
    try:
        return int(text)
    except ValueError:
        pass
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric {what} {text!r}", lineno) from None
    if not value.is_integer():
        raise ParseError(f"non-integer {what} {text!r}", lineno)
    return int(value)


# ---------------------------------------------------------------------------
# filtering and splitting
# ---------------------------------------------------------------------------


def filter_and_index(
    interactions: list[Interaction],
    rating_threshold: float = 4.0,
    min_count: int = 10,
    binary: bool = False,
) -> FilteredData:
    """Keep positives, drop rare items then rare users, assign dense ids.

    Filtering is a single pass in the order rating -> items -> users. Dense
    ids follow first appearance in the surviving input rows; each user's
    sequence is ordered by timestamp with input order breaking ties.
    """
    if not interactions:
        raise DegenerateDatasetError("no interactions to filter")
    rows = interactions if binary else [x for x in interactions if x.rating >= rating_threshold]
    counts = {"raw": len(interactions), "after_rating": len(rows)}

    item_freq: dict[str, int] = {}
    for x in rows:
        item_freq[x.item_ref] = item_freq.get(x.item_ref, 0) + 1
    rows = [x for x in rows if item_freq[x.item_ref] >= min_count]
    counts["after_items"] = len(rows)

    user_freq: dict[str, int] = {}
    for x in rows:
        user_freq[x.user_ref] = user_freq.get(x.user_ref, 0) + 1
    rows = [x for x in rows if user_freq[x.user_ref] >= min_count]
    counts["after_users"] = len(rows)
    if not rows:
        raise DegenerateDatasetError(
            f"dataset degenerate: nothing survives rating>={rating_threshold}, min_count={min_count}"
        )

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    per_user: list[list[tuple[int, int, int]]] = []
    for order, x in enumerate(rows):
        u = user_index.setdefault(x.user_ref, len(user_index))
        i = item_index.setdefault(x.item_ref, len(item_index))
        if u == len(per_user):
            per_user.append([])
        per_user[u].append((x.timestamp, order, i))

    sequences = []
    for u, events in enumerate(per_user):
        events.sort()
        sequences.append(UserSequence(u, np.array([e[2] for e in events], dtype=np.int64)))
    log.info(
        "filter: %d raw -> %d rated -> %d item-filtered -> %d user-filtered (%d users, %d items)",
        counts["raw"], counts["after_rating"], counts["after_items"], counts["after_users"],
        len(user_index), len(item_index),
    )
    return FilteredData(sequences, list(user_index), list(item_index), counts)


def split_sizes(n: int, train_frac: float = 0.7, val_frac: float = 0.1) -> tuple[int, int, int]:
    # fractions as exact rationals so 0.7 * 10 floors to 7, not 6
    n_train = (n * round(train_frac * 1000)) // 1000
    n_trval = (n * round((train_frac + val_frac) * 1000)) // 1000
    return n_train, n_trval - n_train, n - n_trval


def chronological_split(filtered: FilteredData, train_frac: float = 0.7, val_frac: float = 0.1) -> SplitDataset:
    train, val, test = [], [], []
    for seq in filtered.sequences:
        a, b, _ = split_sizes(len(seq.items), train_frac, val_frac)
        train.append(seq.items[:a].copy())
        val.append(seq.items[a : a + b].copy())
        test.append(seq.items[a + b :].copy())
    return SplitDataset(list(filtered.user_ids), list(filtered.item_ids), train, val, test)


def make_training_instances(
    split: SplitDataset,
    window: int = 5,
    targets: int = 3,
    stride: int = 1,
    history: int = 20,
) -> InstanceArrays:
    """One instance per window position over each user's training sequence.

    Sequences shorter than ``window + targets`` are left-padded with the pad
    index, so every user yields at least one instance.
    """
    pad = split.pad
    span = window + targets
    users, wins, tgts, hists, hlens = [], [], [], [], []
    for u, seq in enumerate(split.train):
        n_pad = max(0, span - len(seq))
        s = np.concatenate([np.full(n_pad, pad, dtype=np.int64), seq.astype(np.int64)])
        for start in range(0, len(s) - span + 1, stride):
            real_start = max(start - n_pad, 0)
            h = s[n_pad + max(0, real_start - history) : n_pad + real_start] if start >= n_pad else s[:0]
            row = np.full(history, pad, dtype=np.int64)
            row[: len(h)] = h
            users.append(u)
            wins.append(s[start : start + window])
            tgts.append(s[start + window : start + span])
            hists.append(row)
            hlens.append(len(h))
    if not users:
        empty = np.zeros((0, window), dtype=np.int64)
        return InstanceArrays(
            np.zeros(0, np.int64), empty, empty.astype(bool), np.zeros((0, history), np.int64),
            np.zeros(0, np.int64), np.zeros((0, targets), np.int64), pad,
        )
    win = np.stack(wins)
    return InstanceArrays(
        users=np.array(users, dtype=np.int64),
        window=win,
        window_mask=win != pad,
        history=np.stack(hists),
        history_len=np.array(hlens, dtype=np.int64),
        targets=np.stack(tgts),
        pad=pad,
    )


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------


def _write_strings(fh: BinaryIO, values: Iterable[str]) -> None:
    for v in values:
        raw = v.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def _write_ragged(fh: BinaryIO, parts: list[np.ndarray]) -> None:
    ptr = np.zeros(len(parts) + 1, dtype="<i8")
    ptr[1:] = np.cumsum([len(p) for p in parts])
    flat = np.concatenate(parts).astype("<i4") if parts else np.zeros(0, "<i4")
    fh.write(ptr.tobytes())
    fh.write(flat.tobytes())


def save_dataset(split: SplitDataset, path) -> None:
    """Write the ``MAGNNDS1`` container (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<QQ", split.num_users, split.num_items))
        _write_strings(fh, split.user_ids)
        _write_strings(fh, split.item_ids)
        for part in (split.train, split.val, split.test):
            _write_ragged(fh, part)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetError("dataset file truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def strings(self, count: int) -> list[str]:
        out = []
        for _ in range(count):
            (n,) = struct.unpack("<I", self.take(4))
            out.append(self.take(n).decode("utf-8"))
        return out

    def ragged(self, count: int) -> list[np.ndarray]:
        ptr = np.frombuffer(self.take(8 * (count + 1)), dtype="<i8")
        flat = np.frombuffer(self.take(4 * int(ptr[-1])), dtype="<i4").astype(np.int64)
        return [flat[ptr[i] : ptr[i + 1]].copy() for i in range(count)]


def load_dataset(path) -> SplitDataset:
    buf = Path(path).read_bytes()
    if buf[:8] != DATASET_MAGIC:
        raise DatasetError(f"{path}: not a MAGNNDS1 dataset file")
    r = _Reader(buf)
    r.take(8)
    m, n = struct.unpack("<QQ", r.take(16))
    users = r.strings(m)
    items = r.strings(n)
    train, val, test = (r.ragged(m) for _ in range(3))
    if r.pos != len(buf):
        raise DatasetError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return SplitDataset(users, items, train, val, test)


def write_stats(split: SplitDataset, path, extra: dict | None = None) -> dict:
    stats = split.stats()
    if extra:
        stats.update(extra)
    Path(path).write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return stats


def compare_reference(stats: dict, name: str) -> dict:
    """Relative deviation of prepared counts from a published reference."""
    ref = REFERENCE_COUNTS[name.lower()]
    got = (stats["users"], stats["items"], stats["interactions"])
    dev = {k: (g - r) / r for k, g, r in zip(("users", "items", "interactions"), got, ref)}
    worst = max(abs(v) for v in dev.values())
    if worst > 0.02:
        log.warning(
            "counts deviate from reference %s by up to %.1f%% (single-pass items-then-users "
            "filtering may differ from an iterated k-core)", name, 100 * worst,
        )
    return {"reference": name.lower(), "deviation": dev, "within_2pct": worst <= 0.02}
