"""Scoreboard of scheduled queries and KV-cache / batch-size projections.

Iteration offsets are 1-based relative to the scoreboard's current iteration
``k``: offset ``d`` is absolute iteration ``k + d``. A query scheduled at
iteration ``s`` with predicted length ``r`` holds ``ceil((j - s + q_len) / N)``
blocks at iteration ``j`` for ``s <= j < s + r`` and nothing otherwise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional

import numpy as np


class ScoreboardError(KeyError):
    pass


@dataclass
class ScoreboardEntry:
    query_id: int
    s: int
    q_len: int
    pred_gen: int
    lost: bool = False
    deadline: float = math.inf
    # set when an overrun arrives while pred_gen already sits at the length limit
    capped: bool = False

    def __post_init__(self):
        if self.s < 0 or self.q_len < 1 or self.pred_gen < 1:
            raise ValueError(f"invalid scoreboard entry {self}")


def per_query_kv(entry: ScoreboardEntry, j: int, n_tokens: int) -> int:
    if n_tokens < 1:
        raise ValueError("tokens per block must be >= 1")
    if entry.s <= j < entry.s + entry.pred_gen:
        return -(-(j - entry.s + entry.q_len) // n_tokens)
    return 0


@dataclass(frozen=True)
class ProjectionSet:
    B: np.ndarray
    KV: np.ndarray

    @property
    def n(self) -> int:
        return int(self.B.size)

    def __len__(self):
        return self.n

    def at(self, d: int):
        """(B[d], KV[d]) for 1-based offset d; zero past the horizon."""
        if d < 1:
            raise IndexError("offsets start at 1")
        if d > self.n:
            return 0, 0
        return int(self.B[d - 1]), int(self.KV[d - 1])

    def dump(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["d", "batch", "kv_blocks"])
            for d in range(1, self.n + 1):
                w.writerow([d, int(self.B[d - 1]), int(self.KV[d - 1])])


class Scoreboard:
    def __init__(self, tokens_per_block: int = 64, k: int = 0):
        if tokens_per_block < 1:
            raise ValueError("tokens per block must be >= 1")
        self.N = int(tokens_per_block)
        self.k = int(k)
        self.entries: Dict[int, ScoreboardEntry] = {}
        self._arrays = None

    def __len__(self):
        return len(self.entries)

    def __contains__(self, query_id):
        return query_id in self.entries

    def __getitem__(self, query_id) -> ScoreboardEntry:
        try:
            return self.entries[query_id]
        except KeyError:
            raise ScoreboardError(query_id) from None

    def snapshot(self) -> tuple:
        return (self.N, self.k, tuple(sorted(
            (e.query_id, e.s, e.q_len, e.pred_gen, e.lost, e.deadline, e.capped) for e in self.entries.values())))

    def touch(self) -> None:
        """Invalidate cached arrays after mutating an entry in place."""
        self._arrays = None

    def add(self, entry: ScoreboardEntry) -> None:
        if entry.query_id in self.entries:
            raise ScoreboardError(f"duplicate query id {entry.query_id}")
        self.entries[entry.query_id] = entry
        self._arrays = None

    def remove(self, query_id) -> ScoreboardEntry:
        try:
            e = self.entries.pop(query_id)
        except KeyError:
            raise ScoreboardError(f"unknown query id {query_id}") from None
        self._arrays = None
        return e

    def arrays(self):
        """(ids, s, q_len, pred_gen, lost, deadline) as numpy arrays."""
        if self._arrays is None:
            es = list(self.entries.values())
            self._arrays = (
                np.array([e.query_id for e in es], dtype=np.int64),
                np.array([e.s for e in es], dtype=np.int64),
                np.array([e.q_len for e in es], dtype=np.int64),
                np.array([e.pred_gen for e in es], dtype=np.int64),
                np.array([e.lost for e in es], dtype=bool),
                np.array([e.deadline for e in es], dtype=float),
            )
        return self._arrays


def _project_arrays(k: int, N: int, s: np.ndarray, q: np.ndarray, r: np.ndarray) -> ProjectionSet:
    if s.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return ProjectionSet(empty, empty)
    n = int(max(0, (s + r - k).max()))
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return ProjectionSet(empty, empty)
    d_lo = np.maximum(1, s - k)
    d_hi = s + r - 1 - k
    live = d_hi >= d_lo
    d_lo, d_hi, s, q = d_lo[live], d_hi[live], s[live], q[live]
    size = n + 2
    batch = np.bincount(d_lo, minlength=size) - np.bincount(d_hi + 1, minlength=size)

    t_lo = k + d_lo - s + q
    t_hi = k + d_hi - s + q
    v0 = -(-t_lo // N)
    v1 = -(-t_hi // N)
    # blocks step up by one whenever the token count reaches m*N + 1
    counts = v1 - v0
    first = d_lo + (v0 * N + 1 - t_lo)
    total = int(counts.sum())
    kv = np.bincount(d_lo, weights=v0, minlength=size) - np.bincount(d_hi + 1, weights=v1, minlength=size)
    if total:
        starts = np.repeat(np.cumsum(counts) - counts, counts)
        pos = np.repeat(first, counts) + N * (np.arange(total) - starts)
        kv += np.bincount(pos, minlength=size)
    B = np.cumsum(batch)[1:n + 1].astype(np.int64)
    KV = np.rint(np.cumsum(kv)[1:n + 1]).astype(np.int64)
    return ProjectionSet(B, KV)


def project(sb: Scoreboard) -> ProjectionSet:
    _, s, q, r, _, _ = sb.arrays()
    return _project_arrays(sb.k, sb.N, s, q, r)


def virtual_project(sb: Scoreboard, candidate: ScoreboardEntry) -> ProjectionSet:
    if candidate.query_id in sb.entries:
        raise ScoreboardError(f"duplicate query id {candidate.query_id}")
    _, s, q, r, _, _ = sb.arrays()
    return _project_arrays(sb.k, sb.N, np.append(s, candidate.s), np.append(q, candidate.q_len),
                           np.append(r, candidate.pred_gen))


def on_overrun(sb: Scoreboard, query_id: int, max_tokens: int, generated: Optional[int] = None) -> ScoreboardEntry:
    """Extend an entry whose query outlived its predicted length.

    ``generated`` defaults to the prediction itself (the overrun point).
    """
    e = sb[query_id]
    limit = max_tokens - e.q_len
    if e.pred_gen >= limit:
        # sequence limit reached; the query is forced to stop
        e.capped = True
        return e
    if generated is None:
        generated = e.pred_gen
    new = max(limit, generated + 1)
    e.pred_gen = new
    sb.touch()
    return e


def advance(sb: Scoreboard, completed_ids: Iterable[int] = ()) -> None:
    """Close one iteration: bump ``k`` and strike completed queries."""
    ids = list(completed_ids)
    missing = [i for i in ids if i not in sb.entries]
    if missing:
        raise ScoreboardError(f"unknown query ids {missing}")
    for i in ids:
        sb.remove(i)
    sb.k += 1
