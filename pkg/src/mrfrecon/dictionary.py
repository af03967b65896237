"""Pre-simulated fingerprint dictionary and template matching."""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .sequence import DEFAULT_EPG_STATES, SequenceSchedule, TissueParams, simulate_fingerprints

MAGIC = b"MRFD"
FORMAT_VERSION = 1


class DigestMismatchError(ValueError):
    """Dictionary was simulated with a different schedule than the one supplied."""


def _axis(values, name):
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} axis is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} axis has non-finite values")
    if arr.size > 1 and np.any(np.diff(arr) <= 0):
        raise ValueError(f"{name} axis must be strictly increasing")
    return arr


@dataclass(frozen=True, eq=False)
class ParamGrid:
    t1_values_ms: np.ndarray
    t2_values_ms: np.ndarray
    b1_values: np.ndarray

    def __post_init__(self):
        t1 = _axis(self.t1_values_ms, "t1")
        t2 = _axis(self.t2_values_ms, "t2")
        b1 = _axis(self.b1_values, "b1")
        if t1[0] <= 0 or t2[0] <= 0:
            raise ValueError("relaxation times must be positive")
        if b1[0] < 0:
            raise ValueError("b1 values must be non-negative")
        object.__setattr__(self, "t1_values_ms", t1)
        object.__setattr__(self, "t2_values_ms", t2)
        object.__setattr__(self, "b1_values", b1)

    @classmethod
    def from_ranges(cls, t1=(50.0, 4500.0, 60), t2=(20.0, 800.0, 50), b1=(0.7, 1.3, 7),
                    spacing="log"):
        """Axes from ``(start, stop, count)`` triples; relaxation axes log-spaced by default.

        ``b1`` is always linear.
        """
        space = np.geomspace if spacing == "log" else np.linspace
        if spacing not in ("log", "linear"):
            raise ValueError(f"unknown spacing {spacing!r}")
        return cls(space(t1[0], t1[1], int(t1[2])), space(t2[0], t2[1], int(t2[2])),
                   np.linspace(b1[0], b1[1], int(b1[2])))

    def combinations(self):
        """Valid (t1, t2, b1) rows in lexicographic order, shape (n, 3)."""
        g = np.stack(np.meshgrid(self.t1_values_ms, self.t2_values_ms, self.b1_values,
                                 indexing="ij"), axis=-1).reshape(-1, 3)
        return g[g[:, 1] <= g[:, 0]]

    def __len__(self):
        return len(self.combinations())


# Reference grid close to the ~131k-entry dictionary (60 x 50 x 57 axes, 130,929
# valid combinations after the T2 <= T1 filter).  Documentation only: far too
# large to simulate at desk scale with a 3000-pulse train.
PAPER_SCALE_GRID = dict(t1=(50.0, 4500.0, 60), t2=(20.0, 800.0, 50), b1=(0.7, 1.3, 57),
                        spacing="log")


@dataclass(frozen=True)
class MatchResult:
    params: Optional[TissueParams]
    score: float
    index: int
    error: Optional[str] = None


class Dictionary:
    """Unit-norm fingerprints (one row per valid grid point) and their parameters.

    Rows are held in complex128; the on-disk format stores complex64.  A complex64
    copy is kept for the first matching pass, which halves the memory traffic.
    """

    def __init__(self, entries, params, schedule_digest: bytes):
        entries = np.ascontiguousarray(entries, dtype=np.complex128)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if entries.ndim != 2 or params.shape != (entries.shape[0], 3):
            raise ValueError("entries must be (n, n_seq) and params (n, 3)")
        if len(schedule_digest) != 8:
            raise ValueError("schedule digest must be 8 bytes")
        norms = np.linalg.norm(entries, axis=1)
        if np.any(norms == 0):
            raise ValueError("dictionary contains an all-zero fingerprint")
        self.entries = entries / norms[:, None]
        self.entries.setflags(write=False)
        self._entries32 = self.entries.astype(np.complex64)
        self._entries32.setflags(write=False)
        self.params = params
        self.params.setflags(write=False)
        self.schedule_digest = bytes(schedule_digest)

    def __len__(self):
        return self.entries.shape[0]

    @property
    def n_seq(self):
        return self.entries.shape[1]

    def tissue(self, i) -> TissueParams:
        t1, t2, b1 = self.params[i]
        return TissueParams(float(t1), float(t2), float(b1))

    def save(self, path):
        path = Path(path)
        n, n_seq = self.entries.shape
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<IQQ", FORMAT_VERSION, n, n_seq))
            f.write(self.schedule_digest)
            f.write(self.params.astype("<f8").tobytes())
            f.write(self.entries.astype("<c8").tobytes())

    @classmethod
    def load(cls, path, schedule: Optional[SequenceSchedule] = None) -> "Dictionary":
        """Read an MRFD file; with ``schedule`` given, its digest must match."""
        data = Path(path).read_bytes()
        if data[:4] != MAGIC:
            raise ValueError(f"{path}: not a dictionary file (bad magic)")
        version, n, n_seq = struct.unpack_from("<IQQ", data, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        off = 4 + 20
        digest = data[off:off + 8]
        off += 8
        expected = off + n * 3 * 8 + n * n_seq * 8
        if len(data) != expected:
            raise ValueError(f"{path}: truncated or oversized ({len(data)} bytes, expected {expected})")
        if schedule is not None and schedule.digest() != digest:
            raise DigestMismatchError(
                f"{path}: schedule digest {digest.hex()} != supplied schedule {schedule.digest().hex()}")
        params = np.frombuffer(data, dtype="<f8", count=n * 3, offset=off).reshape(n, 3)
        off += n * 3 * 8
        entries = np.frombuffer(data, dtype="<c8", count=n * n_seq, offset=off).reshape(n, n_seq)
        return cls(entries.astype(np.complex128), params.copy(), digest)


def build_dictionary(grid: ParamGrid, schedule: SequenceSchedule,
                     n_states: int = DEFAULT_EPG_STATES) -> Dictionary:
    combos = grid.combinations()
    if combos.shape[0] == 0:
        raise ValueError("parameter grid has no combination with T2 <= T1")
    sig = simulate_fingerprints(combos[:, 0], combos[:, 1], combos[:, 2], schedule, n_states)
    return Dictionary(sig, combos, schedule.digest())


def _normalized_query(fp, n_seq):
    q = np.asarray(fp, dtype=np.complex128)
    if q.ndim != 1 or q.shape[0] != n_seq:
        raise ValueError(f"query length {q.shape} does not match dictionary n_seq={n_seq}")
    norm = np.linalg.norm(q)
    if not norm > 0 or not np.isfinite(norm):
        raise ValueError("query fingerprint is zero or non-finite; normalisation undefined")
    return q / norm


def match_one(fp, dictionary: Dictionary) -> MatchResult:
    """Best entry by |<entry, q/|q|>|; the lowest index wins ties."""
    q = _normalized_query(fp, dictionary.n_seq)
    # Screen every row in 32-bit, then rescore in 64-bit all rows that could still be
    # the maximum.  Each 32-bit score is within tol/2 of the exact one (n_seq-term dot
    # product of unit vectors plus the two casts), so the exact argmax always survives
    # and the result is identical to a full 64-bit scan.
    # |entries @ conj(q)| equals |<entry, q>| and avoids a conjugated copy of the table.
    rough = np.abs(dictionary._entries32 @ np.conj(q.astype(np.complex64)))
    tol = 2 * (dictionary.n_seq + 4) * 2.0 ** -23
    cand = np.flatnonzero(rough >= rough.max() - tol)
    scores = np.abs(dictionary.entries[cand] @ np.conj(q))
    k = int(np.argmax(scores))
    i = int(cand[k])
    return MatchResult(dictionary.tissue(i), float(scores[k]), i)


def _match_or_error(fp, dictionary):
    try:
        return match_one(fp, dictionary)
    except ValueError as exc:
        return MatchResult(None, float("nan"), -1, str(exc))


def default_workers():
    try:
        return max(1, int(os.environ.get("MRF_THREADS", "1")))
    except ValueError:
        return 1


def match_batch(fps: Sequence, dictionary: Dictionary, workers: Optional[int] = None) -> list:
    """``match_one`` over every query, in input order.

    Each query is scored independently, so the result does not depend on
    ``workers``.  Invalid queries yield a ``MatchResult`` with ``index=-1``
    and ``error`` set instead of raising.
    """
    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1:
        return [_match_or_error(fp, dictionary) for fp in fps]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda fp: _match_or_error(fp, dictionary), fps))
