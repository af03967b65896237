"""FISP-type acquisition schedules and fingerprint simulation.

Signals are simulated with an extended phase graph (EPG): the magnetisation
is held as a set of dephased configuration states (F+, F-, Z) that are mixed
by each RF pulse, relaxed over the repetition time and shifted by one order
by the unbalanced FISP gradient.  The recorded sample is the F0 state right
after each pulse.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_EPG_STATES = 256


@dataclass(frozen=True)
class TissueParams:
    t1_ms: float
    t2_ms: float
    b1: float = 1.0

    def __post_init__(self):
        validate_params(self.t1_ms, self.t2_ms, self.b1)


def validate_params(t1_ms, t2_ms, b1):
    t1 = np.asarray(t1_ms, dtype=float)
    t2 = np.asarray(t2_ms, dtype=float)
    b = np.asarray(b1, dtype=float)
    if not (np.all(np.isfinite(t1)) and np.all(np.isfinite(t2)) and np.all(np.isfinite(b))):
        raise ValueError("tissue parameters must be finite")
    if np.any(t1 <= 0) or np.any(t2 <= 0):
        raise ValueError("T1 and T2 must be positive")
    if np.any(t2 > t1):
        raise ValueError("T2 > T1 is unphysical")
    if np.any(b < 0):
        raise ValueError("B1 scale must be non-negative")


@dataclass(frozen=True)
class ScheduleConfig:
    n_reps: int = 3000
    fa_min_deg: float = 5.0
    fa_max_deg: float = 74.0
    tr_min_ms: float = 12.0
    tr_max_ms: float = 15.0
    pattern: str = "sinusoidal"
    seed: int = 0
    n_lobes: int = 6
    initial_inversion: bool = True
    inversion_delay_ms: float = 20.0

    def validate(self):
        if int(self.n_reps) < 1:
            raise ValueError(f"n_reps must be >= 1, got {self.n_reps}")
        if self.fa_min_deg > self.fa_max_deg:
            raise ValueError(f"fa_min_deg ({self.fa_min_deg}) > fa_max_deg ({self.fa_max_deg})")
        if self.tr_min_ms > self.tr_max_ms:
            raise ValueError(f"tr_min_ms ({self.tr_min_ms}) > tr_max_ms ({self.tr_max_ms})")
        if self.fa_min_deg < 0:
            raise ValueError("flip angles must be non-negative")
        if self.tr_min_ms <= 0:
            raise ValueError("repetition times must be positive")
        if self.pattern not in ("sinusoidal", "random"):
            raise ValueError(f"unknown flip-angle pattern {self.pattern!r}")
        if self.n_lobes < 1:
            raise ValueError("n_lobes must be >= 1")
        if self.inversion_delay_ms < 0:
            raise ValueError("inversion_delay_ms must be non-negative")


@dataclass(frozen=True, eq=False)
class SequenceSchedule:
    flip_angles_deg: np.ndarray
    repetition_times_ms: np.ndarray
    initial_inversion: bool = True
    inversion_delay_ms: float = 20.0
    n_reps: int = field(init=False)

    def __post_init__(self):
        fa = np.ascontiguousarray(self.flip_angles_deg, dtype=np.float64)
        tr = np.ascontiguousarray(self.repetition_times_ms, dtype=np.float64)
        if fa.ndim != 1 or tr.ndim != 1 or fa.shape != tr.shape:
            raise ValueError("flip angles and repetition times must be 1-D of equal length")
        if fa.size < 1:
            raise ValueError("schedule must contain at least one repetition")
        if not (np.all(np.isfinite(fa)) and np.all(np.isfinite(tr))):
            raise ValueError("schedule values must be finite")
        if np.any(tr <= 0):
            raise ValueError("repetition times must be positive")
        fa.setflags(write=False)
        tr.setflags(write=False)
        object.__setattr__(self, "flip_angles_deg", fa)
        object.__setattr__(self, "repetition_times_ms", tr)
        object.__setattr__(self, "n_reps", int(fa.size))

    def __eq__(self, other):
        if not isinstance(other, SequenceSchedule):
            return NotImplemented
        return self.digest() == other.digest()

    def __hash__(self):
        return hash(self.digest())

    def digest(self) -> bytes:
        """8-byte checksum of everything that affects the simulated signal."""
        h = hashlib.sha256()
        h.update(self.flip_angles_deg.astype("<f8").tobytes())
        h.update(self.repetition_times_ms.astype("<f8").tobytes())
        h.update(bytes([1 if self.initial_inversion else 0]))
        h.update(np.float64(self.inversion_delay_ms).astype("<f8").tobytes())
        return h.digest()[:8]

    def truncated(self, n_reps):
        return SequenceSchedule(self.flip_angles_deg[:n_reps], self.repetition_times_ms[:n_reps],
                                self.initial_inversion, self.inversion_delay_ms)


def generate_schedule(config: ScheduleConfig) -> SequenceSchedule:
    """Build a flip-angle / TR train from ``config``.

    The sinusoidal pattern is a sequence of half-sine lobes with seeded
    random peak heights; the random pattern draws flip angles uniformly.
    TRs are always uniform random in ``[tr_min_ms, tr_max_ms]``.
    """
    config.validate()
    n = int(config.n_reps)
    rng = np.random.default_rng(config.seed)
    lo, hi = float(config.fa_min_deg), float(config.fa_max_deg)
    if config.pattern == "random":
        fa = rng.uniform(lo, hi, size=n)
    else:
        n_lobes = min(config.n_lobes, n)
        bounds = np.linspace(0, n, n_lobes + 1).round().astype(int)
        peaks = rng.uniform(0.5, 1.0, size=n_lobes)
        fa = np.empty(n)
        for j in range(n_lobes):
            a, b = bounds[j], bounds[j + 1]
            u = (np.arange(b - a) + 0.5) / (b - a)
            fa[a:b] = lo + peaks[j] * (hi - lo) * np.sin(np.pi * u)
    fa = np.clip(fa, lo, hi)
    tr = np.clip(rng.uniform(config.tr_min_ms, config.tr_max_ms, size=n),
                 config.tr_min_ms, config.tr_max_ms)
    return SequenceSchedule(fa, tr, config.initial_inversion, config.inversion_delay_ms)


def simulate_fingerprints(t1_ms, t2_ms, b1, schedule: SequenceSchedule,
                          n_states: int = DEFAULT_EPG_STATES) -> np.ndarray:
    """Vectorised EPG simulation for a batch of tissues.

    Parameters are broadcast to a common 1-D shape; the result is a complex128
    array of shape ``(n_tissues, schedule.n_reps)``.
    """
    t1, t2, b1 = np.broadcast_arrays(np.atleast_1d(np.asarray(t1_ms, dtype=float)),
                                     np.atleast_1d(np.asarray(t2_ms, dtype=float)),
                                     np.atleast_1d(np.asarray(b1, dtype=float)))
    if t1.ndim != 1:
        raise ValueError("tissue parameters must be scalars or 1-D arrays")
    validate_params(t1, t2, b1)
    if schedule.n_reps < 1:
        raise ValueError("empty schedule")
    if n_states < 1:
        raise ValueError("n_states must be >= 1")
    kmax = int(n_states) + 1
    out = np.empty((t1.size, schedule.n_reps))
    for lo in range(0, t1.size, _BLOCK):
        sl = slice(lo, lo + _BLOCK)
        out[sl] = _epg_block(t1[sl], t2[sl], b1[sl], schedule, kmax)
    return 1j * out


_BLOCK = 256


def _epg_block(t1, t2, b1, schedule, kmax):
    n, n_reps = t1.size, schedule.n_reps
    # Pulses about x keep every F state purely imaginary and Z real, so the
    # recursion runs on real arrays with F+ = i*p and F- = i*m.
    width = min(kmax, n_reps // 2 + 2)
    p = np.zeros((n, width))
    m = np.zeros((n, width))
    z = np.zeros((n, width))
    if schedule.initial_inversion:
        e1d = np.exp(-schedule.inversion_delay_ms / t1)
        z[:, 0] = -e1d + (1.0 - e1d)
    else:
        z[:, 0] = 1.0

    out = np.empty((n, n_reps))
    alphas = np.deg2rad(schedule.flip_angles_deg)
    trs = schedule.repetition_times_ms
    inv_t1 = (1.0 / t1)[:, None]
    inv_t2 = (1.0 / t2)[:, None]
    for i in range(n_reps):
        # Only orders <= i are populated, and orders beyond the remaining
        # number of pulses can never be refocused into F0.
        w = min(i + 2, n_reps - i + 1, kmax, width)
        pw, mw, zw = p[:, :w], m[:, :w], z[:, :w]
        a = alphas[i] * b1
        c2 = np.cos(a / 2.0)[:, None] ** 2
        s2 = 1.0 - c2
        c = np.cos(a)[:, None]
        s = np.sin(a)[:, None]
        # RF rotation (Weigel's transition matrix at phase 0); no relaxation during the pulse.
        p_new = c2 * pw + s2 * mw - s * zw
        m_new = s2 * pw + c2 * mw + s * zw
        zw *= c
        zw += 0.5 * s * (pw - mw)
        out[:, i] = p_new[:, 0]

        e1 = np.exp(-trs[i] * inv_t1)
        e2 = np.exp(-trs[i] * inv_t2)
        p_new *= e2
        m_new *= e2
        zw *= e1
        zw[:, :1] += 1.0 - e1

        pw[:, 1:] = p_new[:, :-1]
        mw[:, :-1] = m_new[:, 1:]
        mw[:, -1] = 0.0
        pw[:, 0] = -mw[:, 0]
    return out


def simulate_fingerprint(params: TissueParams, schedule: SequenceSchedule,
                         n_states: int = DEFAULT_EPG_STATES) -> np.ndarray:
    """Complex fingerprint of one tissue, length ``schedule.n_reps``."""
    return simulate_fingerprints(params.t1_ms, params.t2_ms, params.b1, schedule, n_states)[0]


def add_complex_noise(fp, snr, seed=None) -> np.ndarray:
    """Add white complex Gaussian noise.

    The per-channel standard deviation is ``peak|fp| / snr``; an all-zero
    input uses a reference amplitude of 1.  ``snr`` of ``None`` or ``inf``
    disables noise and returns a copy.  Works on a single fingerprint or on
    a stack, with the peak taken per fingerprint (last axis).
    """
    fp = np.asarray(fp, dtype=np.complex128)
    if snr is None or (isinstance(snr, float) and math.isinf(snr) and snr > 0):
        return fp.copy()
    if not snr > 0:
        raise ValueError(f"snr must be positive, got {snr}")
    peak = np.abs(fp).max(axis=-1, keepdims=True) if fp.size else np.ones(fp.shape[:-1] + (1,))
    peak = np.where(peak > 0, peak, 1.0)
    sigma = peak / snr
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(fp.shape) + 1j * rng.standard_normal(fp.shape)
    return fp + sigma * noise


def write_schedule(schedule: SequenceSchedule, path) -> None:
    """Write ``index,fa_deg,tr_ms`` CSV plus a ``.json`` sidecar for inversion settings."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "fa_deg", "tr_ms"])
        for i, (fa, tr) in enumerate(zip(schedule.flip_angles_deg, schedule.repetition_times_ms)):
            w.writerow([i, repr(float(fa)), repr(float(tr))])
    sidecar = {"initial_inversion": bool(schedule.initial_inversion),
               "inversion_delay_ms": float(schedule.inversion_delay_ms)}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def read_schedule(path) -> SequenceSchedule:
    path = Path(path)
    fa, tr = [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["index", "fa_deg", "tr_ms"]:
            raise ValueError(f"{path}: expected header index,fa_deg,tr_ms")
        for expected, row in enumerate(reader):
            if int(row["index"]) != expected:
                raise ValueError(f"{path}: non-consecutive index at row {expected}")
            fa.append(float(row["fa_deg"]))
            tr.append(float(row["tr_ms"]))
    sidecar = path.with_suffix(".json")
    inv, delay = True, 20.0
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        inv = bool(meta.get("initial_inversion", inv))
        delay = float(meta.get("inversion_delay_ms", delay))
    return SequenceSchedule(np.array(fa), np.array(tr), inv, delay)
