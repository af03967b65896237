"""Synthetic phantom data, the training loop and error metrics."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .models import Model, build_model
from .nn import AdamState, NonFiniteError, adam_step, mse_loss
from .sequence import SequenceSchedule, add_complex_noise, simulate_fingerprints

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
TABLE3_ROWS = (("cnn", "magnitude"), ("rnn", "magnitude"), ("cnn", "complex"), ("rnn", "complex"))


class TrainingError(RuntimeError):
    pass


# -- phantoms ---------------------------------------------------------------

# (T1 ms, T2 ms) centres of the tissue classes, all inside the dictionary ranges.
TISSUES = {
    "scalp": (380.0, 90.0),
    "gm": (1350.0, 95.0),
    "wm": (820.0, 65.0),
    "csf": (4000.0, 650.0),
}


@dataclass
class PhantomSlice:
    params: np.ndarray        # (H, W, 3) t1, t2, b1; zero outside the mask
    mask: np.ndarray          # (H, W) bool foreground
    fingerprints: np.ndarray  # (H, W, n_seq) complex; zero outside the mask
    slice_id: int = 0

    @property
    def shape(self):
        return self.mask.shape


def _ellipse(yy, xx, cy, cx, ry, rx, theta=0.0):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _smooth_field(rng, yy, xx, amplitude, n_terms=3):
    f = np.zeros_like(yy)
    for _ in range(n_terms):
        ky, kx = rng.uniform(0.5, 2.0, size=2) * np.pi
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        f += np.cos(ky * yy + py) * np.cos(kx * xx + px)
    return amplitude * f / n_terms


def phantom_params(height, width, rng, head_scale=1.0):
    """Ellipse-based brain-like (T1, T2, B1) maps and the foreground mask."""
    yy, xx = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    cy, cx = rng.uniform(-0.04, 0.04, size=2)
    theta = rng.uniform(-0.15, 0.15)
    ry, rx = 0.92 * head_scale, 0.80 * head_scale
    label = np.zeros((height, width), dtype=np.int8)
    if head_scale > 0:
        label[_ellipse(yy, xx, cy, cx, ry, rx, theta)] = 1                       # scalp
        label[_ellipse(yy, xx, cy, cx, ry * 0.88, rx * 0.86, theta)] = 2         # grey matter
        label[_ellipse(yy, xx, cy, cx, ry * rng.uniform(0.6, 0.7), rx * rng.uniform(0.55, 0.65), theta)] = 3
        for side in (-1, 1):                                                     # ventricles
            vy = cy + rng.uniform(-0.15, 0.1)
            vx = cx + side * rng.uniform(0.1, 0.2)
            label[_ellipse(yy, xx, vy, vx, rng.uniform(0.15, 0.3), rng.uniform(0.05, 0.1),
                           side * rng.uniform(0.1, 0.4))] = 4
        # sulcal CSF rim between scalp and grey matter
        rim = _ellipse(yy, xx, cy, cx, ry * 0.9, rx * 0.88, theta) & (label == 2)
        label[rim & (rng.random((height, width)) < 0.35)] = 4
    mask = label > 0

    t1 = np.zeros((height, width))
    t2 = np.zeros((height, width))
    for code, name in enumerate(("scalp", "gm", "wm", "csf"), start=1):
        sel = label == code
        t1[sel], t2[sel] = TISSUES[name]
    for _ in range(rng.integers(1, 4)):                                          # lesions
        lt1, lt2 = rng.uniform(600, 2600), rng.uniform(60, 320)
        sel = _ellipse(yy, xx, cy + rng.uniform(-0.5, 0.5), cx + rng.uniform(-0.45, 0.45),
                       rng.uniform(0.05, 0.15), rng.uniform(0.05, 0.15), rng.uniform(0, np.pi)) & (label > 1)
        t1[sel], t2[sel] = lt1, lt2
    t1 *= 1.0 + _smooth_field(rng, yy, xx, 0.15)
    t2 *= 1.0 + _smooth_field(rng, yy, xx, 0.15)
    b1 = 1.0 + _smooth_field(rng, yy, xx, 0.25)
    t1 = np.clip(t1, 50.0, 4500.0)
    t2 = np.clip(t2, 20.0, 800.0)
    t2 = np.minimum(t2, t1)
    b1 = np.clip(b1, 0.7, 1.3)
    params = np.stack([t1, t2, b1], axis=-1)
    params[~mask] = 0.0
    return params, mask


def make_synthetic_slices(n_slices=8, height=64, width=64, schedule: Optional[SequenceSchedule] = None,
                          seed=0, snr=None, head_scale=1.0) -> List[PhantomSlice]:
    """Phantom slices with simulated (and optionally noisy) per-voxel fingerprints.

    ``snr=None`` leaves the fingerprints noise-free.  Deterministic per seed.
    """
    if schedule is None:
        raise ValueError("a sequence schedule is required")
    if height < 16 or width < 16:
        raise ValueError(f"phantom must be at least 16x16, got {height}x{width}")
    if n_slices < 1:
        raise ValueError("n_slices must be >= 1")
    # separate streams so the phantom geometry does not depend on whether noise is added
    geo_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    rng, noise_rng = np.random.default_rng(geo_seq), np.random.default_rng(noise_seq)
    slices = []
    for k in range(n_slices):
        params, mask = phantom_params(height, width, rng, head_scale)
        if not mask.any():
            raise ValueError("phantom has no foreground voxels")
        fg = params[mask]
        sig = simulate_fingerprints(fg[:, 0], fg[:, 1], fg[:, 2], schedule)
        if snr is not None:
            sig = add_complex_noise(sig, snr, seed=noise_rng.integers(2 ** 63))
        fps = np.zeros((height, width, schedule.n_reps), dtype=np.complex128)
        fps[mask] = sig
        slices.append(PhantomSlice(params, mask, fps, k))
    return slices


# -- datasets ---------------------------------------------------------------

@dataclass
class Dataset:
    fingerprints: np.ndarray   # (N, n_seq) complex
    targets: np.ndarray        # (N, 2) t1, t2 in ms
    split: np.ndarray          # (N,) "train" | "val" | "test"
    slice_id: np.ndarray       # (N,)

    def __post_init__(self):
        n = len(self.fingerprints)
        if not (len(self.targets) == len(self.split) == len(self.slice_id) == n):
            raise ValueError("dataset arrays must have equal length")
        bad = set(np.unique(self.split)) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split labels {sorted(bad)}")

    def __len__(self):
        return len(self.fingerprints)

    @property
    def n_seq(self):
        return self.fingerprints.shape[1]

    def subset(self, split):
        sel = self.split == split
        return self.fingerprints[sel], self.targets[sel]

    def save(self, path):
        np.savez(path, fingerprints=self.fingerprints, targets=self.targets,
                 split=self.split.astype("U5"), slice_id=self.slice_id)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(z["fingerprints"], z["targets"], z["split"].astype(str), z["slice_id"])


def split_labels(n_slices):
    """Slice -> split: all but the last two train, then one validation and one test slice."""
    if n_slices < 3:
        raise ValueError("need at least 3 slices for train/val/test")
    return ["train"] * (n_slices - 2) + ["val", "test"]


def dataset_from_slices(slices: Sequence[PhantomSlice]) -> Dataset:
    labels = split_labels(len(slices))
    fps, tg, sp, sid = [], [], [], []
    for sl, lab in zip(slices, labels):
        fg = sl.params[sl.mask]
        fps.append(sl.fingerprints[sl.mask])
        tg.append(fg[:, :2])
        sp.append(np.full(len(fg), lab))
        sid.append(np.full(len(fg), sl.slice_id))
    return Dataset(np.concatenate(fps), np.concatenate(tg), np.concatenate(sp), np.concatenate(sid))


# -- metrics ----------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    mu_abs_t1_ms: float
    sigma_abs_t1_ms: float
    mu_abs_t2_ms: float
    sigma_abs_t2_ms: float
    n_data: int

    def __str__(self):
        return (f"T1 {self.mu_abs_t1_ms:.1f} ± {self.sigma_abs_t1_ms:.1f} ms, "
                f"T2 {self.mu_abs_t2_ms:.1f} ± {self.sigma_abs_t2_ms:.1f} ms (n={self.n_data})")


def evaluate_metrics(predictions, ground_truth) -> Metrics:
    """Mean and population standard deviation of the absolute T1 and T2 errors."""
    pred = np.asarray(predictions, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError(f"predictions {pred.shape} and ground truth {gt.shape} must both be (N, 2)")
    if pred.shape[0] < 1:
        raise ValueError("need at least one item")
    err = np.abs(pred - gt)
    mu = err.mean(axis=0)
    sigma = np.sqrt(np.mean((err - mu) ** 2, axis=0))
    return Metrics(float(mu[0]), float(sigma[0]), float(mu[1]), float(sigma[1]), int(pred.shape[0]))


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    precision: str = "float64"
    snr: Optional[float] = None
    lr_schedule: str = "constant"      # or "cosine": lr * 0.5 (1 + cos(pi (epoch - 1) / epochs))

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalisation)")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.snr is not None and not self.snr > 0:
            raise ValueError("snr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")

    def lr_at(self, epoch):
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1 + math.cos(math.pi * (epoch - 1) / self.epochs))
        return self.lr


@dataclass
class TrainResult:
    model: Model
    history: List[tuple] = field(default_factory=list)   # (epoch, train_loss, val_loss)
    best_epoch: int = 0
    seconds: float = 0.0


def _val_loss(model, x, y, batch_size=1024):
    total = 0.0
    for lo in range(0, len(x), batch_size):
        out = model.net.forward(x[lo:lo + batch_size], training=False)
        loss, _ = mse_loss(out, y[lo:lo + batch_size])
        total += loss * len(out)
    return total / len(x)


def train(model: Model, data: Dataset, cfg: TrainConfig) -> TrainResult:
    """Adam on MSE of scaled targets; keeps the weights of the lowest-validation-loss epoch.

    The model is updated in place and ends holding the selected weights.
    """
    cfg.validate()
    fx, fy = data.subset("train")
    vx, vy = data.subset("val")
    if len(fx) < 2 or len(vx) < 1:
        raise ValueError("training split needs >= 2 items and validation split >= 1")
    dtype = np.dtype(cfg.precision)
    model.astype(dtype)
    x_tr = model.prepare(fx)
    y_tr = model.scale_targets(fy).astype(dtype)
    x_va = model.prepare(vx)
    y_va = model.scale_targets(vy).astype(dtype)

    rng = np.random.default_rng(cfg.seed)
    opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    weights = {name: arr for name, _, _, arr in model.net.named_params()}
    best_loss, best_state, best_epoch = math.inf, model.net.copy_state(), 0
    history = []
    t0 = time.perf_counter()
    n = len(x_tr)
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr_at(epoch)
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            if len(idx) < 2:
                continue
            try:
                out = model.net.forward(x_tr[idx], training=True)
            except NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}, batch at {lo}: {exc}") from exc
            loss, grad = mse_loss(out, y_tr[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch at {lo}")
            model.net.backward(grad.astype(dtype, copy=False))
            grads = {name: layer.grads[k] for name, layer, k, _ in model.net.named_params()}
            adam_step(weights, grads, opt)
            total += loss * len(idx)
            count += len(idx)
        train_loss = total / count
        val_loss = _val_loss(model, x_va, y_va)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append((epoch, train_loss, val_loss))
        if val_loss < best_loss:
            best_loss, best_state, best_epoch = val_loss, model.net.copy_state(), epoch
        log.info("%s epoch %d/%d train %.5f val %.5f", model.label, epoch, cfg.epochs, train_loss, val_loss)
    model.net.load_state(best_state)
    return TrainResult(model, history, best_epoch, time.perf_counter() - t0)


def evaluate_model(model: Model, data: Dataset, split="test") -> Metrics:
    fps, targets = data.subset(split)
    return evaluate_metrics(model.predict(fps), targets)


@dataclass
class ComparisonRow:
    arch: str
    mode: str
    metrics: Metrics
    best_epoch: int
    seconds: float

    @property
    def label(self):
        return f"{self.arch.upper()} {self.mode.capitalize()}"


def compare_architectures(data: Dataset, cfg: TrainConfig, preset="desk") -> List[ComparisonRow]:
    """Train and test the four {CNN, RNN} x {magnitude, complex} models on the same splits."""
    rows = []
    for arch, mode in TABLE3_ROWS:
        model = build_model(arch, mode, data.n_seq, preset=preset, seed=cfg.seed)
        res = train(model, data, cfg)
        metrics = evaluate_model(res.model, data, "test")
        log.info("%s: %s (best epoch %d, %.0f s)", model.label, metrics, res.best_epoch, res.seconds)
        rows.append(ComparisonRow(arch, mode, metrics, res.best_epoch, res.seconds))
    return rows


def format_report(rows: Sequence[ComparisonRow]) -> str:
    lines = [f"{'Architecture':<16}{'T1 Error [ms]':>20}{'T2 Error [ms]':>20}"]
    for r in rows:
        m = r.metrics
        lines.append(f"{r.label:<16}{m.mu_abs_t1_ms:>11.1f} ± {m.sigma_abs_t1_ms:<6.1f}"
                     f"{m.mu_abs_t2_ms:>11.1f} ± {m.sigma_abs_t2_ms:<6.1f}")
    return "\n".join(lines)


def write_report_csv(rows: Sequence[ComparisonRow], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arch", "mode", "mu_t1", "sigma_t1", "mu_t2", "sigma_t2", "n"])
        for r in rows:
            m = r.metrics
            w.writerow([r.arch.upper(), r.mode.capitalize(), repr(m.mu_abs_t1_ms), repr(m.sigma_abs_t1_ms),
                        repr(m.mu_abs_t2_ms), repr(m.sigma_abs_t2_ms), m.n_data])


def write_history_csv(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tl, vl in history:
            w.writerow([epoch, repr(float(tl)), repr(float(vl))])
