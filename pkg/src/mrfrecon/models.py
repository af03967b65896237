"""RNN and CNN regressors mapping a fingerprint to (T1, T2)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nn import (LSTM, AvgPool1D, BatchNorm, Conv1D, Dense, Flatten, ReLU, Reshape, Sequential,
                 load_weights, save_weights)

MODES = ("magnitude", "complex")
T1_SCALE_MS = 5000.0
T2_SCALE_MS = 1000.0

TABLE2_CONVS = ((30, 15, 5), (60, 10, 3), (120, 5, 2), (240, 3, 2))

# Scaled-down variants used for 300-point fingerprints; every layer width is
# about a tenth of the full-size architectures.
DESK_RNN = dict(n_chunks=30, hidden=32, dense_dims=(200, 133, 67, 2))
DESK_CNN = dict(convs=((8, 15, 3), (16, 10, 2), (32, 5, 2), (64, 3, 1)), pool=(4, 2),
                dense_dims=(100, 50, 30, 2))


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"input mode must be one of {MODES}, got {mode!r}")
    return 1 if mode == "magnitude" else 2


class Model:
    """A layer stack plus everything needed to turn fingerprints into milliseconds."""

    def __init__(self, net: Sequential, input_mode, n_seq, builder, config,
                 t1_scale_ms=T1_SCALE_MS, t2_scale_ms=T2_SCALE_MS):
        if net.output_shape != (2,):
            raise ValueError(f"model must end in 2 outputs, got {net.output_shape}")
        self.net = net
        self.input_mode = input_mode
        self.n_seq = int(n_seq)
        self.builder = builder
        self.config = dict(config)
        self.t1_scale_ms = float(t1_scale_ms)
        self.t2_scale_ms = float(t2_scale_ms)

    @property
    def layers(self):
        return self.net.layers

    @property
    def label(self):
        return f"{self.builder.upper()} {self.input_mode.capitalize()}"

    def shape_trace(self):
        """Input shape followed by the output shape of every layer."""
        return list(self.net.shapes)

    def table_trace(self):
        """Shapes after each layer that is not ReLU/BatchNorm, prefixed by the input."""
        shapes = [self.net.shapes[0]]
        for layer, shape in zip(self.net.layers, self.net.shapes[1:]):
            if layer.kind not in ("ReLU", "BatchNorm"):
                shapes.append(shape)
        return shapes

    def scale_targets(self, t1_t2_ms):
        t = np.asarray(t1_t2_ms, dtype=np.float64)
        return t / np.array([self.t1_scale_ms, self.t2_scale_ms])

    def unscale(self, y):
        return np.asarray(y, dtype=np.float64) * np.array([self.t1_scale_ms, self.t2_scale_ms])

    def prepare(self, fps):
        return prepare_input(fps, self.input_mode, self.n_seq).astype(self.net.dtype, copy=False)

    def predict(self, fps, batch_size=1024):
        """(T1, T2) in ms for a stack of fingerprints, inference-mode forward pass."""
        x = self.prepare(np.atleast_2d(fps))
        out = np.empty((x.shape[0], 2))
        for lo in range(0, x.shape[0], batch_size):
            out[lo:lo + batch_size] = self.net.forward(x[lo:lo + batch_size], training=False)
        return self.unscale(out)

    def descriptor(self):
        return {"builder": self.builder, "mode": self.input_mode, "n_seq": self.n_seq,
                "config": _jsonable(self.config), "dtype": str(self.net.dtype),
                "norm": {"input": "l2", "t1_scale_ms": self.t1_scale_ms,
                         "t2_scale_ms": self.t2_scale_ms}}

    def save(self, path):
        """Weights to ``path`` (MRFW) and the architecture to ``path`` with a ``.json`` suffix."""
        path = Path(path)
        save_weights(path, self.net.state())
        path.with_suffix(".json").write_text(json.dumps(self.descriptor(), indent=2) + "\n")

    def astype(self, dtype):
        self.net.astype(dtype)
        return self


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def load_model(path) -> Model:
    path = Path(path)
    desc_path = path.with_suffix(".json")
    if not desc_path.exists():
        raise FileNotFoundError(f"missing architecture descriptor {desc_path}")
    desc = json.loads(desc_path.read_text())
    builder = {"rnn": build_rnn, "cnn": build_cnn}[desc["builder"]]
    cfg = desc["config"]
    if "dense_dims" in cfg:
        cfg["dense_dims"] = tuple(cfg["dense_dims"])
    if "convs" in cfg:
        cfg["convs"] = tuple(tuple(c) for c in cfg["convs"])
    if "pool" in cfg:
        cfg["pool"] = tuple(cfg["pool"])
    model = builder(desc["mode"], n_seq=desc["n_seq"], dtype=np.dtype(desc["dtype"]), **cfg)
    model.t1_scale_ms = desc["norm"]["t1_scale_ms"]
    model.t2_scale_ms = desc["norm"]["t2_scale_ms"]
    model.net.load_state(load_weights(path))
    return model


def build_rnn(mode, n_seq=3000, n_chunks=30, hidden=300, dense_dims=(2000, 1333, 666, 2),
              layout="interleaved", seed=0, dtype=np.float64) -> Model:
    """Reshape -> LSTM -> ReLU -> BN -> Flatten -> (Dense -> ReLU -> BN) x k -> Dense(2)."""
    ch = _check_mode(mode)
    if n_chunks < 1 or n_seq % n_chunks:
        raise ValueError(f"n_seq={n_seq} is not divisible into {n_chunks} chunks")
    if dense_dims[-1] != 2:
        raise ValueError("last dense layer must have 2 units")
    layers = [Reshape(n_chunks, layout), LSTM(hidden), ReLU(), BatchNorm(), Flatten()]
    for units in dense_dims[:-1]:
        layers += [Dense(units), ReLU(), BatchNorm()]
    layers.append(Dense(dense_dims[-1]))
    net = Sequential(layers, (n_seq, ch), np.random.default_rng(seed), dtype)
    cfg = dict(n_chunks=n_chunks, hidden=hidden, dense_dims=tuple(dense_dims), layout=layout, seed=seed)
    return Model(net, mode, n_seq, "rnn", cfg)


def build_cnn(mode, n_seq=3000, convs=TABLE2_CONVS, pool=(4, 2), dense_dims=(1000, 500, 300, 2),
              seed=0, dtype=np.float64) -> Model:
    """(Conv1D -> ReLU -> BN) x k -> AvgPool -> Flatten -> (Dense -> ReLU -> BN) x k -> Dense(2).

    ``convs`` holds ``(filters, kernel_size, stride)`` per layer; padding is valid.
    """
    ch = _check_mode(mode)
    if dense_dims[-1] != 2:
        raise ValueError("last dense layer must have 2 units")
    layers = []
    for filters, ks, stride in convs:
        layers += [Conv1D(filters, ks, stride), ReLU(), BatchNorm()]
    layers += [AvgPool1D(*pool), Flatten()]
    for units in dense_dims[:-1]:
        layers += [Dense(units), ReLU(), BatchNorm()]
    layers.append(Dense(dense_dims[-1]))
    try:
        net = Sequential(layers, (n_seq, ch), np.random.default_rng(seed), dtype)
    except ValueError as exc:
        raise ValueError(f"n_seq={n_seq} is too short for the convolution chain: {exc}") from exc
    cfg = dict(convs=tuple(tuple(c) for c in convs), pool=tuple(pool), dense_dims=tuple(dense_dims), seed=seed)
    return Model(net, mode, n_seq, "cnn", cfg)


def build_model(arch, mode, n_seq, preset="desk", seed=0, dtype=np.float64) -> Model:
    """``arch`` in {"rnn", "cnn"}; ``preset`` "full" uses the full-size layer widths."""
    if arch not in ("rnn", "cnn"):
        raise ValueError(f"unknown architecture {arch!r}")
    if preset not in ("desk", "full"):
        raise ValueError(f"unknown preset {preset!r}")
    if arch == "rnn":
        kw = DESK_RNN if preset == "desk" else {}
        return build_rnn(mode, n_seq=n_seq, seed=seed, dtype=dtype, **kw)
    kw = DESK_CNN if preset == "desk" else {}
    return build_cnn(mode, n_seq=n_seq, seed=seed, dtype=dtype, **kw)


def prepare_input(fps, mode, n_seq=None):
    """Network input for one fingerprint ``(n_seq,)`` or a stack ``(N, n_seq)``.

    Magnitude mode gives ``|s|`` as one channel, complex mode (re, im) as two;
    each fingerprint's tensor is then scaled to unit L2 norm.
    """
    _check_mode(mode)
    fps = np.asarray(fps)
    single = fps.ndim == 1
    fps = np.atleast_2d(fps)
    if fps.ndim != 2:
        raise ValueError(f"fingerprints must be 1-D or 2-D, got shape {fps.shape}")
    if n_seq is not None and fps.shape[1] != n_seq:
        raise ValueError(f"fingerprint length {fps.shape[1]} != model n_seq {n_seq}")
    if mode == "magnitude":
        x = np.abs(fps)[:, :, None].astype(np.float64)
    else:
        x = np.stack([fps.real, fps.imag], axis=-1).astype(np.float64)
    norms = np.sqrt(np.sum(x * x, axis=(1, 2)))
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise ValueError("zero or non-finite fingerprint; normalisation undefined")
    x /= norms[:, None, None]
    return x[0] if single else x


def predict_params(model: Model, fp):
    """(t1_ms, t2_ms) for a single fingerprint."""
    fp = np.asarray(fp)
    if fp.ndim != 1:
        raise ValueError("predict_params takes one fingerprint; use Model.predict for stacks")
    t1, t2 = model.predict(fp[None, :])[0]
    return float(t1), float(t2)
