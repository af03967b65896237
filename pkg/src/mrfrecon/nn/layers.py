"""Layer objects wrapping the functional kernels.

Shapes passed to ``output_shape``/``build`` exclude the batch axis.
"""

import math

import numpy as np

from . import functional as F


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float64):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "Layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def build(self, input_shape, rng, dtype=np.float64):
        return self.output_shape(input_shape)

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def hyperparams(self):
        return {}

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        self.grads = {}

    def __repr__(self):
        hp = ", ".join(f"{k}={v}" for k, v in self.hyperparams().items())
        return f"{self.kind}({hp})"


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, training=False):
        out, self._cache = F.relu_forward(x)
        return out

    def backward(self, grad):
        return F.relu_backward(grad, self._cache)


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cache)


class Reshape(Layer):
    """Split an (n_seq, C) signal into ``n_chunks`` sequence steps."""

    kind = "Reshape"

    def __init__(self, n_chunks, layout="interleaved"):
        super().__init__()
        if layout not in ("interleaved", "contiguous"):
            raise ValueError(f"unknown chunk layout {layout!r}")
        self.n_chunks = int(n_chunks)
        self.layout = layout

    def hyperparams(self):
        return {"n_chunks": self.n_chunks, "layout": self.layout}

    def output_shape(self, input_shape):
        n_seq, ch = input_shape
        if self.n_chunks < 1 or n_seq % self.n_chunks:
            raise ValueError(f"sequence length {n_seq} is not divisible into {self.n_chunks} chunks")
        return (self.n_chunks, n_seq // self.n_chunks * ch)

    def forward(self, x, training=False):
        self._cache = x.shape[2]
        return F.reshape_chunks(x, self.n_chunks, self.layout)

    def backward(self, grad):
        return F.unreshape_chunks(grad, self._cache, self.layout)


class Dense(Layer):
    kind = "Dense"

    def __init__(self, units):
        super().__init__()
        self.units = int(units)

    def hyperparams(self):
        return {"units": self.units}

    def output_shape(self, input_shape):
        if len(input_shape) != 1:
            raise ValueError(f"Dense expects a flat input, got {input_shape}")
        return (self.units,)

    def build(self, input_shape, rng, dtype=np.float64):
        out = self.output_shape(input_shape)
        n_in = input_shape[0]
        self.params = {"W": glorot_uniform(rng, (n_in, self.units), n_in, self.units, dtype),
                       "b": np.zeros(self.units, dtype=dtype)}
        return out

    def forward(self, x, training=False):
        out, self._cache = F.dense_forward(x, self.params["W"], self.params["b"])
        return out

    def backward(self, grad):
        dx, dW, db = F.dense_backward(grad, self._cache)
        self.grads = {"W": dW, "b": db}
        return dx


class Conv1D(Layer):
    kind = "Conv1D"

    def __init__(self, filters, kernel_size, stride=1):
        super().__init__()
        self.filters = int(filters)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)

    def hyperparams(self):
        return {"filters": self.filters, "kernel_size": self.kernel_size, "stride": self.stride}

    def output_shape(self, input_shape):
        length, _ = input_shape
        return (F.conv1d_output_length(length, self.kernel_size, self.stride), self.filters)

    def build(self, input_shape, rng, dtype=np.float64):
        out = self.output_shape(input_shape)
        cin = input_shape[1]
        ks = self.kernel_size
        self.params = {"W": glorot_uniform(rng, (ks, cin, self.filters), ks * cin, ks * self.filters, dtype),
                       "b": np.zeros(self.filters, dtype=dtype)}
        return out

    def forward(self, x, training=False):
        out, self._cache = F.conv1d_forward(x, self.params["W"], self.params["b"], self.stride)
        return out

    def backward(self, grad):
        dx, dW, db = F.conv1d_backward(grad, self._cache)
        self.grads = {"W": dW, "b": db}
        return dx


class AvgPool1D(Layer):
    kind = "AvgPool1D"

    def __init__(self, window, stride):
        super().__init__()
        self.window = int(window)
        self.stride = int(stride)

    def hyperparams(self):
        return {"window": self.window, "stride": self.stride}

    def output_shape(self, input_shape):
        length, ch = input_shape
        return (F.conv1d_output_length(length, self.window, self.stride), ch)

    def forward(self, x, training=False):
        out, self._cache = F.avgpool1d_forward(x, self.window, self.stride)
        return out

    def backward(self, grad):
        return F.avgpool1d_backward(grad, self._cache)


class LSTM(Layer):
    """Single LSTM returning the hidden state of every step."""

    kind = "LSTM"

    def __init__(self, hidden):
        super().__init__()
        self.hidden = int(hidden)

    def hyperparams(self):
        return {"hidden": self.hidden}

    def output_shape(self, input_shape):
        steps, _ = input_shape
        return (steps, self.hidden)

    def build(self, input_shape, rng, dtype=np.float64):
        out = self.output_shape(input_shape)
        d, h = input_shape[1], self.hidden
        b = np.zeros(4 * h, dtype=dtype)
        b[h:2 * h] = 1.0
        self.params = {"Wx": glorot_uniform(rng, (d, 4 * h), d, 4 * h, dtype),
                       "Wh": glorot_uniform(rng, (h, 4 * h), h, 4 * h, dtype),
                       "b": b}
        return out

    def forward(self, x, training=False):
        out, self._cache = F.lstm_forward(x, self.params["Wx"], self.params["Wh"], self.params["b"])
        return out

    def backward(self, grad):
        dx, dWx, dWh, db = F.lstm_backward(grad, self._cache)
        self.grads = {"Wx": dWx, "Wh": dWh, "b": db}
        return dx


class BatchNorm(Layer):
    kind = "BatchNorm"

    def __init__(self, momentum=0.9, eps=1e-5):
        super().__init__()
        self.momentum = float(momentum)
        self.eps = float(eps)

    def hyperparams(self):
        return {"momentum": self.momentum, "eps": self.eps}

    def build(self, input_shape, rng, dtype=np.float64):
        c = input_shape[-1]
        self.params = {"gamma": np.ones(c, dtype=dtype), "beta": np.zeros(c, dtype=dtype)}
        self.buffers = {"running_mean": np.zeros(c, dtype=dtype), "running_var": np.ones(c, dtype=dtype)}
        return tuple(input_shape)

    def forward(self, x, training=False):
        out, self._cache = F.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"], self.buffers["running_mean"],
            self.buffers["running_var"], training, self.momentum, self.eps)
        return out

    def backward(self, grad):
        dx, dgamma, dbeta = F.batchnorm_backward(grad, self._cache)
        self.grads = {"gamma": dgamma, "beta": dbeta}
        return dx


LAYER_KINDS = {cls.kind: cls for cls in (Reshape, LSTM, Flatten, Dense, Conv1D, ReLU, BatchNorm, AvgPool1D)}


class Sequential:
    """Ordered layer stack with shape tracing and named parameter access."""

    def __init__(self, layers, input_shape, rng=None, dtype=np.float64):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        rng = np.random.default_rng(0) if rng is None else rng
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = tuple(layer.build(shape, rng, dtype))
            self.shapes.append(shape)

    @property
    def output_shape(self):
        return self.shapes[-1]

    def forward(self, x, training=False):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} != expected {self.input_shape}")
        for i, layer in enumerate(self.layers):
            x = F.check_finite(layer.forward(x, training), f"output of layer {i} ({layer.kind})")
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                yield f"{i}.{layer.kind}.{k}", layer, k, v

    def state(self):
        """Parameters and buffers by name, in layer order."""
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{i}.{layer.kind}.{k}"] = v
            for k, v in layer.buffers.items():
                out[f"{i}.{layer.kind}.{k}"] = v
        return out

    def load_state(self, state):
        for i, layer in enumerate(self.layers):
            for d in (layer.params, layer.buffers):
                for k in d:
                    name = f"{i}.{layer.kind}.{k}"
                    if name not in state:
                        raise KeyError(f"missing tensor {name}")
                    if state[name].shape != d[k].shape:
                        raise ValueError(f"{name}: shape {state[name].shape} != {d[k].shape}")
                    d[k] = np.array(state[name], dtype=d[k].dtype)

    def copy_state(self):
        return {k: v.copy() for k, v in self.state().items()}

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    @property
    def dtype(self):
        for v in self.state().values():
            return v.dtype
        return np.dtype(np.float64)

    def n_params(self):
        return sum(layer.n_params() for layer in self.layers)
