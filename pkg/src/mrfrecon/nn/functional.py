"""Forward/backward kernels on numpy arrays.

Every array carries a leading batch axis.  Forward functions return
``(out, cache)``; the matching backward takes ``(grad_out, cache)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x, where="tensor"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def _sigmoid(x):
    # exp only ever sees non-positive arguments
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- ReLU -------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(grad_out, cache):
    # subgradient 0 at x == 0
    return grad_out * (cache > 0)


# -- Dense ------------------------------------------------------------------

def dense_forward(x, W, b):
    if x.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"dense shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W + b, (x, W)


def dense_backward(grad_out, cache):
    x, W = cache
    return grad_out @ W.T, x.T @ grad_out, grad_out.sum(axis=0)


# -- Conv1D -----------------------------------------------------------------

def conv1d_output_length(length, kernel_size, stride):
    if length < kernel_size:
        raise ValueError(f"input length {length} shorter than kernel {kernel_size}")
    return (length - kernel_size) // stride + 1


def conv1d_forward(x, W, b, stride=1):
    """Valid cross-correlation.  x: (B, L, Cin), W: (KS, Cin, Cout), b: (Cout,)."""
    ks, cin, cout = W.shape
    if x.ndim != 3 or x.shape[2] != cin or b.shape != (cout,):
        raise ValueError(f"conv1d shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    batch, length, _ = x.shape
    lout = conv1d_output_length(length, ks, stride)
    win = sliding_window_view(x, ks, axis=1)[:, ::stride]  # (B, L', Cin, KS)
    cols = win.transpose(0, 1, 3, 2).reshape(batch * lout, ks * cin)
    out = cols @ W.reshape(ks * cin, cout) + b
    return out.reshape(batch, lout, cout), (cols, x.shape, W, stride)


def conv1d_backward(grad_out, cache):
    cols, xshape, W, stride = cache
    ks, cin, cout = W.shape
    batch, lout, _ = grad_out.shape
    g = grad_out.reshape(batch * lout, cout)
    dW = (cols.T @ g).reshape(ks, cin, cout)
    db = g.sum(axis=0)
    dcols = (g @ W.reshape(ks * cin, cout).T).reshape(batch, lout, ks, cin)
    dx = np.zeros(xshape, dtype=grad_out.dtype)
    span = stride * (lout - 1) + 1
    for k in range(ks):
        dx[:, k:k + span:stride, :] += dcols[:, :, k, :]
    return dx, dW, db


# -- AvgPool1D --------------------------------------------------------------

def avgpool1d_forward(x, window, stride):
    if x.ndim != 3:
        raise ValueError(f"avgpool expects (B, L, C), got {x.shape}")
    lout = conv1d_output_length(x.shape[1], window, stride)
    win = sliding_window_view(x, window, axis=1)[:, ::stride]
    return win.mean(axis=-1), (x.shape, window, stride, lout)


def avgpool1d_backward(grad_out, cache):
    xshape, window, stride, lout = cache
    dx = np.zeros(xshape, dtype=grad_out.dtype)
    g = grad_out / window
    span = stride * (lout - 1) + 1
    for k in range(window):
        dx[:, k:k + span:stride, :] += g
    return dx


# -- LSTM -------------------------------------------------------------------

def lstm_forward(x, Wx, Wh, b):
    """Full-sequence LSTM, gates ordered (input, forget, candidate, output).

    x: (B, T, D), Wx: (D, 4H), Wh: (H, 4H), b: (4H,); returns h: (B, T, H).
    h0 = c0 = 0.
    """
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"lstm expects (B, T>=1, D), got {x.shape}")
    batch, steps, d = x.shape
    hidden = Wh.shape[0]
    if Wx.shape != (d, 4 * hidden) or Wh.shape != (hidden, 4 * hidden) or b.shape != (4 * hidden,):
        raise ValueError(f"lstm weight shapes {Wx.shape}, {Wh.shape}, {b.shape} do not fit input {x.shape}")
    H = hidden
    xw = (x.reshape(batch * steps, d) @ Wx + b).reshape(batch, steps, 4 * H)
    hs = np.zeros((batch, steps, H), dtype=xw.dtype)
    cs = np.zeros((batch, steps, H), dtype=xw.dtype)
    gates = np.empty((batch, steps, 4 * H), dtype=xw.dtype)
    h = np.zeros((batch, H), dtype=xw.dtype)
    c = np.zeros((batch, H), dtype=xw.dtype)
    for t in range(steps):
        a = xw[:, t] + h @ Wh
        gt = gates[:, t]
        gt[:, :2 * H] = _sigmoid(a[:, :2 * H])
        gt[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
        gt[:, 3 * H:] = _sigmoid(a[:, 3 * H:])
        c = gt[:, H:2 * H] * c + gt[:, :H] * gt[:, 2 * H:3 * H]
        h = gt[:, 3 * H:] * np.tanh(c)
        cs[:, t] = c
        hs[:, t] = h
    return hs, (x, Wx, Wh, gates, hs, cs)


def lstm_backward(grad_out, cache):
    """Backpropagation through time; returns (dx, dWx, dWh, db)."""
    x, Wx, Wh, gates, hs, cs = cache
    batch, steps, d = x.shape
    H = Wh.shape[0]
    da = np.empty_like(gates)
    dh_next = np.zeros((batch, H), dtype=gates.dtype)
    dc_next = np.zeros((batch, H), dtype=gates.dtype)
    for t in reversed(range(steps)):
        gt = gates[:, t]
        i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
        c_prev = cs[:, t - 1] if t > 0 else np.zeros_like(dc_next)
        tc = np.tanh(cs[:, t])
        dh = grad_out[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dat = da[:, t]
        dat[:, :H] = dc * g * i * (1.0 - i)
        dat[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dat[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dat[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dat @ Wh.T
    da2 = da.reshape(batch * steps, 4 * H)
    dx = (da2 @ Wx.T).reshape(batch, steps, d)
    dWx = x.reshape(batch * steps, d).T @ da2
    h_prev = np.concatenate([np.zeros((batch, 1, H), dtype=hs.dtype), hs[:, :-1]], axis=1)
    dWh = h_prev.reshape(batch * steps, H).T @ da2
    db = da2.sum(axis=0)
    return dx, dWx, dWh, db


# -- BatchNorm --------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, training,
                      momentum=0.9, eps=1e-5):
    """Normalise over every axis but the last (features).

    In training mode ``running_mean``/``running_var`` are updated in place as
    ``momentum * running + (1 - momentum) * batch_stat``.
    """
    if x.shape[-1] != gamma.shape[0]:
        raise ValueError(f"batchnorm feature mismatch: x {x.shape}, gamma {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    if training:
        if x.shape[0] < 2:
            raise ValueError("batchnorm in training mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, training)


def batchnorm_backward(grad_out, cache):
    xhat, inv_std, gamma, training = cache
    axes = tuple(range(grad_out.ndim - 1))
    dgamma = (grad_out * xhat).sum(axis=axes)
    dbeta = grad_out.sum(axis=axes)
    dxhat = grad_out * gamma
    if not training:
        return dxhat * inv_std, dgamma, dbeta
    n = grad_out.size // grad_out.shape[-1]
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# -- Reshape ----------------------------------------------------------------

def reshape_chunks(x, n_chunks, layout="interleaved"):
    """(B, n_seq, C) -> (B, n_chunks, (n_seq // n_chunks) * C).

    ``interleaved``: chunk j holds time points j, j + n_chunks, j + 2 n_chunks, ...
    ``contiguous``: chunk j holds time points [j k, (j + 1) k).
    Channels of one time point stay adjacent in both layouts.
    """
    batch, n_seq, ch = x.shape
    if n_chunks < 1 or n_seq % n_chunks:
        raise ValueError(f"sequence length {n_seq} is not divisible into {n_chunks} chunks")
    k = n_seq // n_chunks
    if layout == "interleaved":
        return x.reshape(batch, k, n_chunks, ch).transpose(0, 2, 1, 3).reshape(batch, n_chunks, k * ch)
    if layout == "contiguous":
        return x.reshape(batch, n_chunks, k * ch)
    raise ValueError(f"unknown chunk layout {layout!r}")


def unreshape_chunks(y, channels, layout="interleaved"):
    """Inverse of :func:`reshape_chunks`."""
    batch, n_chunks, kc = y.shape
    if kc % channels:
        raise ValueError("chunk width is not a multiple of the channel count")
    k = kc // channels
    if layout == "interleaved":
        return y.reshape(batch, n_chunks, k, channels).transpose(0, 2, 1, 3).reshape(batch, n_chunks * k, channels)
    if layout == "contiguous":
        return y.reshape(batch, n_chunks * k, channels)
    raise ValueError(f"unknown chunk layout {layout!r}")


# -- Loss -------------------------------------------------------------------

def mse_loss(pred, target):
    """Mean of squared differences over all elements, with its gradient."""
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size
