from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(weights, grads, state: AdamState):
    """One bias-corrected Adam update, applied in place to ``weights``.

    ``weights`` and ``grads`` map names to arrays of matching shape.  Moment
    buffers are created lazily on first use.  Returns ``weights``.
    """
    for name, g in grads.items():
        if name not in weights:
            raise KeyError(f"gradient for unknown weight {name!r}")
        if g.shape != weights[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != weight shape {weights[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        w = weights[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return weights
