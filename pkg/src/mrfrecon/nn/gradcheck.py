"""Central finite-difference verification of layer backward passes."""

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: str
    n_checked: int


def rel_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(module, x, tolerance=1e-4, h=1e-5, max_checks=40, seed=0, training=True):
    """Compare ``module.backward`` against central differences.

    ``module`` is a Layer or Sequential.  The scalar objective is
    ``sum(out * R)`` for a fixed random ``R``, so ``R`` is the upstream
    gradient.  Every input element and every weight is perturbed, or a random
    sample of ``max_checks`` elements for larger tensors.  Must be run in
    float64.
    """
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = module.forward(x, training)
    r = rng.standard_normal(out.shape)

    def objective():
        return float(np.sum(module.forward(x, training) * r))

    module.forward(x, training)
    dx = module.backward(r)
    analytic = {"input": (x, dx)}
    params = _named_params(module)
    for name, (arr, grad) in params.items():
        analytic[name] = (arr, grad.copy())

    worst, worst_name, n_checked = 0.0, "", 0
    for name, (arr, grad) in analytic.items():
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_checks:
            idx = rng.choice(flat.size, size=max_checks, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            fp = objective()
            flat[j] = orig - h
            fm = objective()
            flat[j] = orig
            numeric = (fp - fm) / (2 * h)
            err = rel_error(gflat[j], numeric)
            n_checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{j}]"
    return GradCheckReport(worst, worst < tolerance, worst_name, n_checked)


def _named_params(module):
    if hasattr(module, "named_params"):
        return {name: (layer.params[k], layer.grads[k]) for name, layer, k, _ in module.named_params()}
    return {k: (module.params[k], module.grads[k]) for k in module.params}
