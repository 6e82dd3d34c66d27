"""Finite-difference oracle shared by the gradient tests.

Works on plain numpy arrays so it shares no code path with the autodiff
engine it checks.
"""

import numpy as np

H = 1e-5
REL_TOL = 1e-4


def numeric_grad(f, x, h=H):
    """Central differences of scalar ``f`` at ``x`` (``x`` is perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f()
        x[i] = orig - h
        down = f()
        x[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_grads(build, tensors, h=H):
    """Max relative error between backward() and central differences for every tensor.

    ``build()`` must construct the scalar loss from ``tensors`` afresh.
    """
    from tocsim import autodiff as ad

    for t in tensors:
        t.grad = None
    ad.backward(build())
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        with ad.no_grad():
            n = numeric_grad(lambda: build().item(), t.data, h)
        worst = max(worst, rel_error(a, n))
    return worst
