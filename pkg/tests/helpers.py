"""Shared oracles for the test suite."""
import numpy as np

from meshcomplete import autograd as ag


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(build, params, h=1e-5):
    """Largest relative error between tape and finite-difference gradients.

    ``build()`` returns a scalar Tensor computed from ``params``.
    """
    for p in params:
        p.zero_grad()
    ag.backward(build())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numeric_grad(lambda: build().item(), p.data, h)
        worst = max(worst, rel_error(a, n))
    return worst


def away_from_zero(x, margin=1e-2):
    """Push entries off a kink at zero."""
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)
