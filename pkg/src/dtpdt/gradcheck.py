"""Central finite-difference checks for graphs built with :mod:`dtpdt.tensor`."""
import numpy as np

from .tensor import DiffNode, backward


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f(array)`` around ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_grad(build, inputs, h=1e-5):
    """Compare analytic and numeric gradients of ``build(*nodes) -> scalar node``.

    ``inputs`` are arrays; each becomes a parameter node. Returns the largest
    relative error over all inputs.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    nodes = [DiffNode(x, requires_grad=True) for x in inputs]
    backward(build(*nodes))
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = [DiffNode(v) for v in inputs]
            args[i] = DiffNode(xi)
            return build(*args).item()
        num = numeric_grad(f, x, h)
        worst = max(worst, relative_error(nodes[i].grad, num))
    return worst
