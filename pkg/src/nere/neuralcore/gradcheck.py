"""Central finite-difference gradient checking."""

import numpy as np


def numerical_grad(f, x, step=1e-5):
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2.0 * step)
    return g


def relative_error(analytic, numeric, floor=1e-8):
    """max |a - n| / max(max |n|, floor) over one parameter array."""
    num = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    den = max(np.max(np.abs(numeric)) if numeric.size else 0.0, floor)
    return float(num / den)
