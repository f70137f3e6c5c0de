"""Central finite differences, kept apart from the autodiff code they check."""

from __future__ import annotations

import numpy as np

STEP = 1e-5


def numeric_grad(f, arrays, wrt: int, step: float = STEP) -> np.ndarray:
    """d f(*arrays) / d arrays[wrt] by central differences; f returns a float."""
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    x = base[wrt]
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f(*base)
        x[i] = orig - step
        fm = f(*base)
        x[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    den = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), 1e-8)
    return float(num / den)
