"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor

# Gradients whose norm is below this are compared in absolute terms; a true
# zero gradient (a conv bias feeding batch norm, a key bias under softmax)
# otherwise turns rounding noise into a huge relative error.
SCALE_FLOOR = 1e-3


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                   indices: Optional[np.ndarray] = None) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param.data`` in place.

    With ``indices`` (flat positions) only those entries are estimated and the
    result is a 1-D array aligned with ``indices``.
    """
    flat = param.data.reshape(-1)
    positions = np.arange(flat.size) if indices is None else np.asarray(indices)
    out = np.zeros(positions.size, dtype=np.float64)
    for j, i in enumerate(positions):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        out[j] = (up - down) / (2 * h)
    return out.reshape(param.shape) if indices is None else out


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = SCALE_FLOOR) -> float:
    num = np.linalg.norm(np.asarray(analytic) - np.asarray(numeric))
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(num / den)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
              max_entries: Optional[int] = None, seed: int = 0) -> float:
    """Worst relative error between backprop and central differences over ``params``.

    ``fn`` must rebuild the scalar output from scratch on every call. Use float64
    leaves; in float32 the finite differences are dominated by rounding. The
    small default step keeps probes from straddling ReLU kinks.
    ``max_entries`` caps how many coordinates of each parameter are probed
    (chosen by a seeded generator).
    """
    for p in params:
        p.grad = None
    fn().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = (np.zeros(p.shape) if p.grad is None
                    else np.asarray(p.grad, dtype=np.float64)).reshape(-1)
        idx = None
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        numeric = numerical_grad(fn, p, h, idx).reshape(-1)
        worst = max(worst, relative_error(analytic if idx is None else analytic[idx], numeric))
    return worst
