"""Central finite differences as an independent gradient oracle."""
from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward, no_grad


class NonFiniteError(ArithmeticError):
    pass


def finite_diff(f, x: Tensor, h: float = 1e-5, indices=None) -> np.ndarray:
    """Estimate d f(x) / dx by central differences.

    ``f`` maps ``x`` to a scalar tensor. ``x.data`` is perturbed in place and
    restored after each probe. With ``indices`` (flat positions) only those
    coordinates are probed; the rest of the returned array stays zero.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape)
    probe = range(flat.size) if indices is None else np.asarray(indices, dtype=np.int64)
    with no_grad():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data.reshape(-1)[0])
            flat[i] = orig - h
            fm = float(f(x).data.reshape(-1)[0])
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite evaluation at flat index {i}")
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def rel_error(a, b) -> float:
    """max|a-b| / max(1, max|a|, max|b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(1.0, float(np.abs(a).max()), float(np.abs(b).max()))
    return float(np.abs(a - b).max()) / scale


def analytic_grads(f, inputs):
    """Run ``f()`` on a fresh tape and return the gradient of each input."""
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        root = f()
    backward(root, tape)
    return [t.grad if t.grad is not None else np.zeros(t.shape) for t in inputs]


def check_gradients(f, inputs, h: float = 1e-5, max_probes=None, rng=None, tol: float = 1e-4) -> float:
    """Worst relative error between backward and finite differences.

    ``f`` is a zero-argument closure over ``inputs`` returning a scalar.
    ``max_probes`` limits the finite-difference coordinates per input,
    chosen by ``rng``.

    A coordinate whose estimate misses by more than ``tol`` is re-estimated
    with step ``h / 100``. The finer estimate replaces the coarse one only if
    the two disagree with each other, which happens when a ReLU or max kink
    lies within ``h`` of the point. Where both estimates agree, the mismatch
    is reported as is.
    """
    grads = analytic_grads(f, inputs)
    worst = 0.0
    for t, g in zip(inputs, grads):
        idx = np.arange(t.size)
        if max_probes is not None and t.size > max_probes:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(rng.choice(t.size, size=max_probes, replace=False))
        g_flat = g.reshape(-1)[idx]
        num = finite_diff(lambda _: f(), t, h=h, indices=idx).reshape(-1)[idx]
        scale = max(1.0, float(np.abs(g_flat).max()), float(np.abs(num).max()))
        bad = np.abs(g_flat - num) / scale >= tol
        if bad.any():
            fine = finite_diff(lambda _: f(), t, h=h / 100, indices=idx[bad]).reshape(-1)[idx[bad]]
            kinked = np.abs(fine - num[bad]) / scale >= tol
            num[np.flatnonzero(bad)[kinked]] = fine[kinked]
        worst = max(worst, rel_error(g_flat, num))
    return worst
