"""Central finite-difference gradient oracle, independent of the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from crossloc.tensor import Tensor


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d arr by central differences, perturbing one entry at a time."""
    g = np.zeros_like(arr)
    flat = arr.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_grads(
    build: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    tol: float = 1e-4,
    h: float = 1e-5,
) -> float:
    """Compare tape gradients of scalar build(inputs) against central differences.

    Returns the worst relative error across all inputs; asserts it is below tol.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(leaves)
    loss.backward()

    worst = 0.0
    for leaf in leaves:

        def f(leaf=leaf):
            fresh = [Tensor(l.data) for l in leaves]
            return build(fresh).item()

        num = numeric_grad(f, leaf.data, h=h)
        err = rel_err(leaf.grad, num)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch {err:.3g} (tol {tol}) for input shape {leaf.data.shape}"
    return worst
