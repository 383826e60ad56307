"""Gradient evaluation and the central finite-difference contract."""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from .store import ParamStore
from .tape import Var


def grad(loss_fn, store: ParamStore) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate loss_fn(leaf_vars) and return (value, per-group gradients).

    ``loss_fn`` must return a scalar Var built from the provided leaves.
    Frozen groups always map to zero gradients.
    """
    leaves = store.leaf_vars()
    loss = loss_fn(leaves)
    if not isinstance(loss, Var) or loss.data.size != 1:
        raise ValidationError("loss_fn must return a scalar Var")
    if not np.isfinite(loss.data):
        raise ValidationError("non-finite loss value")
    loss.backward()
    grads = {}
    for name in store.names():
        leaf = leaves[name]
        if store.is_frozen(name) or leaf.grad is None:
            grads[name] = np.zeros_like(store.get(name))
        else:
            grads[name] = leaf.grad
    return float(loss.data), grads


def finite_difference_gradients(loss_fn, store: ParamStore,
                                step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of loss_fn over every unfrozen coordinate."""

    def value() -> float:
        out = loss_fn(store.leaf_vars())
        return float(out.data)

    fd = {}
    for name in store.names():
        base = store.get(name)
        g = np.zeros_like(base)
        if store.is_frozen(name):
            fd[name] = g
            continue
        flat = base.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = value()
            flat[i] = keep - step
            down = value()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * step)
        fd[name] = g
    return fd


def check_gradients(loss_fn, store: ParamStore, step: float = 1e-5,
                    rtol: float = 1e-4) -> dict[str, float]:
    """Relative per-group error between tape and finite-difference gradients.

    The error is ||fd - analytic|| / max(||fd||, ||analytic||); groups where
    both norms vanish count as zero error. Raises AssertionError above rtol.
    """
    _, analytic = grad(loss_fn, store)
    fd = finite_difference_gradients(loss_fn, store, step=step)
    errors = {}
    for name in store.names():
        if store.is_frozen(name):
            continue
        a, f = analytic[name], fd[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(f))
        if denom < 1e-9:
            errors[name] = 0.0
            continue
        errors[name] = float(np.linalg.norm(a - f) / denom)
        if errors[name] > rtol:
            raise AssertionError(
                f"gradient mismatch for '{name}': rel err {errors[name]:.3e} > {rtol}")
    return errors
