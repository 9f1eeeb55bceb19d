"""Finite-difference verification of analytic gradients.

Central differences with step eps around the current values of the checked
tensors; comparisons use |analytic - numeric| <= atol + rtol * |numeric|.
Meaningful only in 64-bit mode.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

__all__ = ["numerical_gradient", "check_gradients", "GradientMismatch"]


class GradientMismatch(AssertionError):
    """Analytic and finite-difference gradients disagree."""


def numerical_gradient(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-5,
                       indices: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to t.

    Perturbs t.data in place element by element.  When ``indices`` is given
    only those flat positions are evaluated; other entries come back zero.
    """
    flat = t.data.reshape(-1)
    grad = np.zeros_like(flat)
    todo = range(flat.size) if indices is None else indices
    with no_grad():
        for i in todo:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(t.data.shape)


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor], *,
                    rtol: float = 1e-4, atol: float = 1e-6, eps: float = 1e-5,
                    sample: float | None = None, rng: np.random.Generator | None = None) -> None:
    """Compare backward() gradients of f against finite differences.

    f must rebuild the graph from the current tensor values on every call.
    ``sample`` checks only that fraction of each tensor's elements (at
    least one), drawn from ``rng``.  Raises GradientMismatch on the first
    disagreement.
    """
    for t in tensors:
        t.zero_grad()
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    for t, a in zip(tensors, analytic):
        if sample is None:
            indices = None
        else:
            n = t.data.size
            k = max(1, int(round(n * sample)))
            gen = rng if rng is not None else np.random.default_rng(0)
            indices = gen.choice(n, size=min(k, n), replace=False)
        num = numerical_gradient(f, t, eps=eps, indices=indices)
        sel = slice(None) if indices is None else np.unravel_index(np.asarray(indices), t.data.shape)
        got, want = a[sel], num[sel]
        bad = np.abs(got - want) > atol + rtol * np.abs(want)
        if np.any(bad):
            i = int(np.flatnonzero(bad.reshape(-1))[0])
            raise GradientMismatch(
                f"gradient mismatch on tensor shape {t.shape}: analytic "
                f"{got.reshape(-1)[i]:.8g} vs numeric {want.reshape(-1)[i]:.8g} "
                f"(rtol {rtol}, atol {atol})"
            )
