"""Central finite differences as an independent check on the tape."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def _scalar(v) -> float:
    return float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)


def finite_diff_grad(f: Callable[[Tensor], object], x, h: float = 1e-5) -> np.ndarray:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every element of ``x``."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(Tensor(base.copy())))
            flat[i] = orig - h
            fm = _scalar(f(Tensor(base.copy())))
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(base.shape)


@dataclass
class GradCheck:
    name: str
    max_rel: float
    max_abs_small: float
    passed: bool
    worst_index: tuple | None = None


def compare(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, small: float = 1e-8,
            atol_small: float = 1e-7, name: str = "") -> GradCheck:
    """Relative error per element; elements with ``|analytic| < small`` are compared absolutely."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    is_small = np.abs(a) < small
    rel = np.where(is_small, 0.0, diff / np.maximum(np.abs(a), np.abs(n)).clip(min=1e-300))
    abs_small = np.where(is_small, diff, 0.0)
    ok = bool(np.all(rel < rtol) and np.all(abs_small < atol_small))
    worst = None
    if a.size:
        worst = tuple(int(i) for i in np.unravel_index(int(np.argmax(rel)), a.shape))
    return GradCheck(name, float(rel.max(initial=0.0)), float(abs_small.max(initial=0.0)), ok, worst)


def check_grads(f: Callable[[], Tensor], params: dict[str, Tensor] | Sequence[Tensor], h: float = 1e-5,
                rtol: float = 1e-4, max_elements: int | None = None, rng=None) -> list[GradCheck]:
    """Compare tape gradients of the scalar ``f()`` with finite differences.

    ``f`` closes over ``params``; each parameter's buffer is perturbed in
    place and restored.  With ``max_elements`` only a random subset of each
    parameter's entries is probed.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    backward(f())
    results = []
    for name, p in params.items():
        analytic = p.grad.reshape(-1) if p.grad is not None else np.zeros(p.size)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(gen.choice(flat.size, max_elements, replace=False))
        numeric = np.empty(len(idx))
        with no_grad():
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = _scalar(f())
                flat[i] = orig - h
                fm = _scalar(f())
                flat[i] = orig
                numeric[n] = (fp - fm) / (2 * h)
        results.append(compare(analytic[idx], numeric, rtol=rtol, name=name))
    return results
