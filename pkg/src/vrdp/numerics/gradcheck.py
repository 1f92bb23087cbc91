from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, backward


def _scalar(value) -> float:
    v = float(value.data if isinstance(value, Tensor) else value)
    if not np.isfinite(v):
        raise NonFiniteError("grad_check: f returned a non-finite value")
    return v


def grad_check_many(f: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` is re-evaluated from scratch for every perturbation and must read the
    current ``data`` of each leaf. ``max_coords`` caps the coordinates probed
    per leaf (sampled with ``rng``); ``None`` checks all of them.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    for leaf in leaves:
        leaf.grad = None
        leaf.requires_grad = True
    out = f()
    _scalar(out)
    if out.tracked:
        backward(out)
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f())
            flat[i] = orig - eps
            fm = _scalar(f())
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Check ``f`` at ``x``: max_i |g_i - fd_i| / max(1, |fd_i|)."""
    leaf = x if isinstance(x, Tensor) else Tensor(np.array(x, dtype=np.float64))
    return grad_check_many(lambda: f(leaf), [leaf], eps)


def directional_grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], n_dirs: int = 16,
                           rng: np.random.Generator | None = None, eps: float = 1e-5) -> float:
    """Max relative error of g.v against central differences along random unit directions.

    Every coordinate takes part in every probe, so a wrong gradient anywhere
    shows up without paying two evaluations per coordinate.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    rng = rng or np.random.default_rng(0)
    for leaf in leaves:
        leaf.grad = None
        leaf.requires_grad = True
    out = f()
    _scalar(out)
    if out.tracked:
        backward(out)
    grads = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]
    origs = [l.data.copy() for l in leaves]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(l.data.shape) for l in leaves]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        gv = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        vals = []
        for sign in (1.0, -1.0):
            for l, o, d in zip(leaves, origs, dirs):
                l.data[...] = o + sign * eps * d
            vals.append(_scalar(f()))
        for l, o in zip(leaves, origs):
            l.data[...] = o
        fd = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, abs(gv - fd) / max(abs(fd), abs(gv), 1e-8))
    return worst
