"""Central-difference gradient checking against the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``; 0 when both vanish.

    ``floor`` keeps gradients that are zero by construction (e.g. a bias
    followed by instance norm) from comparing roundoff against roundoff.
    """
    a, n = np.ravel(analytic).astype(np.float64), np.ravel(numeric).astype(np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5,
                 indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``t``.

    ``fn`` is called with no tape active.  Returns values at ``indices``
    (all entries when None) in that order.
    """
    if indices is None:
        indices = list(np.ndindex(t.shape))
    out = np.empty(len(indices))
    for i, idx in enumerate(indices):
        orig = t.data[idx]
        t.data[idx] = orig + eps
        hi = float(fn().data)
        t.data[idx] = orig - eps
        lo = float(fn().data)
        t.data[idx] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
              max_entries: int | None = None, seed: int = 0,
              floor: float = 1e-6) -> dict[str, float]:
    """Relative error between tape and central-difference gradients.

    With ``max_entries`` set, each tensor is checked on at most that many
    randomly chosen entries.  Per-tensor errors are normalized by at least
    ``floor`` times the norm of the full analytic gradient over all tensors.
    Returns ``{name: relative error}``.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    total = np.sqrt(sum(float(np.sum(np.square(t.grad, dtype=np.float64))) for t in tensors))
    errors = {}
    for k, t in enumerate(tensors):
        all_idx = list(np.ndindex(t.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        analytic = np.array([t.grad[idx] for idx in all_idx])
        numeric = numeric_grad(fn, t, eps, all_idx)
        errors[t.name or f"input{k}"] = relative_error(analytic, numeric, floor * total)
    return errors
