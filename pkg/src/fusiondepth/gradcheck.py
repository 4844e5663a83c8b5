"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                   indices: Sequence[tuple[int, ...]] | None = None) -> tuple[list, np.ndarray]:
    """(f(x + h e_i) - f(x - h e_i)) / 2h at each index (all entries by default)."""
    if indices is None:
        indices = list(np.ndindex(t.shape))
    out = np.empty(len(indices))
    original = t.data
    for n, idx in enumerate(indices):
        bumped = original.copy()
        bumped[idx] += h
        t.data = bumped
        up = f().item()
        bumped = original.copy()
        bumped[idx] -= h
        t.data = bumped
        down = f().item()
        out[n] = (up - down) / (2 * h)
    t.data = original
    return list(indices), out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              max_entries: int | None = None, seed: int = 0) -> dict[int, float]:
    """Relative error per input between backward() and central differences.

    ``max_entries`` samples that many coordinates per input instead of all.
    """
    loss = f()
    backward(loss, leaves=inputs)
    analytic = [t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    errors = {}
    for k, t in enumerate(inputs):
        indices = list(np.ndindex(t.shape))
        if max_entries is not None and len(indices) > max_entries:
            pick = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[i] for i in sorted(pick)]
        idx, num = numerical_grad(f, t, h, indices)
        ana = np.array([analytic[k][i] for i in idx])
        errors[k] = relative_error(ana, num)
    return errors
