"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradcheckResult:
    name: str
    max_rel_err: float
    n_checked: int

    def passed(self, tol: float) -> bool:
        return bool(self.max_rel_err < tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor * scale)``.

    ``scale`` is the largest numeric gradient magnitude (at least 1), so entries
    that are tiny compared to the rest of the gradient are judged on an
    absolute footing instead of blowing up the ratio.
    """
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if analytic.size == 0:
        return 0.0
    scale = max(1.0, float(np.abs(numeric).max()))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    return float((np.abs(analytic - numeric) / denom).max())


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    name: str = "",
) -> GradcheckResult:
    """Compare ``backward()`` of the scalar ``fn()`` against central differences.

    ``fn`` must rebuild the graph from the current ``.data`` of ``inputs`` on
    every call. With ``max_coords`` only that many coordinates per input are
    perturbed (chosen by ``rng``).
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic_all, numeric_all = [], []
    for t in inputs:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            numeric_all.append((fp - fm) / (2 * h))
            analytic_all.append(g.reshape(-1)[i])
    err = relative_error(np.array(analytic_all), np.array(numeric_all))
    return GradcheckResult(name=name, max_rel_err=err, n_checked=len(numeric_all))


def random_projection_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)``; gives every output element a distinct weight."""
    return (out * Tensor(weights)).sum()
