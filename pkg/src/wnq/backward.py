"""Backward rules for the quantizers: WNQ's max-element gradient and the plain STE.

The WNQ forward pass is ``w_q = detach(mav) * P(w / mav)``. With the projection
``P`` treated as identity and ``mav`` detached in the rescale but not in the
normalization, the gradient w.r.t. the max-abs element ``w_i`` becomes
``-sum_{j != i} g_j * w_j / w_i`` while every other element receives ``g_j``
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class BackwardContext:
    saved_w: np.ndarray
    max_index: int
    degenerate: bool

    @classmethod
    def from_weights(cls, w) -> "BackwardContext":
        w = np.array(w, dtype=np.float64).reshape(-1)
        mag = np.abs(w)
        idx = int(np.argmax(mag))
        return cls(w, idx, bool(mag[idx] == 0.0))


def backward_wnq_rows(w: np.ndarray, max_index: np.ndarray, degenerate: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Row-batched WNQ backward: ``w`` and ``upstream`` are (N, M)."""
    w = np.asarray(w, dtype=np.float64)
    out = np.array(upstream, dtype=np.float64, copy=True)
    rows = np.flatnonzero(~np.asarray(degenerate, dtype=bool))
    if rows.size == 0:
        return out
    idx = np.asarray(max_index)[rows]
    prod = out[rows] * w[rows]
    prod[np.arange(rows.size), idx] = 0.0
    out[rows, idx] = -prod.sum(axis=1) / w[rows, idx]
    return out


def backward_wnq(ctx: BackwardContext, upstream) -> np.ndarray:
    """Gradient w.r.t. the float weights of one filter given dL/dw_q.

    Degenerate (all-zero) filters pass the upstream gradient through unchanged.
    """
    g = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if g.size != ctx.saved_w.size:
        raise ValueError(f"upstream has {g.size} entries, filter has {ctx.saved_w.size}")
    out = backward_wnq_rows(ctx.saved_w[None], np.array([ctx.max_index]), np.array([ctx.degenerate]), g[None])
    return out[0]


def backward_lqnet(ctx: BackwardContext, upstream) -> np.ndarray:
    """Straight-through gradient: dL/dw = dL/dw_q for every element."""
    g = np.array(upstream, dtype=np.float64).reshape(-1)
    if g.size != ctx.saved_w.size:
        raise ValueError(f"upstream has {g.size} entries, filter has {ctx.saved_w.size}")
    return g


class MarginError(ValueError):
    """The max-abs element is not separated enough for finite differences."""


def max_abs_margin(w) -> float:
    mag = np.sort(np.abs(np.asarray(w, dtype=np.float64)))
    if mag.size < 2:
        return np.inf
    return float(mag[-1] - mag[-2])


def frozen_scale_surrogate(w, scale: float) -> np.ndarray:
    """``scale * w / max|w|``: the WNQ forward with STE projection and detached rescale."""
    w = np.asarray(w, dtype=np.float64)
    return scale * w / np.max(np.abs(w))


def fd_deviations(w, upstream, eps: float = 1e-5) -> np.ndarray:
    """Per-element |analytic - central difference| for L(w) = upstream . surrogate(w)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    w = np.array(w, dtype=np.float64).reshape(-1)
    g = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if g.shape != w.shape:
        raise ValueError("w and upstream must have the same length")
    margin = max_abs_margin(w)
    if not margin > 10 * eps:
        raise MarginError(f"max-abs margin {margin:.3g} must exceed 10*eps = {10 * eps:.3g}")
    scale = float(np.max(np.abs(w)))

    def loss(v):
        return float(g @ frozen_scale_surrogate(v, scale))

    numeric = np.empty_like(w)
    for i in range(w.size):
        hi = w.copy()
        lo = w.copy()
        hi[i] += eps
        lo[i] -= eps
        numeric[i] = (loss(hi) - loss(lo)) / (2 * eps)
    analytic = backward_wnq(BackwardContext.from_weights(w), g)
    return np.abs(analytic - numeric)


def fd_check(w, upstream, eps: float = 1e-5) -> float:
    """Max deviation between the WNQ backward and finite differences of the frozen-scale surrogate."""
    return float(np.max(fd_deviations(w, upstream, eps)))
