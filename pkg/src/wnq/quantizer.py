"""WNQ forward quantization of one filter (or a stack of filters).

Steps: normalize by the max-abs value, project onto the learned level set
``{alpha . e : e in {-1,+1}^K}`` with alternating least squares, and multiply
the (detached) max-abs value back.

All public per-filter functions are thin wrappers over the row-batched
``*_rows`` helpers, so a filter quantized alone and the same filter quantized
inside a layer give bit-identical results.
"""

from __future__ import annotations

import functools
import itertools
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from wnq.backward import BackwardContext
from wnq.tensor_store import MAX_BITS, FilterView, QuantizedFilter, combine_levels, pack_filter

PINV_RCOND = 1e-12


class NegativeAlphaWarning(UserWarning):
    """The unconstrained least-squares update produced a negative level parameter."""


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 2
    init_iters: int = 20
    train_iters: int = 1
    tol: float = 1e-8

    def __post_init__(self):
        if not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [1, {MAX_BITS}], got {self.bits}")
        if self.init_iters < 1 or self.train_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be nonnegative")


def _vector(w) -> np.ndarray:
    if isinstance(w, FilterView):
        w = w.values
    v = np.array(w, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("filter must have at least one element")
    return v


# -- normalization --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NormalizedFilter:
    values: np.ndarray
    mav: float
    max_index: int
    degenerate: bool


def normalize_rows(w: np.ndarray):
    """Returns (normalized (N, M), mav (N,), max_index (N,), degenerate (N,))."""
    mag = np.abs(w)
    idx = np.argmax(mag, axis=1)
    mav = mag[np.arange(w.shape[0]), idx]
    degenerate = mav == 0.0
    values = w / np.where(degenerate, 1.0, mav)[:, None]
    return values, mav, idx, degenerate


def normalize(w) -> NormalizedFilter:
    """Divide a filter by its max-abs value; the first max-abs element wins ties."""
    values, mav, idx, deg = normalize_rows(_vector(w)[None])
    return NormalizedFilter(values[0], float(mav[0]), int(idx[0]), bool(deg[0]))


# -- level set and projection ------------------------------------------------------


@functools.lru_cache(maxsize=None)
def code_table(bits: int) -> np.ndarray:
    """All 2^K codes in lexicographic order, -1 before +1."""
    table = np.array(list(itertools.product((-1, 1), repeat=bits)), dtype=np.int8)
    table.setflags(write=False)
    return table


@dataclass(frozen=True, eq=False)
class LevelSet:
    values: np.ndarray
    codes: np.ndarray

    def __len__(self):
        return self.values.size


def level_set(alpha) -> LevelSet:
    """Sorted quantization levels with their codes; duplicates keep lexicographic code order."""
    alpha = np.array(alpha, dtype=np.float64).reshape(-1)
    if not 1 <= alpha.size <= MAX_BITS:
        raise ValueError(f"alpha must have 1..{MAX_BITS} entries")
    table = code_table(alpha.size)
    vals = combine_levels(table, alpha)
    order = np.argsort(vals, kind="stable")
    return LevelSet(vals[order], table[order])


def _nearest(x: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Index of the nearest sorted level; ties go to the larger level, and among
    equal levels to the last (lexicographically greatest code)."""
    last = levels.size - 1
    pos = np.searchsorted(levels, x, side="left")
    hi = np.minimum(pos, last)
    lo = np.maximum(pos - 1, 0)
    d_hi = np.abs(x - levels[hi])
    d_lo = np.abs(x - levels[lo])
    pick = np.where(d_hi < d_lo, hi, lo)
    # Rounding is monotone, so only float-equal distances can hide a strict order.
    for i in np.flatnonzero((d_hi == d_lo) & (hi != lo)):
        xi = Fraction(float(x[i]))
        near_hi = abs(xi - Fraction(float(levels[hi[i]]))) <= abs(xi - Fraction(float(levels[lo[i]])))
        pick[i] = hi[i] if near_hi else lo[i]
    return np.searchsorted(levels, levels[pick], side="right") - 1


def project(x: float, levels: LevelSet) -> tuple[float, np.ndarray]:
    """Nearest level to ``x`` and its code."""
    if len(levels) == 0:
        raise ValueError("empty level set")
    i = int(_nearest(np.array([float(x)]), levels.values)[0])
    return float(levels.values[i]), levels.codes[i].copy()


def project_rows(values: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Codes (N, M, K) projecting each row of ``values`` onto its own level set."""
    n, m = values.shape
    k = alpha.shape[1]
    table = code_table(k)
    codes = np.empty((n, m, k), dtype=np.int8)
    levels = combine_levels(np.broadcast_to(table, (n,) + table.shape), alpha)
    order = np.argsort(levels, axis=1, kind="stable")
    for r in range(n):
        sorted_levels = levels[r, order[r]]
        codes[r] = table[order[r][_nearest(values[r], sorted_levels)]]
    return codes


def optimize_codes(values, alpha) -> np.ndarray:
    """(M, K) codes of the nearest level for every element."""
    alpha = np.array(alpha, dtype=np.float64).reshape(1, -1)
    return project_rows(_vector(values)[None], alpha)[0]


# -- alpha update ---------------------------------------------------------------


def optimize_alpha_rows(values: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Least-squares alpha per row; minimum-norm when B^T B is singular.

    One step of iterative refinement on the residual keeps the fitted values
    accurate to a few ulp even when levels cancel.
    """
    b = codes.astype(np.float64)
    pinv = np.linalg.pinv(b, rcond=PINV_RCOND)
    alpha = np.einsum("nkm,nm->nk", pinv, values)
    resid = values - np.einsum("nmk,nk->nm", b, alpha)
    return alpha + np.einsum("nkm,nm->nk", pinv, resid)


def optimize_alpha(values, codes) -> np.ndarray:
    """Solve ``min_alpha ||values - B alpha||^2`` for fixed codes ``B`` (M, K)."""
    v = _vector(values)
    b = np.asarray(codes)
    if b.ndim == 1:
        b = b[:, None]
    if b.shape[0] != v.size:
        raise ValueError(f"codes have {b.shape[0]} rows, values have {v.size}")
    return optimize_alpha_rows(v[None], b[None])[0]


def residual_init_rows(values: np.ndarray, bits: int, return_codes: bool = False):
    """Greedy residual binarization; sign(0) = +1."""
    r = np.array(values, dtype=np.float64, copy=True)
    alpha = np.empty((r.shape[0], bits))
    codes = np.empty(r.shape + (bits,), dtype=np.int8)
    for k in range(bits):
        a = np.mean(np.abs(r), axis=1)
        s = np.where(r >= 0, 1, -1).astype(np.int8)
        alpha[:, k] = a
        codes[:, :, k] = s
        r = r - a[:, None] * s
    if return_codes:
        return alpha, codes
    return alpha


def residual_init(values, bits: int) -> np.ndarray:
    """Initial alpha: alpha_k = mean|r|, r <- r - alpha_k * sign(r), starting from r = values."""
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bits must be in [1, {MAX_BITS}]")
    return residual_init_rows(_vector(values)[None], bits)[0]


# -- alternation ----------------------------------------------------------------


def objective_rows(values: np.ndarray, codes: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    diff = values - combine_levels(codes, alpha)
    return np.einsum("nm,nm->n", diff, diff)


@dataclass
class Alternation:
    alpha: np.ndarray
    codes: np.ndarray
    objective: np.ndarray
    iterations: np.ndarray
    history: list = field(default_factory=list)

    @property
    def negative_alpha(self) -> np.ndarray:
        return np.any(self.alpha < 0, axis=-1)


def alternate_rows(values: np.ndarray, alpha: np.ndarray, iters: int, tol=0.0) -> Alternation:
    """Alternate code projection and least-squares alpha, row by row.

    Each row stops once its objective decrease drops below ``tol`` (scalar or
    per-row). The returned codes are always the projection under the returned
    alpha. ``history`` holds the per-row objective after every half-step.
    """
    values = np.asarray(values, dtype=np.float64)
    alpha = np.array(alpha, dtype=np.float64, copy=True)
    n = values.shape[0]
    tol = np.broadcast_to(np.asarray(tol, dtype=np.float64), (n,))
    codes = project_rows(values, alpha)
    obj = objective_rows(values, codes, alpha)
    history = [obj.copy()]
    done = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for it in range(iters):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        v = values[rows]
        a = optimize_alpha_rows(v, codes[rows])
        mid = objective_rows(v, codes[rows], a)
        c = project_rows(v, a)
        new = objective_rows(v, c, a)
        alpha[rows] = a
        codes[rows] = c
        step = history[-1].copy()
        step[rows] = mid
        history.append(step)
        step = step.copy()
        step[rows] = new
        history.append(step)
        done[rows] = it + 1
        active[rows] = (obj[rows] - new) >= tol[rows]
        obj[rows] = new
    return Alternation(alpha, codes, obj, done, history)


def alternate(values, config: QuantConfig, alpha=None, iters: int | None = None) -> Alternation:
    """Alternating optimization of (alpha, B) for one vector.

    Starts from ``alpha`` when given, else from :func:`residual_init`. Runs at most
    ``iters`` rounds (default ``config.init_iters``).
    """
    v = _vector(values)
    if alpha is None:
        alpha = residual_init(v, config.bits)
    alpha = np.array(alpha, dtype=np.float64).reshape(1, -1)
    if alpha.shape[1] != config.bits:
        raise ValueError(f"warm-start alpha has {alpha.shape[1]} entries, config.bits={config.bits}")
    res = alternate_rows(v[None], alpha, config.init_iters if iters is None else iters, config.tol)
    return Alternation(
        res.alpha[0], res.codes[0], float(res.objective[0]), int(res.iterations[0]), [float(h[0]) for h in res.history]
    )


# -- full WNQ forward --------------------------------------------------------------


@dataclass(eq=False)
class RowQuantization:
    """Quantization of a stack of N filters of M elements each."""

    alpha: np.ndarray
    codes: np.ndarray
    mav: np.ndarray
    max_index: np.ndarray
    degenerate: np.ndarray
    dequantized: np.ndarray
    objective: np.ndarray

    def filters(self) -> tuple[QuantizedFilter, ...]:
        return tuple(pack_filter(self.alpha[n], self.codes[n], self.mav[n]) for n in range(self.alpha.shape[0]))

    def contexts(self, w: np.ndarray) -> list[BackwardContext]:
        return [
            BackwardContext(np.array(w[n], dtype=np.float64), int(self.max_index[n]), bool(self.degenerate[n]))
            for n in range(w.shape[0])
        ]


def _warn_negative(alpha: np.ndarray) -> None:
    if np.any(alpha < 0):
        warnings.warn("least-squares update produced negative alpha", NegativeAlphaWarning, stacklevel=3)


def wnq_rows(w: np.ndarray, config: QuantConfig, warm_alpha: np.ndarray | None = None) -> RowQuantization:
    """WNQ forward for each row of ``w`` (N, M).

    Without ``warm_alpha`` the levels start from residual quantization and run
    ``config.init_iters`` rounds; with it, ``config.train_iters`` rounds.
    """
    w = np.asarray(w, dtype=np.float64)
    values, mav, idx, deg = normalize_rows(w)
    if warm_alpha is None:
        alpha0, iters = residual_init_rows(values, config.bits), config.init_iters
    else:
        alpha0, iters = np.array(warm_alpha, dtype=np.float64).reshape(w.shape[0], config.bits), config.train_iters
    res = alternate_rows(values, alpha0, iters, config.tol)
    alpha, codes = res.alpha, res.codes
    if deg.any():
        alpha[deg] = 0.0
        codes[deg] = 1
    _warn_negative(alpha)
    wq = mav[:, None] * combine_levels(codes, alpha)
    return RowQuantization(alpha, codes, mav, idx, deg, wq, res.objective)


def quantize_filter(w, config: QuantConfig, warm_alpha=None) -> tuple[QuantizedFilter, BackwardContext]:
    """Quantize one filter: normalize, project onto learned levels, rescale."""
    v = _vector(w)
    warm = None if warm_alpha is None else np.asarray(warm_alpha, dtype=np.float64).reshape(1, -1)
    rq = wnq_rows(v[None], config, warm)
    return rq.filters()[0], rq.contexts(v[None])[0]
