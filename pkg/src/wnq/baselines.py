"""Reference quantizers and the per-method dispatch used by the harness and CLI.

* LQ-Net: the same alternating least squares applied to the raw weights
  (no normalization), with a plain straight-through backward.
* Residual: greedy per-bit binarization of the residual, no alternation.
* DoReFa: a fixed uniform grid on ``tanh``-squashed weights.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from wnq.backward import BackwardContext, backward_lqnet, backward_wnq_rows
from wnq.quantizer import (
    QuantConfig,
    RowQuantization,
    _vector,
    _warn_negative,
    alternate_rows,
    normalize_rows,
    residual_init_rows,
    wnq_rows,
)
from wnq.tensor_store import LayerKind, QuantizedFilter, QuantizedLayer, WeightTensor, combine_levels


class MethodId(str, enum.Enum):
    Fp = "fp"
    Wnq = "wnq"
    LqNet = "lqnet"
    Residual = "residual"
    DoReFa = "dorefa"

    @property
    def has_levels(self) -> bool:
        """Whether the method's output is alpha/code structured (storable as WNQQ)."""
        return self in (MethodId.Wnq, MethodId.LqNet, MethodId.Residual)


def lqnet_rows(w: np.ndarray, config: QuantConfig, warm_alpha: np.ndarray | None = None) -> RowQuantization:
    """Alternation on the raw weights. ``warm_alpha`` lives on the raw weight scale.

    The convergence tolerance is scaled by mav^2 so that a filter stops after the
    same number of rounds as its normalized counterpart would.
    """
    w = np.asarray(w, dtype=np.float64)
    _, mav, idx, deg = normalize_rows(w)
    if warm_alpha is None:
        alpha0, iters = residual_init_rows(w, config.bits), config.init_iters
    else:
        alpha0, iters = np.array(warm_alpha, dtype=np.float64).reshape(w.shape[0], config.bits), config.train_iters
    res = alternate_rows(w, alpha0, iters, config.tol * mav**2)
    alpha, codes = res.alpha, res.codes
    if deg.any():
        alpha[deg] = 0.0
        codes[deg] = 1
    _warn_negative(alpha)
    return RowQuantization(alpha, codes, np.ones_like(mav), idx, deg, combine_levels(codes, alpha), res.objective)


def residual_rows(w: np.ndarray, config: QuantConfig, warm_alpha=None) -> RowQuantization:
    """Greedy residual quantization; ``warm_alpha`` is ignored (there is nothing to warm)."""
    w = np.asarray(w, dtype=np.float64)
    _, mav, idx, deg = normalize_rows(w)
    alpha, codes = residual_init_rows(w, config.bits, return_codes=True)
    wq = combine_levels(codes, alpha)
    diff = w - wq
    return RowQuantization(alpha, codes, np.ones_like(mav), idx, deg, wq, np.einsum("nm,nm->n", diff, diff))


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def dorefa_rows(w: np.ndarray, bits: int) -> np.ndarray:
    """``2 q_k(tanh(w) / (2 max|tanh(w)|) + 1/2) - 1`` with ``q_k(x) = round((2^k - 1) x) / (2^k - 1)``."""
    t = np.tanh(np.asarray(w, dtype=np.float64))
    peak = np.max(np.abs(t), axis=1, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    x = t / (2 * safe) + 0.5
    levels = 2**bits - 1
    out = 2 * (_round_half_away(levels * x) / levels) - 1
    return np.where(peak > 0, out, 0.0)


def _single(w, rows_fn, config: QuantConfig, warm_alpha=None) -> tuple[QuantizedFilter, BackwardContext]:
    v = _vector(w)
    warm = None if warm_alpha is None else np.asarray(warm_alpha, dtype=np.float64).reshape(1, -1)
    rq = rows_fn(v[None], config, warm)
    return rq.filters()[0], rq.contexts(v[None])[0]


def quantize_lqnet(w, config: QuantConfig, warm_alpha=None) -> tuple[QuantizedFilter, BackwardContext]:
    """LQ-Net forward; the stored filter has ``mav = 1`` and alpha on the raw scale."""
    return _single(w, lqnet_rows, config, warm_alpha)


def quantize_residual(w, bits: int) -> tuple[QuantizedFilter, BackwardContext]:
    return _single(w, residual_rows, QuantConfig(bits=bits))


def quantize_dorefa(w, bits: int) -> tuple[np.ndarray, BackwardContext]:
    """DoReFa grid quantization; the output lies on the fixed grid in [-1, 1] and is not rescaled."""
    if not 1 <= bits <= 8:
        raise ValueError("bits must be in [1, 8]")
    v = _vector(w)
    return dorefa_rows(v[None], bits)[0], BackwardContext.from_weights(v)


# -- dispatch -----------------------------------------------------------------


@dataclass(eq=False)
class LayerQuantization:
    """Result of quantizing every filter of a layer with one method."""

    method: MethodId
    bits: int
    kind: LayerKind
    shape: tuple
    dequantized: np.ndarray
    rows: RowQuantization | None
    weights: np.ndarray

    @property
    def alpha(self) -> np.ndarray | None:
        return None if self.rows is None else self.rows.alpha

    def to_quantized_layer(self) -> QuantizedLayer:
        if self.rows is None:
            raise ValueError(f"{self.method.value} output has no level structure")
        return QuantizedLayer(self.kind, self.rows.filters())

    def to_tensor(self) -> WeightTensor:
        return WeightTensor(self.shape, self.dequantized.reshape(-1), self.kind)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Route dL/dw_q (N, M) to dL/dw for the float master weights."""
        upstream = np.asarray(upstream, dtype=np.float64).reshape(self.weights.shape)
        if self.method is MethodId.Wnq:
            return backward_wnq_rows(self.weights, self.rows.max_index, self.rows.degenerate, upstream)
        return upstream.copy()

    def contexts(self) -> list[BackwardContext]:
        return [BackwardContext.from_weights(row) for row in self.weights]


def quantize_rows(
    w: np.ndarray, method: MethodId, config: QuantConfig, warm_alpha: np.ndarray | None = None
) -> tuple[np.ndarray, RowQuantization | None]:
    """Dequantized (N, M) output plus the level structure, if the method has one."""
    method = MethodId(method)
    w = np.asarray(w, dtype=np.float64)
    if method is MethodId.Fp:
        return w.copy(), None
    if method is MethodId.DoReFa:
        return dorefa_rows(w, config.bits), None
    fn = {MethodId.Wnq: wnq_rows, MethodId.LqNet: lqnet_rows, MethodId.Residual: residual_rows}[method]
    rq = fn(w, config, warm_alpha)
    return rq.dequantized, rq


def quantize_layer(
    t: WeightTensor, method: MethodId, config: QuantConfig, warm_alpha: np.ndarray | None = None
) -> LayerQuantization:
    method = MethodId(method)
    w = np.array(t.rows(), dtype=np.float64)
    deq, rq = quantize_rows(w, method, config, warm_alpha)
    return LayerQuantization(method, config.bits, t.kind, t.shape, deq, rq, w)


__all__ = [
    "LayerQuantization",
    "MethodId",
    "backward_lqnet",
    "dorefa_rows",
    "lqnet_rows",
    "quantize_dorefa",
    "quantize_layer",
    "quantize_lqnet",
    "quantize_residual",
    "quantize_rows",
    "residual_rows",
]
