"""Quantization error and weight-distribution diagnostics.

Records are tab-separated lines whose first column names the record type.
Column order is fixed by :data:`LAYER_FIELDS` and :data:`STEP_FIELDS`; missing
values are written as ``NA``, lists as comma-separated values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wnq.baselines import LayerQuantization, MethodId, quantize_layer
from wnq.quantizer import QuantConfig, code_table
from wnq.tensor_store import QuantizedLayer, WeightTensor, combine_levels

DEFAULT_BINS = 101
NA = "NA"

LAYER_FIELDS = (
    "record",
    "step",
    "layer",
    "method",
    "bits",
    "relative_mse",
    "tail_ratio",
    "max_abs",
    "std",
    "zero_filters",
    "n_weights",
    "hist_min",
    "hist_max",
    "mean_levels",
    "histogram",
)
STEP_FIELDS = ("record", "phase", "step", "loss", "accuracy")


def _rows(x) -> np.ndarray:
    if isinstance(x, WeightTensor):
        return x.rows()
    if isinstance(x, QuantizedLayer):
        return x.dequantize()
    if isinstance(x, LayerQuantization):
        return x.dequantized
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1) if x.ndim > 1 else x[None]


def per_filter_mse(layer, quantized) -> np.ndarray:
    """||w_n - wq_n||^2 / ||w_n||^2 per filter; NaN where ||w_n|| = 0."""
    w, q = _rows(layer), _rows(quantized)
    if w.shape != q.shape:
        raise ValueError(f"shape mismatch: weights {w.shape} vs quantized {q.shape}")
    norm = np.einsum("nm,nm->n", w, w)
    diff = w - q
    err = np.einsum("nm,nm->n", diff, diff)
    out = np.full(w.shape[0], np.nan)
    ok = norm > 0
    out[ok] = err[ok] / norm[ok]
    return out


def relative_mse(layer, quantized) -> float:
    """Mean over nonzero filters of the relative squared quantization error."""
    per = per_filter_mse(layer, quantized)
    if np.all(np.isnan(per)):
        return float("nan")
    return float(np.nanmean(per))


def weight_histogram(values, bins: int = DEFAULT_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Uniform histogram over [-max|w|, max|w|]."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    peak = float(np.max(np.abs(v)))
    counts, edges = np.histogram(v, bins=bins, range=(-peak, peak) if peak > 0 else (-0.5, 0.5))
    return edges, counts


def tail_ratio(values) -> float | None:
    """max|w| / std(w) (population std); ``None`` when std is zero."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    std = float(np.std(v))
    if std == 0.0:
        return None
    return float(np.max(np.abs(v))) / std


@dataclass(eq=False)
class LayerReport:
    layer: str
    method: MethodId | None
    bits: int | None
    relative_mse: float | None
    per_filter_mse: np.ndarray | None
    zero_filters: int
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    max_abs: float
    std: float
    tail_ratio: float | None
    alphas: np.ndarray | None = None
    mean_levels: np.ndarray | None = None
    step: int | None = None

    @property
    def n_weights(self) -> int:
        return int(self.hist_counts.sum())

    def to_record(self) -> str:
        return format_layer_record(self)


def mean_levels(lq: LayerQuantization) -> np.ndarray | None:
    """Average (over filters) of each filter's sorted dequantized levels."""
    if lq.method is MethodId.DoReFa:
        top = 2**lq.bits - 1
        return 2 * np.arange(top + 1) / top - 1
    if lq.rows is None:
        return None
    table = code_table(lq.bits)
    n = lq.rows.alpha.shape[0]
    levels = combine_levels(np.broadcast_to(table, (n,) + table.shape), lq.rows.alpha)
    levels = np.sort(levels, axis=1) * lq.rows.mav[:, None]
    return levels.mean(axis=0)


def distribution_report(
    layer: WeightTensor,
    method: MethodId | str | None = None,
    bits: int | None = None,
    *,
    quantized: LayerQuantization | QuantizedLayer | WeightTensor | np.ndarray | None = None,
    config: QuantConfig | None = None,
    bins: int = DEFAULT_BINS,
    name: str = "layer",
    step: int | None = None,
) -> LayerReport:
    """Histogram, tail ratio and (when a quantizer is involved) relative mse for one layer.

    With a quantizing ``method`` and no ``quantized`` argument the layer is
    quantized here with ``config`` (default: ``QuantConfig(bits)``). ``method``
    ``None`` or ``fp`` reports the float distribution only.
    """
    w = _rows(layer)
    if w.size == 0:
        raise ValueError("empty layer")
    method = None if method is None else MethodId(method)
    edges, counts = weight_histogram(w, bins)
    std = float(np.std(w))
    lq = quantized if isinstance(quantized, LayerQuantization) else None
    if quantized is None and method not in (None, MethodId.Fp):
        cfg = config or QuantConfig(bits=bits or 2)
        lq = quantize_layer(layer, method, cfg)
        quantized = lq
    if lq is not None:
        bits = lq.bits
    elif isinstance(quantized, QuantizedLayer):
        bits = quantized.bits
    per = None if quantized is None else per_filter_mse(w, quantized)
    rel = None
    if per is not None and not np.all(np.isnan(per)):
        rel = float(np.nanmean(per))
    alphas = levels = None
    if lq is not None:
        alphas = lq.alpha
        levels = mean_levels(lq)
    elif isinstance(quantized, QuantizedLayer):
        alphas = np.stack([f.alpha for f in quantized.filters])
        table = code_table(quantized.bits)
        levels = np.mean(
            [np.sort(combine_levels(table, f.alpha)) * f.mav for f in quantized.filters],
            axis=0,
        )
    return LayerReport(
        layer=name,
        method=method,
        bits=bits,
        relative_mse=rel,
        per_filter_mse=per,
        zero_filters=int(np.sum(~np.any(w != 0, axis=1))),
        hist_edges=edges,
        hist_counts=counts,
        max_abs=float(np.max(np.abs(w))),
        std=std,
        tail_ratio=None if std == 0.0 else float(np.max(np.abs(w))) / std,
        alphas=alphas,
        mean_levels=levels,
        step=step,
    )


# -- record I/O -------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return NA
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return NA if np.isnan(x) else repr(x)
    if isinstance(x, MethodId):
        return x.value
    return str(x)


def _fmt_list(xs) -> str:
    if xs is None:
        return NA
    return ",".join(_fmt(float(x)) if isinstance(x, (float, np.floating)) else str(int(x)) for x in xs)


def format_layer_record(r: LayerReport) -> str:
    values = (
        "layer",
        _fmt(r.step),
        r.layer,
        _fmt(r.method),
        _fmt(r.bits),
        _fmt(r.relative_mse),
        _fmt(r.tail_ratio),
        _fmt(r.max_abs),
        _fmt(r.std),
        str(r.zero_filters),
        str(r.n_weights),
        _fmt(float(r.hist_edges[0])),
        _fmt(float(r.hist_edges[-1])),
        _fmt_list(r.mean_levels),
        _fmt_list(r.hist_counts),
    )
    return "\t".join(values)


def format_step_record(phase: str, step: int, loss: float, accuracy: float | None) -> str:
    return "\t".join(("step", phase, str(step), _fmt(loss), _fmt(accuracy)))


def _parse_value(s: str):
    if s == NA:
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def parse_record(line: str) -> dict:
    """Parse a layer or step record back into a field dict."""
    parts = line.rstrip("\n").split("\t")
    fields = {"layer": LAYER_FIELDS, "step": STEP_FIELDS}.get(parts[0])
    if fields is None or len(parts) != len(fields):
        raise ValueError(f"not a metrics record: {line!r}")
    out = {}
    for key, raw in zip(fields, parts):
        if key in ("histogram", "mean_levels"):
            out[key] = None if raw == NA else [_parse_value(x) for x in raw.split(",")]
        elif key in ("layer", "record", "phase", "method"):
            out[key] = None if raw == NA else raw
        else:
            out[key] = _parse_value(raw)
    return out
