import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wnq.baselines import MethodId
from wnq.metrics import (
    LAYER_FIELDS,
    distribution_report,
    format_layer_record,
    format_step_record,
    parse_record,
    per_filter_mse,
    relative_mse,
    tail_ratio,
    weight_histogram,
)
from wnq.quantizer import QuantConfig
from wnq.tensor_store import WeightTensor

pytestmark = pytest.mark.filterwarnings("ignore::wnq.quantizer.NegativeAlphaWarning")


def test_relative_mse_examples():
    assert relative_mse(np.array([[1.0, 0.0]]), np.array([[0.5, 0.0]])) == 0.25
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert relative_mse(w, w) == 0.0
    # per-filter errors 0.1 and 0.3
    w = np.array([[1.0, 0.0], [1.0, 0.0]])
    q = np.array([[1.0, math.sqrt(0.1)], [1.0, math.sqrt(0.3)]])
    assert relative_mse(w, q) == pytest.approx(0.2, rel=1e-15)


def test_zero_filters_excluded():
    w = np.array([[0.0, 0.0], [2.0, 0.0]])
    q = np.array([[1.0, 1.0], [1.0, 0.0]])
    per = per_filter_mse(w, q)
    assert math.isnan(per[0]) and per[1] == 0.25
    assert relative_mse(w, q) == 0.25
    assert math.isnan(relative_mse(np.zeros((1, 2)), np.zeros((1, 2))))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        relative_mse(np.zeros((2, 3)), np.zeros((3, 2)))


@given(st.integers(0, 2**32 - 1), st.sampled_from([1e-3, -2.0, 7.5, 1e3]))
def test_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    w, q = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    a, b = relative_mse(w, q), relative_mse(c * w, c * q)
    assert abs(a - b) <= 4 * np.spacing(a) * 4


@given(st.integers(0, 2**32 - 1))
def test_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 5))
    assert relative_mse(w, w) == 0.0
    q = w.copy()
    q[1, 2] += 0.1
    assert relative_mse(w, q) > 0


def test_histogram_counts_and_range():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(1000)
    edges, counts = weight_histogram(v)
    assert counts.size == 101 and counts.sum() == 1000
    assert edges[0] == -np.max(np.abs(v)) and edges[-1] == np.max(np.abs(v))


def test_tail_ratio_uniform_grid_closed_form():
    for m in (1, 2, 5, 10):
        grid = np.arange(-m, m + 1, dtype=float)
        # std of the discrete uniform on {-m..m} is sqrt(m(m+1)/3)
        assert tail_ratio(grid) == pytest.approx(math.sqrt(3 * m / (m + 1)), rel=1e-14)
        _, counts = weight_histogram(grid, bins=2 * m + 1)
        assert np.array_equal(counts, counts[::-1])


def test_tail_ratio_constant_is_flagged():
    assert tail_ratio([0.3, 0.3, 0.3]) is None
    r = distribution_report(WeightTensor([1, 3], [0.3, 0.3, 0.3]))
    assert r.tail_ratio is None
    assert parse_record(format_layer_record(r))["tail_ratio"] is None


def test_report_without_quantization():
    rng = np.random.default_rng(1)
    t = WeightTensor.from_array(rng.standard_normal((4, 8)))
    r = distribution_report(t)
    assert r.relative_mse is None and r.n_weights == 32 and r.hist_counts.size == 101


def test_report_quantized_concentrates_on_levels():
    rng = np.random.default_rng(2)
    t = WeightTensor.from_array(rng.standard_normal((5, 30)))
    r = distribution_report(t, MethodId.Wnq, 2, config=QuantConfig(bits=2))
    assert 0 < r.relative_mse < 1
    assert r.alphas.shape == (5, 2) and r.mean_levels.size == 4
    q = distribution_report(t, MethodId.Wnq, 2, config=QuantConfig(bits=2))
    assert q.relative_mse == r.relative_mse
    from wnq.baselines import quantize_layer

    lq = quantize_layer(t, MethodId.Wnq, QuantConfig(bits=2))
    for row in lq.dequantized:
        assert len(np.unique(row)) <= 4
    qr = distribution_report(WeightTensor.from_array(lq.dequantized))
    assert np.count_nonzero(qr.hist_counts) <= 4 * 5


def test_record_roundtrip():
    rng = np.random.default_rng(3)
    t = WeightTensor.from_array(rng.standard_normal((3, 7)))
    r = distribution_report(t, MethodId.LqNet, 2, config=QuantConfig(bits=2), name="fc1", step=10)
    line = format_layer_record(r)
    rec = parse_record(line)
    assert tuple(rec) == LAYER_FIELDS
    assert rec["layer"] == "fc1" and rec["method"] == "lqnet" and rec["step"] == 10
    assert rec["relative_mse"] == r.relative_mse and rec["tail_ratio"] == r.tail_ratio
    assert rec["histogram"] == r.hist_counts.tolist()
    assert rec["n_weights"] == 21


def test_step_record():
    rec = parse_record(format_step_record("train", 5, 0.125, 0.75))
    assert rec == {"record": "step", "phase": "train", "step": 5, "loss": 0.125, "accuracy": 0.75}
    assert parse_record(format_step_record("pretrain", 0, float("nan"), None))["loss"] is None
    with pytest.raises(ValueError):
        parse_record("bogus\t1")
