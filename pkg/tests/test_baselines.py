import numpy as np
import pytest

import oracles
from wnq.baselines import (
    MethodId,
    quantize_dorefa,
    quantize_layer,
    quantize_lqnet,
    quantize_residual,
    quantize_rows,
)
from wnq.quantizer import QuantConfig, alternate, normalize, quantize_filter
from wnq.tensor_store import WeightTensor

pytestmark = pytest.mark.filterwarnings("ignore::wnq.quantizer.NegativeAlphaWarning")


def sq(x):
    return float(np.sum(np.square(x)))


def test_method_ids():
    assert [m.value for m in MethodId] == ["fp", "wnq", "lqnet", "residual", "dorefa"]
    assert MethodId("lqnet") is MethodId.LqNet
    assert MethodId.Wnq.has_levels and not MethodId.DoReFa.has_levels and not MethodId.Fp.has_levels


def test_lqnet_exact_example():
    qf, _ = quantize_lqnet([0.5, -0.5], QuantConfig(bits=1))
    assert qf.alpha.tolist() == [0.5] and qf.mav == 1.0
    assert qf.dequantize().tolist() == [0.5, -0.5]


def test_lqnet_matches_wnq_forward():
    rng = np.random.default_rng(12)
    for _ in range(200):
        k = int(rng.integers(2, 5))
        w = rng.standard_normal(int(rng.integers(1, 65))) * rng.uniform(0.01, 10)
        a = quantize_filter(w, QuantConfig(bits=k))[0].dequantize()
        b = quantize_lqnet(w, QuantConfig(bits=k))[0].dequantize()
        assert np.all(np.abs(a - b) <= 8 * np.spacing(np.max(np.abs(w))))


def test_lqnet_small_instance_global_optimum():
    rng = np.random.default_rng(21)
    for _ in range(5):
        w = rng.standard_normal(3)
        wq = quantize_lqnet(w, QuantConfig(bits=2, init_iters=20))[0].dequantize()
        assert sq(w - wq) == pytest.approx(oracles.global_optimum(w.tolist(), 2), abs=1e-9)


def test_residual_example():
    qf, _ = quantize_residual([1.0, 0.9, -0.2, 0.1], 2)
    np.testing.assert_allclose(qf.alpha, [0.55, 0.40], atol=1e-15)
    # stage 1 signs of w, stage 2 signs of w - 0.55 sign(w)
    assert qf.codes.tolist() == [[1, 1], [1, 1], [-1, 1], [1, -1]]


def test_residual_k1_equals_alternation_fixed_point():
    rng = np.random.default_rng(3)
    w = rng.standard_normal(10)
    a = quantize_residual(w, 1)[0].dequantize()
    b = quantize_lqnet(w, QuantConfig(bits=1))[0].dequantize()
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_residual_not_better_than_alternation():
    rng = np.random.default_rng(4)
    for _ in range(200):
        k = int(rng.integers(1, 5))
        v = normalize(rng.standard_normal(int(rng.integers(1, 40)))).values
        res = sq(v - quantize_residual(v, k)[0].dequantize())
        alt = alternate(v, QuantConfig(bits=k)).objective
        assert alt <= res + 1e-12


def dorefa_scalar(w, k):
    """Scalar reference with explicit half-away-from-zero rounding."""
    t = [np.tanh(x) for x in w]
    peak = max(abs(x) for x in t)
    n = 2**k - 1
    out = []
    for x in t:
        y = n * (x / (2 * peak) + 0.5)
        r = int(y + 0.5) if y >= 0 else -int(-y + 0.5)
        out.append(2 * r / n - 1)
    return out


def test_dorefa_examples():
    assert quantize_dorefa([0.8], 2)[0].tolist() == [1.0]
    out, _ = quantize_dorefa([0.0, 1.0, -1.0], 2)
    assert out[0] == pytest.approx(1 / 3, rel=1e-15)
    assert quantize_dorefa([0.0, 0.0], 2)[0].tolist() == [0.0, 0.0]


def test_dorefa_matches_scalar_reference():
    rng = np.random.default_rng(5)
    for _ in range(100):
        w = rng.standard_normal(9)
        k = int(rng.integers(1, 5))
        np.testing.assert_allclose(quantize_dorefa(w, k)[0], dorefa_scalar(w.tolist(), k), atol=1e-15)


def test_dorefa_antisymmetric():
    rng = np.random.default_rng(6)
    w = rng.standard_normal(20)
    # the grid map 2 r / n - 1 is odd only up to one rounding of the final subtraction
    np.testing.assert_allclose(quantize_dorefa(-w, 3)[0], -quantize_dorefa(w, 3)[0], rtol=0, atol=2.3e-16)


def test_dorefa_rejects_bad_bits():
    with pytest.raises(ValueError):
        quantize_dorefa([1.0], 0)


def test_deterministic():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((6, 10))
    for method in MethodId:
        a, _ = quantize_rows(w, method, QuantConfig(bits=2))
        b, _ = quantize_rows(w, method, QuantConfig(bits=2))
        assert np.array_equal(a, b)


def test_layer_quantization_backward():
    rng = np.random.default_rng(8)
    t = WeightTensor.from_array(rng.standard_normal((3, 2, 2, 2)))
    g = rng.standard_normal((3, 8))
    wnq = quantize_layer(t, MethodId.Wnq, QuantConfig(bits=2))
    lq = quantize_layer(t, MethodId.LqNet, QuantConfig(bits=2))
    a, b = wnq.backward(g), lq.backward(g)
    assert np.array_equal(b, g)
    diff = a != b
    assert diff.sum() <= 3
    for n in range(3):
        assert set(np.flatnonzero(diff[n])) <= {wnq.rows.max_index[n]}
    assert wnq.to_quantized_layer().num_filters == 3
    with pytest.raises(ValueError):
        quantize_layer(t, MethodId.DoReFa, QuantConfig(bits=2)).to_quantized_layer()
