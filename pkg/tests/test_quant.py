import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kurtq import autodiff as ad
from kurtq.errors import DimensionError, ParameterError
from kurtq.quant import (ActCalibrator, QTensor, calibrate, compute_scale_maxabs, dequantize,
                         fake_quant, int8_matmul, quantize, quantize_maxabs)
from kurtq.tensor import make_rng, matmul, tensor

finite32 = st.floats(-1e4, 1e4, width=32)


def test_scale_examples():
    assert compute_scale_maxabs(tensor([0.1, -0.2, 1.27])) == pytest.approx(0.01, rel=1e-6)
    assert compute_scale_maxabs(np.zeros(5, np.float32)) == 1.0
    assert compute_scale_maxabs(tensor([-254.0])) == 2.0


def test_quantize_examples():
    q = quantize(tensor([0.1, -0.2, 1.27]), np.float32(0.01))
    np.testing.assert_array_equal(q.values, [10, -20, 127])
    assert q.values.dtype == np.int8
    s = np.float32(0.5)
    np.testing.assert_array_equal(quantize(tensor([2 * s * 127, -2 * s * 127]), s).values, [127, -127])
    np.testing.assert_array_equal(quantize(np.zeros(4, np.float32), 3.0).values, np.zeros(4))


@pytest.mark.parametrize("scale", [0.0, -1.0, np.nan])
def test_quantize_rejects_bad_scale(scale):
    with pytest.raises(ParameterError):
        quantize(tensor([1.0]), scale)
    with pytest.raises(ParameterError):
        fake_quant(tensor([1.0]), scale)


def test_round_half_to_even():
    np.testing.assert_array_equal(quantize(tensor([0.5, 1.5, 2.5, -0.5, -1.5]), 1.0).values,
                                  [0, 2, 2, 0, -2])


def test_dequantize_examples():
    q = QTensor(np.array([10, -20, 127], np.int8), np.float32(0.01))
    np.testing.assert_allclose(dequantize(q), [0.1, -0.2, 1.27], rtol=1e-6)
    np.testing.assert_array_equal(dequantize(QTensor(np.zeros(3, np.int8), np.float32(2))), 0)


@given(arrays(np.float32, st.integers(1, 64), elements=finite32))
def test_round_trip_bound_and_range(t):
    q = quantize_maxabs(t)
    assert q.values.min() >= -127
    err = np.abs(t.astype(np.float64) - dequantize(q).astype(np.float64))
    # half a step plus FP32 rounding of the division and of the product
    assert np.all(err <= q.scale / 2 * (1 + 1e-5) + 1e-6 * np.abs(t))


@given(arrays(np.float32, st.integers(1, 32), elements=finite32),
       st.floats(0.0625, 10, width=32))
def test_quantize_sign_symmetric(t, s):
    np.testing.assert_array_equal(quantize(-t, s).values, -quantize(t, s).values)


def test_fake_quant_examples():
    assert float(fake_quant(tensor([0.104]), 0.01)[0]) == pytest.approx(0.10, abs=1e-7)
    t = make_rng(0).normal(size=100).astype(np.float32)
    s = compute_scale_maxabs(t)
    once = fake_quant(t, s)
    assert fake_quant(once, s).tobytes() == once.tobytes()


def test_fake_quant_ste_gradient():
    tape = ad.Tape()
    x = tape.var(tensor([0.104, 10.0, -1.27, -1.28]))
    up = tensor([2.0, 3.0, 4.0, 5.0])
    loss = ad.total(ad.mul(ad.fake_quant(x, 0.01), up))
    ad.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 4.0, 0.0])


def test_ste_matches_masked_identity():
    rng = make_rng(5)
    t = rng.normal(size=(6, 7)).astype(np.float32)
    s = np.float32(0.01)
    w = rng.normal(size=(6, 7)).astype(np.float32)

    tape = ad.Tape()
    x = tape.var(t)
    ad.backward(tape, ad.total(ad.mul(ad.fake_quant(x, s), w)))
    mask = np.abs(t) <= 127 * s
    np.testing.assert_array_equal(x.grad, w * mask)


def test_int8_matmul_examples():
    s = np.float32(1 / 127)
    a = QTensor(np.array([[127]], np.int8), s)
    out = int8_matmul(a, a)
    assert out.dtype == np.float32
    assert float(out[0, 0]) == pytest.approx(1.0, rel=1e-6)
    z = QTensor(np.zeros((2, 3), np.int8), np.float32(1))
    b = QTensor(np.ones((3, 4), np.int8), np.float32(1))
    np.testing.assert_array_equal(int8_matmul(z, b), np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        int8_matmul(b, b)


def _rel(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-30)


@pytest.mark.parametrize("seed", range(10))
def test_int8_matmul_matches_dequantized_fp32(seed):
    rng = make_rng(seed)
    a = QTensor(rng.integers(-127, 128, (8, 8)).astype(np.int8), np.float32(rng.uniform(1e-3, 1)))
    b = QTensor(rng.integers(-127, 128, (8, 8)).astype(np.int8), np.float32(rng.uniform(1e-3, 1)))
    assert _rel(int8_matmul(a, b), matmul(dequantize(a), dequantize(b))) < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_quantized_domain_equivalence(seed):
    rng = make_rng(100 + seed)
    A = rng.normal(size=(16, 16)).astype(np.float32)
    B = rng.normal(size=(16, 16)).astype(np.float32)
    sa, sb = compute_scale_maxabs(A), compute_scale_maxabs(B)
    ref = matmul(fake_quant(A, sa), fake_quant(B, sb))
    assert _rel(int8_matmul(quantize(A, sa), quantize(B, sb)), ref) < 1e-5


def test_int8_matmul_batched():
    rng = make_rng(9)
    a = QTensor(rng.integers(-127, 128, (2, 3, 4, 5)).astype(np.int8), np.float32(0.1))
    b = QTensor(rng.integers(-127, 128, (2, 3, 5, 6)).astype(np.int8), np.float32(0.2))
    ref = np.matmul(a.values.astype(np.int64), b.values.astype(np.int64)) * (0.1 * 0.2)
    np.testing.assert_allclose(int8_matmul(a, b), ref, rtol=1e-6)


def test_calibrator_examples():
    c = ActCalibrator(decay=1.0)
    for t in ([1.0], [3.0], [2.0]):
        calibrate(c, tensor(t))
    assert c.running_absmax == 3.0

    c = ActCalibrator(decay=0.9)
    calibrate(c, tensor([10.0]))
    calibrate(c, np.zeros(3, np.float32))
    assert c.running_absmax == pytest.approx(9.0)

    c = ActCalibrator()
    calibrate(c, np.zeros(3, np.float32))
    assert c.scale == 1.0


@given(st.lists(arrays(np.float32, 3, elements=finite32), min_size=1, max_size=10))
def test_pure_max_calibrator_is_monotone(batches):
    c = ActCalibrator(decay=1.0)
    last = 0.0
    for b in batches:
        c.update(b)
        assert c.running_absmax >= last
        last = c.running_absmax
    assert c.running_absmax == max(float(np.abs(b).max()) for b in batches)


def test_calibrator_rejects_bad_decay():
    with pytest.raises(ParameterError):
        ActCalibrator(decay=0.0)
