import csv
import io
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kurtq import autodiff as ad
from kurtq.errors import DegenerateTensorError, ParameterError
from kurtq.kure import (is_degenerate, kure_penalty, kurtosis, kurtosis_grad, kurtosis_node,
                        kurtosis_report)
from kurtq.tensor import Normal, Uniform, make_rng, rand_tensor


def exact_kurtosis(values):
    """Population kurtosis in exact rational arithmetic."""
    xs = [Fraction(v) for v in values]
    mu = sum(xs) / len(xs)
    m2 = sum((x - mu) ** 2 for x in xs) / len(xs)
    m4 = sum((x - mu) ** 4 for x in xs) / len(xs)
    return m4 / m2**2


def test_kurtosis_small_examples():
    assert exact_kurtosis([1, 2, 3, 4]) == Fraction(41, 25)
    assert kurtosis(np.array([1, 2, 3, 4], np.float32)) == pytest.approx(1.64, abs=1e-6)
    assert kurtosis(np.array([-1, 1], np.float32)) == pytest.approx(1.0, abs=1e-6)


def test_kurtosis_monte_carlo():
    assert kurtosis(rand_tensor(make_rng(0), (10**6,), Uniform(-1, 1))) == pytest.approx(1.8, abs=0.05)
    assert kurtosis(rand_tensor(make_rng(1), (10**6,), Normal(0, 1))) == pytest.approx(3.0, abs=0.1)


def test_kurtosis_degenerate():
    with pytest.raises(DegenerateTensorError):
        kurtosis(np.array([1.0], np.float32))
    c = np.full(10, 0.3, np.float32)
    assert is_degenerate(c)
    assert kurtosis(c) == 0.0
    np.testing.assert_array_equal(kurtosis_grad(c), np.zeros(10))


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-100, 100)))
def test_kurtosis_at_least_one(t):
    if np.ptp(t) < 1e-2:  # eps=1e-12 perturbs K by ~eps/m2
        return
    assert kurtosis(t) >= 1 - 1e-6


@settings(max_examples=100)
@given(arrays(np.float64, st.integers(3, 40), elements=st.floats(-10, 10)),
       st.floats(-1e3, 1e3))
def test_kurtosis_translation_invariant(t, c):
    if np.ptp(t) < 1e-2:
        return
    assert kurtosis(t + c) == pytest.approx(kurtosis(t), abs=1e-6)


def test_kurtosis_matches_exact_on_random_integers():
    rng = make_rng(7)
    for _ in range(20):
        v = rng.integers(-50, 50, size=int(rng.integers(2, 30)))
        if np.ptp(v) == 0:
            continue
        assert kurtosis(v.astype(np.float64)) == pytest.approx(float(exact_kurtosis(v.tolist())), rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_kurtosis_grad_central_difference(seed):
    x = make_rng(seed).normal(size=256)
    assert ad.grad_check(kurtosis_node, x, 1e-5) < 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_kurtosis_grad_invariances(seed):
    t = make_rng(seed).normal(size=300)
    g = kurtosis_grad(t, eps=0.0)
    l1 = np.abs(g).sum()
    assert abs(g.sum()) <= 1e-6 * l1  # translation invariance
    assert abs(np.dot(g, t)) <= 1e-6 * l1 * np.abs(t).max()  # scale invariance
    assert kurtosis(3.7 * t, eps=0.0) == pytest.approx(kurtosis(t, eps=0.0), rel=1e-12)


def _vars(arrays_):
    tape = ad.Tape()
    return tape, [tape.var(a, name=f"t{i}") for i, a in enumerate(arrays_)]


def test_penalty_examples():
    tape, vs = _vars([np.array([1, 2, 3, 4], np.float64), np.array([-1, 1], np.float64)])
    assert float(kure_penalty(vs, [False, False], "plain_sum").value) == 0.0
    assert float(kure_penalty(vs, [True, True], "plain_sum").value) == pytest.approx(2.64, abs=1e-6)
    tape, vs = _vars([rand_tensor(make_rng(4), (10**4,), Uniform(-1, 1))])
    assert float(kure_penalty(vs, [True], "target_deviation", 1.8).value) < 0.05


def test_penalty_rejects_bad_mask_and_mode():
    tape, vs = _vars([np.arange(4.0)])
    with pytest.raises(ParameterError):
        kure_penalty(vs, [True, False])
    with pytest.raises(ParameterError):
        kure_penalty(vs, [True], mode="mean")


@pytest.mark.parametrize("mode", ["plain_sum", "target_deviation"])
def test_penalty_gradients(mode):
    worst = 0.0
    for seed in range(100):
        rng = make_rng(seed)
        other = rng.normal(size=12)

        def f(v):
            return kure_penalty([v, v.tape.const(other)], [True, True], mode)

        worst = max(worst, ad.grad_check(f, rng.normal(size=16), 1e-5))
    assert worst < 1e-3


def test_excluded_tensor_gets_exactly_zero_gradient():
    rng = make_rng(3)
    tape, vs = _vars([rng.normal(size=50), rng.standard_t(2.5, size=50)])
    grads = ad.backward(tape, kure_penalty(vs, [True, False], "plain_sum"))
    assert np.all(grads["t1"] == 0)
    assert np.any(grads["t0"] != 0)


def test_descent_shapes_normal_towards_uniform():
    t = make_rng(11).normal(size=1000)
    dev = [abs(kurtosis(t) - 1.8)]
    for _ in range(100):
        t = t - 0.5 * 2 * (kurtosis(t) - 1.8) * kurtosis_grad(t)
        dev.append(abs(kurtosis(t) - 1.8))
    assert all(b < a for a, b in zip(dev, dev[1:]))


def test_report_threshold_and_patterns():
    rng = make_rng(0)
    params = {"a.w": rng.normal(size=(20, 20)).astype(np.float32),
              "b.w": rng.uniform(-1, 1, size=(20, 20)).astype(np.float32),
              "c.w": np.zeros((3, 3), np.float32)}
    rep = kurtosis_report(params, threshold=100)
    assert rep.included_names == ["a.w", "b.w"]
    assert rep.excluded_names == ["c.w"]
    rep = kurtosis_report(params, threshold=0)
    assert rep.included_names == []
    rep = kurtosis_report(params, threshold=100, exclusion_patterns=["a.*"])
    assert rep.included_names == ["b.w"]
    assert rep.mask(["b.w", "a.w", "zz"]) == [True, False, False]


def test_report_csv_format():
    params = {"x.w": np.array([[1, 2], [3, 4]], np.float32)}
    text = kurtosis_report(params).to_csv()
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["name", "numel", "min", "max", "mean", "std", "kurtosis", "included"]
    assert rows[1] == ["x.w", "4", "1", "4", "2.5", "1.11803401", "1.63999999", "true"]
