from __future__ import annotations

import math
import pickle
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slowfast_is.errors import DissipativityViolation, ModelError
from slowfast_is.model import (
    ModelParams,
    ModelSpec,
    bistable_h,
    bistable_potential,
    bistable_v1,
    bistable_v1_prime,
    build_bistable_model,
    check_dissipativity,
    constant_cost,
    eta,
    eta_prime,
    zero_cost,
)

reals = st.floats(-8.0, 8.0, allow_nan=False)


def test_eta_values():
    x = np.array([-1.0, 0.0, 1e-4, 0.5, 1.0, 10.0])
    expected = [0.0, 0.0, 0.0, math.exp(-2.0), math.exp(-1.0), math.exp(-0.1)]
    np.testing.assert_allclose(eta(x), expected, rtol=1e-15, atol=0)


@given(st.floats(0.01, 20.0))
def test_eta_prime_matches_finite_difference(x):
    h = 1e-6 * x
    fd = (eta(x + h) - eta(x - h)) / (2 * h)
    assert eta_prime(x) == pytest.approx(fd, rel=1e-6, abs=1e-12)


def test_potential_reference_values():
    assert bistable_v1(0.0) == pytest.approx(0.5, abs=1e-15)
    # exact value of the left well at x = -1
    e1 = math.exp(-1.0)
    assert bistable_v1(-1.0) == pytest.approx(0.5 * (1 - e1) * math.cos(-4 * math.pi / 5), rel=1e-14)
    xs = np.linspace(-2.0, 0.0, 20001)
    assert xs[np.argmin(bistable_v1(xs))] == pytest.approx(-1.072, abs=2e-3)


def test_potential_is_symmetric():
    xs = np.linspace(-5, 5, 1001)
    np.testing.assert_allclose(bistable_v1(xs), bistable_v1(-xs), rtol=0, atol=1e-14)


def test_v1_prime_matches_finite_difference():
    # independent route: central differences of the potential itself
    xs = np.linspace(-4.0, 4.0, 4001)
    h = 1e-6
    fd = (bistable_v1(xs + h) - bistable_v1(xs - h)) / (2 * h)
    np.testing.assert_allclose(bistable_v1_prime(xs), fd, rtol=0, atol=1e-7)


def test_kernels_raise_no_floating_point_warnings():
    x = np.concatenate([np.linspace(-1e-2, 1e-2, 20001), np.linspace(-50, 50, 20001)])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for fn in (eta, eta_prime, bistable_v1, bistable_v1_prime, bistable_h):
            assert np.all(np.isfinite(fn(x)))


def test_cost_reference_values():
    # exact values of the mollified cost; eta((x+2)/w) at x=1 is exp(-1/150), not 1
    w = 0.02
    e = lambda z: math.exp(-1.0 / z) if z > 0 else 0.0  # noqa: E731
    for x in (1.0, 0.0, -1.0, 3.5):
        a, b = e((x + 2) / w), e((4 - x) / w)
        assert bistable_h(x) == pytest.approx(a * b * (x - 1) ** 2 + 10 * (2 - a - b), rel=1e-14)
    assert bistable_h(1.0) == pytest.approx(0.13288987, rel=1e-7)
    assert bistable_h(0.0) == pytest.approx(1.13448881, rel=1e-7)
    assert bistable_h(-3.0) == pytest.approx(20.0 - 10 * math.exp(-1 / 350), rel=1e-14)


@given(reals)
def test_cost_is_nonnegative_and_bounded(x):
    assert 0.0 <= bistable_h(x) <= 20.0 + (x - 1) ** 2


def test_potential_combines_slow_and_coupling_terms():
    assert bistable_potential(0.5, -0.5) == pytest.approx(bistable_v1(0.5) + 0.5)


def test_bistable_model_callbacks(bistable):
    x = np.array([[-1.0], [0.3]])
    y = np.array([[0.0], [1.0]])
    np.testing.assert_allclose(bistable.f(x, y), -bistable_v1_prime(x) - (x - y))
    np.testing.assert_allclose(bistable.g(x, y), x - y)
    np.testing.assert_allclose(bistable.h(x), bistable_h(x[:, 0]))
    assert np.broadcast_to(bistable.alpha1(x), (2, 1, 1)).tolist() == [[[1.0]], [[1.0]]]
    assert bistable.h(x).shape == (2,)


def test_model_pickles(bistable):
    clone = pickle.loads(pickle.dumps(bistable))
    x = np.array([[0.2]])
    assert clone.f(x, x) == bistable.f(x, x)
    assert clone.params == bistable.params


def test_params_validation():
    with pytest.raises(ModelError):
        ModelParams(beta=0.0, epsilon=0.1)
    with pytest.raises(ModelError):
        ModelParams(beta=1.0, epsilon=-1.0)
    with pytest.raises(ModelError):
        ModelParams(beta=1.0, epsilon=0.1, t0=1.0, T=1.0)
    with pytest.raises(ModelError):
        build_bistable_model(ModelParams(1.0, 0.1, x0=(0.0, 0.0)))


def test_with_params_and_cost(bistable):
    m = bistable.with_params(epsilon=0.01)
    assert m.params.epsilon == 0.01 and m.params.beta == 1.0
    c = bistable.with_cost(constant_cost(2.0))
    np.testing.assert_array_equal(c.h(np.zeros((3, 1))), [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(zero_cost()(np.zeros((4, 1))), np.zeros(4))
    with pytest.raises(ModelError):
        constant_cost(-1.0)


def test_dissipativity_probe(bistable):
    # g = x - y contracts at rate exactly 1
    assert check_dissipativity(bistable) == pytest.approx(1.0)
    stuck = ModelSpec(
        bistable.params, bistable.f, lambda x, y: np.zeros_like(y), bistable.alpha1, bistable.alpha2, bistable.h
    )
    with pytest.raises(DissipativityViolation):
        check_dissipativity(stuck)
