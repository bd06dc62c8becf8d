from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slowfast_is.control import zero_control
from slowfast_is.errors import IntegrationDiverged
from slowfast_is.model import ModelParams, ModelSpec, constant_cost
from slowfast_is.simulate import (
    PathState,
    RngStream,
    StepPolicy,
    em_step,
    noise_chunks,
    payoff_log_of,
    run_trajectory,
    simulate_paths,
)


class ConstantControl:
    """u1 = c everywhere, no fast-channel force."""

    def __init__(self, c):
        self.c = float(c)

    def evaluate(self, s, x, y):
        return np.full((x.shape[0], 1), self.c), None, 0


def _linear_model(beta=1.0, eps=0.5, T=1.0):
    """dx = beta^{-1/2} dw1 (no drift), dy = -y/eps ds + noise, h = 0."""
    return ModelSpec(
        ModelParams(beta, eps, 0.0, T, (0.0,), (0.0,)),
        f=lambda x, y: np.zeros_like(x),
        g=lambda x, y: -y,
        alpha1=lambda x: np.ones((1, 1, 1)),
        alpha2=lambda x, y: np.ones((1, 1, 1)),
        h=lambda x: np.zeros(x.shape[0]),
    )


def test_step_policy_rules():
    assert StepPolicy().dt(0.1) == 1e-4
    assert StepPolicy().dt(1e-4) == pytest.approx(1e-5)
    assert StepPolicy(dt_slow=1e-3, dt_rule="fixed").dt(1e-6) == 1e-3
    assert StepPolicy.reference_accuracy().dt(0.001) == pytest.approx(1e-8)
    with pytest.raises(ValueError):
        StepPolicy(dt_rule="adaptive")
    with pytest.raises(ValueError):
        StepPolicy(dt_slow=0.0)


def test_schedule_hits_final_time():
    sched = StepPolicy(dt_slow=0.3, dt_rule="fixed").schedule(0.0, 1.0, 1.0)
    assert sched.n_steps == 4 and sched.partial
    total = sum(sched.step(i)[1] for i in range(sched.n_steps))
    assert total == pytest.approx(1.0, abs=1e-15)
    exact = StepPolicy(dt_slow=1e-4, dt_rule="fixed").schedule(0.0, 1.0, 1.0)
    assert exact.n_steps == 10000 and not exact.partial


def test_em_step_single_matches_batch(bistable):
    single = PathState.initial(bistable)
    batch = PathState.initial(bistable, 3)
    dW1 = np.array([[0.01], [0.02], [-0.03]])
    dW2 = np.array([[0.0], [0.05], [0.01]])
    out = em_step(batch, bistable, None, 1e-3, dW1, dW2)
    for i in range(3):
        one = em_step(single, bistable, None, 1e-3, dW1[i], dW2[i])
        assert one.x[0] == out.x[i, 0] and one.y[0] == out.y[i, 0]
        assert one.cost == out.cost[i]


def test_em_step_formula(bistable):
    p = bistable.params
    st0 = PathState.initial(bistable)
    dt, dw1, dw2 = 1e-3, 0.02, -0.01
    new = em_step(st0, bistable, ConstantControl(0.5), dt, np.array([dw1]), np.array([dw2]))
    x, y = -1.0, 0.0
    f = bistable.f(np.array([[x]]), np.array([[y]]))[0, 0]
    assert new.x[0] == pytest.approx(x + (f - 0.5) * dt + p.beta**-0.5 * dw1, rel=1e-14)
    assert new.y[0] == pytest.approx(y + (x - y) / p.epsilon * dt + (p.beta * p.epsilon) ** -0.5 * dw2, rel=1e-14)
    assert new.log_z == pytest.approx(-math.sqrt(p.beta) * 0.5 * dw1 + 0.5 * p.beta * 0.25 * dt, rel=1e-14)
    assert new.cost == pytest.approx(bistable.h(np.array([[x]]))[0] * dt)
    assert new.s == pytest.approx(dt)


def test_em_step_rejects_bad_input(bistable):
    with pytest.raises(ValueError):
        em_step(PathState.initial(bistable), bistable, None, 0.0, np.zeros(1), np.zeros(1))
    blowup = ModelSpec(
        bistable.params, lambda x, y: np.full_like(x, np.inf), bistable.g, bistable.alpha1, bistable.alpha2, bistable.h
    )
    with pytest.raises(IntegrationDiverged):
        em_step(PathState.initial(blowup), blowup, None, 1e-3, np.zeros(1), np.zeros(1))


def test_streams_are_reproducible_and_distinct():
    a = RngStream(5, 3).generator().standard_normal(8)
    b = RngStream(5, 3).generator().standard_normal(8)
    c = RngStream(5, 4).generator().standard_normal(8)
    d = RngStream(6, 3).generator().standard_normal(8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_noise_chunks_consume_fixed_width():
    chunks = list(noise_chunks(1, [0, 7], n_steps=300, width=3, chunk_steps=128))
    assert [s for s, _ in chunks] == [0, 128, 256]
    z = np.concatenate([c for _, c in chunks], axis=0)
    assert z.shape == (300, 2, 3)
    ref = RngStream(1, 7).generator().standard_normal((300, 3))
    np.testing.assert_array_equal(z[:, 1, :], ref)


def test_paths_do_not_depend_on_batch_composition(bistable):
    policy = StepPolicy(dt_slow=1e-3)
    full = simulate_paths(bistable, None, policy, 11, range(6))
    part = simulate_paths(bistable, None, policy, 11, [4, 5])
    np.testing.assert_array_equal(full.payoff_log[4:], part.payoff_log)
    np.testing.assert_array_equal(full.final.x[4:], part.final.x)


def test_simulation_is_deterministic(bistable):
    policy = StepPolicy(dt_slow=1e-3)
    a = simulate_paths(bistable, None, policy, 3, range(20))
    b = simulate_paths(bistable, None, policy, 3, range(20))
    np.testing.assert_array_equal(a.payoff_log, b.payoff_log)
    np.testing.assert_array_equal(a.final.crossed, b.final.crossed)


def test_zero_field_equals_no_control(bistable):
    policy = StepPolicy(dt_slow=1e-3)
    a = simulate_paths(bistable, None, policy, 3, range(10))
    b = simulate_paths(bistable, zero_control(bistable), policy, 3, range(10))
    np.testing.assert_array_equal(a.payoff_log, b.payoff_log)
    np.testing.assert_array_equal(a.final.x, b.final.x)


def test_run_trajectory_matches_batch(bistable):
    policy = StepPolicy(dt_slow=1e-3)
    state, payoff = run_trajectory(bistable, None, policy, RngStream(9, 2))
    batch = simulate_paths(bistable, None, policy, 9, range(3))
    assert payoff == batch.payoff_log[2]
    assert state.x[0] == batch.final.x[2, 0]
    assert state.s == bistable.params.T


def test_constant_cost_accumulates_exactly():
    m = _linear_model().with_cost(constant_cost(2.0))
    batch = simulate_paths(m, None, StepPolicy(dt_slow=0.01, dt_rule="fixed"), 0, range(5))
    assert np.all(batch.payoff_log == batch.payoff_log[0])
    assert batch.payoff_log[0] == pytest.approx(-2.0, rel=1e-12)


def test_girsanov_weight_for_constant_control():
    # with constant u and zero drift the log weight is -sqrt(b) u W_T + b u^2 T / 2,
    # where W_T is the sum of the drawn increments
    beta, c = 2.0, 0.7
    m = _linear_model(beta=beta)
    policy = StepPolicy(dt_slow=0.01, dt_rule="fixed")
    batch = simulate_paths(m, ConstantControl(c), policy, 4, range(50))
    z = np.concatenate([ch for _, ch in noise_chunks(4, range(50), 100, 2)], axis=0)
    w_T = z[:, :, 0].sum(axis=0) * math.sqrt(0.01)
    expected = -(-math.sqrt(beta) * c * w_T + 0.5 * beta * c * c)
    np.testing.assert_allclose(batch.payoff_log, expected, rtol=1e-10, atol=1e-12)
    # and the slow state is the shifted Brownian motion
    np.testing.assert_allclose(batch.final.x[:, 0], -c + beta**-0.5 * w_T, rtol=1e-10, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.floats(-2.0, 2.0), st.integers(0, 2**32 - 1))
def test_inverse_weight_has_unit_mean(c, seed):
    # E[1/Z] = 1 under the tilted measure; exact Gaussian moments give a tight check
    m = _linear_model()
    batch = simulate_paths(m, ConstantControl(c), StepPolicy(dt_slow=0.05, dt_rule="fixed"), seed, range(4000))
    w = np.exp(batch.payoff_log)
    se = w.std() / math.sqrt(len(w))
    assert abs(w.mean() - 1.0) < 5 * se + 1e-12


def test_crossing_flag(bistable):
    far = bistable.with_params(x0=(0.5,))
    batch = simulate_paths(far, None, StepPolicy(dt_slow=1e-3), 0, range(5))
    assert batch.final.crossed.all()
    m = _linear_model()
    low = simulate_paths(m, ConstantControl(0.0), StepPolicy(dt_slow=0.01, dt_rule="fixed"), 0, range(5), threshold=1e9)
    assert not low.final.crossed.any()


def test_divergence_is_flagged_not_raised(bistable):
    wild = ModelSpec(
        bistable.params, lambda x, y: x**3 * 1e6, bistable.g, bistable.alpha1, bistable.alpha2, bistable.h
    )
    batch = simulate_paths(wild, None, StepPolicy(dt_slow=1e-2, dt_rule="fixed"), 0, range(4))
    assert batch.diverged.all()
    assert np.isnan(batch.payoff_log).all()
    with pytest.raises(IntegrationDiverged):
        run_trajectory(wild, None, StepPolicy(dt_slow=1e-2, dt_rule="fixed"), RngStream(0, 0))


def test_payoff_log_of():
    st0 = PathState(1.0, np.zeros(1), np.zeros(1), np.float64(0.25), np.float64(2.0), np.bool_(False))
    assert payoff_log_of(st0, 3.0) == -6.25
