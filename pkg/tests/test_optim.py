import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerlr import rng
from layerlr.errors import ConfigError, NumericError
from layerlr.optim import (
    SGD,
    AdaGrad,
    LrSchedule,
    Momentum,
    NAG,
    constant,
    layer_multiplier,
    make_optimizer,
    schedule_rate,
)

# High-precision multiplier values (50-digit evaluation of 1 + ln(1 + 1/n)).
MULT_AT_1 = 1.6931471805599453094
MULT_AT_1E_MINUS_6 = 14.815511557963774104


def single_layer(*values):
    return [[np.array(v, dtype=np.float64)] for v in values]


class TestSchedule:
    def test_constant(self):
        s = constant(0.3)
        assert schedule_rate(s, 0) == 0.3
        assert schedule_rate(s, 10 ** 6) == 0.3

    def test_inverse_time_at_zero_is_t0(self):
        s = LrSchedule(kind="inverse-time", t0=0.25, gamma=0.5, p=2.0)
        assert schedule_rate(s, 0) == 0.25

    def test_inverse_time_halving(self):
        s = LrSchedule(kind="inverse-time", t0=0.1, gamma=0.01, p=1.0)
        assert schedule_rate(s, 100) == pytest.approx(0.05, abs=1e-15)

    def test_step_decay_between_milestones(self):
        s = LrSchedule(kind="step-decay", t0=0.001, milestones=(60000, 65000), factor=0.1)
        assert schedule_rate(s, 62000) == pytest.approx(0.0001, rel=1e-12)
        assert schedule_rate(s, 59999) == pytest.approx(0.001, rel=1e-12)
        assert schedule_rate(s, 65000) == pytest.approx(0.00001, rel=1e-12)

    def test_inverse_time_non_increasing(self):
        s = LrSchedule(kind="inverse-time", t0=1.0, gamma=0.3, p=0.7)
        rates = [schedule_rate(s, k) for k in range(0, 2000, 37)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert all(r > 0 for r in rates)

    @pytest.mark.parametrize("bad", [
        dict(kind="warmup"),
        dict(t0=0.0),
        dict(t0=-0.1),
        dict(kind="inverse-time", gamma=-1.0),
        dict(kind="step-decay", factor=0.0),
    ])
    def test_invalid_schedule_rejected(self, bad):
        with pytest.raises(ConfigError):
            LrSchedule(**bad)


class TestLayerMultiplier:
    def test_high_precision_values(self):
        assert abs(layer_multiplier(1.0) - MULT_AT_1) < 1e-9
        assert abs(layer_multiplier(1e-6) - MULT_AT_1E_MINUS_6) < 1e-9

    def test_huge_norm_recovers_plain_rate(self):
        assert abs(layer_multiplier(1e12) - 1.0) < 1e-11
        assert layer_multiplier(1e12) > 1.0

    def test_strictly_decreasing_over_powers_of_ten(self):
        values = [layer_multiplier(10.0 ** i) for i in range(-8, 9)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert all(v > 1.0 for v in values)
        assert abs(layer_multiplier(1e8) - 1.0) < 1e-7

    def test_zero_norm_is_finite_via_floor(self):
        m = layer_multiplier(0.0)
        assert math.isfinite(m)
        assert m == layer_multiplier(0.0, 1e-12)

    def test_negative_norm_rejected(self):
        with pytest.raises(ValueError):
            layer_multiplier(-1.0)

    @given(st.floats(1e-12, 1e12), st.floats(1e-12, 1e12))
    @settings(max_examples=60, deadline=None)
    def test_monotone_property(self, a, b):
        lo, hi = min(a, b), max(a, b)
        if lo < hi:
            assert layer_multiplier(lo) >= layer_multiplier(hi)


class TestSGDStep:
    def test_plain_scalar_step(self):
        params = single_layer([1.0])
        SGD(0.1).step(params, single_layer([2.0]))
        assert params[0][0][0] == pytest.approx(0.8, abs=1e-15)

    def test_zero_gradient_leaves_params(self):
        for layerwise in (False, True):
            params = single_layer([1.0, -2.0])
            before = params[0][0].copy()
            SGD(0.1, layerwise=layerwise).step(params, single_layer([0.0, 0.0]))
            assert np.array_equal(params[0][0], before)

    def test_layerwise_scalar_example(self):
        # ||g|| = 5, multiplier = 1 + ln(1.2); frozen from 50-digit evaluation.
        params = single_layer([1.0, 1.0])
        opt = SGD(0.1, layerwise=True)
        opt.step(params, single_layer([3.0, 4.0]))
        assert params[0][0][0] == pytest.approx(0.64530353296181361214, abs=1e-12)
        assert params[0][0][1] == pytest.approx(0.52707137728241814952, abs=1e-12)

    def test_direction_preserved_and_scaled(self):
        gen = rng.generator(3, 1)
        g = gen.standard_normal(6)
        plain = single_layer(np.zeros(6))
        wrapped = single_layer(np.zeros(6))
        SGD(0.05).step(plain, [[g.copy()]])
        SGD(0.05, layerwise=True).step(wrapped, [[g.copy()]])
        u = -plain[0][0]
        v = -wrapped[0][0]
        cos = float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
        assert abs(cos - 1.0) < 1e-12
        ratio = np.linalg.norm(v) / np.linalg.norm(u)
        assert ratio == pytest.approx(layer_multiplier(float(np.linalg.norm(g))), rel=1e-12)

    def test_scale_response_across_layers(self):
        # Two layers, same direction, norms n and 100n: the small-norm layer
        # moves further by exactly m(n)/m(100n) > 1.
        n = 1e-3
        direction = np.array([0.6, 0.8])
        params = [[np.zeros(2)], [np.zeros(2)]]
        grads = [[n * direction], [100 * n * direction]]
        SGD(1.0, layerwise=True).step(params, grads)
        step_small = np.linalg.norm(params[0][0]) / n
        step_large = np.linalg.norm(params[1][0]) / (100 * n)
        ratio = step_small / step_large
        assert ratio == pytest.approx(layer_multiplier(n) / layer_multiplier(100 * n), rel=1e-12)
        assert ratio > 1.0

    def test_non_finite_gradient_reports_layer_and_iteration(self):
        params = [[np.zeros(2)], [np.zeros(2)]]
        grads = [[np.zeros(2)], [np.array([1.0, np.inf])]]
        opt = SGD(0.1)
        opt.k = 7
        with pytest.raises(NumericError, match="layer 1.*iteration 7"):
            opt.step(params, grads)

    def test_weight_decay_enters_gradient_and_norm(self):
        params = single_layer([2.0])
        opt = SGD(0.1, layerwise=True, weight_decay=0.5)
        opt.step(params, single_layer([1.0]))
        ge = 1.0 + 0.5 * 2.0
        expected = 2.0 - 0.1 * layer_multiplier(ge) * ge
        assert params[0][0][0] == pytest.approx(expected, rel=1e-14)

    def test_bias_separate_splits_norm_groups(self):
        w = np.array([3.0, 4.0])
        b = np.array([0.001])
        params = [[w.copy(), b.copy()]]
        grads = [[np.array([3.0, 4.0]), np.array([0.001])]]
        opt = SGD(1.0, layerwise=True, bias_separate=True)
        opt.step(params, grads)
        # weight group norm 5, bias group norm 1e-3: separate multipliers
        assert params[0][0][0] == pytest.approx(3.0 - layer_multiplier(5.0) * 3.0, rel=1e-12)
        assert params[0][1][0] == pytest.approx(0.001 - layer_multiplier(0.001) * 0.001, rel=1e-12)

    def test_iteration_counter_increments_by_one(self):
        opt = SGD(0.1)
        params = single_layer([1.0])
        for expect in range(5):
            assert opt.k == expect
            opt.step(params, single_layer([0.5]))
        assert opt.k == 5


class TestMomentum:
    def test_mu_zero_is_bitwise_sgd(self):
        gen = rng.generator(5, 2)
        grad_seq = [gen.standard_normal(4) for _ in range(60)]
        a = single_layer(np.ones(4))
        b = single_layer(np.ones(4))
        sgd = SGD(0.07)
        mom = Momentum(0.07, mu=0.0)
        for g in grad_seq:
            sgd.step(a, [[g.copy()]])
            mom.step(b, [[g.copy()]])
        assert np.array_equal(a[0][0], b[0][0])

    def test_two_step_hand_unroll(self):
        params = single_layer([0.0])
        opt = Momentum(0.1, mu=0.9)
        for _ in range(2):
            opt.step(params, single_layer([1.0]))
        assert params[0][0][0] == pytest.approx(-0.29, abs=1e-15)

    def test_zero_gradients_decay_velocity_geometrically(self):
        params = single_layer([0.0])
        opt = Momentum(0.1, mu=0.5)
        opt.step(params, single_layer([1.0]))
        positions = [params[0][0][0]]
        for _ in range(60):
            opt.step(params, single_layer([0.0]))
            positions.append(params[0][0][0])
        # velocity halves every step; x converges to -t * sum of mu^j = -0.2
        assert positions[-1] == pytest.approx(-0.1 * 2.0, abs=1e-15)
        vel = list(opt.velocity.values())[0]
        assert abs(vel[0]) < 1e-18

    def test_invalid_mu_rejected(self):
        with pytest.raises(ConfigError):
            Momentum(0.1, mu=1.1)
        with pytest.raises(ConfigError):
            make_optimizer("nag", 0.1, mu=-0.2)


class TestNAG:
    def test_mu_zero_reduces_to_sgd(self):
        gen = rng.generator(8, 3)
        grad_seq = [gen.standard_normal(3) for _ in range(40)]
        a = single_layer(np.ones(3))
        b = single_layer(np.ones(3))
        sgd = SGD(0.05)
        nag = NAG(0.05, mu=0.0)
        for g in grad_seq:
            sgd.step(a, [[g.copy()]])
            nag.step(b, [[g.copy()]])
        assert np.array_equal(a[0][0], b[0][0])

    def test_first_step_equals_plain_sgd(self):
        a = single_layer([2.0])
        b = single_layer([2.0])
        SGD(0.1).step(a, single_layer([1.5]))
        nag = NAG(0.1, mu=0.9)
        with nag.at_lookahead(b):
            pass  # velocity is zero, lookahead is the same point
        nag.step(b, single_layer([1.5]))
        assert np.array_equal(a[0][0], b[0][0])

    def test_quadratic_two_step_hand_unroll(self):
        # f(x) = x^2/2, grad(x) = x, lookahead grads supplied per Nesterov.
        t, mu, x0 = 0.1, 0.9, 1.0
        params = single_layer([x0])
        opt = NAG(t, mu=mu)
        for _ in range(2):
            with opt.at_lookahead(params):
                g = float(params[0][0][0])
            opt.step(params, single_layer([g]))
        # hand unroll: v1 = -t*x0; x1 = x0 + v1
        v1 = -t * x0
        x1 = x0 + v1
        v2 = mu * v1 - t * (x1 + mu * v1)
        x2 = x1 + v2
        assert params[0][0][0] == pytest.approx(x2, abs=1e-15)

    def test_lookahead_restores_bitwise(self):
        params = single_layer(np.array([0.1, -0.7, 0.3]))
        opt = NAG(0.05, mu=0.8)
        opt.step(params, [[np.array([1.0, 2.0, 3.0])]])
        snapshot = params[0][0].copy()
        with opt.at_lookahead(params):
            assert not np.array_equal(params[0][0], snapshot)
        assert np.array_equal(params[0][0], snapshot)


class TestAdaGrad:
    def test_first_step_is_signed_rate(self):
        params = single_layer([0.0, 0.0])
        AdaGrad(0.1).step(params, single_layer([3.0, -4.0]))
        assert params[0][0][0] == pytest.approx(-0.1, abs=1e-10)
        assert params[0][0][1] == pytest.approx(+0.1, abs=1e-10)

    def test_constant_gradient_step_law(self):
        g = 2.0
        t = 0.1
        params = single_layer([0.0])
        opt = AdaGrad(t)
        prev = 0.0
        for k in range(1, 51):
            opt.step(params, single_layer([g]))
            step = abs(params[0][0][0] - prev)
            prev = params[0][0][0]
            assert step == pytest.approx(t / math.sqrt(k), abs=1e-10)

    def test_zero_gradient_layer_untouched(self):
        params = single_layer([1.0])
        opt = AdaGrad(0.1)
        opt.step(params, single_layer([2.0]))
        acc_before = list(opt.accumulator.values())[0].copy()
        x_before = params[0][0].copy()
        opt.step(params, single_layer([0.0]))
        assert np.array_equal(params[0][0], x_before)
        assert np.array_equal(list(opt.accumulator.values())[0], acc_before)

    def test_accumulator_nondecreasing(self):
        gen = rng.generator(21, 4)
        params = [[gen.standard_normal(5)]]
        opt = AdaGrad(0.05)
        prev = np.zeros(5)
        for _ in range(30):
            opt.step(params, [[gen.standard_normal(5)]])
            acc = list(opt.accumulator.values())[0]
            assert np.all(acc >= prev)
            prev = acc.copy()

    def test_lazy_accumulator_shapes(self):
        opt = make_optimizer("adagrad", 0.1)
        assert opt.accumulator == {}
        params = [[np.zeros((2, 3)), np.zeros(3)], []]
        grads = [[np.ones((2, 3)), np.ones(3)], []]
        opt.step(params, grads)
        shapes = {k: v.shape for k, v in opt.accumulator.items()}
        assert shapes == {(0, 0): (2, 3), (0, 1): (3,)}


class TestMakeOptimizer:
    def test_kinds(self):
        assert isinstance(make_optimizer("sgd", 0.1), SGD)
        assert isinstance(make_optimizer("momentum", 0.1), Momentum)
        assert isinstance(make_optimizer("nag", 0.1), NAG)
        assert isinstance(make_optimizer("adagrad", 0.1), AdaGrad)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_optimizer("adam", 0.1)

    def test_fresh_state(self):
        opt = make_optimizer("sgd", 0.1, layerwise=True)
        assert opt.k == 0
        assert opt.layerwise
        assert opt.state_arrays() == {}

    def test_epsilon_overrides_validated(self):
        with pytest.raises(ConfigError):
            make_optimizer("sgd", 0.1, epsilon_norm=0.0)


def _run_trajectory(opt, steps, grad_seq, start):
    params = [[start.copy()]]
    for g in grad_seq[:steps]:
        if opt.needs_lookahead:
            with opt.at_lookahead(params):
                pass
        opt.step(params, [[g.copy()]])
    return params[0][0]


@pytest.mark.parametrize("kind", ["sgd", "momentum", "nag", "adagrad"])
def test_wrapper_identity_with_forced_multiplier(kind):
    """Forcing m_l = 1 through the hook must reproduce the plain trajectory."""
    gen = rng.generator(33, 5)
    grad_seq = [gen.standard_normal(6) for _ in range(100)]
    start = gen.standard_normal(6)
    schedule = LrSchedule(kind="inverse-time", t0=0.05, gamma=0.001, p=1.0)
    plain = make_optimizer(kind, schedule, layerwise=False)
    forced = make_optimizer(kind, schedule, layerwise=True)
    forced.multiplier_fn = lambda norm, eps: 1.0
    a = _run_trajectory(plain, 100, grad_seq, start)
    b = _run_trajectory(forced, 100, grad_seq, start)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_momentum_mu_zero_bitwise_equals_sgd_long_run():
    gen = rng.generator(40, 6)
    grad_seq = [gen.standard_normal(4) for _ in range(100)]
    start = gen.standard_normal(4)
    a = _run_trajectory(SGD(0.03), 100, grad_seq, start)
    b = _run_trajectory(Momentum(0.03, mu=0.0), 100, grad_seq, start)
    assert np.array_equal(a, b)
