from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from flycl.errors import ConfigError, DataError, NotApplicableError, ShapeError
from flycl.learners import (
    STRATEGIES,
    ClipConfig,
    CbpState,
    EwcState,
    L2InitState,
    SgdConfig,
    ShrinkPerturbConfig,
    SiState,
    cbp_init,
    cbp_step,
    clip_gradients,
    diagonal_fisher,
    ewc_consolidate,
    ewc_init,
    ewc_penalty_and_grad,
    global_norm,
    l2init_penalty_and_grad,
    make_learner,
    sgd_step,
    shrink_perturb_apply,
    si_accumulate_step,
    si_consolidate,
    si_init,
    si_penalty_and_grad,
)
from flycl.model import DenseLinearHead, DensePreLayer, FlyModel, forward, make_model


def _arr(*v):
    return [np.array(x, dtype=float) for x in v]


def _fd_penalty(fn, params, eps=1e-6):
    out = []
    for p in params:
        num = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + eps
            up = fn(params)[0]
            p[i] = old - eps
            down = fn(params)[0]
            p[i] = old
            num[i] = (up - down) / (2 * eps)
        out.append(num)
    return out


def _rel(a, b):
    a, b = np.concatenate([x.ravel() for x in a]), np.concatenate([x.ravel() for x in b])
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def _random_params(seed, shapes=((3, 4), (4,), (2, 3))):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=s) for s in shapes]


# --------------------------------------------------------------------- SGD


class TestSgd:
    def test_arithmetic(self):
        p = _arr([1.0])
        sgd_step(p, _arr([2.0]), SgdConfig(0.5))
        assert_array_equal(p[0], [0.0])

    def test_zero_gradient_fixed_point(self):
        p = _random_params(0)
        before = [x.copy() for x in p]
        sgd_step(p, [np.zeros_like(x) for x in p], SgdConfig(0.1))
        for a, b in zip(p, before):
            assert_array_equal(a, b)

    def test_two_steps_differ_from_summed_step(self):
        model_a = make_model(6, 3, n_kc=40, degree=2, seed=0)
        model_b = model_a.copy()
        x = np.random.default_rng(0).normal(size=(8, 6))
        y = np.arange(8) % 3
        la, lb = make_learner("sgd", model_a, 0.5), make_learner("sgd", model_b, 0.5)
        la.step(x, y)
        la.step(x, y)
        # one step with the initial gradient doubled
        lb.sgd = SgdConfig(1.0)
        lb.step(x, y)
        assert not np.allclose(model_a.head.weights, model_b.head.weights)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step(_arr([1.0, 2.0]), _arr([1.0]), SgdConfig(0.1))

    @pytest.mark.parametrize("lr", [0.0, -1.0])
    def test_bad_learning_rate(self, lr):
        with pytest.raises(ConfigError):
            SgdConfig(lr)


# -------------------------------------------------------------------- clip


class TestClip:
    def test_below_limit_unchanged(self):
        out = clip_gradients(_arr([3.0, 4.0]), ClipConfig(10.0))
        assert_array_equal(out[0], [3.0, 4.0])

    def test_rescaled(self):
        out = clip_gradients(_arr([3.0, 4.0]), ClipConfig(1.0))
        assert_allclose(out[0], [0.6, 0.8])

    def test_disabled(self):
        out = clip_gradients(_arr([300.0]), ClipConfig())
        assert_array_equal(out[0], [300.0])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 100.0))
    def test_post_clip_norm_bounded(self, seed, limit):
        g = [x * 50 for x in _random_params(seed)]
        out = clip_gradients(g, ClipConfig(limit))
        assert global_norm(out) <= limit * (1 + 1e-12)
        # direction is preserved
        flat_in = np.concatenate([x.ravel() for x in g])
        flat_out = np.concatenate([x.ravel() for x in out])
        assert_allclose(flat_out / np.linalg.norm(flat_out), flat_in / np.linalg.norm(flat_in), atol=1e-12)

    def test_bad_limit(self):
        with pytest.raises(ConfigError):
            ClipConfig(0.0)


# --------------------------------------------------------------------- EWC


class TestEwc:
    def test_single_term(self):
        state = EwcState(4.0, _arr([0.5]), _arr([0.0]), tasks_consolidated=1)
        value, grad = ewc_penalty_and_grad(_arr([2.0]), state)
        assert value == 4.0
        assert_array_equal(grad[0], [4.0])

    def test_anchor_fixed_point(self):
        params = _random_params(1)
        state = EwcState(3.0, [np.ones_like(p) for p in params], [p.copy() for p in params], 1)
        value, grad = ewc_penalty_and_grad(params, state)
        assert value == 0.0
        assert all(np.all(g == 0) for g in grad)

    def test_inactive_before_first_task(self):
        params = _random_params(1)
        value, _ = ewc_penalty_and_grad(params, ewc_init([p + 1 for p in params], 5.0))
        assert value == 0.0

    def test_gradient_matches_finite_differences(self):
        params = _random_params(2)
        rng = np.random.default_rng(3)
        state = EwcState(2.5, [rng.random(p.shape) for p in params], _random_params(4), 1)
        analytic = ewc_penalty_and_grad(params, state)[1]
        numeric = _fd_penalty(lambda ps: ewc_penalty_and_grad(ps, state), params)
        assert _rel(analytic, numeric) < 1e-8


def _logistic_toy():
    # one input feature, two classes, no bias: two parameters
    head = DenseLinearHead(np.array([[0.7], [-0.4]]))
    model = FlyModel([], None, None, head, ablate_kc=True)
    x = np.random.default_rng(0).normal(size=(25, 1))
    return model, x


def _brute_fisher(model, x):
    w = model.head.weights
    out = np.zeros_like(w)
    for xi in x:
        z = w @ xi
        p = np.exp(z - z.max())
        p /= p.sum()
        for y in range(2):
            g = np.outer(p - np.eye(2)[y], xi)
            out += p[y] * g * g
    return out / len(x)


class TestFisher:
    def test_matches_per_sample_oracle(self):
        model, x = _logistic_toy()
        fisher = diagonal_fisher(model, x)
        assert_allclose(fisher[0], _brute_fisher(model, x), rtol=1e-12)

    def test_sampled_is_unbiased(self):
        model, x = _logistic_toy()
        rng = np.random.default_rng(1)
        draws = np.mean([diagonal_fisher(model, x, rng=rng)[0] for _ in range(2000)], axis=0)
        assert_allclose(draws, _brute_fisher(model, x), rtol=0.05)

    def test_zero_gradient_parameter(self):
        # an input column that is always zero never receives gradient
        model = FlyModel([], None, None, DenseLinearHead(np.ones((3, 2))), ablate_kc=True)
        x = np.column_stack([np.random.default_rng(0).normal(size=10), np.zeros(10)])
        fisher = diagonal_fisher(model, x)[0]
        assert np.all(fisher[:, 1] == 0.0)
        assert np.all(fisher[:, 0] > 0.0)

    def test_inactive_expansion_units_get_zero(self):
        model = make_model(8, 3, n_kc=200, degree=3, coding_level=0.01, seed=0)
        x = np.random.default_rng(0).normal(size=(3, 8))
        fisher = diagonal_fisher(model, x)[-1]
        used = np.unique(forward(model, x).active_set)
        assert np.all(np.delete(fisher, used, axis=1) == 0.0)

    def test_consolidating_twice_doubles(self):
        model, x = _logistic_toy()
        state = ewc_init(model.parameters(), 1.0)
        ewc_consolidate(model, x, state)
        once = state.fisher[0].copy()
        ewc_consolidate(model, x, state)
        assert_allclose(state.fisher[0], 2 * once, rtol=1e-15)
        assert state.tasks_consolidated == 2

    def test_empty_data(self):
        model, _ = _logistic_toy()
        with pytest.raises(DataError):
            diagonal_fisher(model, np.zeros((0, 1)))


# ---------------------------------------------------------------------- SI


class TestSi:
    def test_descent_step_sign(self):
        state = si_init(_arr([0.0]), c=1.0)
        si_accumulate_step(state, _arr([2.0]), _arr([-0.1]))
        assert state.omega_running[0][0] == pytest.approx(0.2)

    def test_zero_delta(self):
        state = si_init(_arr([0.0]), c=1.0)
        si_accumulate_step(state, _arr([2.0]), _arr([0.0]))
        assert state.omega_running[0][0] == 0.0

    def test_path_integral_matches_loss_decrease(self):
        # quadratic loss 0.5 theta^T A theta, small SGD steps
        rng = np.random.default_rng(0)
        m = rng.normal(size=(4, 4))
        A = m @ m.T + np.eye(4)
        theta = rng.normal(size=4)
        loss = lambda t: 0.5 * t @ A @ t
        state = si_init([theta], c=1.0)
        start = loss(theta)
        for _ in range(3000):
            g = A @ theta
            delta = -1e-4 * g
            si_accumulate_step(state, [g], [delta])
            theta = theta + delta
        drop = start - loss(theta)
        assert state.omega_running[0].sum() == pytest.approx(drop, rel=1e-3)

    @pytest.mark.parametrize("omega, delta, xi, inc", [
        (0.2, 0.1, 0.01, 10.0),
        (-0.5, 0.1, 0.01, 0.0),
        (0.3, 0.0, 0.01, 30.0),
    ])
    def test_consolidate(self, omega, delta, xi, inc):
        state = si_init(_arr([0.0]), c=1.0, xi=xi)
        state.omega_running[0][...] = omega
        si_consolidate(state, _arr([delta]))
        assert state.Omega[0][0] == pytest.approx(inc)
        assert state.omega_running[0][0] == 0.0
        assert state.anchor[0][0] == delta

    def test_penalty_single_term(self):
        state = SiState(1.0, 1e-3, _arr([0]), _arr([3.0]), _arr([1.0]), _arr([1.0]))
        value, grad = si_penalty_and_grad(_arr([2.0]), state)
        assert value == 3.0
        assert_array_equal(grad[0], [6.0])

    def test_penalty_off_switch(self):
        params = _random_params(5)
        state = si_init(_random_params(6), c=0.0)
        state.Omega = [np.ones_like(p) for p in params]
        assert si_penalty_and_grad(params, state)[0] == 0.0

    def test_penalty_finite_differences(self):
        params = _random_params(7)
        rng = np.random.default_rng(8)
        state = si_init(_random_params(9), c=0.7)
        state.Omega = [rng.random(p.shape) for p in params]
        analytic = si_penalty_and_grad(params, state)[1]
        numeric = _fd_penalty(lambda ps: si_penalty_and_grad(ps, state), params)
        assert _rel(analytic, numeric) < 1e-8

    def test_xi_must_be_positive(self):
        with pytest.raises(ConfigError):
            si_init(_arr([0.0]), c=1.0, xi=0.0)


# ----------------------------------------------------- L2 Init, S&P, CBP


class TestL2Init:
    def test_formula(self):
        value, grad = l2init_penalty_and_grad(_arr([1.0, 2.0]), L2InitState(0.5, _arr([0.0, 0.0])))
        assert value == 2.5
        assert_array_equal(grad[0], [1.0, 2.0])

    def test_at_init(self):
        params = _random_params(0)
        assert l2init_penalty_and_grad(params, L2InitState(3.0, [p.copy() for p in params]))[0] == 0.0


class TestShrinkPerturb:
    def test_formula(self):
        p = _arr([1.0])
        shrink_perturb_apply(p, ShrinkPerturbConfig(0.1, 0.2, _arr([0.5])))
        assert p[0][0] == pytest.approx(1.0)

    def test_identity(self):
        p = _random_params(0)
        before = [x.copy() for x in p]
        shrink_perturb_apply(p, ShrinkPerturbConfig(0.0, 0.0, _random_params(1)))
        for a, b in zip(p, before):
            assert_array_equal(a, b)

    def test_full_reset(self):
        p, w0 = _random_params(0), _random_params(1)
        shrink_perturb_apply(p, ShrinkPerturbConfig(1.0, 1.0, w0))
        for a, b in zip(p, w0):
            assert_array_equal(a, b)

    @pytest.mark.parametrize("shrink, perturb", [(-0.1, 0.0), (1.1, 0.0), (0.5, -1.0)])
    def test_bad_values(self, shrink, perturb):
        with pytest.raises(ConfigError):
            ShrinkPerturbConfig(shrink, perturb, [])


def _cbp_model():
    first = DensePreLayer(np.ones((1, 2)), np.zeros(1))
    second = DensePreLayer(np.array([[1.0], [-2.0]]), np.zeros(2))
    head = DenseLinearHead(np.ones((2, 2)))
    return FlyModel([first, second], None, None, head, ablate_kc=True)


class TestCbp:
    def test_utility_update(self):
        model = _cbp_model()
        state = CbpState(0.9, [np.array([1.0]), np.zeros(2)], [np.zeros(1, int), np.zeros(2, int)], 0.0, 100)
        trace = SimpleNamespace(hidden=[np.array([[2.0]]), np.zeros((1, 2))])
        cbp_step(model, trace, state, np.random.default_rng(0))
        # |h| = 2 and the outgoing weights sum to |1| + |-2| = 3
        assert state.utilities[0][0] == pytest.approx(1.5)

    def test_zero_rate_leaves_model_untouched(self):
        model = make_model(6, 3, ablate_kc=True, hidden=(5,), seed=0)
        before = [p.copy() for p in model.parameters()]
        state = cbp_init(model, replacement_rate=0.0, maturity_threshold=0)
        x = np.random.default_rng(0).normal(size=(4, 6))
        for _ in range(20):
            cbp_step(model, forward(model, x), state, np.random.default_rng(0))
        for a, b in zip(model.parameters(), before):
            assert_array_equal(a, b)
        assert np.any(state.utilities[0] > 0)

    def test_forced_reinit(self):
        model = make_model(6, 3, ablate_kc=True, hidden=(5,), seed=0)
        state = cbp_init(model, replacement_rate=1.0, maturity_threshold=0)
        trace = forward(model, np.random.default_rng(0).normal(size=(4, 6)))
        before = model.pre_layers[0].weights.copy()
        cbp_step(model, trace, state, np.random.default_rng(1))
        # every unit was replaced: ages reset, fresh inputs, outgoing columns zeroed
        assert np.all(state.ages[0] == 0)
        assert not np.any(model.pre_layers[0].weights == before)
        assert np.all(model.pre_layers[0].bias == 0.0)
        assert np.all(model.head.weights == 0.0)

    def test_frozen_projection_never_touched(self):
        model = make_model(6, 3, n_kc=50, degree=2, hidden=(5,), seed=0)
        rows = model.projection.rows.copy()
        state = cbp_init(model, replacement_rate=1.0, maturity_threshold=0)
        cbp_step(model, forward(model, np.ones((2, 6))), state, np.random.default_rng(0))
        assert_array_equal(model.projection.rows, rows)

    def test_needs_pre_layer(self):
        with pytest.raises(NotApplicableError):
            cbp_init(make_model(6, 3, n_kc=20, degree=2, seed=0))


# --------------------------------------------------------------- learners


def _trajectory(strategy, steps=30, **hp):
    model = make_model(8, 3, n_kc=60, degree=3, coding_level=0.1, hidden=(5,), seed=1)
    learner = make_learner(strategy, model, 0.1, **hp)
    data_rng = np.random.default_rng(0)
    rng = np.random.default_rng(2)
    for step in range(steps):
        x = data_rng.normal(size=(6, 8))
        learner.step(x, data_rng.integers(0, 3, size=6), rng=rng)
        if step % 10 == 9:
            learner.end_task(x, rng=rng)
    return model.parameters()


class TestLearners:
    @pytest.mark.parametrize("strategy, hp", [
        ("ewc", {"lam": 0.0}),
        ("si", {"c": 0.0}),
        ("l2init", {"alpha": 0.0}),
        ("snp", {"shrink": 0.0, "perturb": 0.0}),
        ("cbp", {"cbp_rate": 0.0}),
    ])
    def test_off_switch_matches_sgd(self, strategy, hp):
        for a, b in zip(_trajectory(strategy, **hp), _trajectory("sgd")):
            assert_array_equal(a, b)

    def test_regularizers_change_trajectory(self):
        base = _trajectory("sgd")
        for strategy, hp in [("ewc", {"lam": 50.0}), ("si", {"c": 5.0}), ("l2init", {"alpha": 0.5})]:
            got = _trajectory(strategy, **hp)
            assert not all(np.array_equal(a, b) for a, b in zip(got, base)), strategy

    def test_clip_bounds_the_step(self):
        model = make_model(8, 3, n_kc=60, degree=3, coding_level=0.5, seed=0)
        learner = make_learner("sgd", model, 1.0, ClipConfig(0.01))
        before = model.head.weights.copy()
        learner.step(np.full((4, 8), 10.0), np.zeros(4, int))
        assert np.linalg.norm(model.head.weights - before) <= 0.01 + 1e-12

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError):
            make_learner("adam", make_model(4, 2, n_kc=10, degree=2), 0.1)

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_state_round_trip(self, strategy):
        hp = {"lam": 3.0, "c": 0.5, "alpha": 0.1, "shrink": 0.1, "perturb": 0.05, "cbp_rate": 0.1,
              "cbp_maturity": 2}
        model = make_model(8, 3, n_kc=60, degree=3, coding_level=0.1, hidden=(5,), seed=1)
        learner = make_learner(strategy, model, 0.1, **hp)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 8))
        for _ in range(5):
            learner.step(x, np.arange(6) % 3, rng=rng)
        learner.end_task(x, rng=rng)
        clone = make_learner(strategy, model.copy(), 0.1, **{k: 0.0 for k in hp})
        clone.load_state_dict(learner.state_dict())
        a, b = learner.state_dict(), clone.state_dict()
        assert a["scalars"] == b["scalars"]
        for key in a["arrays"]:
            assert_array_equal(a["arrays"][key], b["arrays"][key])
