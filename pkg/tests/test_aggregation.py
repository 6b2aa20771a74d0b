import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eefl.aggregation import (ClientUpdate, ServerOptimizerConfig, ServerState, aggregate_heterogeneous,
                              compute_effective_weights, coverage_counts, fedavg, group_by_exits, server_step,
                              server_step_fedadam, server_step_sgd)
from eefl.exceptions import ConfigurationError, DivergenceError, EEFLError, IntegrityError
from eefl.model import ModelConfig, ParamSet, SubNetSpec, init_model

from oracles import random_update

CFG = ModelConfig(input_dim=3, hidden_dim=4, num_blocks=6, exit_every=2, output_dim=3, frontend_blocks=1)


def _grad(rng, exits=3):
    return random_update(CFG, 0, exits, rng).pseudo_gradient


def test_fedavg_of_identical_updates(rng):
    g = _grad(rng)
    out = fedavg([ClientUpdate(0, SubNetSpec(3), g, 5), ClientUpdate(1, SubNetSpec(3), g.copy(), 9)])
    assert out.allclose(g, rtol=0, atol=1e-15)


def test_fedavg_cancellation(rng):
    g = _grad(rng)
    out = fedavg([ClientUpdate(0, SubNetSpec(3), g, 1), ClientUpdate(1, SubNetSpec(3), -g, 1)])
    assert not out.nonzero_names()


def test_fedavg_by_samples(rng):
    g = _grad(rng)
    out = fedavg([ClientUpdate(0, SubNetSpec(3), g, 1), ClientUpdate(1, SubNetSpec(3), g.zeros_like(), 3)],
                 weighting="by_samples")
    assert out.allclose(g * 0.25, rtol=0, atol=1e-15)


def test_fedavg_errors(rng):
    with pytest.raises(EEFLError):
        fedavg([])
    g = _grad(rng)
    with pytest.raises(ConfigurationError):
        fedavg([ClientUpdate(0, SubNetSpec(3), g, 1)], weighting="median")
    with pytest.raises(IntegrityError):
        fedavg([ClientUpdate(0, SubNetSpec(3), g, 1), ClientUpdate(0, SubNetSpec(3), g, 1)])


def test_homogeneous_reduction_is_bitwise(rng):
    updates = [random_update(CFG, c, 3, rng) for c in rng.permutation(7)]
    assert aggregate_heterogeneous(updates).array_equal(fedavg(updates, "uniform"))


def test_worked_example_three_clients(rng):
    a, b, c = (random_update(CFG, i, i + 1, rng) for i in range(3))
    agg = aggregate_heterogeneous([a, b, c])
    literal = a.pseudo_gradient + b.pseudo_gradient + c.pseudo_gradient
    assert agg.allclose(literal, rtol=0, atol=1e-15)
    counts = coverage_counts([a, b, c])
    assert counts["exit1.weight"] == counts["block1.weight"] == 3
    assert counts["exit2.weight"] == counts["block3.weight"] == 2
    assert counts["exit3.weight"] == counts["block6.bias"] == 1
    for name in agg:
        expected = sum(u.pseudo_gradient[name] for u in (a, b, c) if name in u.pseudo_gradient.subnet_names(u.subnet.exits))
        assert np.allclose(agg[name], expected, rtol=0, atol=1e-15)


def test_group_average_then_sum(rng):
    g1, g2 = random_update(CFG, 0, 1, rng), random_update(CFG, 1, 1, rng)
    h = random_update(CFG, 2, 2, rng)
    expected = (g1.pseudo_gradient + g2.pseudo_gradient) * 0.5 + h.pseudo_gradient
    assert aggregate_heterogeneous([h, g1, g2]).allclose(expected, rtol=0, atol=1e-15)
    assert list(group_by_exits([h, g1, g2])) == [1, 2]


def test_zero_outside_coverage(rng):
    updates = [random_update(CFG, c, int(rng.integers(1, 3)), rng) for c in range(5)]
    agg = aggregate_heterogeneous(updates)
    top = max(u.subnet.exits for u in updates)
    for name in agg.outside_names(top):
        assert not agg[name].any()


def test_integrity_violation_rejected(rng):
    bad = random_update(CFG, 0, 1, rng)
    bad.pseudo_gradient["exit3.bias"] = np.ones(3)
    with pytest.raises(IntegrityError):
        aggregate_heterogeneous([bad])
    with pytest.raises(IntegrityError):
        ClientUpdate(1, SubNetSpec(1), _grad(rng, 1), 0).validate()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 9), alpha=st.floats(-3, 3, allow_nan=False))
def test_permutation_invariance_and_linearity(seed, n, alpha):
    rng = np.random.default_rng(seed)
    updates = [random_update(CFG, int(c), int(rng.integers(1, 4)), rng) for c in rng.choice(100, n, replace=False)]
    agg = aggregate_heterogeneous(updates)
    shuffled = [updates[i] for i in rng.permutation(n)]
    assert aggregate_heterogeneous(shuffled).max_abs_diff(agg) <= 1e-12
    scaled = aggregate_heterogeneous([u.scaled(alpha) for u in updates])
    assert scaled.max_abs_diff(agg * alpha) <= 1e-12 * max(1.0, abs(alpha))


def test_effective_weights_uniform_six_exits():
    rep = compute_effective_weights([SubNetSpec(m) for m in range(1, 7)], 6, 0.01)
    assert rep.xi == pytest.approx([30, 24, 18, 12, 6, 0])
    assert rep.effective_lr == pytest.approx([0.3, 0.24, 0.18, 0.12, 0.06, 0.0])


def test_effective_weights_empty_group():
    rep = compute_effective_weights([1, 1, 2, 4], 4, 1.0)
    assert rep.client_counts == [2, 1, 0, 1] and rep.xi[2] == 0.0
    assert rep.num_clients == 4 and sum(rep.pi) == pytest.approx(1.0)
    assert all((x == 0) == (c == 0) for x, c in zip(rep.xi[:-1], rep.client_counts[:-1]))


def test_effective_weights_one_per_exit(rng):
    updates = [random_update(CFG, m, m, rng) for m in (1, 2, 3)]
    rep = compute_effective_weights(updates, 3, 0.5)
    assert rep.pi == pytest.approx([1 / 3] * 3)
    assert rep.effective_lr == pytest.approx([x * 0.5 for x in rep.xi])


def _state(name="fedavg_sgd", lr=None):
    return ServerState.initial(init_model(CFG), ServerOptimizerConfig(name, lr))


def test_sgd_fixed_point_and_unit_step(rng):
    state = _state(lr=1.0)
    nxt = server_step_sgd(state, state.global_params.zeros_like())
    assert nxt.round == 1 and nxt.global_params.array_equal(state.global_params)
    g = _grad(rng)
    assert server_step_sgd(state, g).global_params.allclose(state.global_params + g, rtol=0, atol=0)


def test_sgd_two_half_steps(rng):
    g = _grad(rng)
    state = _state(lr=0.5)
    twice = server_step_sgd(server_step_sgd(state, g), g)
    assert twice.round == 2 and twice.global_params.allclose(state.global_params + g, rtol=0, atol=1e-15)


def test_sgd_divergence(rng):
    g = _grad(rng)
    g["block1.bias"] = np.array([np.nan, 0, 0, 0])
    with pytest.raises(DivergenceError):
        server_step_sgd(_state(), g)


def test_server_lr_defaults():
    assert ServerOptimizerConfig("fedadam").lr == 0.01
    assert ServerOptimizerConfig("fedavg_sgd").lr == 1.0
    with pytest.raises(ConfigurationError):
        ServerOptimizerConfig("sgd")


def test_fedadam_zero_update():
    state = _state("fedadam")
    nxt = server_step_fedadam(state, state.global_params.zeros_like())
    assert nxt.round == 1 and nxt.global_params.array_equal(state.global_params)
    assert not nxt.adam_m.nonzero_names() and not nxt.adam_v.nonzero_names()


def test_fedadam_constant_update_limit():
    """With a constant delta d the step converges to lr * |d| / (|d| + eps)."""
    state = _state("fedadam")
    d = state.global_params.map(lambda x: np.linspace(-2, 3, x.size).reshape(x.shape) + 0.05)
    for _ in range(3000):
        prev = state.global_params
        state = server_step(state, d)
    step = state.global_params - prev
    opt = state.optimizer
    for name in step:
        expected = opt.lr * d[name] / (np.abs(d[name]) + opt.eps)
        assert np.allclose(step[name], expected, rtol=1e-9, atol=0)


def test_fedadam_is_elementwise():
    state = _state("fedadam")
    d = state.global_params.zeros_like()
    d["exit2.weight"][1, 2] = 0.3
    nxt = server_step_fedadam(state, d)
    changed = nxt.global_params - state.global_params
    assert changed.nonzero_names() == ["exit2.weight"]
    assert np.count_nonzero(changed["exit2.weight"]) == 1
    assert np.count_nonzero(nxt.adam_m.flatten()) == np.count_nonzero(nxt.adam_v.flatten()) == 1


def test_fedadam_moments_persist(rng):
    state = _state("fedadam")
    g = _grad(rng)
    one = server_step_fedadam(state, g)
    two = server_step_fedadam(one, g.zeros_like())
    assert two.adam_m.allclose(one.adam_m * 0.9, rtol=1e-15, atol=0)
    assert two.global_params.max_abs_diff(one.global_params) > 0
