import itertools

import numpy as np
import pytest

from eefl.aggregation import compute_effective_weights
from eefl.exceptions import InfeasibleTargetError, ModelError
from eefl.losses import compound_ee_loss, cross_entropy, ctc_feasible, ctc_loss, log_softmax

from oracles import brute_force_ctc, central_difference, relative_error


def test_cross_entropy_uniform_logits():
    loss, grad = cross_entropy(np.zeros(4), 2)
    assert loss == pytest.approx(np.log(4), abs=1e-12)
    assert np.allclose(grad, [0.25, 0.25, -0.75, 0.25])


def test_cross_entropy_saturates():
    loss, _ = cross_entropy(np.eye(5)[3] * 200.0, 3)
    assert 0.0 <= loss < 1e-80


def test_cross_entropy_gradient_finite_differences(rng):
    logits = rng.normal(size=(4, 6))
    target = rng.integers(0, 6, size=4)
    _, grad = cross_entropy(logits, target)
    numeric = central_difference(lambda: cross_entropy(logits, target)[0], logits)
    assert relative_error(grad, numeric) <= 1e-6


def test_cross_entropy_rejects_bad_input():
    with pytest.raises(ModelError):
        cross_entropy(np.zeros(1), 0)
    with pytest.raises(ModelError):
        cross_entropy(np.zeros(3), 3)


def test_ctc_single_frame_single_token():
    loss, _ = ctc_loss(np.log(np.full((1, 3), 1 / 3)), [2])
    assert loss == pytest.approx(-np.log(1 / 3), abs=1e-12)


def test_ctc_matches_enumeration_t3():
    rng = np.random.default_rng(7)
    lp = log_softmax(rng.normal(size=(3, 3)))
    loss, _ = ctc_loss(lp, [1, 2])
    assert abs(loss - brute_force_ctc(lp, [1, 2])) <= 1e-10


def _feasible_instances(max_T=6, max_U=3, max_V=4):
    for V in range(2, max_V + 1):
        for U in range(0, max_U + 1):
            for target in itertools.product(range(1, V), repeat=U):
                for T in range(1, max_T + 1):
                    yield T, V, list(target)


def test_ctc_exhaustive_small_instances():
    """Every (T<=6, U<=3, V<=4) target: feasible ones match enumeration, others raise."""
    rng = np.random.default_rng(0)
    checked = rejected = 0
    for T, V, target in _feasible_instances():
        lp = log_softmax(rng.normal(size=(T, V)))
        if ctc_feasible(T, target):
            loss, _ = ctc_loss(lp, target)
            assert abs(loss - brute_force_ctc(lp, target)) <= 1e-10, (T, V, target)
            checked += 1
        else:
            assert brute_force_ctc(lp, target) == float("inf")
            with pytest.raises(InfeasibleTargetError):
                ctc_loss(lp, target)
            rejected += 1
    assert checked == 234 and rejected > 0


def test_ctc_gradient_finite_differences():
    rng = np.random.default_rng(3)
    lp = rng.normal(size=(4, 4))
    _, grad = ctc_loss(lp, [1, 3])
    numeric = central_difference(lambda: ctc_loss(lp, [1, 3])[0], lp)
    assert relative_error(grad, numeric, floor=1e-6) <= 1e-4


def test_ctc_long_sequence_is_stable():
    rng = np.random.default_rng(4)
    lp = log_softmax(rng.normal(size=(400, 6)) * 5)
    loss, grad = ctc_loss(lp, rng.integers(1, 6, size=60))
    assert np.isfinite(loss) and loss > 0 and np.isfinite(grad).all()


def test_ctc_is_order_sensitive():
    lp = log_softmax(np.random.default_rng(5).normal(size=(5, 4)))
    assert ctc_loss(lp, [1, 2, 3])[0] != pytest.approx(ctc_loss(lp, [3, 2, 1])[0])


def test_ctc_rejects_blank_and_out_of_range_tokens():
    lp = log_softmax(np.zeros((4, 3)))
    with pytest.raises(ModelError):
        ctc_loss(lp, [0, 1])
    with pytest.raises(ModelError):
        ctc_loss(lp, [3])


def test_repeated_tokens_need_separator():
    assert not ctc_feasible(2, [1, 1]) and ctc_feasible(3, [1, 1])
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(log_softmax(np.zeros((2, 3))), [1, 1])


def _two_exit_logits(seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(3, 1, 4)) for _ in range(2)], rng.integers(0, 4, size=3)


def test_compound_is_sum_of_exits():
    logits, y = _two_exit_logits()
    report, _ = compound_ee_loss(logits, y)
    assert report.compound == pytest.approx(sum(report.per_exit), abs=1e-14)
    assert report.weights == [1.0, 1.0]


def test_masked_exit_has_zero_gradient():
    logits, y = _two_exit_logits()
    report, grads = compound_ee_loss(logits, y, weights=[1.0, 0.0])
    assert not grads[1].any() and grads[0].any()
    assert report.compound == report.per_exit[0]


def test_compound_is_linear_in_weights():
    logits, y = _two_exit_logits(1)
    xi = [0.3, 1.7]
    one, g1 = compound_ee_loss(logits, y, weights=xi)
    two, g2 = compound_ee_loss(logits, y, weights=[2 * w for w in xi])
    assert two.compound == pytest.approx(2 * one.compound, rel=1e-14)
    assert all(np.allclose(b, 2 * a) for a, b in zip(g1, g2))


def test_compound_weight_count_checked():
    logits, y = _two_exit_logits()
    with pytest.raises(ModelError):
        compound_ee_loss(logits, y, weights=[1.0])


def test_effective_weights_as_exit_weights():
    xi = compute_effective_weights(range(1, 7), 6, 1.0).xi
    assert xi == pytest.approx([30, 24, 18, 12, 6, 0])
    rng = np.random.default_rng(2)
    logits = [rng.normal(size=(2, 1, 3)) for _ in range(6)]
    report, grads = compound_ee_loss(logits, [0, 1], weights=xi)
    assert report.compound == pytest.approx(sum(w * l for w, l in zip(xi, report.per_exit)))
    assert not grads[5].any()


def test_ctc_compound_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    logits = [rng.normal(size=(2, 5, 4)) for _ in range(2)]
    targets = [np.array([1, 2]), np.array([3])]
    _, grads = compound_ee_loss(logits, targets, "ctc", weights=[1.0, 0.5])
    for k in range(2):
        numeric = central_difference(lambda: compound_ee_loss(logits, targets, "ctc", [1.0, 0.5])[0].compound, logits[k])
        assert relative_error(grads[k], numeric, floor=1e-6) <= 1e-4
