"""Assignment solver against brute force, and cost recalibration rules."""

import numpy as np
import pytest

from slotosr.matching import brute_force_assign, hungarian
from oracles import scipy_assignment_cost
from slotosr.classifier import recalibrate_cost
from slotosr.autodiff import Tensor
import slotosr.autodiff as ad


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
def test_hungarian_equals_brute_force_small(n):
    rng = np.random.default_rng(n)
    for _ in range(40):
        cost = rng.normal(size=(n, n))
        assert hungarian(cost) == brute_force_assign(cost)


def test_hungarian_matches_scipy_total_cost():
    rng = np.random.default_rng(7)
    for _ in range(30):
        cost = rng.normal(size=(8, 8))
        result = hungarian(cost)
        total = float(cost[np.arange(8), list(result.perm)].sum())
        assert total == pytest.approx(scipy_assignment_cost(cost), abs=1e-9)
        assert result.total == pytest.approx(total, abs=1e-9)


def test_tie_break_prefers_lexicographically_smallest():
    # both diagonals are optimal; lexicographic order must pick (0,1) over (1,0)
    cost = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert tuple(hungarian(cost).perm) == (0, 1)
    assert tuple(brute_force_assign(cost).perm) == (0, 1)


def test_rectangular_inputs_rejected():
    with pytest.raises(ValueError):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        brute_force_assign(np.zeros((2, 3)))


def test_brute_force_size_cap():
    with pytest.raises(ValueError):
        brute_force_assign(np.zeros((9, 9)))


# ---------------------------------------------------------------------------
# cost recalibration

def _as_tensor(cost):
    return Tensor(np.asarray(cost, dtype=np.float64), requires_grad=True)


def test_recalibrate_identity_when_mask_empty():
    rng = np.random.default_rng(0)
    cost = rng.normal(size=(4, 5))
    out = recalibrate_cost(_as_tensor(cost), np.zeros(4, dtype=bool), 100.0)
    np.testing.assert_array_equal(out.values, cost)


def test_recalibrate_scales_masked_rows_only():
    cost = np.ones((3, 4))
    mask = np.array([True, False, True])
    out = recalibrate_cost(_as_tensor(cost), mask, 50.0)
    np.testing.assert_allclose(out.values[0], 50.0)
    np.testing.assert_allclose(out.values[1], 1.0)
    np.testing.assert_allclose(out.values[2], 50.0)


def test_recalibrate_all_rows_masked_scales_everything():
    rng = np.random.default_rng(1)
    cost = rng.normal(size=(4, 4))
    out = recalibrate_cost(_as_tensor(cost), np.ones(4, dtype=bool), 3.0)
    np.testing.assert_allclose(out.values, cost * 3.0)


def test_recalibrate_rejects_nonpositive_weight():
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            recalibrate_cost(_as_tensor(np.ones((2, 2))), np.zeros(2, dtype=bool), bad)


def test_recalibrate_is_differentiable():
    cost = _as_tensor(np.ones((2, 2)))
    out = recalibrate_cost(cost, np.array([True, False]), 10.0)
    ad.backward(ad.tsum(out))
    np.testing.assert_allclose(cost.grad, np.array([[10.0, 10.0], [1.0, 1.0]]))
