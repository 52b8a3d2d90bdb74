import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmlab import targets as tg
from cmlab.forward_process import make_rng
from cmlab.score_field import Perturbation, ScoreField, effective_lipschitz, measure_score_error

MIX = tg.TargetDistribution([0.3, 0.7], [[-1.5], [1.0]], [0.2, 0.3])


def test_exact_field_is_true_score():
    x = make_rng(0).standard_normal((20, 1))
    assert np.array_equal(ScoreField.exact(MIX)(0.5, x), tg.score(MIX, 0.5, x))


@given(st.floats(0.0, 1.0), st.lists(st.floats(-5, 5), min_size=2, max_size=2).filter(lambda v: np.hypot(*v) > 1e-3))
def test_constant_direction_error_is_exactly_eps(eps, u):
    target = tg.TargetDistribution.gaussian([0.0, 0.0], 1.0)
    field = ScoreField.perturbed(target, Perturbation.constant(u, eps))
    x = make_rng(1).standard_normal((10, 2))
    err = np.linalg.norm(field(0.3, x) - tg.score(target, 0.3, x), axis=1)
    assert np.allclose(err, eps)


def test_constant_direction_mc_band():
    field = ScoreField.perturbed(MIX, Perturbation.constant([1.0], 0.1))
    est = measure_score_error(field, MIX, 0.5, 1000, make_rng(0))
    assert est.mean == pytest.approx(0.01, abs=1e-12)


@settings(max_examples=25)
@given(st.integers(1, 4), st.floats(0.01, 1.0), st.floats(0.1, 5.0), st.integers(0, 100))
def test_smooth_field_bounded_and_lipschitz(d, eps, freq, seed):
    p = Perturbation.smooth(d, eps, freq, seed)
    rng = make_rng(seed)
    x, y = rng.standard_normal((200, d)) * 3, rng.standard_normal((200, d)) * 3
    gx, gy = p(0.0, x), p(0.0, y)
    assert np.all(np.linalg.norm(gx, axis=1) <= eps + 1e-12)
    ratio = np.linalg.norm(gx - gy, axis=1) / np.linalg.norm(x - y, axis=1)
    assert np.all(ratio <= p.lipschitz + 1e-12)


def test_smooth_field_error_below_eps():
    field = ScoreField.perturbed(MIX, Perturbation.smooth(1, 0.2, 2.0, 3))
    est = measure_score_error(field, MIX, 0.5, 5000, make_rng(0))
    assert est.mean <= 0.04 + 1e-12


def test_effective_lipschitz_lower_bounds_declared():
    target = tg.TargetDistribution.gaussian([0.5, -0.5], 4.0)
    L = tg.score_lipschitz(target, 0.0, 3.0).value
    est = effective_lipschitz(ScoreField.exact(target, L), np.linspace(0, 3, 5), 300, make_rng(0))
    assert est <= L * (1 + 1e-9)
    assert est == pytest.approx(L, rel=1e-6)  # linear score: every pair hits the slope at t=3


def test_validation():
    with pytest.raises(ValueError):
        Perturbation.constant([0.0, 0.0], 0.1)
    with pytest.raises(ValueError):
        ScoreField.perturbed(MIX, Perturbation.constant([1.0, 0.0], 0.1))
    with pytest.raises(ValueError):
        ScoreField.learned(None)
    with pytest.raises(ValueError):
        measure_score_error(ScoreField.exact(MIX), MIX, 0.5, 10, make_rng(0))


def test_learned_field_and_describe():
    f = ScoreField.learned(lambda t, x: -x, lipschitz=1.0)
    assert np.array_equal(f(0.1, np.ones((2, 1))), -np.ones((2, 1)))
    assert f.describe()["kind"] == "learned" and f.eps == 0.0
    assert math.isclose(ScoreField.perturbed(MIX, Perturbation.constant([1.0], 0.3)).eps, 0.3)
