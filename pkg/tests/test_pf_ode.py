import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmlab import targets as tg
from cmlab.forward_process import make_rng
from cmlab.pf_ode import (ClosedFormAffine, CustomAffine, IntegrationError, IntegratorConfig, Method, OdeOracle,
                          consistency_eval, integrate_trajectory, solver_step_error, solver_step_phi)
from cmlab.score_field import Perturbation, ScoreField

GAUSS4 = tg.TargetDistribution.gaussian([0.0, 0.0], 4.0)
MIX = tg.TargetDistribution([0.3, 0.7], [[-1.5], [1.0]], [0.2, 0.3])
T_SQRT3 = math.log(math.sqrt(3))


def test_closed_form_example_sqrt2():
    x = np.array([[1.0, -2.0]])
    got = consistency_eval(ClosedFormAffine(GAUSS4), 0.0, T_SQRT3, x)
    assert np.allclose(got, math.sqrt(2) * x, rtol=1e-14)
    rk4 = integrate_trajectory(ScoreField.exact(GAUSS4), x, T_SQRT3, 0.0, IntegratorConfig.oracle())
    assert np.allclose(rk4, math.sqrt(2) * x, rtol=1e-8, atol=0)


@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_standard_normal_map_is_identity(tp, dt):
    x = np.array([[0.3, -1.2]])
    target = tg.TargetDistribution.standard_normal(2)
    assert np.allclose(ClosedFormAffine(target).evaluate(tp, tp + dt, x), x, atol=1e-14)


@settings(max_examples=60)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.0, 9.0), st.floats(-2, 2),
       st.floats(0.0, 0.5))
def test_closed_form_semigroup_and_boundary(t2, a, b, c, mu, eps):
    target = tg.TargetDistribution.gaussian([mu], c + 0.01)
    m = ClosedFormAffine(target, [eps])
    t1, t0 = t2 + a, t2 + a + b
    x = np.array([[0.7], [-1.1]])
    assert np.array_equal(m.evaluate(t0, t0, x), x)
    two = m.evaluate(t2, t1, m.evaluate(t1, t0, x))
    assert np.allclose(two, m.evaluate(t2, t0, x), rtol=1e-10, atol=1e-10)


def test_closed_form_with_offset_matches_oracle():
    target = tg.TargetDistribution.gaussian([0.5, -1.0], 0.5)
    field = ScoreField.perturbed(target, Perturbation.constant([0.6, 0.8], 0.1))
    x = make_rng(0).standard_normal((50, 2))
    cf = ClosedFormAffine.for_field(field).evaluate(0.1, 1.7, x)
    ode = OdeOracle(field).evaluate(0.1, 1.7, x)
    assert np.allclose(cf, ode, rtol=1e-9, atol=1e-10)


def test_for_field_rejects_non_affine():
    with pytest.raises(ValueError):
        ClosedFormAffine.for_field(ScoreField.perturbed(GAUSS4, Perturbation.smooth(2, 0.1)))
    with pytest.raises(ValueError):
        ClosedFormAffine(MIX)


def test_point_mass_closed_form_domain():
    target = tg.TargetDistribution.point_mass([1.0])
    m = ClosedFormAffine(target)
    a, b = m.affine_coeffs(0.0, 1.0)  # reaching t' = 0 collapses onto the point
    assert a == 0.0 and b[0] == pytest.approx(1.0)
    with pytest.raises(tg.TargetError):
        OdeOracle(ScoreField.exact(target)).evaluate(0.0, 1.0, [[0.0]])


def test_consistency_eval_rejects_reversed_times():
    with pytest.raises(ValueError):
        consistency_eval(ClosedFormAffine(GAUSS4), 1.0, 0.5, np.zeros((1, 2)))


def test_integrate_zero_length_and_single_point():
    x = np.array([0.4, 0.2])
    assert np.array_equal(integrate_trajectory(ScoreField.exact(GAUSS4), x, 0.7, 0.7), x)
    y = integrate_trajectory(ScoreField.exact(GAUSS4), x, 0.7, 0.2)
    assert y.shape == (2,)


@pytest.mark.parametrize("method,order", [(Method.EULER, 1), (Method.EXPONENTIAL, 1), (Method.RK4, 4)])
def test_integrator_order(method, order):
    field = ScoreField.exact(MIX)
    x = np.array([[0.3], [-1.0], [1.4]])
    exact = integrate_trajectory(field, x, 1.0, 0.5, IntegratorConfig(Method.RK4, 1e-3))
    h = 0.05 if method is Method.RK4 else 0.01
    e1 = np.max(np.abs(integrate_trajectory(field, x, 1.0, 0.5, IntegratorConfig(method, h)) - exact))
    e2 = np.max(np.abs(integrate_trajectory(field, x, 1.0, 0.5, IntegratorConfig(method, h / 2)) - exact))
    assert math.log2(e1 / e2) == pytest.approx(order, abs=0.3)


def test_dense_output_matches_separate_calls():
    field = ScoreField.exact(MIX)
    x = np.array([[0.1], [0.9]])
    end, states = integrate_trajectory(field, x, 1.0, 0.2, knots=[0.5, 0.8])
    assert np.allclose(states[0], integrate_trajectory(field, x, 1.0, 0.5), rtol=1e-12)
    assert np.allclose(end, integrate_trajectory(field, x, 1.0, 0.2), rtol=1e-10)


def test_round_trip_and_semigroup_on_mixture():
    field = ScoreField.exact(MIX)
    x = tg.sample_at(MIX, 1.2, 200, make_rng(1))
    back = integrate_trajectory(field, integrate_trajectory(field, x, 1.2, 0.4), 0.4, 1.2)
    assert np.max(np.abs(back - x) / (1 + np.abs(x))) < 2e-8
    oracle = OdeOracle(field)
    two = oracle.evaluate(0.2, 0.8, oracle.evaluate(0.8, 1.2, x))
    assert np.max(np.abs(two - oracle.evaluate(0.2, 1.2, x)) / (1 + np.abs(two))) < 2e-8


def test_richardson_check_reports_worst():
    stiff = tg.TargetDistribution([0.5, 0.5], [[-1.0], [1.0]], [0.05, 0.05])
    x = tg.sample_at(stiff, 1.0, 200, make_rng(2))
    integrate_trajectory(ScoreField.exact(stiff), x, 1.0, 0.02, IntegratorConfig(Method.RK4, 1e-3, 1e-8, True))
    with pytest.raises(IntegrationError) as info:
        integrate_trajectory(ScoreField.exact(stiff), x, 1.0, 0.02, IntegratorConfig(Method.RK4, 1e-3, 1e-11, True))
    assert 1e-11 < info.value.worst < 1e-8


def test_solver_step_examples():
    x = np.array([[1.0, 0.0]])
    f = ScoreField.exact(GAUSS4)
    assert np.allclose(solver_step_phi(f, x, T_SQRT3, T_SQRT3 - 0.1, Method.EULER), [[1.05, 0.0]], rtol=0, atol=1e-15)
    for m in (Method.EULER, Method.EXPONENTIAL):
        assert np.array_equal(solver_step_phi(f, x, 0.5, 0.5, m), x)
    sn = ScoreField.exact(tg.TargetDistribution.standard_normal(2))
    assert np.allclose(solver_step_phi(sn, x, 1.0, 0.7, Method.EXPONENTIAL), x, atol=1e-15)
    with pytest.raises(ValueError):
        solver_step_phi(f, x, 0.5, 0.6)


def test_euler_step_formula():
    # The step is x + h (x + s(x)), the Euler step of the reverse flow.
    x = np.array([[1.0, 0.0]])
    f = ScoreField.exact(GAUSS4)
    h = 0.1
    s = f(T_SQRT3, x)
    assert np.allclose(s, -x / 2)
    assert np.allclose(solver_step_phi(f, x, T_SQRT3, T_SQRT3 - h, Method.EULER), x + h * (x + s))


def test_solver_step_per_row_times():
    f = ScoreField.exact(MIX)
    x = np.array([[0.2], [1.0]])
    got = solver_step_phi(f, x, np.array([1.0, 0.5]), np.array([0.9, 0.3]))
    assert np.allclose(got[0], solver_step_phi(f, x[:1], 1.0, 0.9)[0])
    assert np.allclose(got[1], solver_step_phi(f, x[1:], 0.5, 0.3)[0])


def test_solver_step_error_vanishes_with_h():
    f = ScoreField.exact(tg.TargetDistribution.gaussian([0.0], 4.0))
    target = f.target
    est = [solver_step_error(f, target, 1.0, h, 2000, make_rng(3), L=1.0) for h in (0.0, 0.1)]
    assert est[0].mean == 0.0 and 0 < est[1].mean <= est[1].bound


def test_custom_affine_offset():
    m = CustomAffine.with_offset(ClosedFormAffine(tg.TargetDistribution.gaussian([0.0], 1.0)), [0.5])
    assert np.allclose(m.evaluate(0.1, 0.4, np.array([[1.0]])), [[1.5]])
    assert np.array_equal(m.evaluate(0.4, 0.4, np.array([[1.0]])), [[1.0]])
