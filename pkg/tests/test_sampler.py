import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmlab import metrics as mt
from cmlab import sampler as sp
from cmlab import targets as tg
from cmlab.forward_process import Schedule, build_schedule_nonsmooth, build_schedule_smooth
from cmlab.pf_ode import ClosedFormAffine, IntegratorConfig, OdeOracle
from cmlab.score_field import Perturbation, ScoreField

GAUSS = tg.TargetDistribution.gaussian([0.5], 4.0)
MIX = tg.TargetDistribution([0.3, 0.7], [[-1.5], [1.0]], [0.2, 0.3])


def _run(sched, cmap, batch, seed, **kw):
    return sp.run_multistep(sp.SamplerRun(sched, cmap, batch, seed, 1, **kw))


def test_seed_determinism_and_block_prefix():
    sched = build_schedule_smooth(1.0, 1, 4.25, 0.1)
    cmap = ClosedFormAffine(GAUSS)
    a = _run(sched, cmap, 10_000, 3).samples
    assert np.array_equal(a, _run(sched, cmap, 10_000, 3).samples)
    # Block i uses stream (seed, i): a smaller batch reproduces the first block exactly.
    assert np.array_equal(a[:sp.BLOCK_SIZE], _run(sched, cmap, sp.BLOCK_SIZE, 3).samples)
    assert not np.array_equal(a, _run(sched, cmap, 10_000, 4).samples)


def test_mc_output_matches_gaussian_pushforward():
    sched = build_schedule_smooth(1.0, 1, 4.25, 0.1)
    field = ScoreField.perturbed(GAUSS, Perturbation.constant([1.0], 0.2))
    cmap = ClosedFormAffine.for_field(field)
    x = _run(sched, cmap, 100_000, 0).samples
    law = sp.gaussian_pushforward(sched, cmap, 1).law
    zm, zc = mt.moment_zscores(x, law.mean, np.eye(1) * law.var)
    assert abs(zm[0]) < 4 and abs(zc[0, 0]) < 4


@settings(max_examples=20, deadline=None)
@given(st.floats(-2, 2), st.floats(0.0, 9.0), st.floats(0.5, 6.0))
def test_true_counterpart_is_exact(mu, c, T):
    target = tg.TargetDistribution.gaussian([mu], c + 0.01)
    sched = build_schedule_smooth(1.0, 1, tg.second_moment(target), T=T)
    push = sp.gaussian_pushforward(sched, ClosedFormAffine(target), 1, "exact_terminal", target)
    law = sp.true_law(target, sched.stop_time)
    assert push.law.mean == pytest.approx(law.mean, abs=1e-12)
    assert push.law.var == pytest.approx(law.var, rel=1e-12)


def test_true_counterpart_mc_on_mixture():
    sched = build_schedule_nonsmooth(1, tg.second_moment(MIX), T=1.5, delta=math.log(2))
    res = sp.run_true_counterpart(sched, MIX, 20_000, 1, cmap=OdeOracle(ScoreField.exact(MIX), IntegratorConfig()))
    m = tg.marginal_at(MIX, sched.stop_time)
    zm, zc = mt.moment_zscores(res.samples, m.mean(), m.covariance())
    assert abs(zm[0]) < 4 and abs(zc[0, 0]) < 4
    assert res.stop_time == sched.t_prime[0]
    with pytest.raises(ValueError):
        sp.run_true_counterpart(sched, MIX, 10, 1)


def test_degenerate_gap_is_plain_chaining():
    t = np.array([0.2, 0.5, 0.9, 1.4])
    sched = Schedule.from_times(t, t[:-1])
    cmap = ClosedFormAffine(GAUSS)
    push = sp.gaussian_pushforward(sched, cmap, 1, "exact_terminal", GAUSS)
    a, b = cmap.affine_coeffs(0.2, 1.4)
    m, v = tg.marginal_params(GAUSS, 1.4)
    assert push.law.mean == pytest.approx(a * m[0] + b, abs=1e-12)
    assert push.law.var == pytest.approx(a * a * v[0], rel=1e-12)


def test_trace_shapes_and_times():
    sched = build_schedule_nonsmooth(1, 1.0, T=1.0, delta=math.log(2))
    res = _run(sched, ClosedFormAffine(GAUSS), 50, 0, trace=True)
    assert len(res.trace) == sched.K + 1 == len(res.trace_times)
    assert res.trace_times[0] == sched.T and res.trace_times[-1] == sched.t_prime[0]
    assert np.array_equal(res.trace[-1], res.samples)


def test_run_validation():
    sched = build_schedule_smooth(1.0, 1, 1.0, 0.1)
    pm = tg.TargetDistribution.point_mass([0.0])
    with pytest.raises(ValueError):
        sp.SamplerRun(sched, ClosedFormAffine(GAUSS), 0, 0, 1)
    with pytest.raises(ValueError):
        sp.SamplerRun(sched, ClosedFormAffine(GAUSS), 10, 0, 1, init="exact_terminal")
    with pytest.raises(ValueError):
        sp.SamplerRun(sched, OdeOracle(ScoreField.exact(pm)), 10, 0, 1)  # t'_0 = 0 below the floor
    with pytest.raises(ValueError):
        sp.SamplerRun(sched, ClosedFormAffine(GAUSS), 10 ** 6, 0, 1, trace=True, trace_cap=1000)


def test_non_finite_state_raises():
    sched = build_schedule_smooth(1.0, 1, 1.0, 0.5)
    bad = OdeOracle(ScoreField.learned(lambda t, x: np.full_like(x, np.nan), GAUSS))
    with pytest.raises(sp.SamplerError):
        _run(sched, bad, 4, 0)


def test_density_pushforward_matches_gaussian():
    field = ScoreField.perturbed(GAUSS, Perturbation.constant([1.0], 0.1))
    cmap = ClosedFormAffine.for_field(field)
    for sched in (build_schedule_smooth(1.0, 1, 4.25, T=2.0), build_schedule_nonsmooth(1, 4.25, T=1.5, delta=0.7)):
        law = sp.gaussian_pushforward(sched, cmap, 1).law
        dens = sp.density_pushforward_1d(sched, cmap, target=GAUSS)
        assert dens.mass == pytest.approx(1.0, abs=1e-6)
        y = np.linspace(-3, 3, 13)
        ref = -0.5 * (y - law.mean[0]) ** 2 / law.var - 0.5 * math.log(2 * math.pi * law.var)
        assert np.allclose(dens.log_density(y), ref, atol=1e-6)
