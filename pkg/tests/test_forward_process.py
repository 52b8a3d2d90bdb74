import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmlab.forward_process import (Regime, Schedule, ScheduleError, build_schedule_nonsmooth, build_schedule_smooth,
                                   make_rng, ou_transition, renoise, sigma2)

times = st.floats(0.0, 20.0, allow_nan=False)


@given(times, st.floats(0.0, 20.0))
def test_shrink_noise_unit_norm(t_from, dt):
    tr = ou_transition(t_from, t_from + dt)
    assert tr.shrink ** 2 + tr.noise_std ** 2 == pytest.approx(1.0, abs=1e-12)
    assert 0 < tr.shrink <= 1 and 0 <= tr.noise_std <= 1


def test_transition_limits():
    assert ou_transition(1.0, 1.0).noise_std == 0.0
    tr = ou_transition(0.0, math.inf)
    assert tr.shrink == 0.0 and tr.noise_std == 1.0
    with pytest.raises(ValueError):
        ou_transition(2.0, 1.0)
    with pytest.raises(ValueError):
        ou_transition(-0.1, 1.0)


@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_transition_semigroup(a, b, c):
    t0, t1, t2 = a, a + b, a + b + c
    x, y, z = ou_transition(t0, t1), ou_transition(t1, t2), ou_transition(t0, t2)
    assert x.shrink * y.shrink == pytest.approx(z.shrink, rel=1e-12)
    var = y.shrink ** 2 * x.noise_std ** 2 + y.noise_std ** 2
    assert var == pytest.approx(z.noise_std ** 2, abs=1e-12)


def test_renoise_moments():
    x = np.full((200_000, 1), 2.0)
    y = renoise(x, 0.3, 1.0, make_rng(0, 1))
    tr = ou_transition(0.3, 1.0)
    assert abs(y.mean() - 2.0 * tr.shrink) < 4 * tr.noise_std / math.sqrt(len(y))
    assert y.var() == pytest.approx(tr.noise_std ** 2, rel=0.02)


def test_renoise_identity_keeps_stream_aligned():
    rng_a, rng_b = make_rng(5), make_rng(5)
    x = np.ones((3, 2))
    assert np.array_equal(renoise(x, 0.5, 0.5, rng_a), x)
    rng_b.standard_normal((3, 2))
    assert rng_a.standard_normal() == rng_b.standard_normal()


def test_make_rng_streams():
    a = make_rng(1, 2).standard_normal(4)
    assert np.array_equal(a, make_rng(1, 2).standard_normal(4))
    assert not np.array_equal(a, make_rng(1, 3).standard_normal(4))


def test_smooth_corollary_schedule():
    s = build_schedule_smooth(1.0, 2, 2.0, 0.04)
    assert s.K == 28
    assert s.T == pytest.approx(math.log(100))
    assert s.t_prime[0] == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(s.h_prime[:-1], 0.25)
    assert np.allclose(s.gaps, 1 / 12)
    assert s.stop_time == s.t[0]


@settings(max_examples=50)
@given(st.floats(1.0, 10.0), st.integers(1, 16), st.floats(0.0, 20.0), st.floats(1e-3, 0.5))
def test_smooth_schedule_always_valid(L, d, m2, eps):
    s = build_schedule_smooth(L, d, m2, eps)
    s.validate()
    assert s.K == math.ceil(3 * (L + 1) * math.log((d + m2) / eps))
    assert np.all(s.h < s.h_prime) and np.all(s.h_prime <= 1 / (2 * (1 + L)) + 1e-15)


@settings(max_examples=50)
@given(st.integers(1, 8), st.floats(0.0, 10.0), st.floats(1e-2, 0.5), st.floats(0.05, 2.0))
def test_nonsmooth_schedule_always_valid(d, m2, eps, delta):
    s = build_schedule_nonsmooth(d, m2, eps, delta)
    s.validate()
    assert s.stop_time == delta
    assert np.all(s.h_prime < sigma2(s.t_prime) / d)


def test_nonsmooth_mixture_schedule():
    s = build_schedule_nonsmooth(1, 1.645, 0.05, math.log(2))
    assert s.K == 16 and s.stops_at_t_prime


@pytest.mark.parametrize("kwargs", [dict(L=0.5, d=1, m2=1, eps=0.1), dict(L=1, d=1, m2=1, eps=0.0),
                                    dict(L=1, d=1, m2=1, eps=5.0), dict(L=1, d=1, m2=1, eps=0.1, gap=0.5)])
def test_smooth_schedule_rejects(kwargs):
    with pytest.raises(ScheduleError):
        build_schedule_smooth(**kwargs)


def test_nonsmooth_rejects_tiny_delta():
    with pytest.raises(ScheduleError):
        build_schedule_nonsmooth(1, 1.0, 0.01, 1e-9)


def test_custom_schedule_validation():
    Schedule.from_times([0.2, 0.5, 0.9], [0.2, 0.5])  # degenerate gap allowed for custom grids
    with pytest.raises(ScheduleError):
        Schedule.from_times([0.2, 0.1], [0.0])
    with pytest.raises(ScheduleError):
        Schedule.from_times([0.2, 0.5], [0.3])


def test_schedule_arrays_read_only_and_csv():
    s = build_schedule_smooth(1.0, 1, 1.0, 0.5)
    with pytest.raises(ValueError):
        s.t[0] = 1.0
    lines = s.to_csv().splitlines()
    assert lines[0] == "k,t_k,t_prime_k,h_k,h_prime_k" and len(lines) == s.K + 2
    assert s.to_dict()["regime"] == Regime.SMOOTH.value
