"""Acceptance criteria 1-10, each at its stated tolerance and runtime budget.

Every test records a one-line verdict; ``conftest.py`` prints the lines at the
end of the session. Run standalone with ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import math
import sys
import time

import numpy as np
import pytest

from cmlab import distillation as ds
from cmlab import metrics as mt
from cmlab import sampler as sp
from cmlab import targets as tg
from cmlab.forward_process import build_schedule_nonsmooth, build_schedule_smooth, make_rng
from cmlab.harness.cli import main as cli_main
from cmlab.pf_ode import ClosedFormAffine, IntegratorConfig, OdeOracle, integrate_trajectory, solver_step_error
from cmlab.score_field import Perturbation, ScoreField

VERDICTS: dict[int, str] = {}

GAUSS4 = tg.TargetDistribution.gaussian([0.0], 4.0)
MIXTURE = tg.TargetDistribution([0.3, 0.7], [[-1.5], [1.0]], [0.2, 0.3])


def record(n: int, ok: bool, seconds: float, budget: float, detail: str) -> None:
    within = seconds < budget
    verdict = "PASS" if ok and within else "FAIL"
    VERDICTS[n] = f"criterion {n:2d}: {verdict}  {detail}  [{seconds:.1f} s / budget {budget:g} s]"
    print(VERDICTS[n])
    assert ok, VERDICTS[n]
    assert within, f"criterion {n} exceeded its runtime budget: {VERDICTS[n]}"


def test_c01_initialization_error():
    t0 = time.perf_counter()
    worst_ratio, n = 0.0, 0
    ok = True
    for cov in (0.0, 0.25, 4.0, 16.0):
        for d in (1, 2, 8):
            for mean in (np.zeros(d), np.full(d, 0.5)):
                target = tg.TargetDistribution.gaussian(mean, cov)
                for T in (1.0, 2.0, 4.0, 8.0):
                    law = sp.true_law(target, T)
                    kl = mt.kl_gaussian(law.mean, law.var, np.zeros(d), 1.0)
                    bound = mt.init_bound(d, tg.second_moment(target), T)
                    ok &= kl <= bound
                    worst_ratio = max(worst_ratio, kl / bound)
                    n += 1
    record(1, ok, time.perf_counter() - t0, 1.0, f"{n} cases, max KL/bound = {worst_ratio:.3f}")


def test_c02_oracle_matches_closed_form():
    t0 = time.perf_counter()
    rng = make_rng(2026, 2)
    worst = 0.0
    # 1000 random (t', t, x) spread over several Gaussian targets; per-row times.
    for target in (tg.TargetDistribution.gaussian([1.0, -0.5], 0.25), tg.TargetDistribution.gaussian([0.0], 4.0),
                   tg.TargetDistribution.gaussian([2.0, 0.0, -1.0], 16.0), tg.TargetDistribution.point_mass([0.5])):
        n = 250
        t = rng.uniform(0.05, 4.0, n)
        tp = t * rng.uniform(0.0, 1.0, n)
        if target.has_point_mass:
            tp = np.maximum(tp, 0.01)
        x = tg.sample_at(target, 1.0, n, rng) * rng.uniform(0.5, 2.0, (n, 1))
        got = integrate_trajectory(ScoreField.exact(target), x, t, tp, IntegratorConfig.oracle())
        cf = ClosedFormAffine(target)
        ref = np.array([cf.evaluate(a, b, row) for a, b, row in zip(tp, t, x)])
        rel = np.linalg.norm(got - ref, axis=1) / np.maximum(np.linalg.norm(ref, axis=1), 1e-300)
        worst = max(worst, float(rel.max()))
    record(2, worst < 1e-8, time.perf_counter() - t0, 10.0, f"max relative error = {worst:.2e} (< 1e-8)")


def test_c03_marginal_preservation():
    t0 = time.perf_counter()
    oracle = OdeOracle(ScoreField.exact(MIXTURE), IntegratorConfig.oracle())
    zs = []
    for tp, t in ((0.1, 0.4), (0.5, 0.8), (1.1, 1.5)):
        x = tg.sample_at(MIXTURE, t, 100_000, make_rng(2026, 3, int(100 * t)))
        y = oracle.evaluate(tp, t, x)
        m = tg.marginal_at(MIXTURE, tp)
        zm, zc = mt.moment_zscores(y, m.mean(), m.covariance())
        zs.append(max(abs(float(zm[0])), abs(float(zc[0, 0]))))
    worst = max(zs)
    record(3, worst < 4.0, time.perf_counter() - t0, 60.0,
           "max |z| over mean/var at 3 (t', t) pairs = " + ", ".join(f"{z:.2f}" for z in zs) + " (< 4)")


def _gronwall_lhs(target, tp, hp, eps, n, rng):
    x = tg.sample_at(target, tp + hp, n, rng)
    exact = ScoreField.exact(target)
    pert = ScoreField.perturbed(target, Perturbation.constant([1.0] + [0.0] * (target.d - 1), eps))
    if target.is_gaussian:
        f, fh = ClosedFormAffine.for_field(exact), ClosedFormAffine.for_field(pert)
    else:
        f, fh = OdeOracle(exact), OdeOracle(pert)
    sq = np.sum((f.evaluate(tp, tp + hp, x) - fh.evaluate(tp, tp + hp, x)) ** 2, axis=1)
    return float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(n))


def test_c04_gronwall():
    t0 = time.perf_counter()
    rng = make_rng(2026, 4)
    ok, parts = True, []
    hp = 0.25
    for eps in (0.02, 0.05, 0.1):
        lhs, se = _gronwall_lhs(GAUSS4, 0.5, hp, eps, 10_000, rng)
        rhs = mt.gronwall_bound(hp, eps, smooth=True)
        ok &= lhs - 3 * se <= rhs
        parts.append(f"eps={eps}: {lhs:.2e}<={rhs:.2e}")
    # Non-smooth variant: t' = 0.3, h' = 0.4 < sigma^2_{0.3} / d = 0.451.
    tp, hp_ns = 0.3, 0.4
    assert hp_ns < -math.expm1(-2 * tp) / MIXTURE.d
    for eps in (0.02, 0.05, 0.1):
        lhs, se = _gronwall_lhs(MIXTURE, tp, hp_ns, eps, 10_000, rng)
        rhs = mt.gronwall_bound(hp_ns, eps, smooth=False)
        ok &= lhs - 3 * se <= rhs
        parts.append(f"ns eps={eps}: {lhs:.2e}<={rhs:.2e}")
    record(4, ok, time.perf_counter() - t0, 120.0, "; ".join(parts))


def test_c05_smooth_end_to_end_bound():
    t0 = time.perf_counter()
    d, m2, eps = 2, 2.0, 0.04
    sched = build_schedule_smooth(1.0, d, m2, eps)
    eps_score = eps / math.sqrt(math.log((d + m2) / eps))
    ok = sched.K == 28
    parts = [f"K={sched.K}"]
    for target in (tg.TargetDistribution.standard_normal(2), tg.TargetDistribution.gaussian([1.0, 0.0], 0.5)):
        assert tg.second_moment(target) == pytest.approx(m2)
        field = ScoreField.perturbed(target, Perturbation.constant([1.0, 0.0], eps_score))
        push = sp.gaussian_pushforward(sched, ClosedFormAffine.for_field(field), d)
        law = sp.true_law(target, sched.stop_time)
        kl = mt.kl_gaussian(law.mean, law.var, push.law.mean, push.law.var)
        rhs = mt.theorem_rhs("smooth", d, m2, sched, eps_score, L=1.0).value
        ok &= kl <= rhs and kl <= 2 * eps ** 2
        parts.append(f"KL={kl:.2e} (RHS {rhs:.3e}, 2eps^2 {2 * eps ** 2:.1e})")
    record(5, ok, time.perf_counter() - t0, 10.0, "; ".join(parts))


def test_c06_nonsmooth_end_to_end_bound():
    t0 = time.perf_counter()
    delta, m2 = math.log(2), tg.second_moment(MIXTURE)
    sched = build_schedule_nonsmooth(1, m2, 0.05, delta)
    stop = sched.stop_time
    ok = abs(stop - delta) < 1e-12
    parts = [f"K={sched.K}, t'_0={stop:.4f}"]
    lo, hi = tg.quadrature_bounds(tg.marginal_at(MIXTURE, stop))
    for eps_score in (0.0, 0.05, 0.2):
        field = ScoreField.exact(MIXTURE) if eps_score == 0 else \
            ScoreField.perturbed(MIXTURE, Perturbation.constant([1.0], eps_score))
        dens = sp.density_pushforward_1d(sched, OdeOracle(field, IntegratorConfig()), target=MIXTURE)
        q = mt.kl_quadrature_1d(lambda y: tg.log_density(MIXTURE, stop, y[:, None]), dens.log_density, lo, hi)
        rhs = mt.theorem_rhs("nonsmooth", 1, m2, sched, eps_score, delta=delta).value
        ok &= q.value <= rhs
        parts.append(f"eps={eps_score}: KL={q.value:.2e}<={rhs:.3e}")
    record(6, ok, time.perf_counter() - t0, 300.0, "; ".join(parts))


def _pushforward_kl(target, sched, eps):
    field = ScoreField.exact(target) if eps == 0 else \
        ScoreField.perturbed(target, Perturbation.constant([1.0], eps))
    push = sp.gaussian_pushforward(sched, ClosedFormAffine.for_field(field), target.d)
    law = sp.true_law(target, sched.stop_time)
    return mt.kl_gaussian(law.mean, law.var, push.law.mean, push.law.var)


def test_c07_scaling_regressions():
    t0 = time.perf_counter()
    m2 = tg.second_moment(GAUSS4)
    Ts = np.array([1.0, 2.0, 4.0, 8.0])
    kl_T = np.array([_pushforward_kl(GAUSS4, build_schedule_smooth(1.0, 1, m2, T=T), 0.0) for T in Ts])
    slope = float(np.polyfit(Ts, np.log(kl_T), 1)[0])
    eps = np.array([0.01, 0.02, 0.04, 0.06, 0.08])
    sched = build_schedule_smooth(1.0, 1, m2, T=12.0)
    kl_e = np.array([_pushforward_kl(GAUSS4, sched, e) for e in eps])
    fit = np.polyfit(eps ** 2, kl_e, 1)
    resid = kl_e - np.polyval(fit, eps ** 2)
    r2 = 1.0 - float(np.sum(resid ** 2) / np.sum((kl_e - kl_e.mean()) ** 2))
    ratio = kl_e / eps ** 2
    prop = float(ratio.max() / ratio.min() - 1)
    ok = slope <= -1 + 0.05 and r2 > 0.99 and prop < 0.2
    record(7, ok, time.perf_counter() - t0, 60.0,
           f"slope log KL vs T = {slope:.2f} (<= -0.95); R^2 vs eps^2 = {r2:.6f} (> 0.99); "
           f"KL/eps^2 spread {prop:.1%} (< 20%)")


def test_c08_distillation_benchmark():
    t0 = time.perf_counter()
    grid = ds.TrainGrid.uniform(0.0, 4.6, 64)
    opt = ds.OptimizerConfig(lr=0.1, iterations=2000, batch=64)
    ok, parts = True, []
    for label, eps_score in (("vs empirical", None), ("vs true, eps=0.05", 0.05)):
        field = ScoreField.exact(GAUSS4) if eps_score is None else \
            ScoreField.perturbed(GAUSS4, Perturbation.constant([1.0], eps_score))
        approx = ds.Approximator.identity("affine_per_pair", grid.knots, 1, ema_rate=0.9)
        res = ds.train(approx, field, GAUSS4, grid, opt, make_rng(2026, 8, 0))
        rep = ds.measure_cd_error(res.approx, field, GAUSS4, grid, 4000, make_rng(2026, 8, 1))
        lf = ds.verify_lipschitz(res.approx, GAUSS4, grid.knots[0], grid.knots[-1], 2000, make_rng(2026, 8, 2))
        ref = ClosedFormAffine.for_field(field) if eps_score is None else ClosedFormAffine(GAUSS4)
        rows = ds.gap_vs_bound(res.approx, ref, GAUSS4, grid, eps_cd=rep.eps_cd, L_f=lf.L_f, L=1.0, batch=4000,
                               rng=make_rng(2026, 8, 3), eps_score=eps_score)
        worst = max(r.gap / r.rhs for r in rows)
        ok &= rep.eps_cd < 1e-2 and lf.satisfied and all(r.satisfied for r in rows)
        parts.append(f"{label}: eps_cd={rep.eps_cd:.1e}, L_f={lf.L_f:.2f}<={lf.bound:.0f}, max gap/RHS={worst:.3f}")
    record(8, ok, time.perf_counter() - t0, 300.0, "; ".join(parts))


def test_c09_solver_step_order():
    t0 = time.perf_counter()
    hs = np.array([0.2, 0.1, 0.05, 0.025])
    field = ScoreField.exact(GAUSS4)
    ests = [solver_step_error(field, GAUSS4, 1.0, h, 20_000, make_rng(2026, 9, i), L=1.0) for i, h in enumerate(hs)]
    err = np.array([e.mean for e in ests])
    slope = float(np.polyfit(np.log(hs), np.log(err), 1)[0])
    below = all(e.mean <= e.bound for e in ests)
    record(9, slope >= 2 and below, time.perf_counter() - t0, 60.0,
           f"log-log slope = {slope:.2f} (>= 2); all below e^h L^3 h^2 d: {below}")


def test_c10_invariant_suite(tmp_path, capsys):
    t0 = time.perf_counter()
    code = cli_main(["verify", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    n_fail = out.count("[FAIL]")
    summary = out.strip().splitlines()[-1]
    record(10, code == 0 and n_fail == 0, time.perf_counter() - t0, 300.0, f"exit {code}; {summary}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
