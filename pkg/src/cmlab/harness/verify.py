"""The invariant suite run by ``cmlab verify``.

Each check returns measured value, threshold and verdict; a check that raises
is reported as failed with the exception text. ``tolerance_scale`` multiplies
the integrator tolerance and the deterministic thresholds, and the
``mis_signed_score`` negative control flips the score used by the ODE oracle
in the marginal-preservation check.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .. import distillation as ds
from .. import metrics as mt
from .. import sampler as sp
from .. import targets as tg
from ..forward_process import (Schedule, build_schedule_nonsmooth, build_schedule_smooth, make_rng,
                               ou_transition, renoise)
from ..pf_ode import (ClosedFormAffine, CustomAffine, IntegrationError, IntegratorConfig, LearnedMap, OdeOracle,
                      consistency_eval, integrate_trajectory)
from ..score_field import Perturbation, ScoreField, effective_lipschitz, measure_score_error
from .config import ExperimentConfig
from .experiments import BENCH_GAUSSIAN, BENCH_MIXTURE


@dataclass
class CheckResult:
    module: str
    name: str
    measured: float
    threshold: float
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"[{verdict}] {self.module}.{self.name}: measured={self.measured:.3e} threshold={self.threshold:.3e}" + \
            (f" ({self.detail})" if self.detail else "")

    def to_dict(self) -> dict:
        return asdict(self)


STIFF_MIXTURE = tg.TargetDistribution([0.5, 0.5], [[-1.0], [1.0]], [0.05, 0.05])


def _rel(a, b):
    return float(np.max(np.linalg.norm(np.atleast_2d(a - b), axis=-1) / np.maximum(np.linalg.norm(np.atleast_2d(b), axis=-1), 1e-300)))


def _check(module, name, fn):
    t0 = time.perf_counter()
    try:
        measured, threshold, detail = fn()
        passed = bool(measured <= threshold)
    except Exception as exc:
        measured, threshold, passed, detail = float("nan"), float("nan"), False, f"{type(exc).__name__}: {exc}"
    return CheckResult(module, name, float(measured), float(threshold), passed, detail, time.perf_counter() - t0)


def run_verify(cfg: ExperimentConfig) -> list[CheckResult]:
    v = cfg.verify
    scale = v.tolerance_scale
    seed = cfg.seed
    integ = IntegratorConfig(cfg.integrator.method, cfg.integrator.substep, cfg.integrator.tolerance * scale)
    n_mc = v.n_mc
    checks = []

    def add(module, name):
        def deco(fn):
            checks.append(_check(module, name, fn))
            return fn
        return deco

    # -- forward_process ------------------------------------------------
    @add("forward_process", "shrink_noise_unit_norm")
    def _():
        ts = np.linspace(0, 6, 61)
        dev = max(abs(tr.shrink ** 2 + tr.noise_std ** 2 - 1)
                  for a in ts for b in ts if a <= b for tr in [ou_transition(a, b)])
        return dev, 1e-12 * scale, "all pairs on a 0.1 grid of [0, 6]"

    @add("forward_process", "schedules_valid")
    def _():
        cases = [build_schedule_smooth(L, d, m2, e) for L, d, m2, e in [(1, 2, 2, 0.04), (3, 10, 10, 0.2), (1, 1, 4, 0.01)]]
        cases += [build_schedule_nonsmooth(d, m2, e, dl) for d, m2, e, dl in [(1, 1, 0.02, math.log(2)), (4, 4, 0.08, math.log(2)), (2, 3, 0.1, 0.05)]]
        for s in cases:
            s.validate()
        return 0.0, 0.0, f"{len(cases)} schedules"

    @add("forward_process", "semigroup_moments")
    def _():
        # Gaussian N(m, v) through t0 -> t1 -> t2 against t0 -> t2.
        m, var = 1.3, 0.7
        worst = 0.0
        for t0, t1, t2 in [(0.0, 0.3, 1.1), (0.2, 0.25, 3.0), (1.0, 2.0, 2.5)]:
            a, b, c = ou_transition(t0, t1), ou_transition(t1, t2), ou_transition(t0, t2)
            m2s, v2s = b.shrink * a.shrink * m, b.shrink ** 2 * (a.shrink ** 2 * var + a.noise_std ** 2) + b.noise_std ** 2
            worst = max(worst, abs(m2s - c.shrink * m), abs(v2s - (c.shrink ** 2 * var + c.noise_std ** 2)))
        return worst, 1e-12 * scale, "closed-form first two moments"

    @add("forward_process", "renoise_identity")
    def _():
        x = np.arange(6.0).reshape(3, 2)
        return float(np.max(np.abs(renoise(x, 0.7, 0.7, make_rng(seed, 1)) - x))), 0.0, "t_from == t_to"

    # -- analytic_targets -----------------------------------------------
    @add("analytic_targets", "score_matches_log_density_fd")
    def _():
        rng = make_rng(seed, 2)
        worst = 0.0
        for target in (BENCH_MIXTURE, tg.TargetDistribution([0.4, 0.6], [[1.0, -1.0], [-0.5, 0.5]], [0.3, 0.8]), BENCH_GAUSSIAN):
            for t in (0.1, 0.5, 1.0, 3.0):
                x = tg.sample_at(target, t, 100, rng)
                eps = 1e-5
                fd = np.stack([(tg.log_density(target, t, x + eps * e) - tg.log_density(target, t, x - eps * e)) / (2 * eps)
                               for e in np.eye(target.d)], axis=1)
                s = tg.score(target, t, x)
                worst = max(worst, float(np.max(np.abs(fd - s) / np.maximum(np.abs(s), 1.0))))
        return worst, 1e-6 * scale, "central differences, 100 points per (target, t)"

    @add("analytic_targets", "hessian_matches_score_fd")
    def _():
        rng = make_rng(seed, 3)
        target = tg.TargetDistribution([0.4, 0.6], [[1.0, -1.0], [-0.5, 0.5]], [0.3, 0.8])
        worst = 0.0
        for t in (0.1, 0.5, 1.0, 3.0):
            x = tg.sample_at(target, t, 50, rng)
            H = tg.score_hessian(target, t, x)
            eps = 1e-5
            for j, e in enumerate(np.eye(target.d)):
                fd = (tg.score(target, t, x + eps * e) - tg.score(target, t, x - eps * e)) / (2 * eps)
                worst = max(worst, float(np.max(np.abs(fd - H[:, :, j]) / np.maximum(np.abs(H[:, :, j]), 1.0))))
        return worst, 1e-6 * scale, "Hessian columns vs score differences"

    @add("analytic_targets", "point_mass_hessian_norm")
    def _():
        d = 3
        target = tg.TargetDistribution.point_mass(np.zeros(d))
        worst = 0.0
        for t in (0.1, 0.5, 2.0):
            s2 = -math.expm1(-2 * t)
            x = tg.sample_at(target, t, 200, make_rng(seed, 4))
            fro = np.linalg.norm(tg.score_hessian(target, t, x), axis=(1, 2))
            worst = max(worst, float(np.max(np.abs(fro - math.sqrt(d) / s2))))
            if np.any(fro > d / s2):
                return float("inf"), 0.0, "Frobenius norm above d/sigma^2"
        return worst, 1e-10 * scale, "||H||_F == sqrt(d)/sigma_t^2 <= d/sigma_t^2"

    @add("analytic_targets", "marginal_at_zero_identity")
    def _():
        m = tg.marginal_at(BENCH_MIXTURE, 0.0)
        return float(max(np.max(np.abs(m.means - BENCH_MIXTURE.means)),
                         np.max(np.abs(m.variances - BENCH_MIXTURE.cov_scales)))), 0.0, ""

    # -- score_field ----------------------------------------------------
    @add("score_field", "constant_direction_error_band")
    def _():
        eps = 0.1
        field = ScoreField.perturbed(BENCH_MIXTURE, Perturbation.constant([1.0], eps))
        est = measure_score_error(field, BENCH_MIXTURE, 0.5, n_mc, make_rng(seed, 5))
        return abs(est.mean - eps ** 2), eps ** 2 * 3 / math.sqrt(n_mc), "|measured - eps^2|"

    @add("score_field", "effective_lipschitz_below_declared")
    def _():
        t_vals = np.linspace(0.0, 3.0, 7)
        target = tg.TargetDistribution.gaussian([0.5, -0.5], 4.0)
        declared = tg.score_lipschitz(target, 0.0, 3.0).value
        est = effective_lipschitz(ScoreField.exact(target, declared), t_vals, 500, make_rng(seed, 6))
        return est - declared, 1e-9, f"estimate {est:.6f} vs declared {declared:.6f}"

    # -- pf_ode ---------------------------------------------------------
    @add("pf_ode", "boundary_condition")
    def _():
        rng = make_rng(seed, 7)
        maps = [ClosedFormAffine(BENCH_GAUSSIAN), OdeOracle(ScoreField.exact(BENCH_GAUSSIAN), integ),
                LearnedMap(ds.Approximator.random("feature_linear", [0.0, 1.0, 2.0], 1, make_rng(seed, 70),
                                                  anchors=(0, 1)))]
        worst = 0.0
        for _ in range(100):
            t = float(rng.choice([0.0, 1.0, 2.0]))
            x = rng.standard_normal((1, 1))
            for m in maps:
                worst = max(worst, float(np.max(np.abs(consistency_eval(m, t, t, x) - x))))
        return worst, 0.0, "f(t, t, x) = x for closed-form, oracle and learned maps"

    @add("pf_ode", "oracle_matches_closed_form")
    def _():
        rng = make_rng(seed, 8)
        target = tg.TargetDistribution.gaussian([1.0, -0.5], 0.25)
        t = rng.uniform(0.05, 3.0, 200)
        tp = t * rng.uniform(0.0, 1.0, 200)
        x = 2 * rng.standard_normal((200, 2))
        got = integrate_trajectory(ScoreField.exact(target), x, t, tp, integ)
        cf = ClosedFormAffine(target)
        ref = np.array([cf.evaluate(a, b, xx) for a, b, xx in zip(tp, t, x)])
        return _rel(got, ref), 1e-8 * scale, "RK4 oracle vs affine closed form"

    @add("pf_ode", "richardson_tolerance")
    def _():
        x = tg.sample_at(STIFF_MIXTURE, 1.0, 500, make_rng(seed, 9))
        cfgv = IntegratorConfig(integ.method, integ.substep, integ.tolerance, verify=True)
        try:
            integrate_trajectory(ScoreField.exact(STIFF_MIXTURE), x, 1.0, 0.02, cfgv)
        except IntegrationError as exc:
            return exc.worst, cfgv.tolerance, "Richardson estimate on a narrow mixture"
        return 0.0, cfgv.tolerance, "Richardson estimate within tolerance"

    @add("pf_ode", "semigroup")
    def _():
        oracle = OdeOracle(ScoreField.exact(BENCH_MIXTURE), integ)
        x = tg.sample_at(BENCH_MIXTURE, 1.5, 200, make_rng(seed, 10))
        two = oracle.evaluate(0.2, 0.8, oracle.evaluate(0.8, 1.5, x))
        one = oracle.evaluate(0.2, 1.5, x)
        return _rel(two, one), 2 * integ.tolerance, "f(t'', t', f(t', t, x)) vs f(t'', t, x)"

    @add("pf_ode", "round_trip")
    def _():
        field = ScoreField.exact(BENCH_MIXTURE)
        x = tg.sample_at(BENCH_MIXTURE, 1.2, 200, make_rng(seed, 11))
        back = integrate_trajectory(field, integrate_trajectory(field, x, 1.2, 0.4, integ), 0.4, 1.2, integ)
        return _rel(back, x), 2 * integ.tolerance, "t -> t' -> t"

    @add("pf_ode", "marginal_preservation")
    def _():
        field = ScoreField.exact(BENCH_MIXTURE)
        if v.negative_control == "mis_signed_score":
            field = ScoreField.learned(lambda t, x: -tg.score(BENCH_MIXTURE, t, x), BENCH_MIXTURE)
        oracle = OdeOracle(field, integ)
        t, tp = 1.0, 0.4
        x = tg.sample_at(BENCH_MIXTURE, t, n_mc, make_rng(seed, 12))
        y = oracle.evaluate(tp, t, x)
        m = tg.marginal_at(BENCH_MIXTURE, tp)
        zm, zc = mt.moment_zscores(y, m.mean(), m.covariance())
        return float(max(np.max(np.abs(zm)), np.max(np.abs(zc)))), 4.0, f"z-scores of mean/cov, n={n_mc}"

    # -- sampler --------------------------------------------------------
    @add("sampler", "true_counterpart_exact")
    def _():
        worst = 0.0
        for target in (BENCH_GAUSSIAN, tg.TargetDistribution.gaussian([1.0, 2.0], 0.3)):
            sched = build_schedule_smooth(1.0, target.d, tg.second_moment(target), 0.05)
            push = sp.gaussian_pushforward(sched, ClosedFormAffine(target), target.d, "exact_terminal", target)
            law = sp.true_law(target, sched.stop_time)
            worst = max(worst, float(np.max(np.abs(push.law.mean - law.mean))), abs(push.law.var - law.var))
        return worst, 1e-12 * scale, "pushforward vs closed-form p_{t_0}"

    @add("sampler", "degenerate_gap_reduction")
    def _():
        target = BENCH_GAUSSIAN
        t = np.array([0.2, 0.5, 0.9, 1.4])
        sched = Schedule.from_times(t, t[:-1])
        cmap = ClosedFormAffine(target)
        res = sp.run_multistep(sp.SamplerRun(sched, cmap, 257, seed, 1, "exact_terminal", target))
        x = sp._initial_block(sp.SamplerRun(sched, cmap, 257, seed, 1, "exact_terminal", target), 257, make_rng(seed, 0))
        for k in range(sched.K, 0, -1):
            x = cmap.evaluate(sched.t_prime[k - 1], sched.t[k], x)
        return float(np.max(np.abs(res.samples - x))), 0.0, "t' = t makes renoise the identity"

    @add("sampler", "seed_determinism")
    def _():
        sched = build_schedule_smooth(1.0, 1, 4.0, 0.1)
        run = sp.SamplerRun(sched, ClosedFormAffine(BENCH_GAUSSIAN), 10000, seed, 1)
        a, b = sp.run_multistep(run).samples, sp.run_multistep(run).samples
        return float(np.max(np.abs(a - b))), 0.0, "same run twice"

    # -- distillation ---------------------------------------------------
    @add("distillation", "gradient_fd")
    def _():
        worst = 0.0
        for family in ("affine_per_pair", "feature_linear"):
            target = tg.TargetDistribution.gaussian([0.3, -0.2], 2.0)
            field = ScoreField.exact(target)
            grid = ds.TrainGrid.uniform(0.1, 2.0, 6)
            approx = ds.Approximator.random(family, grid.knots, 2, make_rng(seed, 13), anchors=(0, 2))
            approx.update_ema()
            theta = approx.get_params()
            g = ds.cd_loss(approx, field, target, grid, 32, make_rng(seed, 14)).grad
            idx = make_rng(seed, 15).choice(len(theta), size=min(20, len(theta)), replace=False)
            for i in idx:
                fd = []
                for sgn in (1, -1):
                    th = theta.copy()
                    th[i] += sgn * 1e-5
                    approx.set_params(th)
                    fd.append(ds.cd_loss(approx, field, target, grid, 32, make_rng(seed, 14)).value)
                approx.set_params(theta)
                num = (fd[0] - fd[1]) / 2e-5
                worst = max(worst, abs(num - g[i]) / max(abs(g[i]), abs(num), 1e-8))
        return worst, 1e-5 * scale, "20 coordinates per family"

    @add("distillation", "boundary_structural")
    def _():
        grid = ds.TrainGrid.uniform(0.0, 2.0, 5)
        approx = ds.Approximator.random("feature_linear", grid.knots, 2, make_rng(seed, 16), anchors=(0, 1, 3))
        x = make_rng(seed, 17).standard_normal((50, 2))
        return float(max(np.max(np.abs(approx.evaluate(grid.knots[a], grid.knots[a], x) - x))
                         for a in approx.anchors)), 0.0, "random parameters"

    @add("distillation", "ema_contract")
    def _():
        target = BENCH_GAUSSIAN
        grid = ds.TrainGrid.uniform(0.0, 1.0, 4)
        field = ScoreField.exact(target)
        dev = 0.0
        for mu in (0.0, 1.0):
            approx = ds.Approximator.random("affine_per_pair", grid.knots, 1, make_rng(seed, 18), ema_rate=mu)
            before = approx.ema_scale.copy()
            res = ds.train(approx, field, target, grid, ds.OptimizerConfig(0.05, 3, 8), make_rng(seed, 19))
            ref = res.approx.scale if mu == 0.0 else before
            dev = max(dev, float(np.max(np.abs(res.approx.ema_scale - ref))))
        return dev, 0.0, "mu=0 copies theta, mu=1 freezes theta^-"

    # -- metrics --------------------------------------------------------
    @add("metrics", "kl_gaussian_vs_quadrature")
    def _():
        worst = 0.0
        for (ma, va, mb, vb) in [(0.0, 2.0, 0.0, 1.0), (0.5, 0.7, -0.3, 1.4), (1.0, 1.0, 0.0, 1.0)]:
            exact = mt.kl_gaussian(ma, va, mb, vb)
            q = mt.kl_quadrature_1d(lambda x: -0.5 * (x - ma) ** 2 / va - 0.5 * math.log(2 * math.pi * va),
                                    lambda x: -0.5 * (x - mb) ** 2 / vb - 0.5 * math.log(2 * math.pi * vb),
                                    min(ma, mb) - 10 * math.sqrt(max(va, vb)), max(ma, mb) + 10 * math.sqrt(max(va, vb)),
                                    tol=1e-10)
            worst = max(worst, abs(q.value - exact))
        return worst, 1e-8 * scale, "three Gaussian pairs"

    @add("metrics", "conditional_step_vs_gaussian_kl")
    def _():
        f, fh = np.array([0.3, -1.0]), np.array([0.1, -0.7])
        worst = 0.0
        for tp, t in [(0.2, 0.5), (1.0, 1.1), (0.0, 2.0)]:
            tr = ou_transition(tp, t)
            ref = mt.kl_gaussian(tr.shrink * f, tr.noise_std ** 2, tr.shrink * fh, tr.noise_std ** 2)
            worst = max(worst, abs(float(mt.kl_conditional_step(f, fh, tp, t)) - ref))
        return worst, 1e-12 * scale, ""

    @add("metrics", "chain_bound_dominates")
    def _():
        # Constant offset b added to every exact jump; every term is closed form.
        target = BENCH_GAUSSIAN
        worst = -np.inf
        for K, off in [(10, 0.01), (4, 0.05), (25, 0.002)]:
            t = 1 / 12 + np.arange(K + 1) / 6.0
            sched = Schedule.from_times(t, t[:-1] - 1 / 12)
            cmap = CustomAffine.with_offset(ClosedFormAffine(target), [off])
            push = sp.gaussian_pushforward(sched, cmap, 1, "exact_terminal", target)
            law = sp.true_law(target, sched.stop_time)
            kl = mt.kl_gaussian(law.mean, law.var, push.law.mean, push.law.var)
            steps = [mt.kl_conditional_step([off], [0.0], tp, tk) for tp, tk in zip(sched.t_prime, sched.t[:-1])]
            worst = max(worst, kl - mt.kl_chain_upper_bound(steps))
        return worst, 0.0, "exact KL minus chain bound (must be <= 0)"

    @add("metrics", "init_bound_sweep")
    def _():
        worst = -np.inf
        for cov in (0.0, 0.25, 4.0, 16.0):
            for d in (1, 2, 8):
                target = tg.TargetDistribution.gaussian(np.zeros(d), cov)
                for T in (1.0, 2.0, 4.0, 8.0):
                    law = sp.true_law(target, T)
                    kl = mt.kl_gaussian(law.mean, law.var, np.zeros(d), 1.0)
                    worst = max(worst, kl - mt.init_bound(d, tg.second_moment(target), T))
        return worst, 0.0, "exact KL(p_T || N(0, I)) minus (d + m2) e^{-T}"

    @add("metrics", "gronwall_smooth")
    def _():
        eps, hp = 0.05, 0.25
        field = ScoreField.perturbed(BENCH_GAUSSIAN, Perturbation.constant([1.0], eps))
        true_map, emp_map = ClosedFormAffine(BENCH_GAUSSIAN), ClosedFormAffine.for_field(field)
        x = tg.sample_at(BENCH_GAUSSIAN, 1.0 + hp, n_mc, make_rng(seed, 20))
        gap = np.sum((true_map.evaluate(1.0, 1.0 + hp, x) - emp_map.evaluate(1.0, 1.0 + hp, x)) ** 2, axis=1)
        return float(gap.mean()), mt.gronwall_bound(hp, eps, smooth=True), "E||f - f_hat||^2 at h'=1/4"

    return checks
