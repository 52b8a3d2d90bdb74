"""``cmlab`` command line.

Exit status: 0 on success, 1 when a check fails (verify, check-bounds, failed
sweep points), 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from .. import distillation as ds
from .. import sampler as sp
from ..pf_ode import LearnedMap
from . import experiments as ex
from .config import ConfigError, from_dict, load_config
from .verify import run_verify

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2

SUBCOMMANDS = {
    "verify": "verify",
    "sample": "sample",
    "sweep-kl": "sweep_kl",
    "distill": "distill",
    "check-bounds": "check_bounds",
    "plot": "plot",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmlab", description="Multi-step consistency sampling experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", metavar="PATH", help="YAML experiment config (defaults apply if omitted)")
        s.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
        s.add_argument("--seed", type=int, help="master seed (overrides config)")
        s.add_argument("--workers", type=int, help="worker processes for sweeps")
        if name == "sample":
            s.add_argument("--batch", type=int)
            s.add_argument("--T", type=float, dest="T", help="horizon; the regime then fixes K")
            s.add_argument("--eps-score", type=float)
            s.add_argument("--trace", action="store_true")
            s.add_argument("--approximator", metavar="PATH", help="learned map JSON written by distill")
        if name == "distill":
            s.add_argument("--family", choices=["affine_per_pair", "feature_linear"])
            s.add_argument("--N", type=int, dest="N")
            s.add_argument("--iterations", type=int)
            s.add_argument("--ema-rate", type=float)
            s.add_argument("--solver", choices=["exponential", "euler"])
        if name == "verify":
            s.add_argument("--tolerance-scale", type=float)
            s.add_argument("--negative-control", choices=["none", "mis_signed_score"])
        if name == "plot":
            s.add_argument("--records", metavar="CSV", help="sweep records CSV (default: run the sweep)")
            s.add_argument("--no-svg", action="store_true")
    return p


def _overrides(args) -> dict:
    """CLI flags as a nested config patch; unset flags are skipped."""
    patch = {"experiment": SUBCOMMANDS[args.command]}
    for key, path in [("seed", ("seed",)), ("workers", ("workers",)), ("out", ("output",)),
                      ("batch", ("sampler", "batch")), ("T", ("regime", "T")), ("eps_score", ("score", "eps")),
                      ("family", ("distill", "family")), ("N", ("distill", "N")),
                      ("iterations", ("distill", "iterations")), ("ema_rate", ("distill", "ema_rate")),
                      ("solver", ("distill", "solver")), ("tolerance_scale", ("verify", "tolerance_scale")),
                      ("negative_control", ("verify", "negative_control")), ("records", ("plot", "records"))]:
        v = getattr(args, key, None)
        if v is None:
            continue
        d = patch
        for part in path[:-1]:
            d = d.setdefault(part, {})
        d[path[-1]] = v
    if getattr(args, "trace", False):
        patch.setdefault("sampler", {})["trace"] = True
    if getattr(args, "no_svg", False):
        patch.setdefault("plot", {})["svg"] = False
    return patch


def _merge(base: dict, patch: dict) -> dict:
    out = dict(base)
    for k, v in patch.items():
        out[k] = _merge(out.get(k) or {}, v) if isinstance(v, dict) else v
    return out


def load(args):
    """Config from file plus CLI overrides, and the raw file text for the echo."""
    text, data = "", {}
    if args.config:
        cfg_file = load_config(args.config)  # validates the file on its own first
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
        data = dataclasses.asdict(cfg_file)
    cfg = from_dict(_merge(data, _overrides(args)))
    if args.command == "sample" and cfg.score.mode == "exact" and cfg.score.eps > 0:
        raise ConfigError("--eps-score needs score.mode constant_direction or smooth_field")
    return cfg, text


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _echo(cfg, text, out):
    """Config file copied byte for byte, plus the fully resolved config."""
    if text:
        _write(os.path.join(out, "config.yaml"), text)
    ex.write_json(os.path.join(out, "config_resolved.json"), cfg.to_dict())


def cmd_verify(cfg, out) -> int:
    t0 = time.perf_counter()
    results = run_verify(cfg)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f} s")
    ex.write_json(os.path.join(out, "verify_report.json"),
                  {"passed": not failed, "checks": [r.to_dict() for r in results]})
    return EXIT_CHECK if failed else EXIT_OK


def cmd_sample(cfg, out, approximator_path=None) -> int:
    if approximator_path:
        with open(approximator_path, encoding="utf-8") as fh:
            approx = ds.Approximator.from_json(fh.read())
        target = cfg.build_target()
        sched = ex.build_schedule(cfg, target)
        run = sp.SamplerRun(sched, LearnedMap(approx), cfg.sampler.batch, cfg.seed, target.d, cfg.sampler.init,
                            target, cfg.sampler.trace)
        t0 = time.perf_counter()
        res = sp.run_multistep(run)
        res.meta["wall_seconds"] = time.perf_counter() - t0
        res.meta["schedule"] = sched.to_dict()
        res.meta["approximator"] = os.path.abspath(approximator_path)
    else:
        res = ex.run_sample(cfg)
    _write(os.path.join(out, "samples.csv"), ex.samples_to_csv(res.samples))
    meta = dict(res.meta, config=cfg.to_dict(), config_hash=cfg.config_hash(), stop_time=res.stop_time)
    ex.write_json(os.path.join(out, "samples.meta.json"), meta)
    if res.trace is not None:
        np.savetxt(os.path.join(out, "trace_times.csv"), np.asarray(res.trace_times), header="t", comments="")
        for i, x in enumerate(res.trace):
            _write(os.path.join(out, f"trace_{i:04d}.csv"), ex.samples_to_csv(x))
    print(f"wrote {len(res.samples)} samples at t={res.stop_time:.6g} to {out}")
    return EXIT_OK


def cmd_sweep(cfg, out) -> int:
    records = ex.run_sweep_kl(cfg)
    _write(os.path.join(out, "sweep_kl.csv"), ex.records_to_csv(records))
    n_failed = sum(r.status != "ok" for r in records)
    for r in records:
        print(f"T={r.T:g} eps={r.eps_score:g} K={r.K} kl={r.kl_measured:.4e} bound={r.kl_bound:.4e} {r.status} {r.error}")
    return EXIT_CHECK if n_failed else EXIT_OK


def cmd_distill(cfg, out) -> int:
    res, grid, report = ex.run_distill(cfg)
    _write(os.path.join(out, "loss_history.csv"), ex.loss_history_csv(res.loss_history))
    _write(os.path.join(out, "approximator.json"), res.approx.to_json())
    ex.write_json(os.path.join(out, "distill_report.json"),
                  {"eps_cd": report.eps_cd, "final_loss": float(res.loss_history[-1]) if len(res.loss_history) else None,
                   "knots": grid.knots})
    print(f"eps_cd={report.eps_cd:.3e}; approximator written to {os.path.join(out, 'approximator.json')}")
    return EXIT_OK


def cmd_check_bounds(cfg, out) -> int:
    rows = ex.run_check_bounds(cfg)
    _write(os.path.join(out, "check_bounds.csv"), ex.bounds_to_csv(rows))
    for r in rows:
        print(f"[{'PASS' if r.satisfied else 'FAIL'}] {r.name}: lhs={r.lhs:.4e} (se {r.lhs_stderr:.1e}) rhs={r.rhs:.4e} {r.note}")
    return EXIT_OK if all(r.satisfied for r in rows) else EXIT_CHECK


def cmd_plot(cfg, out) -> int:
    if cfg.plot.records:
        with open(cfg.plot.records, encoding="utf-8") as fh:
            records = ex.records_from_csv(fh.read())
    else:
        records = ex.run_sweep_kl(cfg)
    for path in ex.emit_plot_data(records, out, svg=cfg.plot.svg):
        print(path)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, text = load(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = cfg.output
    try:
        os.makedirs(out, exist_ok=True)
        _echo(cfg, text, out)
        if args.command == "verify":
            return cmd_verify(cfg, out)
        if args.command == "sample":
            return cmd_sample(cfg, out, args.approximator)
        if args.command == "sweep-kl":
            return cmd_sweep(cfg, out)
        if args.command == "distill":
            return cmd_distill(cfg, out)
        if args.command == "check-bounds":
            return cmd_check_bounds(cfg, out)
        return cmd_plot(cfg, out)
    except (ValueError, KeyError, OSError, sp.SamplerError, ds.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
