"""Command line entry points: run, sweep, verify.

Exit codes: 0 success, 1 runtime failure (partial outputs are flushed),
2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .harness import (CSV_HEADER, ConfigError, ExperimentConfig,
                      config_from_strings, load_config, run_experiment)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--model", choices=["lgm", "ngm78", "lorenz96"])
    p.add_argument("--d", type=int)
    p.add_argument("--method")
    p.add_argument("--N", dest="n_particles", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resample", choices=["always", "adaptive"])
    p.add_argument("--kappa", type=float)
    p.add_argument("--train-iters", type=int)
    p.add_argument("--train-m", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--train-mode", choices=["untwisted_chain", "twisted_chain"])
    p.add_argument("--timing", action="store_const", const="true")
    p.add_argument("--out")


def _config_from_args(args) -> ExperimentConfig:
    flags = {k: v for k, v in vars(args).items()
             if k not in ("command", "config", "func") and v is not None}
    if args.config:
        return load_config(args.config, overrides=flags)
    return config_from_strings(flags)


def cmd_run(args) -> int:
    try:
        config = _config_from_args(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    csv_path = Path(config.out + ".csv")
    try:
        with open(csv_path, "w") as sink:
            sink.write(CSV_HEADER + "\n")
            _, summary = run_experiment(config, csv_sink=sink)
    except Exception as exc:   # partial CSV already flushed
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1
    Path(config.out + "_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    stats = summary["per_method"][config.method]
    print(f"{config.method} {config.model} d={config.d}: "
          f"sigma(logZ)={stats['sigma_logz']:.4g} mean(logZ)={stats['mean_logz']:.6g} "
          f"-> {csv_path}")
    return 0


def cmd_sweep(args) -> int:
    methods = [m for m in (args.methods or "").split(",") if m]
    if not methods:
        print("config error: empty method list", file=sys.stderr)
        return 2
    dims = [int(x) for x in (args.d_list or str(args.d or 2)).split(",") if x]
    alphas = [float(x) for x in args.alpha_list.split(",")] if args.alpha_list else [None]
    out = args.out or "sweep"
    failures = 0
    with open(out + ".csv", "w") as sink:
        sink.write(CSV_HEADER + "\n")
        for d in dims:
            for alpha in alphas:
                for method in methods:
                    overrides = {}
                    if alpha is not None:
                        overrides["alpha"] = alpha
                    try:
                        config = ExperimentConfig(
                            model=args.model, d=d, method=method,
                            n_particles=args.n_particles or 512,
                            replicates=args.replicates or 100,
                            seed=args.seed or 0, out=out,
                            train_iters=args.train_iters,
                            model_overrides=overrides)
                        run_experiment(config, csv_sink=sink)
                    except ConfigError as exc:
                        print(f"config error: {exc}", file=sys.stderr)
                        return 2
                    except Exception as exc:
                        failures += 1
                        print(f"cell failed (d={d}, method={method}, "
                              f"alpha={alpha}): {exc}", file=sys.stderr)
    print(f"sweep written to {out}.csv" + (f" ({failures} cells failed)" if failures else ""))
    return 1 if failures else 0


def cmd_verify(args) -> int:
    from .core import SeedSpec
    from .filtering import run_tpf
    from .models import Dataset, LinearGaussianSpec, generate_dataset, build_lgm
    from . import oracle

    failures = 0

    def verdict(name: str, ok: bool, detail: str = "") -> None:
        nonlocal failures
        if not ok:
            failures += 1
        tail = f"  ({detail})" if detail else ""
        print(f"{'PASS' if ok else 'FAIL'}  {name}{tail}")

    seeds = SeedSpec(20240901)
    spec = LinearGaussianSpec(d=2)
    dataset = generate_dataset(spec, seeds)
    model = build_lgm(spec, dataset)
    kal = oracle.kalman_log_z(spec, dataset)
    opt = oracle.lgm_optimal_twist(spec, dataset)
    root = float(opt.log_phi(0, model.init))
    verdict("kalman vs optimal-twist recursion", abs(root - kal.log_marginal) < 1e-8,
            f"|diff|={abs(root - kal.log_marginal):.2e}")

    reports = [run_tpf(model, opt.as_twist(spec), 64, SeedSpec(s)) for s in range(5)]
    spread = max(r.log_z_hat for r in reports) - min(r.log_z_hat for r in reports)
    verdict("zero variance under the optimal twist", spread < 1e-8,
            f"spread={spread:.2e}")

    rng = np.random.default_rng(7)
    chain = oracle.FiniteChain(
        P=np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.3, 0.3, 0.4]]),
        g=rng.uniform(0.2, 2.0, size=(4, 3)), init=0)
    orc = oracle.enumerate_chain(chain)
    verdict("enumeration vs forward recursion", abs(orc.z - orc.z_by_paths) < 1e-12,
            f"|diff|={abs(orc.z - orc.z_by_paths):.2e}")

    worst = 0.0
    for _ in range(100):
        phi = np.exp(rng.normal(size=chain.g.shape))
        r2 = oracle.relative_variance(orc, phi)
        chi = oracle.chi_square(orc.target_law, oracle.twisted_path_law(orc, phi))
        worst = max(worst, abs(r2 - chi))
    verdict("relative variance equals chi-square", worst < 1e-12, f"worst={worst:.2e}")

    qs = [oracle.twisted_path_law(orc, np.exp(rng.normal(size=chain.g.shape)))
          for _ in range(100)]
    dv = oracle.check_dv_principle(orc, qs)
    verdict("variational lower bound", float(dv["gaps"].min()) >= -1e-12
            and abs(dv["optimal_gap"]) < 1e-10,
            f"min gap={dv['gaps'].min():.2e}, optimal gap={dv['optimal_gap']:.2e}")

    ok = True
    for _ in range(100):
        rep = oracle.check_variance_bounds(orc, np.exp(rng.normal(size=chain.g.shape)))
        if rep["skipped"]:
            continue
        ok &= rep["lower"] - 1e-10 <= rep["r2"] <= rep["upper"] + 1e-10
        ok &= rep["r2"] >= rep["jensen_lower"] - 1e-10
    verdict("two-sided variance bounds", bool(ok))

    conv = oracle.check_em_kernel_convergence()
    verdict("euler kernel error decays quadratically",
            1.8 <= conv["slope"] <= 2.2, f"slope={conv['slope']:.3f}")

    trend = oracle.check_zdis_trend(etas=(0.1, 0.05, 0.025), n_particles=128,
                                    replicates=200, seed=3)
    noise = 4 * float(np.hypot(trend["se"][-1], trend["se"][-2]))
    settled = float(trend["diffs"][-1]) < noise
    verdict("discretized target settles as the step shrinks", settled,
            f"last diff={trend['diffs'][-1]:.2e} < {noise:.2e}")

    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="twistpf",
        description="Twisted particle filters with learned twist functions")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment, write CSV + summary")
    _add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a grid of experiments")
    p_sweep.add_argument("--model", default="lgm",
                         choices=["lgm", "ngm78", "lorenz96"])
    p_sweep.add_argument("--d", type=int)
    p_sweep.add_argument("--d-list")
    p_sweep.add_argument("--alpha-list")
    p_sweep.add_argument("--methods")
    p_sweep.add_argument("--N", dest="n_particles", type=int)
    p_sweep.add_argument("--replicates", type=int)
    p_sweep.add_argument("--seed", type=int)
    p_sweep.add_argument("--train-iters", type=int)
    p_sweep.add_argument("--out")
    p_sweep.set_defaults(func=cmd_sweep)

    p_verify = sub.add_parser("verify", help="run the exact-reference checks")
    p_verify.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
