"""Command line entry point: simulate, fit, shap, bench, oracle and cost-probe.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 benchmark
finished with failed cells.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .bench import BenchConfig, ConfigError, aggregate, cost_probe, run_benchmark, tune_once, write_outputs
from .core import DataError, load_csv, stream, write_csv
from .gbt import Hyperparams
from .learners import (CVTuner, export_tau_csv, fit_learner, fit_propensity, load_model, save_model,
                       shap_strategy1, shap_strategy2, shap_strategy3)
from .shapley import summary_shap
from .simgen import KINDS, P_RCT_S2, Scenario, oracle_stats, simulate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PARTIAL = 0, 1, 2, 3

_LIST_TYPES = {"scenarios": str, "n_values": int, "betas": float, "learners": str, "strategies": int}
_JSON_FIELDS = {"fixed_hp", "cf_params"}


def _hp_from_args(args) -> Hyperparams:
    return Hyperparams(eta=args.eta, max_depth=args.max_depth, n_rounds=args.n_rounds,
                       subsample=args.subsample, colsample=args.colsample)


def _add_hp_flags(p):
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--max-depth", type=int, default=3)
    p.add_argument("--n-rounds", type=int, default=300)
    p.add_argument("--subsample", type=float, default=1.0)
    p.add_argument("--colsample", type=float, default=1.0)
    p.add_argument("--tune", action="store_true", help="pick hyperparameters per stage by 5-fold CV")


def _tuner(args):
    if args.tune:
        from .bench import compact_grid
        return CVTuner(tuple(compact_grid()))
    return _hp_from_args(args)


def cmd_simulate(args) -> int:
    ds = simulate(Scenario(args.scenario, args.n, args.beta, args.seed, args.draw))
    out = Path(args.out)
    write_csv(ds, out)
    with out.with_name(out.stem + "_oracle.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "tau"])
        for i, t in enumerate(ds.oracle_tau):
            w.writerow([i, f"{t:.17g}"])
    print(f"wrote {ds.n} rows x {ds.p} covariates to {out}")
    return EXIT_OK


def _load(args):
    return load_csv(args.data, args.outcome_col, args.treatment_col)


def cmd_fit(args) -> int:
    ds = _load(args)
    rng = stream(args.seed, 0)
    prop = None
    if args.learner in ("X", "R", "DR") and args.propensity == "known":
        prop = fit_propensity(ds, "known_constant", p_rct=args.p_rct)
    model = fit_learner(args.learner, ds, _tuner(args), rng, K=args.K, propensity=prop)
    save_model(model, args.model_out)
    tau = model.predict_cate(ds.features)
    if args.tau_out:
        export_tau_csv(args.tau_out, tau)
    print(f"{args.learner}-learner fitted; mean tau_hat {tau.mean():.4f}; model -> {args.model_out}")
    return EXIT_OK


def cmd_shap(args) -> int:
    model = load_model(args.model)
    ds = _load(args)
    rng = stream(args.seed, 1)
    if args.strategy == 1:
        bg = ds.features[rng.choice(ds.n, min(args.background, ds.n), replace=False)]
        sm = shap_strategy1(model, bg, ds.features, rng=rng, n_coalitions=args.n_coalitions,
                            feature_names=ds.feature_names)
    elif args.strategy == 2:
        sm = shap_strategy2(model, ds.features, ds.feature_names)
    else:
        _, sm = shap_strategy3(model, ds.features, _tuner(args), rng, feature_names=ds.feature_names)
    sm.to_csv(args.out)
    summ = summary_shap(sm)
    if args.summary_out:
        summ.to_csv(args.summary_out)
    for j in np.argsort(-summ.importance, kind="stable")[:5]:
        print(f"{summ.feature_names[j]:>12s}  {summ.importance[j]:.4f}")
    return EXIT_OK


def _parse_field(name, text):
    if name in _LIST_TYPES:
        return tuple(_LIST_TYPES[name](v) for v in text.split(",") if v)
    if name in _JSON_FIELDS:
        return json.loads(text)
    if name == "grid":
        return text if text in ("default", "compact") else json.loads(text)
    if name == "cf_vip":
        return text.lower() in ("1", "true", "yes")
    return text


def bench_config(args) -> BenchConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    for f in fields(BenchConfig):
        raw = getattr(args, f"cfg_{f.name}")
        if raw is not None:
            base[f.name] = _parse_field(f.name, raw)
    types = {f.name: f.type for f in fields(BenchConfig)}
    for k in ("iterations", "master_seed", "K", "kernel_background", "kernel_instances", "test_n",
              "workers", "cv_patience"):
        if k in base:
            base[k] = int(base[k])
    if base.get("kernel_coalitions") is not None:
        base["kernel_coalitions"] = int(base["kernel_coalitions"])
    del types
    return BenchConfig.from_dict(base)


def cmd_bench(args) -> int:
    cfg = bench_config(args)
    tuned = tune_once(cfg)
    records = run_benchmark(cfg, tuned)
    paths = write_outputs(cfg, records, tuned)
    failed = sum(r.status != "ok" for r in records)
    for row in aggregate(records):
        print(f"{row['scenario']} n={row['n']} beta={row['beta']} {row['learner']:>2s} s{row['strategy']:<3s} "
              f"TOP1 {row['top1_mean']:.3f}±{row['top1_se']:.3f}  NET3 {row['net3_mean']:.3f}  "
              f"MARGIN {row['margin_mean']:.3f}")
    print(f"records -> {paths['records']}")
    if failed:
        print(f"{failed} failed cells", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_oracle(args) -> int:
    stats = oracle_stats(Scenario(args.scenario, 50, args.beta, args.seed), n_mc=args.n_mc)
    text = stats.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_cost_probe(args) -> int:
    grid = [int(v) for v in args.grid.split(",")]
    rows = cost_probe(p=args.p, n_c_grid=grid, n=args.n, n_explain=args.n_explain,
                      background=args.background, repeats=args.repeats, seed=args.seed)
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["method", "n_coalitions", "seconds", "mode"])
    for r in rows:
        out.writerow([r.method, r.n_coalitions, f"{r.seconds:.4f}", r.mode])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cateshap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated dataset and its true effects")
    p.add_argument("--scenario", choices=KINDS, required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draw", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    for name, func, helptext in (("fit", cmd_fit, "fit a CATE learner on a CSV dataset"),
                                 ("shap", cmd_shap, "attribute a fitted model's CATE surface")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--outcome-col", default="y")
        p.add_argument("--treatment-col", default="a")
        p.add_argument("--seed", type=int, default=0)
        _add_hp_flags(p)
        p.set_defaults(func=func)
        if name == "fit":
            p.add_argument("--learner", choices=("T", "S", "X", "R", "DR", "CF"), required=True)
            p.add_argument("--K", type=int, default=5)
            p.add_argument("--propensity", choices=("known", "estimated"), default="estimated")
            p.add_argument("--p-rct", type=float, default=None)
            p.add_argument("--model-out", required=True)
            p.add_argument("--tau-out")
        else:
            p.add_argument("--model", required=True)
            p.add_argument("--strategy", type=int, choices=(1, 2, 3), default=3)
            p.add_argument("--background", type=int, default=100)
            p.add_argument("--n-coalitions", type=int, default=None)
            p.add_argument("--out", required=True)
            p.add_argument("--summary-out")

    p = sub.add_parser("bench", help="run a seeded benchmark from a JSON config")
    p.add_argument("--config")
    for f in fields(BenchConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("oracle", help="Monte Carlo summaries of the true effect surface")
    p.add_argument("--scenario", choices=("S2", "S3"), required=True)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--n-mc", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("cost-probe", help="time KernelSHAP against TreeSHAP")
    p.add_argument("--p", type=int, default=100)
    p.add_argument("--grid", default="2,10,200")
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--n-explain", type=int, default=50)
    p.add_argument("--background", type=int, default=50)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_cost_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
