"""Command-line entry point: ``matchboot {estimate,infer,density-ratio,simulate}``.

Exit codes: 0 on success, 2 on usage or validation errors, 1 on internal errors.
Structured reports are JSON (non-finite numbers become ``null``); simulation
tables are CSV.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import fields

import numpy as np

from .bootstrap import CI_METHODS, TIE_RULES, bootstrap_distribution
from .data import ColumnSchema, MSchedule, load_dataset, resolve_m
from .density_ratio import TwoSampleProblem, matched_times, star_radii
from .errors import ConfigError, MatchbootError
from .estimators import fit_for_report, tau_m_bc
from .nn import build_index, match_sets
from .rng import stream
from .sim import (
    DensityConfig,
    ExperimentConfig,
    rows_to_csv,
    run_coverage,
    run_failure_demo,
    run_catchment_moments,
    run_lp_risk,
)

EXPERIMENTS = ("coverage", "failure-demo", "catchment-moments", "lp-risk")
SEED_ENV = "MATCHBOOT_SEED"


class UsageError(MatchbootError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_data_flags(p, input_required=True):
    g = p.add_argument_group("data")
    g.add_argument("--input", required=input_required, help="CSV file with covariates, treatment and outcome")
    g.add_argument("--x-cols", type=_str_list, default=None,
                   help="comma-separated covariate columns (default: all columns other than d/y)")
    g.add_argument("--d-col", default="d", help="treatment column (values 0/1)")
    g.add_argument("--y-col", default="y", help="outcome column")


def _add_m_flags(p):
    g = p.add_argument_group("number of matches").add_mutually_exclusive_group()
    g.add_argument("--m", type=int, default=None, help="fixed number of matches M (overrides the power rule)")
    g.add_argument("--m-exponent", type=float, default=0.4, help="power rule M = round(n ** exponent)")


def _add_estimation_flags(p):
    p.add_argument("--bias-correction", action=argparse.BooleanOptionalAction, default=None,
                   help="regression bias correction (default: on when d > 1)")
    p.add_argument("--degree", type=int, default=None,
                   help="total degree of the outcome polynomials (default: max(1, min(3, d//2 + 1)))")
    p.add_argument("--levels", type=_float_list, default=[0.95], help="comma-separated confidence levels")


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help=f"RNG seed (default: ${SEED_ENV}, else 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker processes")
    p.add_argument("--output", default=None, help="output file (default: standard output)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="matchboot", description="Nearest-neighbor matching estimators with bootstrap inference.",
                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="point estimate, bias correction and plug-in variance", formatter_class=fmt)
    _add_data_flags(p)
    _add_m_flags(p)
    _add_estimation_flags(p)
    _add_common(p)

    p = sub.add_parser("infer", help="bootstrap confidence intervals", formatter_class=fmt)
    _add_data_flags(p)
    _add_m_flags(p)
    _add_estimation_flags(p)
    p.add_argument("--b", type=int, default=399, help="bootstrap replicates")
    p.add_argument("--method", type=_str_list, default=["percentile"],
                   help=f"comma-separated CI methods from {','.join(CI_METHODS)}")
    p.add_argument("--dump-replicates", default=None, help="also write the raw replicate values, one per line")
    p.add_argument("--tie-rule", choices=TIE_RULES, default="parent-index", help="bootstrap tie-breaking rule")
    _add_common(p)

    p = sub.add_parser("density-ratio", help="matched-times density ratio at the control (d=0) points",
                       formatter_class=fmt)
    _add_data_flags(p)
    _add_m_flags(p)
    p.add_argument("--b", type=int, default=0, help="bootstrap replicates for the plus/minus variants (0: none)")
    p.add_argument("--levels", type=_float_list, default=[0.95], help="percentile levels for bootstrap bands")
    _add_common(p)

    p = sub.add_parser("simulate", help="Monte Carlo experiments on built-in designs", formatter_class=fmt)
    p.add_argument("--experiment", choices=EXPERIMENTS, required=True, help="experiment to run")
    p.add_argument("--config", default=None, help="JSON file with experiment settings")
    p.add_argument("--dry-run", action="store_true", help="print the resolved plan and exit")
    _add_common(p)
    return parser


# ---------------------------------------------------------------- helpers

def _seed(args, fallback=None) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0 if fallback is None else int(fallback)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n"


def _emit(args, text: str):
    if args.output:
        with open(args.output, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _schedule(args) -> MSchedule:
    if args.m is not None:
        return MSchedule.fixed(args.m)
    return MSchedule.power(args.m_exponent)


def _load(args):
    schema = ColumnSchema(tuple(args.x_cols) if args.x_cols else None, args.d_col, args.y_col)
    try:
        return load_dataset(args.input, schema)
    except OSError as exc:
        raise UsageError(f"cannot read input: {exc}") from None


def _check_levels(levels):
    for lv in levels:
        if not 0.0 < lv <= 1.0:
            raise UsageError(f"levels must lie in (0, 1], got {lv:g}")


# ---------------------------------------------------------------- commands

def cmd_estimate(args) -> int:
    _check_levels(args.levels)
    ds = _load(args)
    sched = _schedule(args)
    m = resolve_m(sched, ds)
    bc = ds.d > 1 if args.bias_correction is None else args.bias_correction
    models = fit_for_report(ds, args.degree, bc)
    rep = tau_m_bc(ds, match_sets(build_index(ds), m), *models, bias_correct=bc)
    out = rep.to_dict(args.levels[0])
    out["m_rule"] = sched.describe()
    out["ci_normal_by_level"] = {f"{lv:g}": rep.ci_normal(lv) for lv in args.levels}
    _emit(args, dumps(out))
    return 0


def cmd_infer(args) -> int:
    if args.b < 1:
        raise UsageError("--b must be at least 1")
    _check_levels(args.levels)
    for meth in args.method:
        if meth not in CI_METHODS:
            raise UsageError(f"unknown CI method {meth!r}; choose from {', '.join(CI_METHODS)}")
    ds = _load(args)
    sched = _schedule(args)
    bc = ds.d > 1 if args.bias_correction is None else args.bias_correction
    res = bootstrap_distribution(ds, sched, args.b, _seed(args), bc, args.tie_rule, args.levels, args.method,
                                 args.degree, n_jobs=max(1, args.threads))
    out = res.to_dict()
    out["m_rule"] = sched.describe()
    _emit(args, dumps(out))
    if args.dump_replicates:
        with open(args.dump_replicates, "w", newline="") as fh:
            fh.writelines(f"{v!r}\n" for v in res.tau_star.tolist())
    return 0


def cmd_density_ratio(args) -> int:
    if args.b < 0:
        raise UsageError("--b must be non-negative")
    _check_levels(args.levels)
    ds = _load(args)
    problem = TwoSampleProblem(ds.x[ds.d_treat == 0], ds.x[ds.d_treat == 1])
    m = args.m if args.m is not None else max(1, math.floor(problem.n0 ** args.m_exponent))
    if not 1 <= m <= problem.n0:
        raise UsageError(f"M={m} must lie in [1, {problem.n0}]")
    pts = problem.x_sample
    scale = problem.n0 / problem.n1 / m
    k = matched_times(problem, pts, m)
    points = [{"x": p.tolist(), "k": float(kk), "r_hat": float(scale * kk)} for p, kk in zip(pts, k)]
    out = {"n0": problem.n0, "n1": problem.n1, "m": m, "b": args.b, "points": points}
    if args.b > 0:
        seed = _seed(args)
        star = {v: np.empty((args.b, len(pts))) for v in ("plus", "minus")}
        for b in range(args.b):
            g = stream(seed, b)
            wx = g.multinomial(problem.n0, np.full(problem.n0, 1.0 / problem.n0))
            wz = g.multinomial(problem.n1, np.full(problem.n1, 1.0 / problem.n1))
            radii = star_radii(problem, m, wx)
            for v in star:
                star[v][b] = scale * matched_times(problem, pts, m, wx, wz, v, radii=radii)
        for v, vals in star.items():
            for i, rec in enumerate(points):
                col = vals[:, i]
                rec[f"star_{v}_mean"] = float(col.mean())
                rec[f"star_{v}_bands"] = {
                    f"{lv:g}": [float(np.quantile(col, (1 - lv) / 2)), float(np.quantile(col, (1 + lv) / 2))]
                    for lv in args.levels
                }
        out["seed"] = seed
    _emit(args, dumps(out))
    return 0


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _only(cfg: dict, allowed, what):
    extra = sorted(set(cfg) - set(allowed))
    if extra:
        raise ConfigError(f"unknown {what} config keys: {', '.join(extra)}")


def _experiment_config(args, raw):
    fixed_m = None
    if args.experiment in ("coverage", "failure-demo"):
        raw = dict(raw)
        if args.experiment == "failure-demo":
            fixed_m = int(raw.pop("fixed_m", 1))
        _only(raw, [f.name for f in fields(ExperimentConfig)], args.experiment)
        raw["seed"] = _seed(args, raw.get("seed"))
        raw["n_jobs"] = max(1, args.threads)
        try:
            cfg = ExperimentConfig(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        plan = cfg.plan()
        if fixed_m is not None:
            plan["fixed_m"] = fixed_m
        return cfg, plan, fixed_m
    if args.experiment == "catchment-moments":
        _only(raw, [f.name for f in fields(DensityConfig)], "catchment-moments")
        raw = dict(raw, seed=_seed(args, raw.get("seed")))
        try:
            cfg = DensityConfig(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg, dict(vars(cfg)), None
    allowed = {"pair": "triangular", "n0_grid": [200, 2000], "exponent": 0.5, "p": 2, "n_rep": 50, "seed": 0}
    _only(raw, allowed, "lp-risk")
    cfg = dict(allowed, **raw)
    cfg["seed"] = _seed(args, raw.get("seed"))
    return cfg, dict(cfg), None


def _summary(experiment, rows) -> str:
    keys = {
        "coverage": ("n", "m", "method", "level", "coverage", "coverage_se", "sd_ratio"),
        "failure-demo": ("n", "arm", "m", "var_ratio", "ratio_se"),
        "catchment-moments": ("N0", "M", "variant", "p", "estimate", "target", "rel_error"),
        "lp-risk": ("N0", "M", "variant", "p", "risk_estimate", "mc_se"),
    }[experiment]
    lines = []
    for r in rows:
        r = r.as_row() if hasattr(r, "as_row") else r
        lines.append(" ".join(f"{k}={r[k]:.4g}" if isinstance(r[k], float) else f"{k}={r[k]}" for k in keys))
    return "\n".join(lines) + "\n"


def cmd_simulate(args) -> int:
    cfg, plan, fixed_m = _experiment_config(args, _read_config(args.config))
    if args.dry_run:
        sys.stdout.write(dumps({"experiment": args.experiment, "plan": plan}))
        return 0
    if args.experiment == "coverage":
        rows = run_coverage(cfg)
    elif args.experiment == "failure-demo":
        rows = run_failure_demo(cfg, fixed_m)
    elif args.experiment == "catchment-moments":
        rows = run_catchment_moments(cfg)
    else:
        rows = run_lp_risk(cfg["pair"], cfg["n0_grid"], float(cfg["exponent"]), int(cfg["p"]), int(cfg["n_rep"]),
                           cfg["seed"])
    text = rows_to_csv(rows)
    summary = _summary(args.experiment, rows)
    if args.output:
        _emit(args, text)
        sys.stdout.write(summary)
    else:
        sys.stdout.write(text)
        sys.stderr.write(summary)
    return 0


COMMANDS = {"estimate": cmd_estimate, "infer": cmd_infer, "density-ratio": cmd_density_ratio,
            "simulate": cmd_simulate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be positive")
        return COMMANDS[args.command](args)
    except MatchbootError as exc:
        print(f"matchboot: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        print(f"matchboot: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
