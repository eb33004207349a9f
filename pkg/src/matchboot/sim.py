"""Simulation designs with known truth and the Monte Carlo experiments built on them.

Every experiment is a pure function of its config and seed. Monte Carlo rep
``r`` at sample size ``n`` draws its data from the stream ``(seed, 0, n, r)``
and its bootstrap from seed ``derive_seed(seed, 1, n, r)``, so arms and
experiments that share a seed see the same data and the same weights.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from joblib import Parallel, delayed
from scipy import integrate

from . import rng as rngmod
from .bootstrap import CI_METHODS, bootstrap_distribution
from .data import Dataset, MSchedule, resolve_m
from .density_ratio import catchment_hits, density_pair, lp_risk_mc
from .errors import ConfigError, DegenerateGroupError
from .estimators import (
    FittedValues,
    fit_outcome_models,
)
from .nn import build_index, match_counts

MAX_REDRAWS = 100


@dataclass(frozen=True)
class DgpSpec:
    """Covariates uniform on ``[0, 1]^d``; all functions act on an (n, d) array."""

    name: str
    d: int
    propensity: Callable
    mu0: Callable
    mu1: Callable
    sd0: Callable
    sd1: Callable
    tau: float
    eta: float
    sigma2: float | None = None

    def sample_x(self, rng, n):
        return rng.uniform(size=(n, self.d))

    def _bound_integrand(self, *coords):
        x = np.array([coords])
        e = self.propensity(x)[0]
        contrast = self.mu1(x)[0] - self.mu0(x)[0] - self.tau
        return contrast ** 2 + self.sd1(x)[0] ** 2 / e + self.sd0(x)[0] ** 2 / (1 - e)

    def efficiency_bound_quadrature(self) -> float:
        val, _ = integrate.nquad(self._bound_integrand, [(0.0, 1.0)] * self.d, opts={"epsabs": 1e-11})
        return float(val)

    def efficiency_bound(self) -> float:
        return self.sigma2 if self.sigma2 is not None else self.efficiency_bound_quadrature()


def _const(c):
    return lambda x: np.full(len(x), float(c))


_LOG73 = math.log(7.0 / 3.0)

DGPS = {
    # d = 1, Lipschitz means, constant effect: no bias correction needed.
    "lipschitz1d": DgpSpec(
        "lipschitz1d", 1,
        propensity=lambda x: np.clip(0.3 + 0.4 * x[:, 0], 0.3, 0.7),
        mu0=lambda x: x[:, 0], mu1=lambda x: x[:, 0] + 2.0,
        sd0=_const(1.0), sd1=_const(1.0), tau=2.0, eta=0.25,
        sigma2=5.0 * _LOG73,
    ),
    # d = 2 with curvature so that the matching bias matters.
    "bias": DgpSpec(
        "bias", 2,
        propensity=lambda x: 0.3 + 0.4 * x[:, 0],
        mu0=lambda x: x[:, 0] ** 2 + x[:, 1] ** 2,
        mu1=lambda x: x[:, 0] ** 2 + x[:, 1] ** 2 + 2.0 + (x[:, 0] - 0.5),
        sd0=_const(1.0), sd1=_const(1.0), tau=2.0, eta=0.25,
        sigma2=1.0 / 12.0 + 5.0 * _LOG73,
    ),
    "homoskedastic": DgpSpec(
        "homoskedastic", 1,
        propensity=_const(0.5),
        mu0=lambda x: x[:, 0], mu1=lambda x: x[:, 0] + 2.0,
        sd0=_const(1.0), sd1=_const(1.0), tau=2.0, eta=0.4,
        sigma2=4.0,
    ),
}


def dgp(name: str) -> DgpSpec:
    try:
        return DGPS[name]
    except KeyError:
        raise ConfigError(f"unknown dgp {name!r}; choose from {sorted(DGPS)}") from None


@dataclass(frozen=True, eq=False)
class Truth:
    e: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    chi0: np.ndarray
    tau: float


def generate(spec: DgpSpec, n: int, rng, max_redraws: int = MAX_REDRAWS):
    """i.i.d. sample of size ``n`` and its hidden truth record."""
    if n < 2:
        raise ConfigError("need n >= 2")
    for _ in range(max_redraws):
        x = spec.sample_x(rng, n)
        e = spec.propensity(x)
        d = (rng.uniform(size=n) < e).astype(np.int8)
        if 0 < d.sum() < n:
            break
    else:
        raise DegenerateGroupError(f"no draw with both groups in {max_redraws} attempts")
    mu0, mu1 = spec.mu0(x), spec.mu1(x)
    noise = rng.standard_normal(n)
    y = np.where(d == 1, mu1 + spec.sd1(x) * noise, mu0 + spec.sd0(x) * noise)
    mu_d = np.where(d == 1, mu1, mu0)
    chi0 = mu1 - mu0 + (d / e - (1 - d) / (1 - e)) * (y - mu_d)
    return Dataset(x, d, y), Truth(e, mu0, mu1, chi0, spec.tau)


def point_estimates(ds: Dataset, ms, bias_correct: bool, degree=None) -> list:
    """``tau_M`` (or its bias-corrected version) for several M from one neighbor search."""
    index = build_index(ds)
    nbr, _ = index.neighbor_table(max(ms))
    fv = None
    if bias_correct:
        fv = FittedValues.of(ds, *fit_outcome_models(ds, degree))
    out = []
    sign = 2.0 * ds.d_treat - 1.0
    for m in ms:
        sets = nbr[:, :m]
        k = match_counts(sets, ds.n)
        tau = float(np.mean(sign * (1.0 + k / m) * ds.y))
        if fv is not None:
            own = fv.own(ds.d_treat)
            tau -= float(np.mean(sign * (fv.opposite(ds.d_treat) - own[sets].mean(axis=1))))
        out.append(tau)
    return out


def _schedule_from(obj) -> MSchedule:
    if isinstance(obj, MSchedule):
        return obj
    if isinstance(obj, int):
        return MSchedule.fixed(obj)
    if isinstance(obj, dict):
        if "fixed_m" in obj:
            return MSchedule.fixed(int(obj["fixed_m"]))
        return MSchedule.power(float(obj.get("exponent", 0.4)), obj.get("gamma_inputs"))
    raise ConfigError(f"cannot read an M schedule from {obj!r}")


@dataclass
class ExperimentConfig:
    """Shared configuration for the matching experiments."""

    dgp: str = "lipschitz1d"
    n_grid: list = field(default_factory=lambda: [1000])
    schedule: object = field(default_factory=MSchedule)
    b: int = 399
    levels: list = field(default_factory=lambda: [0.95])
    methods: list = field(default_factory=lambda: list(CI_METHODS))
    n_montecarlo: int = 300
    n_oracle: int = 0
    seed: int = 0
    bias_correct: bool | None = None
    tie_rule: str = "parent-index"
    degree: int | None = None
    n_jobs: int = 1

    def __post_init__(self):
        self.schedule = _schedule_from(self.schedule)
        self.n_grid = [int(v) for v in self.n_grid]
        self.levels = [float(v) for v in self.levels]
        if self.b < 1 or self.n_montecarlo < 1:
            raise ConfigError("b and n_montecarlo must be positive")
        dgp(self.dgp)

    @property
    def spec(self) -> DgpSpec:
        return dgp(self.dgp)

    def use_bc(self) -> bool:
        return self.spec.d > 1 if self.bias_correct is None else bool(self.bias_correct)

    def oracle_reps(self) -> int:
        return max(self.n_oracle, self.n_montecarlo)

    def plan(self) -> dict:
        out = asdict(self)
        out["schedule"] = self.schedule.describe()
        out["bias_correct"] = self.use_bc()
        out["n_oracle"] = self.oracle_reps()
        return out


def _data_stream(cfg, n, r):
    return rngmod.stream(cfg.seed, 0, n, r)


def _boot_seed(cfg, n, r):
    return rngmod.derive_seed(cfg.seed, 1, n, r)


def _oracle_block(cfg, n, ms, bc, reps):
    spec = cfg.spec
    return [point_estimates(generate(spec, n, _data_stream(cfg, n, r))[0], ms, bc, cfg.degree) for r in reps]


def oracle_estimates(cfg: ExperimentConfig, n: int, ms, bc: bool) -> np.ndarray:
    """Point estimates (rows: reps, columns: ``ms``) over the oracle reps."""
    reps = np.arange(cfg.oracle_reps())
    blocks = _map(cfg, _oracle_block, [(cfg, n, ms, bc, p) for p in np.array_split(reps, _n_blocks(cfg, len(reps)))])
    return np.array([row for blk in blocks for row in blk])


def _n_blocks(cfg, n_items):
    return 1 if cfg.n_jobs == 1 else max(1, min(n_items, 4 * abs(cfg.n_jobs)))


def _map(cfg, fn, arglist):
    if cfg.n_jobs == 1:
        return [fn(*a) for a in arglist]
    return Parallel(n_jobs=cfg.n_jobs)(delayed(fn)(*a) for a in arglist)


def _boot_block(cfg, n, schedule, bc, reps):
    spec = cfg.spec
    out = []
    for r in reps:
        ds, _ = generate(spec, n, _data_stream(cfg, n, r))
        res = bootstrap_distribution(ds, schedule, cfg.b, _boot_seed(cfg, n, r), bc, cfg.tie_rule,
                                     cfg.levels, cfg.methods, cfg.degree)
        out.append({
            "m": res.estimate.m_used,
            "tau_hat": res.tau_hat,
            "boot_var": float(np.var(res.replicates, ddof=1)) if cfg.b > 1 else 0.0,
            "intervals": {(ci.method, ci.level): ci.interval for ci in res.intervals},
        })
    return out


def bootstrap_reps(cfg: ExperimentConfig, n: int, schedule: MSchedule, bc: bool) -> list:
    reps = np.arange(cfg.n_montecarlo)
    parts = np.array_split(reps, _n_blocks(cfg, len(reps)))
    return [rec for blk in _map(cfg, _boot_block, [(cfg, n, schedule, bc, p) for p in parts]) for rec in blk]


@dataclass(frozen=True)
class CoverageReport:
    dgp: str
    n: int
    m_rule: str
    m: int
    b: int
    n_montecarlo: int
    n_oracle: int
    method: str
    level: float
    coverage: float
    coverage_se: float
    mean_length: float
    sd_ratio: float
    var_ratio: float

    def as_row(self) -> dict:
        return asdict(self)


def run_coverage(cfg: ExperimentConfig) -> list[CoverageReport]:
    spec = cfg.spec
    bc = cfg.use_bc()
    reports = []
    for n in cfg.n_grid:
        probe, _ = generate(spec, n, _data_stream(cfg, n, 0))
        m_probe = resolve_m(cfg.schedule, probe)
        recs = bootstrap_reps(cfg, n, cfg.schedule, bc)
        ms = sorted({rec["m"] for rec in recs})
        if len(ms) != 1:
            raise ConfigError(f"M varies across reps at n={n}: {ms}; use a fixed or balanced design")
        oracle = math.sqrt(n) * (oracle_estimates(cfg, n, ms, bc)[:, 0] - spec.tau)
        mc_sd = float(np.std(oracle, ddof=1))
        boot_var = np.array([rec["boot_var"] for rec in recs])
        sd_ratio = float(np.mean(np.sqrt(boot_var)) / mc_sd)
        var_ratio = float(np.mean(boot_var) / mc_sd ** 2)
        for level in cfg.levels:
            for method in cfg.methods:
                ivs = [rec["intervals"][(method, level)] for rec in recs]
                hits = np.array([lo <= spec.tau <= hi for lo, hi in ivs], dtype=float)
                cov = float(hits.mean())
                lengths = np.array([hi - lo for lo, hi in ivs])
                reports.append(CoverageReport(
                    spec.name, n, cfg.schedule.describe(), ms[0] if ms else m_probe, cfg.b, cfg.n_montecarlo,
                    cfg.oracle_reps(), method, level, cov, math.sqrt(cov * (1 - cov) / len(hits)),
                    float(np.mean(lengths)), sd_ratio, var_ratio,
                ))
    return reports


def run_failure_demo(cfg: ExperimentConfig, fixed_m: int = 1) -> list[dict]:
    """Bootstrap vs Monte Carlo variance of ``sqrt(n)(tau_M - tau)``: fixed M against the schedule.

    Both arms reuse the same data and bootstrap seeds for each (n, rep).
    """
    spec = cfg.spec
    bc = cfg.use_bc()
    rows = []
    arms = [(f"fixed:{fixed_m}", MSchedule.fixed(fixed_m)), (cfg.schedule.describe(), cfg.schedule)]
    for n in cfg.n_grid:
        recs = {label: bootstrap_reps(cfg, n, sched, bc) for label, sched in arms}
        ms = [recs[label][0]["m"] for label, _ in arms]
        oracle = math.sqrt(n) * (oracle_estimates(cfg, n, ms, bc) - spec.tau)
        for k, (label, _) in enumerate(arms):
            boot_var = np.array([rec["boot_var"] for rec in recs[label]])
            mc_var = float(np.var(oracle[:, k], ddof=1))
            ratio = float(boot_var.mean() / mc_var)
            # delta-method standard error of the ratio, treating the two means as independent
            se = ratio * math.sqrt(
                boot_var.var(ddof=1) / len(boot_var) / boot_var.mean() ** 2 + 2.0 / (len(oracle) - 1)
            )
            rows.append({
                "dgp": spec.name, "n": n, "arm": label, "m": ms[k], "b": cfg.b,
                "n_montecarlo": cfg.n_montecarlo, "n_oracle": len(oracle),
                "boot_var": float(boot_var.mean()), "mc_var": mc_var, "var_ratio": ratio, "ratio_se": se,
            })
    return rows


@dataclass
class DensityConfig:
    pair: str = "uniform"
    n0_grid: list = field(default_factory=lambda: [4000])
    m_rule: object = 40  # int, or {"exponent": a} for floor(N0 ** a)
    n_mc: int = 2000
    n_rep: int = 200
    seed: int = 0
    x_eval: float = 0.5
    anchor: bool = True
    p_values: list = field(default_factory=lambda: [1, 2])

    def m_of(self, n0: int) -> int:
        if isinstance(self.m_rule, dict):
            return max(1, math.floor(n0 ** float(self.m_rule["exponent"])))
        return int(self.m_rule)


def _falling(k, p, n):
    """Unbiased estimate of ``q**p`` from ``k ~ Binomial(n, q)``."""
    num = 1.0
    den = 1.0
    for j in range(p):
        num *= k - j
        den *= n - j
    return num / den


def run_catchment_moments(cfg: DensityConfig) -> list[dict]:
    """Scaled catchment-measure moments ``(N0/M)^p E[nu1(A)^p]`` against ``r(x)^p``.

    With ``anchor`` the evaluation point replaces the first X draw, so it is a
    sample point carrying its own bootstrap weight.
    """
    pair = density_pair(cfg.pair)
    x = np.full(pair.d, float(cfg.x_eval))
    target = float(pair.ratio(x[None, :])[0])
    rows = []
    for n0 in cfg.n0_grid:
        m = cfg.m_of(n0)
        moments = {(v, p): np.empty(cfg.n_rep) for v in ("plus", "minus") for p in cfg.p_values}
        for r in range(cfg.n_rep):
            g = rngmod.stream(cfg.seed, n0, r)
            xs = pair.sample_x(g, n0)
            if cfg.anchor:
                xs[0] = x
            wx = g.multinomial(n0, np.full(n0, 1.0 / n0))
            z = pair.sample_z(g, cfg.n_mc)
            hits = catchment_hits(xs, x, m, z, wx)
            for v in ("plus", "minus"):
                for p in cfg.p_values:
                    moments[(v, p)][r] = (n0 / m) ** p * _falling(hits[v], p, cfg.n_mc)
        for (v, p), vals in moments.items():
            est = float(vals.mean())
            rows.append({
                "pair": pair.name, "N0": n0, "M": m, "p": p, "variant": v,
                "estimate": est, "target": target ** p,
                "rel_error": est / target ** p - 1.0 if target else math.nan,
                "mc_se": float(vals.std(ddof=1) / math.sqrt(cfg.n_rep)),
            })
    return rows


def run_lp_risk(pair_name: str, n0_grid, exponent: float, p: int, n_rep: int, seed: int) -> list[dict]:
    pair = density_pair(pair_name)
    return lp_risk_mc(pair, lambda n0: max(1, math.floor(n0 ** exponent)), p, n_rep, seed, n0_grid)


def rows_to_csv(rows) -> str:
    rows = [r.as_row() if hasattr(r, "as_row") else r for r in rows]
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
