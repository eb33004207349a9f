"""Naive within-group bootstrap for matching estimators.

Two routes compute a replicate:

* the explicit route materializes the resampled dataset, matches it with
  tie-breaking, and evaluates the imputation-form estimators on it;
* :class:`WeightedReplicateEngine` works on the original units with integer
  weights, walking each unit's precomputed opposite-group neighbor list until
  the accumulated weight reaches M. It gives the same selections as the
  explicit route under the parent-index rule and is what
  :func:`bootstrap_distribution` runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from . import rng as rngmod
from .data import Dataset, MSchedule, resolve_m
from .errors import InfeasibleMError, MatchbootError
from .estimators import (
    EstimateReport,
    FittedValues,
    RegressionModel,
    bias_hat,
    fit_for_report,
    normal_interval,
    tau_m,
    tau_m_bc,
)
from .nn import MatchedSets, build_index, catchment_counts, match_counts, match_sets, sqdist

TIE_RULES = ("parent-index", "seeded-random")
CI_METHODS = ("percentile", "basic", "normal")


@dataclass(frozen=True, eq=False)
class BootstrapWeights:
    w: np.ndarray

    def check(self, dataset: Dataset) -> None:
        for g, size in ((0, dataset.n0), (1, dataset.n1)):
            if self.w[dataset.d_treat == g].sum() != size:
                raise MatchbootError(f"group {g} weights do not sum to {size}")


def draw_weights(n0: int, n1: int, group_labels, rng) -> BootstrapWeights:
    """Independent uniform multinomial counts within the control and treated groups."""
    labels = np.asarray(group_labels)
    w = np.empty(len(labels), dtype=np.int64)
    w[labels == 0] = rng.multinomial(n0, np.full(n0, 1.0 / n0))
    w[labels == 1] = rng.multinomial(n1, np.full(n1, 1.0 / n1))
    return BootstrapWeights(w)


def unit_weights(dataset: Dataset) -> BootstrapWeights:
    return BootstrapWeights(np.ones(dataset.n, dtype=np.int64))


def resample_explicit(dataset: Dataset, weights: BootstrapWeights) -> Dataset:
    """``W_i`` adjacent copies of each unit, in ascending original index; ``parent`` records the source."""
    parent = np.repeat(np.arange(dataset.n), weights.w)
    return Dataset(dataset.x[parent], dataset.d_treat[parent], dataset.y[parent], parent=parent)


def bootstrap_match_sets(resampled: Dataset, m: int, tie_rule: str = "parent-index", rng=None) -> MatchedSets:
    """M-NN matching on a resampled dataset with explicit tie-breaking.

    The candidate set of a query holds every opposite-group copy with fewer than
    ``m`` copies strictly closer; exactly ``m`` members are then kept. Copies sit
    in ascending (parent, copy) order, so a stable sort on distance realizes the
    parent-index rule. ``seeded-random`` draws the boundary members uniformly.
    """
    if tie_rule not in TIE_RULES:
        raise ValueError(f"unknown tie rule {tie_rule!r}")
    if tie_rule == "seeded-random" and rng is None:
        raise ValueError("seeded-random tie rule needs an rng")
    n = resampled.n
    if m > min(resampled.n0, resampled.n1):
        raise InfeasibleMError(f"M={m} exceeds a resampled group size")
    sets = np.empty((n, m), dtype=np.intp)
    dists = np.empty((n, m))
    tied: list = [None] * n
    for w in (0, 1):
        rows = resampled.group(w)
        targets = resampled.group(1 - w)
        D = sqdist(resampled.x[rows], resampled.x[targets])
        order = np.argsort(D, axis=1, kind="stable")
        sd = np.take_along_axis(D, order, axis=1)
        t = sd[:, m - 1]
        for r, row in enumerate(rows):
            cand = targets[D[r] <= t[r]]
            tied[row] = cand
            if tie_rule == "parent-index" or len(cand) == m:
                chosen = targets[order[r, :m]]
            else:
                n_sure = int((D[r] < t[r]).sum())
                boundary = targets[D[r] == t[r]]
                pick = rng.choice(boundary, size=m - n_sure, replace=False)
                chosen = np.concatenate([targets[order[r, :n_sure]], np.sort(pick)])
            sets[row] = chosen
        dists[rows] = sqdist_rows(resampled.x[rows], resampled.x, sets[rows])
    return MatchedSets(m, sets, dists, match_counts(sets, n), tied_sets=tied)


def sqdist_rows(queries, points, idx):
    diff = points[idx] - queries[:, None, :]
    return (diff ** 2).sum(axis=2) if queries.shape[1] > 1 else diff[..., 0] ** 2


def k_star_counts(original: Dataset, resampled: Dataset, matched_star: MatchedSets, weights: BootstrapWeights):
    """Bootstrap matched times of every original unit: (K-minus, K-star, K-plus).

    K-plus/K-minus count resampled opposite-group queries whose closed/open
    catchment (radius = their m-th bootstrap NN distance) contains the unit.
    K-star is the unit's share of the selected matches: copy usage divided by
    ``W_i``, or K-minus when ``W_i = 0``. It may be fractional when a boundary
    tie splits a unit's copies.
    """
    n = original.n
    k_minus = np.zeros(n)
    k_plus = np.zeros(n)
    radius = matched_star.sq_dists[:, -1]
    for w in (0, 1):
        units = original.group(w)
        queries = resampled.group(1 - w)
        k_plus[units] = catchment_counts(original.x[units], resampled.x[queries], radius[queries])
        k_minus[units] = catchment_counts(original.x[units], resampled.x[queries], radius[queries], strict=True)
    usage = np.bincount(resampled.parent, weights=matched_star.k_counts, minlength=n)
    W = weights.w
    k_star = np.where(W > 0, usage / np.maximum(W, 1), k_minus)
    return k_minus, k_star, k_plus


def tau_star(resampled: Dataset, matched_star: MatchedSets) -> float:
    return tau_m(resampled, matched_star)


def tau_star_weighted(original: Dataset, weights: BootstrapWeights, k_star, m: int) -> float:
    sign = 2.0 * original.d_treat - 1.0
    return float(np.mean(weights.w * sign * (1.0 + np.asarray(k_star) / m) * original.y))


def tau_star_bc(original: Dataset, resampled: Dataset, matched_star: MatchedSets, weights: BootstrapWeights,
                mu0: RegressionModel, mu1: RegressionModel) -> float:
    """Bias-corrected replicate; the outcome models are the original-sample fits."""
    return tau_star(resampled, matched_star) - bias_hat(resampled, matched_star, mu0, mu1)


def tau_star_bc_weighted(original: Dataset, weights: BootstrapWeights, k_star, m: int,
                         mu0: RegressionModel, mu1: RegressionModel) -> float:
    fv = FittedValues.of(original, mu0, mu1)
    W = weights.w
    sign = 2.0 * original.d_treat - 1.0
    resid = original.y - fv.own(original.d_treat)
    return float(np.mean(W * (fv.mu1 - fv.mu0)) + np.mean(W * sign * (1.0 + np.asarray(k_star) / m) * resid))


@dataclass(frozen=True, eq=False)
class BootstrapReplicate:
    weights: BootstrapWeights
    tau_star: float
    tau_star_bc: float
    k_star_minus: np.ndarray | None = None
    k_star: np.ndarray | None = None
    k_star_plus: np.ndarray | None = None
    cross_ties: bool = False


class WeightedReplicateEngine:
    """Replicates computed from weights on the original units.

    ``fitted`` (original-sample fits) enables the bias-corrected value. The
    neighbor lists start at ``2M + 20`` entries and double whenever some unit's
    accumulated weight or tie boundary runs past the end.
    """

    def __init__(self, dataset: Dataset, m: int, fitted: FittedValues | None = None, width: int | None = None):
        if m > min(dataset.n0, dataset.n1):
            raise InfeasibleMError(f"M={m} exceeds the smaller group size {min(dataset.n0, dataset.n1)}")
        self.dataset = dataset
        self.m = m
        self.index = build_index(dataset)
        self.sign = 2.0 * dataset.d_treat - 1.0
        if fitted is not None:
            self.own_fit = fitted.own(dataset.d_treat)
            self.opp_fit = fitted.opposite(dataset.d_treat)
        else:
            self.own_fit = self.opp_fit = None
        self._tables = {}
        self._width = width or 2 * m + 20
        self._build()

    def _build(self):
        ds = self.dataset
        for w in (0, 1):
            rows = self.index.members[w]
            width = min(self._width, self.index.group_size(1 - w))
            nbr, d2 = self.index.knn(ds.x[rows], 1 - w, width)
            self._tables[w] = (rows, nbr, d2, width == self.index.group_size(1 - w))

    def _grow(self):
        self._width *= 2
        self._build()

    def replicate(self, weights: BootstrapWeights, counts: bool = False) -> BootstrapReplicate:
        while True:
            out = self._compute(weights.w, counts)
            if out is not None:
                return BootstrapReplicate(weights, *out)
            self._grow()

    def _compute(self, W, counts):
        m, ds = self.m, self.dataset
        n = ds.n
        tau = 0.0
        bias = 0.0
        cross = False
        usage = np.zeros(n) if counts else None
        k_plus = np.zeros(n) if counts else None
        k_minus = np.zeros(n) if counts else None
        for w in (0, 1):
            rows, nbr, d2, full = self._tables[w]
            Wn = W[nbr]
            cs = np.cumsum(Wn, axis=1)
            reach = cs >= m
            if not reach[:, -1].all():
                return None
            kstar = np.argmax(reach, axis=1)
            t = d2[np.arange(len(rows)), kstar]
            closed = d2 <= t[:, None]
            if not full and closed[:, -1].any():
                return None
            pos = np.arange(nbr.shape[1])[None, :]
            sel = np.where(pos < kstar[:, None], Wn, 0)
            sel[np.arange(len(rows)), kstar] = m - (cs[np.arange(len(rows)), kstar] - Wn[np.arange(len(rows)), kstar])
            qw = W[rows]
            live = qw > 0
            boundary = (d2 == t[:, None]) & (Wn > 0)
            cross = cross or bool((boundary[live].sum(axis=1) > 1).any())
            imp = (sel * ds.y[nbr]).sum(axis=1) / m
            tau += float(np.sum(qw * self.sign[rows] * (ds.y[rows] - imp)))
            if self.own_fit is not None:
                disc = self.opp_fit[rows] - (sel * self.own_fit[nbr]).sum(axis=1) / m
                bias += float(np.sum(qw * self.sign[rows] * disc))
            if counts:
                qb = np.broadcast_to(qw[:, None], nbr.shape)
                usage += np.bincount(nbr.ravel(), weights=(qw[:, None] * sel).ravel(), minlength=n)
                k_plus += np.bincount(nbr[closed], weights=qb[closed], minlength=n)
                strict = d2 < t[:, None]
                k_minus += np.bincount(nbr[strict], weights=qb[strict], minlength=n)
        tau /= n
        tau_bc = tau - bias / n if self.own_fit is not None else math.nan
        if counts:
            k_star = np.where(W > 0, usage / np.maximum(W, 1), k_minus)
            return tau, tau_bc, k_minus, k_star, k_plus, cross
        return tau, tau_bc, None, None, None, cross


def explicit_replicate(dataset: Dataset, weights: BootstrapWeights, m: int, tie_rule: str, rng,
                       models=None) -> BootstrapReplicate:
    res = resample_explicit(dataset, weights)
    ms = bootstrap_match_sets(res, m, tie_rule, rng)
    km, ks, kp = k_star_counts(dataset, res, ms, weights)
    ts = tau_star(res, ms)
    tbc = tau_star_bc(dataset, res, ms, weights, *models) if models is not None else math.nan
    return BootstrapReplicate(weights, ts, tbc, km, ks, kp)


@dataclass(frozen=True)
class CiReport:
    method: str
    level: float
    interval: tuple
    replicates_used: int


def percentile_ranks(b: int, level: float) -> tuple:
    """1-based order statistics bounding a percentile interval of ``b`` replicates."""
    alpha = 1.0 - level
    k_lo = max(1, math.floor((b + 1) * alpha / 2 + 1e-9))
    return k_lo, b + 1 - k_lo


def confidence_intervals(tau_hat: float, star_values, levels=(0.95,), methods=CI_METHODS) -> list:
    star = np.sort(np.asarray(star_values, dtype=float))
    b = len(star)
    sd = float(np.std(star, ddof=1)) if b > 1 else 0.0
    out = []
    for level in levels:
        if not 0.0 < level <= 1.0:
            raise MatchbootError(f"level must lie in (0, 1], got {level}")
        for method in methods:
            if level >= 1.0:
                iv = (-math.inf, math.inf)
            elif method == "normal":
                iv = tuple(normal_interval(tau_hat, sd, level))
            else:
                k_lo, k_hi = percentile_ranks(b, level)
                lo, hi = star[k_lo - 1], star[k_hi - 1]
                if method == "percentile":
                    iv = (float(lo), float(hi))
                elif method == "basic":
                    iv = (float(2 * tau_hat - hi), float(2 * tau_hat - lo))
                else:
                    raise MatchbootError(f"unknown CI method {method!r}")
            out.append(CiReport(method, float(level), iv, b))
    return out


def _finite(v):
    return v if math.isfinite(v) else None


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    estimate: EstimateReport
    tau_star: np.ndarray  # replicate estimates (bias-corrected if requested)
    replicates: np.ndarray  # sqrt(n) * (tau_star - tau_hat)
    intervals: list
    seed: int
    tie_rule: str
    explicit_replicates: int = 0

    @property
    def tau_hat(self) -> float:
        return self.estimate.tau_hat

    def interval(self, method: str, level: float) -> tuple:
        for ci in self.intervals:
            if ci.method == method and abs(ci.level - level) < 1e-12:
                return ci.interval
        raise KeyError((method, level))

    def to_dict(self) -> dict:
        r = self.replicates
        qs = (0.025, 0.25, 0.5, 0.75, 0.975)
        intervals: dict = {}
        for ci in self.intervals:
            intervals.setdefault(ci.method, {})[f"{ci.level:g}"] = [_finite(v) for v in ci.interval]
        return {
            "tau_hat": self.estimate.tau_hat,
            "tau_uncorrected": self.estimate.tau_uncorrected,
            "bias_corrected": self.estimate.bias_corrected,
            "sigma2_hat": self.estimate.sigma2_hat,
            "b": int(len(r)),
            "m": self.estimate.m_used,
            "n": self.estimate.n,
            "seed": self.seed,
            "tie_rule": self.tie_rule,
            "intervals": intervals,
            "replicate_summary": {
                "mean": float(r.mean()),
                "sd": float(r.std(ddof=1)) if len(r) > 1 else 0.0,
                "quantiles": {f"{q:g}": float(np.quantile(r, q)) for q in qs},
            },
        }


def _run_block(dataset, m, models, bias_correct, tie_rule, seed, ids, engine_state, weight_sampler):
    engine = engine_state or WeightedReplicateEngine(
        dataset, m, FittedValues.of(dataset, *models) if bias_correct else None
    )
    vals = np.empty(len(ids))
    n_explicit = 0
    for k, b in enumerate(ids):
        g = rngmod.stream(seed, b)
        weights = weight_sampler(dataset, g)
        rep = engine.replicate(weights)
        if tie_rule == "seeded-random" and rep.cross_ties:
            rep = explicit_replicate(dataset, weights, m, tie_rule, g, models if bias_correct else None)
            n_explicit += 1
        vals[k] = rep.tau_star_bc if bias_correct else rep.tau_star
    return vals, n_explicit


def _default_sampler(dataset, g):
    return draw_weights(dataset.n0, dataset.n1, dataset.d_treat, g)


def bootstrap_distribution(dataset: Dataset, m_schedule, b: int = 399, seed: int = 0, bias_correct: bool = True,
                           tie_rule: str = "parent-index", levels=(0.95,), methods=CI_METHODS,
                           degree: int | None = None, n_jobs: int = 1, weight_sampler=None) -> BootstrapResult:
    """Bootstrap replicates of ``sqrt(n) * (tau*_M - tau_M)`` and the derived intervals.

    ``m_schedule`` is an :class:`MSchedule` or an integer M. Replicate ``b`` uses
    the stream ``(seed, b)`` whatever ``n_jobs`` is, so output is identical
    across worker counts. ``weight_sampler(dataset, rng)`` overrides the
    multinomial draw (used by tests to force identity weights).
    """
    if b < 1:
        raise MatchbootError("the number of bootstrap replicates must be at least 1")
    if tie_rule not in TIE_RULES:
        raise MatchbootError(f"unknown tie rule {tie_rule!r}")
    m = resolve_m(m_schedule, dataset) if isinstance(m_schedule, MSchedule) else int(m_schedule)
    models = fit_for_report(dataset, degree, bias_correct)
    index = build_index(dataset)
    report = tau_m_bc(dataset, match_sets(index, m), *models, bias_correct=bias_correct)
    sampler = weight_sampler or _default_sampler
    ids = np.arange(b)
    if n_jobs == 1:
        engine = WeightedReplicateEngine(dataset, m, FittedValues.of(dataset, *models) if bias_correct else None)
        blocks = [_run_block(dataset, m, models, bias_correct, tie_rule, seed, ids, engine, sampler)]
    else:
        parts = np.array_split(ids, max(1, min(b, 4 * abs(n_jobs))))
        blocks = Parallel(n_jobs=n_jobs)(
            delayed(_run_block)(dataset, m, models, bias_correct, tie_rule, seed, p, None, sampler) for p in parts
        )
    star = np.concatenate([v for v, _ in blocks])
    reps = math.sqrt(dataset.n) * (star - report.tau_hat)
    intervals = confidence_intervals(report.tau_hat, star, levels, methods)
    return BootstrapResult(report, star, reps, intervals, int(seed), tie_rule, sum(k for _, k in blocks))
