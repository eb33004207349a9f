"""Density-ratio estimation by nearest-neighbor matched-times counts.

For samples ``X_1..X_N0 ~ nu0`` and ``Z_1..Z_N1 ~ nu1`` the ratio ``f1/f0`` at
``x`` is estimated by ``(N0/N1) K_M(x) / M`` where ``K_M(x)`` counts the ``Z_j``
whose M-NN ball (in the X sample) reaches ``x``. Bootstrap variants weight both
samples by multinomial counts; ``plus`` uses a closed ball, ``minus`` an open one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import InfeasibleMError, ValidationError
from .nn import _chunks, catchment_counts, sqdist, weighted_mth_sqdist

VARIANTS = ("plus", "minus")


@dataclass(frozen=True, eq=False)
class TwoSampleProblem:
    x_sample: np.ndarray
    z_sample: np.ndarray

    def __post_init__(self):
        x = np.array(self.x_sample, dtype=float)
        z = np.array(self.z_sample, dtype=float)
        x = x[:, None] if x.ndim == 1 else x
        z = z[:, None] if z.ndim == 1 else z
        if x.ndim != 2 or z.ndim != 2 or x.shape[1] != z.shape[1]:
            raise ValidationError("samples must be 2-D with a common dimension")
        if len(x) < 1 or len(z) < 1:
            raise ValidationError("both samples need at least one point")
        if not (np.isfinite(x).all() and np.isfinite(z).all()):
            raise ValidationError("non-finite sample point")
        object.__setattr__(self, "x_sample", x)
        object.__setattr__(self, "z_sample", z)

    @property
    def n0(self) -> int:
        return len(self.x_sample)

    @property
    def n1(self) -> int:
        return len(self.z_sample)

    @property
    def d(self) -> int:
        return self.x_sample.shape[1]

    def contains(self, x) -> bool:
        return bool((self.x_sample == np.asarray(x, dtype=float)).all(axis=1).any())


@dataclass(frozen=True)
class RatioEstimate:
    at: tuple
    k_count: float
    value: float
    variant: str
    off_sample: bool = False


def _check_m(problem, m):
    if not 1 <= m <= problem.n0:
        raise InfeasibleMError(f"M={m} must lie in [1, {problem.n0}]")


def star_radii(problem: TwoSampleProblem, m: int, weights_x=None) -> np.ndarray:
    """Squared m-th bootstrap NN distance (in the weighted X sample) of every Z point."""
    _check_m(problem, m)
    return weighted_mth_sqdist(problem.x_sample, weights_x, problem.z_sample, m)


def matched_times(problem: TwoSampleProblem, points, m: int, weights_x=None, weights_z=None,
                  boundary: str = "plus", radii=None) -> np.ndarray:
    """Bootstrap matched times at each evaluation point (plain counts with unit weights)."""
    if boundary not in VARIANTS:
        raise ValueError(f"unknown boundary {boundary!r}")
    if radii is None:
        radii = star_radii(problem, m, weights_x)
    return catchment_counts(np.atleast_2d(points), problem.z_sample, radii, weights_z, strict=boundary == "minus")


def _estimate(problem, x, k, m, variant):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return RatioEstimate(tuple(x.tolist()), float(k), problem.n0 / problem.n1 * k / m, variant,
                         off_sample=not problem.contains(x))


def r_hat(problem: TwoSampleProblem, x, m: int) -> RatioEstimate:
    """Plain estimate ``(N0/N1) K_M(x)/M``; off-sample points are evaluated but flagged."""
    k = matched_times(problem, np.atleast_2d(np.asarray(x, dtype=float)), m)[0]
    return _estimate(problem, x, k, m, "plain")


def r_hat_star(problem: TwoSampleProblem, weights_x, weights_z, x, m: int, boundary: str = "plus") -> RatioEstimate:
    k = matched_times(problem, np.atleast_2d(np.asarray(x, dtype=float)), m, weights_x, weights_z, boundary)[0]
    return _estimate(problem, x, k, m, f"star-{boundary}")


def catchment_hits(x_sample, x, m: int, z_draws, weights_x=None) -> dict:
    """Number of ``z_draws`` inside the bootstrap catchment of ``x``, per boundary.

    ``z`` is in the closed catchment iff the weighted X mass strictly closer to
    ``z`` than ``x`` is below ``m``, and in the open one iff the mass at distance
    ``<= |x - z|`` is below ``m``.
    """
    x_sample = np.atleast_2d(x_sample)
    wx = np.ones(len(x_sample)) if weights_x is None else np.asarray(weights_x, dtype=float)
    keep = wx > 0
    pts, wx = x_sample[keep], wx[keep]
    z_draws = np.atleast_2d(z_draws)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    delta = sqdist(z_draws, x)[:, 0]
    hits = {"plus": 0, "minus": 0}
    for sl in _chunks(len(z_draws), len(pts)):
        D = sqdist(z_draws[sl], pts)
        dl = delta[sl, None]
        hits["plus"] += int(((D < dl) @ wx < m).sum())
        hits["minus"] += int(((D <= dl) @ wx < m).sum())
    return hits


def catchment_measure_mc(problem: TwoSampleProblem, x, m: int, boundary: str, fresh_z_sampler, n_mc: int,
                         weights_x=None, rng=None) -> float:
    """Monte Carlo estimate of ``nu1`` of the bootstrap catchment area of ``x``.

    ``fresh_z_sampler(rng, size)`` draws from ``nu1``.
    """
    if boundary not in VARIANTS:
        raise ValueError(f"unknown boundary {boundary!r}")
    _check_m(problem, m)
    rng = rng if rng is not None else np.random.default_rng()
    z = np.asarray(fresh_z_sampler(rng, n_mc), dtype=float).reshape(n_mc, -1)
    return catchment_hits(problem.x_sample, x, m, z, weights_x)[boundary] / n_mc


@dataclass(frozen=True)
class DensityPair:
    """Two laws on the unit cube with a known density ratio."""

    name: str
    d: int
    sample_x: object
    sample_z: object
    ratio: object


def _uniform(rng, size, d=1):
    return rng.uniform(size=(size, d))


def _triangular(rng, size):
    # density 2x on [0, 1]
    return np.sqrt(rng.uniform(size=(size, 1)))


DENSITY_PAIRS = {
    "uniform": DensityPair("uniform", 1, _uniform, _uniform, lambda x: np.ones(len(np.atleast_2d(x)))),
    "triangular": DensityPair("triangular", 1, _uniform, _triangular, lambda x: 2.0 * np.atleast_2d(x)[:, 0]),
}


def density_pair(name: str) -> DensityPair:
    try:
        return DENSITY_PAIRS[name]
    except KeyError:
        raise ValidationError(f"unknown density pair {name!r}; choose from {sorted(DENSITY_PAIRS)}") from None


def _multinomial(rng, n):
    return rng.multinomial(n, np.full(n, 1.0 / n))


def lp_risk_mc(pair: DensityPair, m_of_n0, p: int, n_rep: int, seed: int, n0_grid=(200, 2000),
               n1_of_n0=None, variants=VARIANTS) -> list[dict]:
    """Empirical ``L^p`` risk of the bootstrap ratio estimators over a grid of ``N0``.

    The integral against ``f0`` is replaced by the average over the X sample.
    Rows: ``N0, M, p, variant, risk_estimate, mc_se``.
    """
    rows = []
    for n0 in n0_grid:
        n1 = int(n1_of_n0(n0)) if n1_of_n0 else n0
        m = int(m_of_n0(n0))
        losses = {v: np.empty(n_rep) for v in variants}
        for r in range(n_rep):
            g = rngmod.stream(seed, n0, r)
            problem = TwoSampleProblem(pair.sample_x(g, n0), pair.sample_z(g, n1))
            wx, wz = _multinomial(g, n0), _multinomial(g, n1)
            radii = star_radii(problem, m, wx)
            truth = pair.ratio(problem.x_sample)
            for v in variants:
                k = matched_times(problem, problem.x_sample, m, wx, wz, v, radii=radii)
                est = n0 / n1 * k / m
                losses[v][r] = np.mean(np.abs(est - truth) ** p)
        for v in variants:
            rows.append({
                "N0": n0, "M": m, "p": p, "variant": v,
                "risk_estimate": float(losses[v].mean()),
                "mc_se": float(losses[v].std(ddof=1) / math.sqrt(n_rep)) if n_rep > 1 else math.nan,
            })
    return rows
