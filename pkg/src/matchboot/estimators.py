"""Matching estimators of the average treatment effect and their plug-in variance."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .data import Dataset
from .errors import UnderdeterminedFitError
from .nn import MatchedSets


def default_degree(d: int) -> int:
    return max(1, min(3, d // 2 + 1))


def monomial_exponents(d: int, degree: int) -> list[tuple]:
    """Exponent tuples of all monomials of total degree <= ``degree``, graded order."""
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), total):
            e = [0] * d
            for k in combo:
                e[k] += 1
            out.append(tuple(e))
    return out


def design_matrix(x: np.ndarray, exponents) -> np.ndarray:
    x = np.atleast_2d(x)
    cols = [np.prod(x ** np.asarray(e)[None, :], axis=1) for e in exponents]
    return np.column_stack(cols)


@dataclass(frozen=True, eq=False)
class RegressionModel:
    """Least-squares polynomial fit of the outcome on one treatment group."""

    group: int
    degree: int
    exponents: tuple
    coef: np.ndarray
    rank: int

    def predict(self, x) -> np.ndarray:
        return design_matrix(np.asarray(x, dtype=float), self.exponents) @ self.coef


def fit_outcome_regression(dataset: Dataset, group: int, degree: int) -> RegressionModel:
    rows = dataset.group(group)
    exps = tuple(monomial_exponents(dataset.d, degree))
    if len(rows) < len(exps):
        raise UnderdeterminedFitError(
            f"group {group} has {len(rows)} units but degree {degree} needs {len(exps)} coefficients"
        )
    X = design_matrix(dataset.x[rows], exps)
    # lstsq is SVD based: rank-revealing, minimum-norm under rank deficiency.
    coef, _, rank, _ = np.linalg.lstsq(X, dataset.y[rows], rcond=None)
    return RegressionModel(group, degree, exps, coef, int(rank))


def fit_outcome_models(dataset: Dataset, degree: int | None = None):
    degree = default_degree(dataset.d) if degree is None else degree
    return fit_outcome_regression(dataset, 0, degree), fit_outcome_regression(dataset, 1, degree)


@dataclass(frozen=True, eq=False)
class FittedValues:
    """Fitted means of both models at every unit, computed once per dataset."""

    mu0: np.ndarray
    mu1: np.ndarray

    @classmethod
    def of(cls, dataset: Dataset, mu0: RegressionModel, mu1: RegressionModel) -> "FittedValues":
        return cls(mu0.predict(dataset.x), mu1.predict(dataset.x))

    def own(self, d_treat):
        return np.where(d_treat == 1, self.mu1, self.mu0)

    def opposite(self, d_treat):
        return np.where(d_treat == 1, self.mu0, self.mu1)


def _sign(dataset):
    return 2.0 * dataset.d_treat - 1.0


def imputed_opposite(dataset: Dataset, matched: MatchedSets) -> np.ndarray:
    return dataset.y[matched.sets].mean(axis=1)


def tau_m(dataset: Dataset, matched: MatchedSets) -> float:
    """Imputation form: mean over units of Y_i(1) - Y_i(0) with matched imputations."""
    return float(np.mean(_sign(dataset) * (dataset.y - imputed_opposite(dataset, matched))))


def tau_m_weighted(dataset: Dataset, matched: MatchedSets) -> float:
    """Matched-times form: mean of (2D - 1)(1 + K/M) Y."""
    w = 1.0 + matched.k_counts / matched.m
    return float(np.mean(_sign(dataset) * w * dataset.y))


def bias_hat(dataset: Dataset, matched: MatchedSets, mu0: RegressionModel, mu1: RegressionModel) -> float:
    fv = FittedValues.of(dataset, mu0, mu1)
    own = fv.own(dataset.d_treat)
    disc = fv.opposite(dataset.d_treat) - own[matched.sets].mean(axis=1)
    return float(np.mean(_sign(dataset) * disc))


def influence_values(dataset: Dataset, matched: MatchedSets, mu0: RegressionModel, mu1: RegressionModel):
    """Per-unit plug-in influence values and their variance.

    The inverse propensity weights are replaced by the matching weights
    ``1 + K_M(i)/M``.
    """
    fv = FittedValues.of(dataset, mu0, mu1)
    resid = dataset.y - fv.own(dataset.d_treat)
    chi = fv.mu1 - fv.mu0 + _sign(dataset) * (1.0 + matched.k_counts / matched.m) * resid
    sigma2 = float(np.mean((chi - chi.mean()) ** 2))
    return chi, sigma2


def normal_interval(center: float, sd: float, level: float) -> list:
    if level >= 1.0:
        return [-math.inf, math.inf]
    z = NormalDist().inv_cdf(0.5 + level / 2.0)
    return [center - z * sd, center + z * sd]


@dataclass(frozen=True, eq=False)
class EstimateReport:
    tau_hat: float
    tau_uncorrected: float
    bias_hat: float
    sigma2_hat: float
    m_used: int
    n: int
    n0: int
    n1: int
    bias_corrected: bool
    influence: np.ndarray = field(repr=False)

    def ci_normal(self, level: float = 0.95) -> list:
        return normal_interval(self.tau_hat, math.sqrt(self.sigma2_hat / self.n), level)

    def influence_centering_gap(self) -> float:
        """Mean plug-in influence value minus the point estimate (diagnostic)."""
        return float(self.influence.mean() - self.tau_hat)

    def to_dict(self, level: float = 0.95) -> dict:
        return {
            "tau_hat": self.tau_hat,
            "tau_uncorrected": self.tau_uncorrected,
            "bias_hat": self.bias_hat,
            "bias_corrected": self.bias_corrected,
            "sigma2_hat": self.sigma2_hat,
            "m": self.m_used,
            "n": self.n,
            "n0": self.n0,
            "n1": self.n1,
            "level": level,
            "ci_normal": self.ci_normal(level),
        }


def tau_m_bc(dataset: Dataset, matched: MatchedSets, mu0: RegressionModel, mu1: RegressionModel,
             bias_correct: bool = True) -> EstimateReport:
    """Bias-corrected estimate (or, with ``bias_correct=False``, the plain one) with plug-in variance."""
    plain = tau_m(dataset, matched)
    b = bias_hat(dataset, matched, mu0, mu1)
    chi, sigma2 = influence_values(dataset, matched, mu0, mu1)
    return EstimateReport(
        tau_hat=plain - b if bias_correct else plain,
        tau_uncorrected=plain,
        bias_hat=b,
        sigma2_hat=sigma2,
        m_used=matched.m,
        n=dataset.n,
        n0=dataset.n0,
        n1=dataset.n1,
        bias_corrected=bias_correct,
        influence=chi,
    )


def fit_for_report(dataset: Dataset, degree: int | None, bias_correct: bool):
    """Outcome models for a report.

    Without bias correction the models only feed the variance plug-in, so a
    group too small for the requested degree falls back to a constant fit.
    """
    try:
        return fit_outcome_models(dataset, degree)
    except UnderdeterminedFitError:
        if bias_correct:
            raise
        return fit_outcome_models(dataset, 0)
