"""Discrete-time hazard of remaining observed, and inverse-probability weights.

A patient observed at month k-1 is *at risk* at month k; the hazard
``lambda_k = P(R_k = 1 | R_{k-1} = 1, history)`` is logistic in the current
covariates and the lagged outcome.  The cumulative product of hazards is the
observation probability ``pi``.  Month 1 is never modelled (``lambda_1 = 1``).
"""
from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit

from .data import LongitudinalDataset
from .errors import (
    CompleteSeparation,
    DataError,
    DegeneratePi,
    NoDropoutEvents,
    SingularInformation,
)

log = logging.getLogger(__name__)

PI_FLOOR = 1e-6
LAG_NAME = "lag_y"
INTERCEPT_NAME = "intercept"


@dataclass(frozen=True)
class DropoutSpec:
    """Predictors of the hazard model.

    The intercept is always present.  With ``stratify_month`` it is replaced
    by one intercept per month 2..K.
    """

    covariates: tuple[str, ...] = ()
    lagged_outcome: bool = True
    stratify_month: bool = False

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))


@dataclass(frozen=True, eq=False)
class DropoutModelFit:
    spec: DropoutSpec
    names: tuple[str, ...]
    alpha: np.ndarray
    hazards: np.ndarray          # (N_sub, K); nan past the first missing month
    probabilities: np.ndarray    # (N_sub, K); same support as hazards
    info_matrix: np.ndarray      # (q, q) observed information at alpha
    scores: np.ndarray           # (N_sub, q) per-patient score contributions
    n_at_risk: int
    n_events: int
    iterations: int
    deviance: float
    pearson_chi2: float

    @property
    def df_resid(self) -> int:
        return self.n_at_risk - len(self.alpha)

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(np.linalg.inv(self.info_matrix)))

    @property
    def deviance_pvalue(self) -> float:
        return float(stats.chi2.sf(self.deviance, self.df_resid))

    @property
    def pearson_pvalue(self) -> float:
        return float(stats.chi2.sf(self.pearson_chi2, self.df_resid))

    def summary(self) -> pd.DataFrame:
        se = self.standard_errors
        return pd.DataFrame({"term": self.names, "estimate": self.alpha, "se": se,
                             "z": self.alpha / se})


def _hazard_design(ds: LongitudinalDataset, spec: DropoutSpec):
    """Rows for every at-risk patient-month (months 2..K, previous observed)."""
    K = ds.K
    if K < 2:
        return np.zeros((0, 0)), np.zeros(0, bool), np.zeros((0, 2), int), ()
    at_risk = np.zeros(ds.observed.shape, bool)
    at_risk[:, 1:] = ds.observed[:, :-1]
    pat, mon = np.nonzero(at_risk)
    cols, names = [], []
    if spec.stratify_month:
        for k in range(1, K):
            cols.append((mon == k).astype(float))
            names.append(f"month{k + 1}")
    else:
        cols.append(np.ones(len(pat)))
        names.append(INTERCEPT_NAME)
    for name in spec.covariates:
        cols.append(ds.covariate(name)[pat, mon])
        names.append(name)
    if spec.lagged_outcome:
        cols.append(ds.y[pat, mon - 1])
        names.append(LAG_NAME)
    z = np.column_stack(cols) if cols else np.zeros((len(pat), 0))
    r = ds.observed[pat, mon]
    return z, r, np.column_stack([pat, mon]), tuple(names)


def logistic_irls(z, r, *, score_tol=1e-8, step_tol=1e-10, max_iter=100, max_coef=30.0):
    """Newton-Raphson (IRLS) for a Bernoulli likelihood with logit link.

    Returns ``(alpha, mu, info, iterations)``.  Stops when the largest score
    component is below ``score_tol`` or the relative coefficient change is
    below ``step_tol``.
    """
    z = np.asarray(z, float)
    r = np.asarray(r, float)
    alpha = np.zeros(z.shape[1])
    for it in range(1, max_iter + 1):
        mu = expit(z @ alpha)
        score = z.T @ (r - mu)
        info = (z * (mu * (1.0 - mu))[:, None]).T @ z
        if np.abs(score).max(initial=0.0) < score_tol:
            _check_separation(z @ alpha, r)
            return alpha, mu, info, it - 1
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SingularInformation("hazard information matrix is singular") from None
        alpha = alpha + step
        if np.abs(alpha).max(initial=0.0) > max_coef:
            mu = expit(z @ alpha)
            if np.abs(z.T @ (r - mu)).max() > score_tol:
                raise CompleteSeparation(
                    f"hazard coefficients diverge (|alpha| > {max_coef}); the data separate"
                )
        if np.abs(step).max() <= step_tol * max(np.abs(alpha).max(), 1.0):
            _check_separation(z @ alpha, r)
            mu = expit(z @ alpha)
            info = (z * (mu * (1.0 - mu))[:, None]).T @ z
            return alpha, mu, info, it
    raise CompleteSeparation(f"IRLS did not converge in {max_iter} iterations")


def _check_separation(eta, r):
    # A linear predictor that orders every event above every non-event means
    # the likelihood keeps increasing along that direction: no finite MLE.
    ones, zeros = eta[r > 0.5], eta[r <= 0.5]
    if len(ones) and len(zeros) and ones.min() > zeros.max():
        raise CompleteSeparation("the hazard predictors separate stayers from dropouts")


def cumulative_probabilities(hazards: np.ndarray) -> np.ndarray:
    """Running product of hazards along the month axis; nan propagates."""
    return np.cumprod(np.asarray(hazards, float), axis=-1)


def fit_dropout_model(ds: LongitudinalDataset, spec: DropoutSpec = DropoutSpec()) -> DropoutModelFit:
    """Maximise the hazard likelihood over all at-risk patient-months."""
    z, r, where, names = _hazard_design(ds, spec)
    if len(r) == 0 or r.all():
        raise NoDropoutEvents("no dropout among at-risk patient-months")
    if not r.any():
        raise CompleteSeparation("every at-risk patient-month drops out")
    if not np.isfinite(z).all():
        raise DataError("hazard predictors contain non-finite values")
    if np.linalg.matrix_rank(z) < z.shape[1]:
        raise SingularInformation(f"hazard design is rank deficient ({', '.join(names)})")

    alpha, mu, info, iters = logistic_irls(z, r)
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise SingularInformation("hazard information is not positive definite") from None
    if np.linalg.cond(info) > 1e14:
        raise SingularInformation("hazard information is numerically singular")

    n_sub, K = ds.observed.shape
    hazards = np.full((n_sub, K), np.nan)
    hazards[:, 0] = 1.0
    hazards[where[:, 0], where[:, 1]] = mu
    resid = r - mu
    scores = np.zeros((n_sub, z.shape[1]))
    np.add.at(scores, where[:, 0], z * resid[:, None])

    rf = r.astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        dev = -2.0 * np.sum(rf * np.log(mu) + (1 - rf) * np.log1p(-mu))
    pearson = float(np.sum(resid**2 / (mu * (1 - mu))))

    return DropoutModelFit(
        spec=spec,
        names=names,
        alpha=alpha,
        hazards=hazards,
        probabilities=cumulative_probabilities(hazards),
        info_matrix=info,
        scores=scores,
        n_at_risk=int(len(r)),
        n_events=int((~r).sum()),
        iterations=iters,
        deviance=float(dev),
        pearson_chi2=pearson,
    )


def observation_probabilities(fit: DropoutModelFit) -> np.ndarray:
    """Per-record ``pi`` table, shape (N_sub, K)."""
    return fit.probabilities


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Per-row weights in design-view order."""

    values: np.ndarray
    scheme: str

    def scaled(self, c: float) -> WeightVector:
        return WeightVector(self.values * c, self.scheme)


def build_weights(ds: LongitudinalDataset, fit, scheme: str = "W1") -> WeightVector:
    """``R / pi`` (W1) or ``R / (n_i pi)`` (W2).

    ``fit`` is a :class:`DropoutModelFit` or an (N_sub, K) array of known
    observation probabilities.
    """
    scheme = scheme.upper()
    if scheme not in ("W1", "W2"):
        raise ValueError(f"unknown weight scheme {scheme!r}")
    pi = fit.probabilities if isinstance(fit, DropoutModelFit) else np.asarray(fit, float)
    if pi.shape != ds.observed.shape:
        raise ValueError("pi table does not match the dataset")
    obs = ds.observed
    pi_obs = pi[obs]
    if not (pi_obs >= PI_FLOOR).all():
        raise DegeneratePi(
            f"observation probability below {PI_FLOOR:g} for an observed record "
            f"(min {np.nanmin(pi_obs):.3g}); positivity is violated"
        )
    w = np.zeros(obs.shape)
    w[obs] = 1.0 / pi_obs
    if scheme == "W2":
        w /= ds.cluster_sizes[ds.patient_hospital][:, None]
    return WeightVector(values=w.reshape(-1), scheme=scheme)


def unit_weights(ds: LongitudinalDataset, scheme: str = "W1") -> WeightVector:
    """Weights with ``pi = 1`` everywhere (no dropout model)."""
    return build_weights(ds, np.ones(ds.observed.shape), scheme)


def dropout_table(ds: LongitudinalDataset, fit: DropoutModelFit | None,
                  weights: WeightVector) -> pd.DataFrame:
    n_sub, K = ds.observed.shape
    lam = np.ones((n_sub, K)) if fit is None else fit.hazards
    pi = np.ones((n_sub, K)) if fit is None else fit.probabilities
    return pd.DataFrame({
        "hospital_id": np.repeat(ds.hospital_ids[ds.patient_hospital], K),
        "patient_id": np.repeat(ds.patient_ids, K),
        "month": np.tile(np.arange(1, K + 1), n_sub),
        "lambda": lam.reshape(-1),
        "pi": pi.reshape(-1),
        "weight": weights.values,
    })
