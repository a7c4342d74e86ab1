"""Profile least squares with hospital intercepts, and marginal baselines.

The Omni estimator profiles out one intercept per hospital.  For fixed
``beta`` the weighted intercept solution is the per-hospital weighted mean of
partial residuals; plugging it back gives weighted within-hospital centring
followed by a single p x p solve.  That is the same estimate as the textbook
closed form with ``(I - Z S)`` because
``(I - Z S)' W (I - Z S) = W (I - Z S)`` for ``S = (Z'WZ)^{-1} Z'W``.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np
from scipy import linalg

from .data import DesignView, check_within_hospital_variation, group_sums
from .dropout import DropoutModelFit, WeightVector
from .errors import RankDeficientDesign, ZeroWeightHospital

log = logging.getLogger(__name__)

RANK_RTOL = 1e-10
BASELINES = ("GEE", "WGEE", "CWGEE")


def _weight_values(view: DesignView, w) -> np.ndarray:
    values = np.asarray(w.values if isinstance(w, WeightVector) else w, dtype=float)
    if values.shape != (view.n_rows,):
        raise ValueError("weight vector does not match the design view")
    if (values < 0).any():
        raise ValueError("weights must be nonnegative")
    return values


def _hospital_totals(view, w, drop_zero=False):
    sw = np.bincount(view.hospital, weights=w, minlength=view.n_hospitals)
    empty = np.flatnonzero(sw <= 0)
    if len(empty):
        if not drop_zero:
            raise ZeroWeightHospital(
                f"{len(empty)} hospital(s) have zero total weight (first index {empty[0]})",
                hospitals=empty,
            )
        log.warning("dropping %d hospital(s) with zero total weight", len(empty))
    return sw


def profile_theta(view: DesignView, w, beta) -> np.ndarray:
    """Per-hospital weighted mean of ``y - x @ beta``."""
    w = _weight_values(view, w)
    sw = _hospital_totals(view, w)
    partial = view.y - view.x @ np.asarray(beta, float)
    return np.bincount(view.hospital, weights=w * partial, minlength=view.n_hospitals) / sw


@dataclass(frozen=True, eq=False)
class OmniFit:
    beta: np.ndarray
    theta: np.ndarray            # nan for dropped hospitals
    residuals: np.ndarray        # zero on unobserved rows
    weight_scheme: str
    covariate_names: tuple[str, ...]
    x_centered: np.ndarray
    y_centered: np.ndarray
    weights: np.ndarray
    view: DesignView

    @property
    def bread(self) -> np.ndarray:
        xc, w = self.x_centered, self.weights
        return (xc * w[:, None]).T @ xc


def _name_collinear(view, xc_w, names):
    report = check_within_hospital_variation(view)
    flagged = list(report.unidentifiable)
    if not flagged:
        # covariates loading on the smallest right singular vector
        _, _, vt = np.linalg.svd(xc_w, full_matrices=False)
        v = np.abs(vt[-1])
        flagged = [n for n, c in zip(names, v) if c > 1e-6 * v.max()]
    return flagged


def _solve_spd(a, b, xc_w):
    try:
        c = linalg.cho_factor(a, check_finite=False)
        return linalg.cho_solve(c, b, check_finite=False)
    except linalg.LinAlgError:
        q, r, piv = linalg.qr(xc_w, mode="economic", pivoting=True)
        sol = np.zeros(a.shape[0])
        sol[piv] = linalg.solve_triangular(r, q.T @ b, check_finite=False)
        return sol


def fit_omni(view: DesignView, w, *, drop_zero_weight_hospitals: bool = False,
             scheme: str | None = None) -> OmniFit:
    """Weighted profile least squares for ``beta`` and the hospital intercepts.

    Raises
    ------
    RankDeficientDesign
        When the within-hospital centred, weighted design loses rank; the
        exception names the offending covariates.
    ZeroWeightHospital
        When a hospital has no positive weight (unless dropping is allowed).
    """
    if scheme is None:
        scheme = w.scheme if isinstance(w, WeightVector) else "custom"
    w = _weight_values(view, w)
    sw = _hospital_totals(view, w, drop_zero_weight_hospitals)
    keep_h = sw > 0
    safe = np.where(keep_h, sw, 1.0)
    h = view.hospital
    xbar = group_sums(view.x * w[:, None], h, view.n_hospitals) / safe[:, None]
    ybar = np.bincount(h, weights=w * view.y, minlength=view.n_hospitals) / safe
    xc = view.x - xbar[h]
    yc = view.y - ybar[h]

    sqw = np.sqrt(w)
    xc_w = xc * sqw[:, None]
    p = xc.shape[1]
    s = np.linalg.svd(xc_w, compute_uv=False) if p else np.zeros(0)
    if p and (s[0] == 0 or s[-1] < RANK_RTOL * s[0]):
        bad = _name_collinear(view, xc_w, view.covariate_names)
        raise RankDeficientDesign(
            "centred design is rank deficient; unidentifiable: " + ", ".join(bad),
            covariates=bad,
        )
    a = xc_w.T @ xc_w
    b = xc_w.T @ (yc * sqw)
    beta = _solve_spd(a, b, xc_w) if p else np.zeros(0)

    theta = np.where(keep_h, ybar - xbar @ beta, np.nan)
    resid = np.where(view.r, view.y - view.x @ beta - np.nan_to_num(theta)[h], 0.0)
    return OmniFit(
        beta=beta,
        theta=theta,
        residuals=resid,
        weight_scheme=scheme,
        covariate_names=view.covariate_names,
        x_centered=xc,
        y_centered=yc,
        weights=w,
        view=view,
    )


def joint_wls_oracle(view: DesignView, w) -> tuple[np.ndarray, np.ndarray]:
    """Dense weighted least squares on ``[X Z]``; small instances only."""
    w = _weight_values(view, w)
    rows = w > 0
    z = np.zeros((view.n_rows, view.n_hospitals))
    z[np.arange(view.n_rows), view.hospital] = 1.0
    design = np.hstack([view.x, z])[rows] * np.sqrt(w[rows])[:, None]
    target = view.y[rows] * np.sqrt(w[rows])
    s = np.linalg.svd(design, compute_uv=False)
    if s[-1] < RANK_RTOL * s[0] or design.shape[0] < design.shape[1]:
        raise RankDeficientDesign("joint design [X Z] is rank deficient")
    coef = np.linalg.lstsq(design, target, rcond=None)[0]
    p = view.x.shape[1]
    return coef[:p], coef[p:]


@dataclass(frozen=True, eq=False)
class BaselineFit:
    beta: np.ndarray             # intercept first
    names: tuple[str, ...]
    estimator: str
    working_correlation: str
    rho: float
    cov: np.ndarray              # hospital-clustered sandwich
    residuals: np.ndarray
    iterations: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def _exchangeable_terms(view, xd, w, m, rho):
    """Per-patient pieces of X' V^{-1} W (.) for an exchangeable V on the
    observed block: ``a * sum_k x w (.) + b_p * (sum_k R x) (sum_k w (.))``."""
    a = 1.0 / (1.0 - rho)
    b = -rho / ((1.0 - rho) * (1.0 + (m - 1.0) * rho))
    n_pat = len(m)
    s = group_sums(xd * view.r[:, None], view.patient, n_pat)
    t = group_sums(xd * w[:, None], view.patient, n_pat)
    return a, b, s, t


def fit_baseline(view: DesignView, dropout, which: str = "GEE", *,
                 working_correlation: str = "exchangeable",
                 tol: float = 1e-10, max_iter: int = 50) -> BaselineFit:
    """Marginal linear GEE, IPW-weighted GEE, or cluster-weighted IPW GEE.

    ``dropout`` is a :class:`DropoutModelFit`, an (N_sub, K) array of
    observation probabilities, or ``None`` (only valid for GEE).  All three
    regress on an intercept plus the covariates without hospital intercepts.
    The exchangeable correlation parameter is re-estimated by moments from
    the observed residuals at every iteration.
    """
    which = which.upper()
    if which not in BASELINES:
        raise ValueError(f"unknown baseline {which!r}")
    if working_correlation not in ("independence", "exchangeable"):
        raise ValueError(f"unknown working correlation {working_correlation!r}")
    r = view.r.astype(float)
    if which == "GEE":
        w = r.copy()
    else:
        if dropout is None:
            raise ValueError(f"{which} needs a dropout model or known probabilities")
        pi = dropout.probabilities if isinstance(dropout, DropoutModelFit) else np.asarray(dropout)
        pi = pi.reshape(-1)
        w = np.where(view.r, 1.0 / np.where(view.r, pi, 1.0), 0.0)
        if which == "CWGEE":
            w = w / view.cluster_sizes[view.hospital]

    xd = np.column_stack([np.ones(view.n_rows), view.x])
    names = ("intercept", *view.covariate_names)
    q = xd.shape[1]
    m = np.bincount(view.patient, weights=r, minlength=view.n_patients)
    n_obs = r.sum()
    pairs = float(np.sum(m * (m - 1) / 2))

    xw = xd * w[:, None]
    a0 = xw.T @ xd
    s = np.linalg.svd(xd[view.r] * np.sqrt(w[view.r])[:, None], compute_uv=False)
    if s[-1] < RANK_RTOL * s[0]:
        raise RankDeficientDesign(f"{which} design is rank deficient")
    beta = np.linalg.solve(a0, xw.T @ view.y)
    rho = 0.0
    it = 0
    if working_correlation == "exchangeable" and pairs > q:
        m_max = m.max()
        lo = -1.0 / (m_max - 1.0) + 1e-6 if m_max > 1 else -0.99
        for it in range(1, max_iter + 1):
            e = (view.y - xd @ beta) * r
            phi = float(e @ e) / max(n_obs - q, 1.0)
            esum = np.bincount(view.patient, weights=e, minlength=view.n_patients)
            cross = 0.5 * float(np.sum(esum**2) - e @ e)
            rho = float(np.clip(cross / (phi * (pairs - q)), lo, 0.99))
            a, b, sp, tp = _exchangeable_terms(view, xd, w, m, rho)
            wy = np.bincount(view.patient, weights=w * view.y, minlength=view.n_patients)
            lhs = a * a0 + (sp * b[:, None]).T @ tp
            rhs = a * (xw.T @ view.y) + (sp * b[:, None]).T @ wy
            new = np.linalg.solve(lhs, rhs)
            done = np.abs(new - beta).max() <= tol * max(np.abs(new).max(), 1.0)
            beta = new
            if done:
                break

    e = (view.y - xd @ beta) * r
    a, b, sp, tp = _exchangeable_terms(view, xd, w, m, rho)
    we = np.bincount(view.patient, weights=w * e, minlength=view.n_patients)
    u = a * group_sums(xw * e[:, None], view.patient, view.n_patients) + sp * (b * we)[:, None]
    patient_hospital = np.zeros(view.n_patients, dtype=np.int64)
    patient_hospital[view.patient] = view.hospital
    g = group_sums(u, patient_hospital, view.n_hospitals)
    bread = a * a0 + (sp * b[:, None]).T @ tp
    binv = np.linalg.inv(bread)
    cov = binv @ (g.T @ g) @ binv.T
    return BaselineFit(
        beta=beta,
        names=names,
        estimator=which,
        working_correlation=working_correlation,
        rho=rho,
        cov=cov,
        residuals=e,
        iterations=it,
    )
