"""Sandwich inference for the profiled estimator.

The estimating function for ``beta`` is summed within patient,
``U_ij = sum_k x~_ijk w_ijk e_ijk``, patients being the independent units.
Because the weights use estimated hazard coefficients, the meat loses the
projection of ``U`` onto the hazard scores::

    cov = D^{-1} (V1 - Lambda V2 Lambda') D^{-T} / N_sub

with ``D`` the weighted centred cross-product, ``V1 = E[U U']``,
``Lambda = E[U S']`` and ``V2`` the inverse hazard information, all per
patient.  The intercepts used in the residuals ``e`` may be replaced by
k-means centroids of the estimated intercepts ("stabilised"), which matters
when hospitals are small and the raw intercepts overfit.
"""
from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .data import group_sums
from .dropout import DropoutModelFit
from .errors import KTooLarge, NegativeVarianceDiagonal, SingleCluster, SingularBread
from .estimators import OmniFit

DEFAULT_K_GRID = tuple(range(2, 11))
AUTO_KMEANS_MAX_MEAN_CLUSTER = 15.0


@dataclass(frozen=True, eq=False)
class SandwichComponents:
    D: np.ndarray
    V1: np.ndarray
    Lambda: np.ndarray | None
    V2: np.ndarray | None
    covariance: np.ndarray
    n_patients: int

    @property
    def correction(self) -> np.ndarray:
        p = self.D.shape[0]
        if self.Lambda is None:
            return np.zeros((p, p))
        return self.Lambda @ self.V2 @ self.Lambda.T

    @property
    def ase(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def patient_scores(fit: OmniFit, theta: np.ndarray | None = None) -> np.ndarray:
    """Per-patient estimating-function contributions, shape (N_sub, p)."""
    view = fit.view
    theta = fit.theta if theta is None else np.asarray(theta, float)
    e = np.where(view.r, view.y - view.x @ fit.beta - np.nan_to_num(theta)[view.hospital], 0.0)
    return group_sums(fit.x_centered * (fit.weights * e)[:, None], view.patient, view.n_patients)


def sandwich_variance(fit: OmniFit, dropout: DropoutModelFit | None = None, *,
                      theta: np.ndarray | None = None, correction: bool = True
                      ) -> SandwichComponents:
    """Estimated covariance of ``beta``.

    ``theta`` overrides the intercepts used in the residuals (the centring
    is left unchanged).  With ``dropout=None`` or ``correction=False`` the
    result is the plain patient-level sandwich.
    """
    view = fit.view
    n = view.n_patients
    xc, w = fit.x_centered, fit.weights
    D = (xc * w[:, None]).T @ xc / n
    try:
        np.linalg.cholesky(D)
    except np.linalg.LinAlgError:
        raise SingularBread("bread matrix is not positive definite") from None
    U = patient_scores(fit, theta)
    V1 = U.T @ U / n
    meat = V1
    lam = v2 = None
    if dropout is not None and correction:
        S = dropout.scores
        if S.shape[0] != n:
            raise ValueError("dropout fit and Omni fit use different datasets")
        lam = U.T @ S / n
        v2 = np.linalg.inv(dropout.info_matrix / n)
        meat = V1 - lam @ v2 @ lam.T
    dinv = np.linalg.inv(D)
    cov = dinv @ meat @ dinv.T / n
    cov = 0.5 * (cov + cov.T)
    diag = np.diag(cov)
    if not (diag > 0).all():
        bad = [nm for nm, d in zip(fit.covariate_names, diag) if not d > 0]
        raise NegativeVarianceDiagonal(
            "hazard correction exceeds the raw meat for: " + ", ".join(bad)
        )
    return SandwichComponents(D=D, V1=V1, Lambda=lam, V2=v2, covariance=cov, n_patients=n)


@dataclass(frozen=True, eq=False)
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray        # ascending
    inertia: float


def _kmeanspp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    d2 = (x - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, len(x) - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, (x - x[idx]) ** 2)
    return np.array(centers)


def _lloyd(x, centers, max_iter):
    labels = None
    for _ in range(max_iter):
        new = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=len(centers))
        sums = np.bincount(labels, weights=x, minlength=len(centers))
        empty = counts == 0
        centers = np.where(empty, centers, sums / np.maximum(counts, 1))
        if empty.any():
            # move each empty centre to the point farthest from its centre
            for c in np.flatnonzero(empty):
                far = int(np.argmax(np.abs(x - centers[labels])))
                centers[c] = x[far]
                labels = labels.copy()
                labels[far] = c
    labels = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
    counts = np.bincount(labels, minlength=len(centers))
    sums = np.bincount(labels, weights=x, minlength=len(centers))
    centers = np.where(counts > 0, sums / np.maximum(counts, 1), centers)
    inertia = float(np.sum((x - centers[labels]) ** 2))
    return labels, centers, inertia


def kmeans_fit(theta, k: int, seed=0, *, n_init: int = 20, max_iter: int = 300) -> KMeansResult:
    """One-dimensional k-means: k-means++ starts, Lloyd iterations, best of ``n_init``."""
    x = np.asarray(theta, float).ravel()
    if k < 1:
        raise KTooLarge("k must be at least 1")
    if k > len(np.unique(x)):
        raise KTooLarge(f"k={k} exceeds the number of distinct values ({len(np.unique(x))})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init if k > 1 else 1):
        labels, centers, inertia = _lloyd(x, _kmeanspp(x, k, rng), max_iter)
        if best is None or inertia < best[2] - 1e-12 * max(best[2], 1.0):
            best = (labels, centers, inertia)
    labels, centers, inertia = best
    order = np.argsort(centers, kind="stable")
    relabel = np.empty(k, dtype=np.int64)
    relabel[order] = np.arange(k)
    return KMeansResult(assignments=relabel[labels], centroids=centers[order], inertia=inertia)


def silhouette_samples(theta, labels) -> np.ndarray:
    """Per-point silhouette with absolute distance on the real line.

    Mean distances to each cluster come from sorted values and prefix sums,
    so the cost is O(n k log n) rather than O(n^2).
    """
    x = np.asarray(theta, float).ravel()
    labels = np.asarray(labels).ravel()
    groups = np.unique(labels)
    if len(groups) < 2:
        raise SingleCluster("silhouette needs at least two nonempty clusters")
    n = len(x)
    mean_dist = np.empty((len(groups), n))
    sizes = np.empty(len(groups))
    for g, lab in enumerate(groups):
        v = np.sort(x[labels == lab])
        csum = np.concatenate([[0.0], np.cumsum(v)])
        left = np.searchsorted(v, x, side="right")
        total = x * left - csum[left] + (csum[-1] - csum[left]) - x * (len(v) - left)
        sizes[g] = len(v)
        mean_dist[g] = total
    own = np.searchsorted(groups, labels)
    idx = np.arange(n)
    own_size = sizes[own]
    a = np.where(own_size > 1, mean_dist[own, idx] / np.maximum(own_size - 1, 1), 0.0)
    other = mean_dist / sizes[:, None]
    other[own, idx] = np.inf
    b = other.min(axis=0)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own_size > 1, s, 0.0)


def silhouette_score(theta, labels) -> float:
    return float(np.mean(silhouette_samples(theta, labels)))


@dataclass(frozen=True, eq=False)
class ThetaClustering:
    k_chosen: int
    assignments: np.ndarray
    centroids: np.ndarray
    silhouette: float
    stabilized_theta: np.ndarray
    scores: dict = field(default_factory=dict)
    fallback: bool = False


def stabilize_theta(theta, k_grid: Iterable[int] | None = None, seed=0) -> ThetaClustering:
    """Replace each intercept by its k-means centroid, k chosen by silhouette.

    Non-finite intercepts (dropped hospitals) are left untouched.  When no k in
    the grid is feasible the intercepts are returned unchanged with
    ``fallback=True``.
    """
    theta = np.asarray(theta, float)
    ok = np.isfinite(theta)
    x = theta[ok]
    grid = sorted(set(DEFAULT_K_GRID if k_grid is None else k_grid))
    if not grid or grid[0] < 2:
        raise ValueError("k grid must be nonempty with every k >= 2")
    n_distinct = len(np.unique(x))
    grid = [k for k in grid if k <= min(len(x) - 1, n_distinct)]
    scores: dict[int, float] = {}
    best = None
    for k in grid:
        km = kmeans_fit(x, k, seed=[int(np.uint32(seed)), k] if np.ndim(seed) == 0 else [*seed, k])
        if len(np.unique(km.assignments)) < 2:
            continue
        s = silhouette_score(x, km.assignments)
        scores[k] = s
        if best is None or s > best[1]:
            best = (km, s, k)
    if best is None:
        return ThetaClustering(
            k_chosen=1, assignments=np.zeros(len(theta), dtype=np.int64),
            centroids=np.array([x.mean()]) if len(x) else np.array([np.nan]),
            silhouette=float("nan"), stabilized_theta=theta.copy(), scores=scores,
            fallback=True,
        )
    km, s, k = best
    assign = np.full(len(theta), -1, dtype=np.int64)
    assign[ok] = km.assignments
    stab = theta.copy()
    stab[ok] = km.centroids[km.assignments]
    return ThetaClustering(k_chosen=k, assignments=assign, centroids=km.centroids,
                           silhouette=s, stabilized_theta=stab, scores=scores)


def confidence_intervals(beta, covariance, level: float = 0.95,
                         names: Iterable[str] | None = None) -> pd.DataFrame:
    """Wald intervals and two-sided normal p-values."""
    beta = np.asarray(beta, float)
    cov = covariance.covariance if isinstance(covariance, SandwichComponents) else covariance
    ase = np.sqrt(np.diag(np.asarray(cov, float)))
    z = stats.norm.ppf(0.5 + level / 2.0)
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(len(beta))]
    return pd.DataFrame({
        "coefficient": names,
        "estimate": beta,
        "ase": ase,
        "lower": beta - z * ase,
        "upper": beta + z * ase,
        "p_value": 2.0 * stats.norm.sf(np.abs(beta / ase)),
    })


def use_kmeans(mode: str, cluster_sizes) -> bool:
    """Resolve ``on``/``off``/``auto``; auto stabilises small hospitals only."""
    mode = str(mode).lower()
    if mode == "on":
        return True
    if mode == "off":
        return False
    if mode == "auto":
        return float(np.mean(cluster_sizes)) < AUTO_KMEANS_MAX_MEAN_CLUSTER
    raise ValueError(f"unknown k-means mode {mode!r}")


@dataclass(frozen=True, eq=False)
class OmniInference:
    table: pd.DataFrame
    components: SandwichComponents
    clustering: ThetaClustering | None


def omni_inference(fit: OmniFit, dropout: DropoutModelFit | None, *, kmeans: str = "auto",
                   k_grid=None, seed=0, level: float = 0.95,
                   correction: bool = True) -> OmniInference:
    clustering = None
    theta = None
    if use_kmeans(kmeans, fit.view.cluster_sizes):
        clustering = stabilize_theta(fit.theta, k_grid, seed)
        theta = clustering.stabilized_theta
    comp = sandwich_variance(fit, dropout, theta=theta, correction=correction)
    table = confidence_intervals(fit.beta, comp, level, fit.covariate_names)
    table["k_chosen"] = clustering.k_chosen if clustering is not None else np.nan
    table["silhouette"] = clustering.silhouette if clustering is not None else np.nan
    return OmniInference(table=table, components=comp, clustering=clustering)
