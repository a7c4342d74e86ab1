import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score as sk_silhouette

from omniest.data import design_view, from_arrays
from omniest.dropout import build_weights, fit_dropout_model, unit_weights
from omniest.errors import KTooLarge, RankDeficientDesign, SingleCluster
from omniest.estimators import fit_omni
from omniest.inference import (
    confidence_intervals,
    kmeans_fit,
    omni_inference,
    sandwich_variance,
    silhouette_samples,
    silhouette_score,
    stabilize_theta,
    use_kmeans,
)
from omniest.simulation import COVARIATES, DROPOUT_SPEC, generate_replicate, table1_config, table4_config

from _util import random_instance


def dense_sandwich(view, w):
    z = np.zeros((view.n_rows, view.n_hospitals))
    z[np.arange(view.n_rows), view.hospital] = 1.0
    W = np.diag(w)
    M = np.eye(view.n_rows) - z @ np.linalg.solve(z.T @ W @ z, z.T @ W)
    xt = M @ view.x
    A = xt.T @ W @ xt
    beta = np.linalg.solve(A, xt.T @ W @ view.y)
    theta = np.linalg.solve(z.T @ W @ z, z.T @ W @ (view.y - view.x @ beta))
    e = view.y - view.x @ beta - z @ theta
    P = np.zeros((view.n_rows, view.n_patients))
    P[np.arange(view.n_rows), view.patient] = 1.0
    U = P.T @ (xt * (w * e)[:, None])
    Ainv = np.linalg.inv(A)
    return Ainv @ U.T @ U @ Ainv


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sandwich_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    _, view, w = random_instance(rng, max_patients=30)
    try:
        fit = fit_omni(view, w)
    except RankDeficientDesign:
        return
    comp = sandwich_variance(fit, None)
    ref = dense_sandwich(view, w)
    scale = max(1.0, np.abs(ref).max())
    np.testing.assert_allclose(comp.covariance, ref, rtol=0, atol=1e-8 * scale)


def duplicate(ds):
    ids = np.concatenate([ds.patient_ids, np.char.add(ds.patient_ids.astype(str), "_dup")])
    hosp = np.tile(ds.hospital_ids[ds.patient_hospital], 2)
    stack = lambda a: np.concatenate([a, a])
    return from_arrays(hosp, ids, stack(ds.observed), stack(ds.y), stack(ds.covariates),
                       ds.covariate_names)


@pytest.fixture(scope="module")
def replicate():
    ds, _ = generate_replicate(table1_config(n_hospitals=25), 4)
    return ds


def test_duplication_halves_covariance(replicate):
    ds = replicate
    ds2 = duplicate(ds)
    for with_dropout in (False, True):
        fits = []
        for d in (ds, ds2):
            drop = fit_dropout_model(d, DROPOUT_SPEC) if with_dropout else None
            w = build_weights(d, drop) if drop is not None else unit_weights(d)
            fit = fit_omni(design_view(d, COVARIATES), w)
            fits.append((fit, sandwich_variance(fit, drop)))
        (f1, c1), (f2, c2) = fits
        np.testing.assert_allclose(f2.beta, f1.beta, atol=1e-10)
        np.testing.assert_allclose(np.diag(c2.covariance), np.diag(c1.covariance) / 2, rtol=1e-8)


def test_covariance_properties(replicate):
    drop = fit_dropout_model(replicate, DROPOUT_SPEC)
    fit = fit_omni(design_view(replicate, COVARIATES), build_weights(replicate, drop))
    comp = sandwich_variance(fit, drop)
    cov = comp.covariance
    np.testing.assert_array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-10 * np.trace(cov)
    assert np.trace(comp.correction) >= 0
    plain = sandwich_variance(fit, drop, correction=False)
    assert plain.Lambda is None
    np.testing.assert_allclose(plain.covariance * comp.n_patients,
                               np.linalg.inv(comp.D) @ comp.V1 @ np.linalg.inv(comp.D).T, rtol=1e-10)


def test_stabilization_touches_variance_only(replicate):
    drop = fit_dropout_model(replicate, DROPOUT_SPEC)
    fit = fit_omni(design_view(replicate, COVARIATES), build_weights(replicate, drop))
    off = omni_inference(fit, drop, kmeans="off")
    on = omni_inference(fit, drop, kmeans="on", seed=3)
    np.testing.assert_array_equal(off.table.estimate.to_numpy(), on.table.estimate.to_numpy())
    assert np.isnan(off.table.k_chosen).all()
    assert on.table.k_chosen.iloc[0] >= 2
    assert list(on.table.columns) == ["coefficient", "estimate", "ase", "lower", "upper", "p_value",
                                      "k_chosen", "silhouette"]


def test_kmeans_well_separated():
    km = kmeans_fit([0, 0.1, 10, 10.1], 2, seed=0)
    np.testing.assert_allclose(km.centroids, [0.05, 10.05])
    np.testing.assert_array_equal(km.assignments, [0, 0, 1, 1])


def test_kmeans_single_cluster():
    theta = np.random.default_rng(0).normal(size=17)
    km = kmeans_fit(theta, 1)
    assert km.centroids == pytest.approx([theta.mean()])


def test_kmeans_k_too_large():
    with pytest.raises(KTooLarge):
        kmeans_fit([1.0, 1.0, 2.0], 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_kmeans_beats_random_assignments(seed, k):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=40) * rng.uniform(0.1, 5)
    km = kmeans_fit(theta, k, seed=seed)
    best_random = np.inf
    for _ in range(1000):
        lab = rng.integers(0, k, theta.size)
        ss = sum(((theta[lab == j] - theta[lab == j].mean()) ** 2).sum() for j in range(k) if (lab == j).any())
        best_random = min(best_random, ss)
    assert km.inertia <= best_random + 1e-12


def test_kmeans_matches_sklearn_inertia():
    rng = np.random.default_rng(1)
    theta = np.concatenate([rng.normal(m, 0.3, 30) for m in (0, 2, 5)])
    for k in (2, 3, 4):
        ours = kmeans_fit(theta, k, seed=0).inertia
        ref = KMeans(k, n_init=20, random_state=0).fit(theta[:, None]).inertia_
        assert ours <= ref * (1 + 1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_silhouette_matches_sklearn(seed, k):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=30)
    labels = rng.integers(0, k, 30)
    if len(np.unique(labels)) < 2:
        return
    assert silhouette_score(theta, labels) == pytest.approx(sk_silhouette(theta[:, None], labels), abs=1e-12)
    s = silhouette_samples(theta, labels)
    assert ((s >= -1) & (s <= 1)).all()


def test_silhouette_examples():
    assert silhouette_score([0, 0.1, 10, 10.1], [0, 0, 1, 1]) > 0.95
    assert silhouette_score([1.0, 1.0, 1.0, 1.0], [0, 0, 1, 1]) <= 0
    with pytest.raises(SingleCluster):
        silhouette_score([1.0, 2.0], [0, 0])


def test_stabilize_two_bumps():
    rng = np.random.default_rng(2)
    theta = np.concatenate([rng.normal(0, 0.1, 40), rng.normal(3, 0.1, 40)])
    res = stabilize_theta(theta, seed=1)
    assert res.k_chosen == 2
    assert len(np.unique(res.stabilized_theta)) == 2
    assert set(res.scores) == set(range(2, 11))


def test_stabilize_all_equal_falls_back():
    theta = np.full(12, 1.5)
    res = stabilize_theta(theta)
    assert res.fallback and res.k_chosen == 1
    np.testing.assert_array_equal(res.stabilized_theta, theta)


def test_stabilize_skips_dropped_hospitals():
    theta = np.array([0.0, 0.1, np.nan, 5.0, 5.1, 0.05, 5.05])
    res = stabilize_theta(theta, k_grid=[2, 3])
    assert np.isnan(res.stabilized_theta[2])
    assert res.assignments[2] == -1


def test_five_clusters_recovered():
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        theta = np.concatenate([rng.normal(m, 0.15, 20) for m in (0, 2, 4, 6, 8)])
        hits += stabilize_theta(theta, seed=seed).k_chosen == 5
    assert hits >= 18


def test_confidence_interval_examples():
    t = confidence_intervals([0.0], np.eye(1), 0.95, ["a"])
    assert t.lower[0] == pytest.approx(-1.959964, abs=1e-6)
    assert t.upper[0] == pytest.approx(1.959964, abs=1e-6)
    t = confidence_intervals([1.96], np.eye(1))
    assert t.p_value[0] == pytest.approx(0.05, abs=1e-4)
    assert t.coefficient[0] == "x1"


def test_use_kmeans_modes():
    assert use_kmeans("auto", [5, 8, 10]) and not use_kmeans("auto", [50, 60])
    assert use_kmeans("on", [100]) and not use_kmeans("off", [1])
    with pytest.raises(ValueError):
        use_kmeans("sometimes", [1])


def test_small_cluster_run_auto_stabilises():
    ds, _ = generate_replicate(table4_config(150), 0)
    drop = fit_dropout_model(ds, DROPOUT_SPEC)
    fit = fit_omni(design_view(ds, COVARIATES), build_weights(ds, drop))
    inf = omni_inference(fit, drop, kmeans="auto")
    assert inf.clustering is not None
    assert 2 <= inf.clustering.k_chosen <= 10
