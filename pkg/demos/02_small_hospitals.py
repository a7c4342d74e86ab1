"""Stabilising the hospital intercepts when hospitals are small.

With eight patients per hospital each intercept is noisy, and residuals
built from it understate the spread.  Grouping the intercepts by k-means,
with k chosen by silhouette, gives residuals closer to the truth.
"""
import numpy as np

from omniest import build_weights, design_view, fit_dropout_model, fit_omni, sandwich_variance, stabilize_theta
from omniest.simulation import COVARIATES, DROPOUT_SPEC, generate_replicate, table4_config

ds, truth = generate_replicate(table4_config(500), index=0)
print(f"mean hospital size {ds.cluster_sizes.mean():.2f}")

drop = fit_dropout_model(ds, DROPOUT_SPEC)
fit = fit_omni(design_view(ds, COVARIATES), build_weights(ds, drop))

clusters = stabilize_theta(fit.theta, seed=0)
print("\nsilhouette by k")
for k, s in clusters.scores.items():
    mark = "  <- chosen" if k == clusters.k_chosen else ""
    print(f"  k={k:<3d}{s:7.3f}{mark}")
print("centroids", np.round(clusters.centroids, 3))

# M1 takes the values 0, 1 and 2, so the true intercepts fall on three levels
for m in (0, 1, 2):
    sel = truth.M1 == m
    print(f"M1={m}: {sel.sum():4d} hospitals, mean stabilised theta "
          f"{clusters.stabilized_theta[sel].mean():.3f}")

raw = sandwich_variance(fit, drop)
stab = sandwich_variance(fit, drop, theta=clusters.stabilized_theta)
print("\nASE x100   raw  stabilised")
for name, a, b in zip(COVARIATES, raw.ase, stab.ase):
    print(f"  {name}   {100 * a:6.2f}  {100 * b:6.2f}")
