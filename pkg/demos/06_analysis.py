"""Roughness and support geometry."""
# %%
import numpy as np

from flowproc.analysis import box_occupancy, estimate_holder, fbm_paths
from flowproc.model import DensityField, dirac, make_coefficients
from flowproc.snake import run_snake

# %% the variogram estimator recovers the Hurst index of fractional Brownian motion
for H in (0.3, 0.5, 0.7):
    rows = fbm_paths(H, 1025, 1 / 1024, 150, seed=11)
    rep = estimate_holder([DensityField(0.0, 1.0, 1 / 1024, r) for r in rows])
    print(f"fBm H={H}: estimated {rep.exponent:.3f}")

# %% in two dimensions the snake's atoms cluster: occupied volume keeps shrinking as boxes shrink
c = make_coefficients({"dim": 2, "b": [0.0, 0.0], "sigma1": [[1.0, 0.0], [0.0, 1.0]],
                       "sigma2": [[1.0, 0.0], [0.0, 1.0]]})
run = run_snake(c, dirac([0.0, 0.0], dim=2), [0.1], 0.02, 1e-5, 20, seed=12, keep_measures=True)
for eps in (0.1, 0.05, 0.025):
    vols = [box_occupancy(m[0], eps)[1] for m in run.measures]
    print(f"eps={eps:5.3f}: mean occupied area {np.mean(vols):.4f}")
