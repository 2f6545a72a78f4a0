"""The snake: one reflecting lifetime path encodes a whole branching forest.

Excursions of the lifetime above level t that reach t+h are the particles
alive at time t; each carries the spatial path of its ancestral line.
"""
# %%
import numpy as np

from flowproc.model import dirac, make_coefficients
from flowproc.snake import run_snake, simulate_lifetime, level_local_time

# %% local time at 0 runs up to the initial mass; one path with h = 0.05 counts about 10 excursions, so expect noise
path = simulate_lifetime(seed=3, ds=1e-5, horizon=50.0)
print(f"lifetime path: {path.zeta.size} steps, local time at 0 (h = 0.05 upcrossing estimate) = {level_local_time(path, 0.0, 0.05):.3f}")

# %% snake readout vs the Feller mean
c = make_coefficients({"b": 0.0, "sigma1": 1.0, "sigma2": 1.0})
run = run_snake(c, dirac(0.0), levels=[0.0, 0.25], h=0.05, ds=1e-5, replicates=200, seed=4)
for q, t in enumerate(run.levels):
    print(f"level {t:4.2f}: mean particles {run.counts[:, q].mean():6.2f}, mean mass {run.mass[:, q].mean():.3f}, "
          f"median support diameter {np.median(run.diameter[:, q]):.3f}")
