"""Branching particles in a shared environment.

Particles of mass 2h move by dX = b dt + sigma1 dW + sigma2 dB with one
common W and private B, and split or die at rate 1/(2h). The total mass is a
critical Feller diffusion: mean 1 and variance t from a unit point mass.
"""
# %%
import numpy as np

from flowproc.model import dirac, make_coefficients
from flowproc.particles import run_particles

c = make_coefficients({"b": 0.0, "sigma1": 1.0, "sigma2": 1.0})
run = run_particles(c, dirac(0.0), h=0.01, dt=1e-3, times=[0.25, 0.5, 1.0], replicates=300, seed=1)

# %% total mass stays critical; its variance grows like t
for j, t in enumerate(run.times):
    m = run.mass[:, j]
    print(f"t={t:4.2f}  mean mass {m.mean():.3f}  variance {m.var(ddof=1):.3f}")

# %% the shared W moves the whole cloud: centres of mass spread like sigma1^2 t
phi = [lambda x: x]
run = run_particles(c, dirac(0.0), 0.01, 1e-3, [1.0], 300, seed=2, phis=phi)
alive = run.mass[:, 0] > 0
centre = run.functionals[alive, 0, 0] / run.mass[alive, 0]
print(f"spread of centres of mass at t=1: {centre.var():.3f} (sigma1^2 t = 1 plus branching noise)")
