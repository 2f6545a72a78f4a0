"""Conditional Laplace functional: E[exp(-<X_t, f>) | W] = exp(-<mu, y_0>) for one fixed W."""
# %%
import numpy as np

from flowproc.loglaplace import conditional_laplace, plateau, solve_backward
from flowproc.model import dirac, make_coefficients
from flowproc.noise import make_noise_path
from flowproc.particles import run_particles

c = make_coefficients({"b": 0.0, "sigma1": 0.5, "sigma2": 1.0})
f = plateau(1.0, 1.0, 0.5)
t, dt = 0.5, 1e-3
w = make_noise_path(seed=6, dt=dt, steps=int(t / dt))

# %% backward solve for this W
sol = solve_backward(c, f, t, w, (-6.0, 6.0, 0.01))
print(f"analytic side: {conditional_laplace(dirac(0.0), sol):.4f}")

# %% particles all driven by the same W
run = run_particles(c, dirac(0.0), 0.01, dt, [t], 400, seed=7, phis=[f], env_paths=[w] * 400)
vals = np.exp(-run.functionals[:, 0, 0])
print(f"particle side: {vals.mean():.4f} +- {vals.std(ddof=1) / np.sqrt(vals.size):.4f}")

# %% without the environment the solution is the Riccati flow y' = -q y^2
p = make_coefficients({"b": 0.0, "sigma1": 0.0, "sigma2": 1.0})
wide = plateau(1.0, 6.0, 0.5)
sol = solve_backward(p, wide, 1.0, make_noise_path(8, dt, 1000), (-10.0, 10.0, 0.02))
print(f"sigma1 = 0, t = 1: y_0(0) = {np.interp(0.0, sol.x, sol.y0):.4f}, Riccati 1/(1 + t/2) = {1 / 1.5:.4f}")
