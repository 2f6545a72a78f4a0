"""Moments through the coalescing dual: E <X_t, 1>^2 = 1 + t from a unit point mass."""
# %%
import numpy as np

from flowproc.duality import dual_moment_estimate, exact_second_moment, pair_tensor
from flowproc.model import dirac, make_coefficients

c = make_coefficients({"b": 0.0, "sigma1": 1.0, "sigma2": 1.0})
x = np.linspace(-10, 10, 16)
est = dual_moment_estimate(c, dirac(0.0), 2, np.ones((16, 16)), 1.0, x, 4000, seed=9)
print(f"dual estimate of E <X_1, 1>^2: {est.estimate:.4f} +- {est.se:.4f}")

# %% a Gaussian test function, dual vs the two-particle formula
g = lambda y: np.exp(-np.asarray(y) ** 2 / 2)
x = np.linspace(-12, 12, 96)
est = dual_moment_estimate(c, dirac(0.0), 2, pair_tensor(g, g, x=x), 0.5, x, 4000, seed=10)
ex = exact_second_moment(c, dirac(0.0), g, g, 0.5)
print(f"E <X_0.5, g>^2: dual {est.estimate:.4f} +- {est.se:.4f}, formula {ex['mp']:.4f}")
