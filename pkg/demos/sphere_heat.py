# %% [markdown]
# # Heat flow on the Bloch sphere
#
# The spectral grid diagonalizes the Laplace-Beltrami operator. The heat
# kernel keeps unit mass and smooths gradients like `t^{-1/2}`.

# %%
import numpy as np

from qmfg.sphere import SphereGrid, heat_kernel_point, smoothing_constant_probe

grid = SphereGrid()
T, P = grid.mesh

# %%
for t in (0.005, 0.05, 0.5):
    k = heat_kernel_point(t, (0.7, 2.3), (T, P))
    print(f"t={t:<6} mass {grid.integrate(k):.15f}  peak {k.max():.2f}")

# %%
probe = smoothing_constant_probe(grid, np.geomspace(1e-3, 1e-1, 7), 4, np.random.default_rng(0))
print("fitted smoothing exponent:", round(probe.exponent, 3))
