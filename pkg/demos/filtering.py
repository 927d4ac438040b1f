# %% [markdown]
# # Filtered qubit under homodyne detection
#
# A single qubit is watched through three conservative channels `i sigma_a`.
# Each filtered path stays pure. The average over many paths follows the
# Lindblad equation.

# %%
import numpy as np

from qmfg.core import PAULI_X, PAULI_Z, gell_mann_family, pure_density, trace_distance
from qmfg.filtering import FilterModel, SdeConfig, simulate_trajectory, solve_lindblad

psi0 = np.array([np.cos(0.6), np.sin(0.6) * np.exp(0.7j)])
H = 0.5 * PAULI_Z + 0.4 * PAULI_X
Ls = gell_mann_family(1)
model = FilterModel(H, [0.5 * L for L in Ls])

# %% [markdown]
# One path with renormalization off. The Milstein scheme keeps the norm defect small.

# %%
cfg = SdeConfig(dt=1e-3, T=1.0, scheme="milstein", renormalize=False, sample_every=100)
tr = simulate_trajectory(psi0, model, cfg, seed=1)
print("max |norm - 1|:", np.abs(tr.norm_defects).max())

# %% [markdown]
# Average 200 renormalized paths and compare with the master equation.

# %%
cfg = SdeConfig(dt=1e-3, T=1.0, sample_every=100)
paths = [simulate_trajectory(psi0, model, cfg, seed=1, trajectory=k) for k in range(200)]
mean = np.mean([p.marginals[:, 0] for p in paths], axis=0)
ref = solve_lindblad(pure_density(psi0), model.H, model.Ls, cfg.dt, cfg.steps, sample_every=100)
print("trace distance to Lindblad:", np.round(trace_distance(mean, ref), 3))
