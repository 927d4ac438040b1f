# %% [markdown]
# # Solving the qubit mean-field game
#
# Picard iteration alternates a backward HJB solve for the value and policy
# with a forward solve for the distribution of Bloch states. It stops once
# the total-variation change of the flow is below tolerance.

# %%
import numpy as np

from qmfg.core import PAULI_X, PAULI_Y, PAULI_Z, exchange_tensor
from qmfg.mfg import GameSpec, picard_solve
from qmfg.sphere import SphereGrid

spec = GameSpec(H=0.5 * PAULI_Z, Hc=PAULI_Y, A=exchange_tensor(1.0), J=PAULI_Z, F=PAULI_X, c=1.0, U0=1.0,
                T=0.1, psi0=np.array([np.cos(0.6), np.sin(0.6) * np.exp(0.7j)]))
sol = picard_solve(spec, dt=0.01, grid=SphereGrid(24, 32, 64))

# %%
print("converged:", sol.converged, "in", sol.iterations, "iterations")
print("contraction factors:", np.round(sol.contraction_factors, 4))
print("consistency residual:", sol.consistency_residual)
print("final eta:\n", np.round(sol.etas[-1], 4))
print("policy range:", sol.policy.min(), sol.policy.max())
