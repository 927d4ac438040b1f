# %% [markdown]
# # How much can one player gain by deviating?
#
# The mean-field equilibrium policy is played by N atoms. Player 1 switches
# to another policy, and its payoff gain is estimated with common random
# numbers and a zero-mean control variate. The best-response gain shrinks with N.

# %%
import numpy as np

from qmfg.core import PAULI_X, PAULI_Y, PAULI_Z, exchange_tensor
from qmfg.game import nash_experiment
from qmfg.mfg import GameSpec, picard_solve
from qmfg.sphere import SphereGrid

spec = GameSpec(H=0.5 * PAULI_Z, Hc=PAULI_Y, A=exchange_tensor(1.0), J=PAULI_Z, F=PAULI_X, c=1.0, U0=1.0,
                T=0.1, psi0=np.array([np.cos(0.6), np.sin(0.6) * np.exp(0.7j)]))
sol = picard_solve(spec, dt=0.01, grid=SphereGrid(24, 32, 64))

# %%
rep = nash_experiment(sol, [2, 4], replicas=40, seed=3, dt=0.005)
for row in rep.rows():
    print(f"N={row.N}  {row.deviation:<14} gain {row.gain:+.2e} +- {row.stderr:.1e}  envelope {row.envelope:.2f}")
