# %% [markdown]
# # Qubit filter as a diffusion on the sphere
#
# In the affine chart `w = psi_1 / psi_0` the filter with the Gell-Mann
# channels is a diffusion whose generator is twice the projective Laplacian.
# A Monte-Carlo estimate of the generator on a spherical harmonic shows this.

# %%
import numpy as np

from qmfg.core import gell_mann_family
from qmfg.projective import ito_drift_terms, mc_generator, w_to_bloch
from qmfg.sphere import real_sph_harm

Ls = gell_mann_family(1)
w0 = np.array([0.55 * np.exp(0.9j)])
rng = np.random.default_rng(0)

# %%
for l, m in [(1, 0), (2, -1), (3, 2)]:
    def f(w, l=l, m=m):
        t, p = w_to_bloch(np.asarray(w)[..., 0])
        return real_sph_harm(6, t, p)[l, 6 + m]

    est, se = mc_generator(f, w0, Ls, 1e-4, 20_000, rng)
    print(f"l={l} m={m:+d}  MC {est:+.4f} +- {se:.4f}   exact {-2 * l * (l + 1) * f(w0[None, :])[0]:+.4f}")

# %% [markdown]
# The Ito drift terms cancel for this channel family.

# %%
print("max |Ito drift|:", np.abs(ito_drift_terms(w0, Ls)).max())
