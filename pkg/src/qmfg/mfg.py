"""Limiting mean-field game for a controlled qubit on the Bloch sphere.

Both equations are stepped in mild form: the heat semigroup ``exp(2 t Delta)``
is applied exactly in the spectral basis and the first-order terms enter
through the exponential-Euler weight ``phi1(l) = (1 - exp(-lambda_l dt)) / lambda_l``
with ``lambda_l = 2 l (l + 1)``.

Velocity fields are those of ``psi' = -i M psi`` pushed to the sphere; for
``M = H + u Hc + A^{eta-bar}`` the field is affine in ``u``.  The value of the
game solves the backward equation with terminal cost ``<F>`` and running
reward ``<J> + max_u (u Pi - c u^2 / 2)``; the population measure solves the
forward equation from a point mass at the initial state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import InteractionTensor, as_state, contract_interaction, is_hermitian, operator_norm, trace_distance
from .projective import bloch_drift, pauli_components, psi_to_bloch, sphere_frame
from .sphere import SphereGrid, degree_array, heat_multiplier

log = logging.getLogger(__name__)

MASS_DEFECT_LIMIT = 1e-4


@dataclass(frozen=True)
class GameSpec:
    """Data of the single-qubit mean-field game.

    ``psi0`` is the common initial state; the admissible controls are
    ``[-U0, U0]`` and the payoff is ``E int (<J> - c u^2 / 2) ds + <F>_T``.
    """

    H: np.ndarray
    Hc: np.ndarray
    A: InteractionTensor
    J: np.ndarray
    F: np.ndarray
    c: float = 1.0
    U0: float = 1.0
    T: float = 0.1
    psi0: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0], dtype=complex))

    def __post_init__(self):
        for name in ("H", "Hc", "J", "F"):
            m = np.asarray(getattr(self, name), dtype=complex)
            if m.shape != (2, 2):
                raise ValueError(f"{name} must be a 2x2 matrix")
            if not is_hermitian(m):
                raise ValueError(f"{name} must be Hermitian")
            object.__setattr__(self, name, m)
        if self.A.dim != 2:
            raise ValueError("interaction tensor must act on qubits")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if not self.U0 > 0:
            raise ValueError("U0 must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        psi = as_state(self.psi0)
        if psi.shape != (2,):
            raise ValueError("psi0 must be a qubit state")
        object.__setattr__(self, "psi0", psi / np.linalg.norm(psi))

    @property
    def bloch0(self):
        """Bloch angles of the initial state."""
        th, ph = psi_to_bloch(self.psi0)
        return float(th), float(ph)

    def value_bound(self, t) -> np.ndarray:
        """A priori bound on ``sup |S_t|`` from the mild form."""
        run = operator_norm(self.J) + self.U0**2 * max(1.0, 1.0 / (2.0 * self.c)) * self.c
        return operator_norm(self.F) + (self.T - np.asarray(t)) * run


# --- pointwise pieces ----------------------------------------------------


def control_from_gradient(Pi, c: float, U0: float):
    """Maximizer of ``u Pi - c u^2 / 2`` over ``[-U0, U0]``."""
    return np.clip(np.asarray(Pi, dtype=float) / c, -U0, U0)


def optimal_reward(Pi, c: float, U0: float):
    """``max_{|u| <= U0} (u Pi - c u^2 / 2)``."""
    u = control_from_gradient(Pi, c, U0)
    return u * Pi - 0.5 * c * u * u


def bloch_expectation(M, theta, phi) -> np.ndarray:
    """``<M>`` in the pure state with Bloch angles ``(theta, phi)``."""
    m0, m = pauli_components(M)
    r, _, _ = sphere_frame(theta, phi)
    return m0 + r @ m


def pi_gradient(grad, Hc, theta, phi) -> np.ndarray:
    """Directional derivative of ``S`` along the ``Hc`` velocity field.

    ``grad`` holds the orthonormal components ``(dS/dtheta, dS/dphi / sin theta)``.
    """
    vt, vp = bloch_drift(Hc, theta, phi)
    return vt * grad[0] + vp * grad[1]


def phi1(L: int, dt: float) -> np.ndarray:
    """Exponential-Euler weights ``(1 - exp(-2 l(l+1) dt)) / (2 l(l+1))``."""
    lam = 2.0 * degree_array(L) * (degree_array(L) + 1)
    out = np.full(lam.shape, float(dt))
    pos = lam > 0
    out[pos] = -np.expm1(-lam[pos] * dt) / lam[pos]
    return out


def mean_field_operator(spec: GameSpec, eta) -> np.ndarray:
    H = spec.H
    if not spec.A.is_zero:
        H = H + contract_interaction(spec.A, eta)
    return H


def eta_from_measure(grid: SphereGrid, coeffs) -> np.ndarray:
    """``eta(k, l) = int psi_k conj(psi_l) dmu`` by quadrature.

    With the Bloch parametrization ``psi psi^* = (I + r . sigma) / 2``, so only
    the first moment of the measure enters.
    """
    vals = grid.synthesize(coeffs)
    T, P = grid.mesh
    r, _, _ = sphere_frame(T, P)
    w = vals * grid.area_weights
    mass = np.sum(w)
    mr = np.einsum("ij,ijk->k", w, r) / mass
    eta = 0.5 * np.array([[1 + mr[2], mr[0] - 1j * mr[1]], [mr[0] + 1j * mr[1], 1 - mr[2]]])
    return eta


def total_variation(grid: SphereGrid, a, b) -> np.ndarray:
    """``int |a - b| dOmega`` for (batched) coefficient arrays."""
    d = grid.synthesize(np.asarray(a) - np.asarray(b))
    return np.sum(np.abs(d) * grid.area_weights, axis=(-2, -1))


# --- backward equation ---------------------------------------------------


@dataclass
class ValueSolution:
    times: np.ndarray
    value: np.ndarray  # coefficients (K + 1, L + 1, 2L + 1)
    policy: np.ndarray  # grid values (K + 1, nlat, nlon)
    grid: SphereGrid


def _time_grid(T: float, dt: float) -> np.ndarray:
    K = int(round(T / dt))
    if K < 1 or abs(K * dt - T) > 1e-9 * T:
        raise ValueError("T must be a positive integer multiple of dt")
    return np.arange(K + 1) * dt


def hjb_backward_solve(spec: GameSpec, etas, dt: float, grid: SphereGrid, *, policy=None,
                       check_bound: bool = True) -> ValueSolution:
    """Backward mild sweep for the value ``S`` and the optimal feedback ``u``.

    ``S_t = e^{2 dt Delta} S_{t+dt} + phi1 * R(S_{t+dt})`` with
    ``R = <J> + max_u (u Pi - c u^2 / 2) + b_eta . grad S`` and ``b_eta`` the
    velocity of ``H + A^{eta-bar}``.  ``etas`` holds one density matrix per
    time node.  Given a fixed ``policy`` (grid values per time node) the sweep
    evaluates that feedback instead of optimizing.
    """
    times = _time_grid(spec.T, dt)
    etas = np.asarray(etas, dtype=complex)
    if etas.shape != (len(times), 2, 2):
        raise ValueError("need one eta per time node")
    Th, Ph = grid.mesh
    heat = heat_multiplier(grid.L, dt)
    w1 = phi1(grid.L, dt)
    J = grid.analyze(bloch_expectation(spec.J, Th, Ph))
    hc_t, hc_p = bloch_drift(spec.Hc, Th, Ph)
    K = len(times) - 1
    S = np.empty((K + 1, grid.L + 1, 2 * grid.L + 1))
    U = np.empty((K + 1,) + grid.shape)
    S[K] = grid.analyze(bloch_expectation(spec.F, Th, Ph))
    for k in range(K, -1, -1):
        gt, gp = grid.gradient(S[k])
        Pi = hc_t * gt + hc_p * gp
        U[k] = control_from_gradient(Pi, spec.c, spec.U0) if policy is None else policy[k]
        if k == 0:
            break
        bt, bp = bloch_drift(mean_field_operator(spec, etas[k]), Th, Ph)
        R = U[k] * Pi - 0.5 * spec.c * U[k] ** 2 + bt * gt + bp * gp
        S[k - 1] = heat * S[k] + w1 * (J + grid.analyze(R))
    if not np.all(np.isfinite(S)):
        raise FloatingPointError("non-finite value function")
    if check_bound:
        sup = np.max(np.abs(grid.synthesize(S)), axis=(-2, -1))
        bound = spec.value_bound(times)
        if np.any(sup > bound + 1e-9):
            k = int(np.argmax(sup - bound))
            raise FloatingPointError(f"value bound violated at t={times[k]:.4g}: {sup[k]:.6g} > {bound[k]:.6g}")
    return ValueSolution(times, S, U, grid)


# --- forward equation ----------------------------------------------------


@dataclass
class MeasureFlow:
    times: np.ndarray
    coeffs: np.ndarray  # (K + 1, L + 1, 2L + 1); slot 0 is the band-limited point mass
    etas: np.ndarray
    clip_defects: np.ndarray  # negative mass removed per step
    grid: SphereGrid

    @property
    def total_mass(self) -> np.ndarray:
        return self.coeffs[:, 0, self.grid.L] * np.sqrt(4.0 * np.pi)


def _clip_and_normalize(grid: SphereGrid, c):
    vals = grid.synthesize(c)
    neg = -np.sum(np.minimum(vals, 0.0) * grid.area_weights)
    if neg > 0:
        c = grid.analyze(np.maximum(vals, 0.0))
    mass = c[0, grid.L] * np.sqrt(4.0 * np.pi)
    return c / mass, neg, mass - 1.0


def kolmogorov_forward_solve(spec: GameSpec, policy, etas, dt: float, grid: SphereGrid) -> MeasureFlow:
    """Forward mild sweep from the point mass at ``psi0``.

    The first step is the exact heat kernel ``K(dt, ., w0)``; afterwards
    ``mu_{t+dt} = e^{2 dt Delta} mu_t - phi1 * div(b mu_t)`` with ``b`` the
    velocity of ``H + u_t Hc + A^{eta_t-bar}``.  Negative grid values are
    clipped and the mass renormalized; both defects are logged and a defect
    above ``MASS_DEFECT_LIMIT`` aborts.
    """
    times = _time_grid(spec.T, dt)
    K = len(times) - 1
    policy = np.asarray(policy, dtype=float)
    etas = np.asarray(etas, dtype=complex)
    if policy.shape != (K + 1,) + grid.shape or etas.shape != (K + 1, 2, 2):
        raise ValueError("policy and eta must be given on every time node")
    Th, Ph = grid.mesh
    th0, ph0 = spec.bloch0
    heat = heat_multiplier(grid.L, dt)
    w1 = phi1(grid.L, dt)
    hc_t, hc_p = bloch_drift(spec.Hc, Th, Ph)
    mu = np.empty((K + 1, grid.L + 1, 2 * grid.L + 1))
    mu[0] = grid.kernel_coeffs(0.0, th0, ph0)
    clip = np.zeros(K + 1)
    out_eta = np.empty((K + 1, 2, 2), dtype=complex)
    out_eta[0] = np.outer(spec.psi0, spec.psi0.conj())
    for k in range(K):
        if k == 0:
            nxt = grid.kernel_coeffs(dt, th0, ph0)
        else:
            vals = grid.synthesize(mu[k])
            bt, bp = bloch_drift(mean_field_operator(spec, etas[k]), Th, Ph)
            bt = bt + policy[k] * hc_t
            bp = bp + policy[k] * hc_p
            nxt = heat * mu[k] - w1 * grid.divergence(bt * vals, bp * vals)
        nxt, neg, mass_def = _clip_and_normalize(grid, nxt)
        if neg > MASS_DEFECT_LIMIT or abs(mass_def) > MASS_DEFECT_LIMIT:
            raise FloatingPointError(f"forward step {k}: clipped mass {neg:.2e}, mass defect {mass_def:.2e}")
        if neg > 0:
            log.debug("forward step %d clipped %.3e negative mass", k, neg)
        clip[k + 1] = neg
        mu[k + 1] = nxt
        out_eta[k + 1] = eta_from_measure(grid, nxt)
    if not np.all(np.isfinite(mu)):
        raise FloatingPointError("non-finite measure")
    return MeasureFlow(times, mu, out_eta, clip, grid)


def heat_flow(spec: GameSpec, dt: float, grid: SphereGrid) -> MeasureFlow:
    """Drift-free flow ``K(t, ., w0)``: the Picard starting point."""
    times = _time_grid(spec.T, dt)
    th0, ph0 = spec.bloch0
    mu = np.array([grid.kernel_coeffs(t, th0, ph0) for t in times])
    etas = np.array([eta_from_measure(grid, m) for m in mu])
    etas[0] = np.outer(spec.psi0, spec.psi0.conj())
    return MeasureFlow(times, mu, etas, np.zeros(len(times)), grid)


# --- fixed point ---------------------------------------------------------


@dataclass
class MfgSolution:
    spec: GameSpec
    grid: SphereGrid
    dt: float
    times: np.ndarray
    value: np.ndarray
    policy: np.ndarray  # policy used in the final forward solve
    flow: np.ndarray
    etas: np.ndarray
    iterations: int
    converged: bool
    diverged: bool
    tv_increments: list
    eta_increments: list
    consistency_residual: float = np.nan
    clip_defects: np.ndarray | None = None

    @property
    def contraction_factors(self) -> np.ndarray:
        d = np.asarray(self.tv_increments)
        return d[1:] / d[:-1] if len(d) > 1 else np.array([])

    @property
    def eta_regularity(self) -> float:
        """``max tr|eta_{t+dt} - eta_t| / dt`` along the equilibrium curve."""
        return float(np.max(trace_distance(self.etas[1:], self.etas[:-1])) / self.dt)

    def policy_at(self, k: int) -> np.ndarray:
        return self.policy[k]


def picard_solve(spec: GameSpec, dt: float = 0.005, grid: SphereGrid | None = None, max_iter: int = 20,
                 tol: float = 1e-5) -> MfgSolution:
    """Fixed-point iteration ``mu -> eta -> (S, u) -> mu``.

    Stops once ``sup_t int |mu^{k+1}_t - mu^k_t|`` falls below ``tol``; the
    sup-over-time trace distance of successive eta curves is reported too.
    When three successive contraction factors exceed 1 the run is flagged as
    diverging; without convergence the iterate with the smallest increment
    is returned.
    """
    grid = grid or SphereGrid()
    flow = heat_flow(spec, dt, grid)
    tv, eta_inc = [], []
    best = None
    converged = diverged = False
    for it in range(1, max_iter + 1):
        val = hjb_backward_solve(spec, flow.etas, dt, grid)
        new = kolmogorov_forward_solve(spec, val.policy, flow.etas, dt, grid)
        tv.append(float(np.max(total_variation(grid, new.coeffs, flow.coeffs))))
        eta_inc.append(float(np.max(trace_distance(new.etas, flow.etas))))
        log.info("picard %d: tv %.3e, eta %.3e", it, tv[-1], eta_inc[-1])
        if best is None or tv[-1] <= best[0]:
            best = (tv[-1], it, val, new)
        flow = new
        if tv[-1] < tol:
            converged = True
            break
        q = np.asarray(tv[-4:])
        if len(q) == 4 and np.all(q[1:] > q[:-1]):
            diverged = True
            log.warning("picard iteration diverging after %d steps", it)
            break
    if not converged:
        _, it, val, new = best
    sol = MfgSolution(spec, grid, dt, new.times, val.value, val.policy, new.coeffs, new.etas, it,
                      converged, diverged, tv, eta_inc, clip_defects=new.clip_defects)
    sol.consistency_residual = consistency_residual(sol)
    return sol


def consistency_residual(solution: MfgSolution) -> float:
    """``sup |u_com - u_ind|`` with ``u_ind`` re-derived from the final eta curve."""
    fresh = hjb_backward_solve(solution.spec, solution.etas, solution.dt, solution.grid)
    return float(np.max(np.abs(fresh.policy - solution.policy)))


def eta_sensitivity(solution: MfgSolution, eps: float, rng: np.random.Generator, probes: int = 4) -> float:
    """Largest ``sup|u(eta') - u(eta)| / sup_t tr|eta' - eta|`` over random perturbations."""
    spec, grid, dt = solution.spec, solution.grid, solution.dt
    base = hjb_backward_solve(spec, solution.etas, dt, grid).policy
    worst = 0.0
    for _ in range(probes):
        v = rng.normal(size=2) + 1j * rng.normal(size=2)
        v /= np.linalg.norm(v)
        target = np.outer(v, v.conj())
        pert = (1 - eps / 2) * solution.etas + (eps / 2) * target
        dist = float(np.max(trace_distance(pert, solution.etas)))
        if dist <= 0:
            continue
        u = hjb_backward_solve(spec, pert, dt, grid).policy
        worst = max(worst, float(np.max(np.abs(u - base))) / dist)
    return worst


def bilinear_lookup(grid: SphereGrid, values, theta, phi) -> np.ndarray:
    """Bilinear interpolation of grid ``values`` at Bloch angles.

    Angles outside the outermost latitude nodes use the edge rows.
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.mod(np.asarray(phi, dtype=float), 2 * np.pi)
    th_nodes = grid.theta
    i = np.clip(np.searchsorted(th_nodes, theta) - 1, 0, len(th_nodes) - 2)
    a = np.clip((theta - th_nodes[i]) / (th_nodes[i + 1] - th_nodes[i]), 0.0, 1.0)
    jf = phi / (2 * np.pi / grid.nlon)
    j = np.floor(jf).astype(int) % grid.nlon
    b = jf - np.floor(jf)
    j1 = (j + 1) % grid.nlon
    return ((1 - a) * (1 - b) * values[..., i, j] + (1 - a) * b * values[..., i, j1]
            + a * (1 - b) * values[..., i + 1, j] + a * b * values[..., i + 1, j1])


def time_node(t: float, dt: float, count: int) -> int:
    """Index of the time node at or left of ``t``."""
    return int(np.clip(np.floor(t / dt + 1e-9), 0, count - 1))


def policy_lookup(solution: MfgSolution, t: float, theta, phi) -> np.ndarray:
    """Policy at time ``t`` (left time node) and Bloch angles, bilinear on the grid."""
    k = time_node(t, solution.dt, len(solution.times))
    return bilinear_lookup(solution.grid, solution.policy[k], theta, phi)
