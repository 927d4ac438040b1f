"""Belavkin filtering equations: single atom, multi-channel and N interacting atoms.

All steppers are explicit and evaluate controls at the left end of the step.
They accept batches: any leading axes on the state are treated as independent
trajectories, and the matching leading axes of ``dY`` carry their noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    InteractionTensor,
    all_marginals,
    as_state,
    is_anti_hermitian,
    num_sites,
    pair_operator,
    site_operator,
)

log = logging.getLogger(__name__)

SCHEMES = ("euler-maruyama", "milstein")


def noise_generator(seed: int, trajectory=0) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, trajectory)``; ``trajectory`` may be a tuple of keys."""
    keys = [int(k) for k in np.atleast_1d(trajectory)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *keys])))


@dataclass
class NoisePath:
    """Brownian increments ``dY`` of shape ``(steps, sites, channels)``."""

    increments: np.ndarray
    dt: float
    seed: int = 0
    trajectory: int = 0

    @classmethod
    def generate(cls, seed, steps, sites, channels, dt, trajectory=0) -> "NoisePath":
        if dt <= 0:
            raise ValueError("dt must be positive")
        rng = noise_generator(seed, trajectory)
        inc = rng.standard_normal((steps, sites, channels)) * np.sqrt(dt)
        return cls(inc, dt, seed, trajectory)

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @property
    def sites(self) -> int:
        return self.increments.shape[1]

    @property
    def channels(self) -> int:
        return self.increments.shape[2]

    def coarsen(self) -> "NoisePath":
        """Same Brownian path sampled at twice the step."""
        if self.steps % 2:
            raise ValueError("need an even number of steps to coarsen")
        inc = self.increments[0::2] + self.increments[1::2]
        return NoisePath(inc, 2 * self.dt, self.seed, self.trajectory)


def batch_noise(seed, trajectories: Sequence[int], steps, sites, channels, dt) -> np.ndarray:
    """Increments for several trajectories, shape ``(steps, B, sites, channels)``."""
    paths = [NoisePath.generate(seed, steps, sites, channels, dt, k).increments for k in trajectories]
    return np.stack(paths, axis=1)


@dataclass
class SdeConfig:
    dt: float
    T: float
    scheme: str = "euler-maruyama"
    renormalize: bool = True
    sample_every: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.T < self.dt:
            raise ValueError("T must be at least dt")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.sample_every < 1:
            raise ValueError("sample_every must be >= 1")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class FeedbackControl:
    """Markov feedback ``u(t, gamma)`` clamped to ``[-bound, bound]``.

    ``evaluator`` must accept a batch of density matrices ``(..., d, d)`` and
    return an array of shape ``(...)``.  ``kappa`` is the declared Lipschitz
    constant with respect to the trace norm.
    """

    evaluator: Callable[[float, np.ndarray], np.ndarray]
    bound: float = np.inf
    kappa: float = 0.0

    def __call__(self, t, gamma):
        u = np.asarray(self.evaluator(t, np.asarray(gamma)), dtype=float)
        return np.clip(u, -self.bound, self.bound)

    @classmethod
    def constant(cls, value: float, bound: float = np.inf) -> "FeedbackControl":
        def ev(t, gamma):
            return np.full(np.shape(gamma)[:-2], float(value))

        return cls(ev, bound, 0.0)

    @classmethod
    def linear(cls, observable, gain: float, bound: float = np.inf, offset: float = 0.0) -> "FeedbackControl":
        """``u = offset + gain * tr(O gamma)``; Lipschitz with ``kappa = |gain| ||O||``."""
        obs = np.asarray(observable, dtype=complex)

        def ev(t, gamma):
            return offset + gain * np.einsum("ij,...ji->...", obs, gamma).real

        return cls(ev, bound, abs(gain) * float(np.linalg.norm(obs, 2)))


@dataclass
class FilterModel:
    """Operator bundle for the filtering dynamics of one or N atoms."""

    H: np.ndarray
    Ls: list = field(default_factory=list)
    Hc: np.ndarray | None = None
    A: InteractionTensor | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=complex)
        self.Ls = [np.asarray(L, dtype=complex) for L in self.Ls]
        d = self.H.shape[0]
        if self.Hc is not None:
            self.Hc = np.asarray(self.Hc, dtype=complex)
        for op in [*self.Ls] + ([self.Hc] if self.Hc is not None else []):
            if op.shape != (d, d):
                raise ValueError("operator dimensions disagree")
        if self.A is not None and self.A.dim != d:
            raise ValueError("interaction tensor dimension disagrees")

    @property
    def d(self) -> int:
        return self.H.shape[0]

    @property
    def conservative(self) -> bool:
        return all(is_anti_hermitian(L) for L in self.Ls)


def _stack_ls(Ls, d):
    if len(Ls) == 0:
        return np.zeros((0, d, d), dtype=complex)
    return np.asarray(Ls, dtype=complex)


def _site_generator(H, Ls, dY, dt, u=0.0, Hc=None, scheme="euler-maruyama"):
    """One-site update operator ``G`` with ``chi' = chi + G chi``.

    Shapes: ``dY`` is ``(..., P)``, ``u`` broadcasts against ``dY[..., 0]``.
    """
    d = H.shape[0]
    L = _stack_ls(Ls, d)
    dY = np.asarray(dY, dtype=float)
    lsq = np.einsum("pji,pjk->ik", L.conj(), L)  # sum_p L_p^* L_p
    ham = H
    if Hc is not None:
        u = np.asarray(u, dtype=float)
        ham = H + u[..., None, None] * Hc
    base = -(1j * ham + 0.5 * lsq) * dt
    X = np.einsum("...p,pij->...ij", dY, L)
    G = base + X
    if scheme == "milstein":
        # 1/2 sum_pq L_p L_q (dY_p dY_q - delta_pq dt); Levy-area terms omitted
        l2 = np.einsum("pij,pjk->ik", L, L)
        G = G + 0.5 * (X @ X - l2 * dt)
    elif scheme != "euler-maruyama":
        raise ValueError(f"unknown scheme {scheme!r}")
    return G


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("NaN or inf in state; trajectory aborted")


def renormalize(psi):
    """Scale to unit norm; returns ``(psi, norm - 1)`` with the pre-normalization defect."""
    nrm = np.linalg.norm(psi, axis=-1)
    return psi / nrm[..., None], nrm - 1.0


def step_linear_belavkin(chi, H, Ls, dY, dt, u=0.0, Hc=None, *, scheme="euler-maruyama", renormalize_state=False):
    """One step of the multi-channel linear filtering equation.

    ``chi' = chi - [i(H + u Hc) chi + 1/2 sum L_p^* L_p chi] dt + sum L_p chi dY_p``
    (plus the diagonal Milstein correction when ``scheme='milstein'``).
    """
    chi = as_state(chi)
    H = np.asarray(H, dtype=complex)
    if chi.shape[-1] != H.shape[0]:
        raise ValueError("state and Hamiltonian dimensions disagree")
    dY = np.asarray(dY, dtype=float)
    if dY.shape[-1] != len(Ls):
        raise ValueError("one noise increment per channel required")
    G = _site_generator(H, Ls, dY, dt, u, Hc, scheme)
    out = chi + np.einsum("...ij,...j->...i", G, chi)
    _check_finite(out)
    if renormalize_state:
        out, _ = renormalize(out)
    return out


def lindblad_rhs(gamma, H, Ls):
    """``-i[H, g] + sum_p (L g L^* - 1/2 L^*L g - 1/2 g L^*L)``."""
    gamma = np.asarray(gamma, dtype=complex)
    H = np.asarray(H, dtype=complex)
    out = -1j * (H @ gamma - gamma @ H)
    for L in Ls:
        L = np.asarray(L, dtype=complex)
        Ld = L.conj().T
        LdL = Ld @ L
        out = out + L @ gamma @ Ld - 0.5 * (LdL @ gamma + gamma @ LdL)
    return out


def step_density(gamma, H, Ls, dY, dt, u=0.0, Hc=None):
    """Euler-Maruyama step of the density-matrix filtering equation.

    The result is re-Hermitized and trace-normalized; the defects go to the
    module logger at DEBUG level.
    """
    gamma = np.asarray(gamma, dtype=complex)
    ham = np.asarray(H, dtype=complex)
    if Hc is not None:
        ham = ham + u * np.asarray(Hc, dtype=complex)
    dY = np.atleast_1d(np.asarray(dY, dtype=float))
    new = gamma + lindblad_rhs(gamma, ham, Ls) * dt
    for L, dy in zip(Ls, dY):
        L = np.asarray(L, dtype=complex)
        new = new + (gamma @ L.conj().T + L @ gamma) * dy
    _check_finite(new)
    herm = 0.5 * (new + new.conj().T)
    tr = np.trace(herm).real
    log.debug("step_density hermiticity defect %.3e trace defect %.3e",
              np.max(np.abs(new - herm)), tr - 1.0)
    return herm / tr


def innovation_increment(chi, L, dY, dt) -> float:
    """``dB = dY - <L + L^*>_chi dt``."""
    chi = as_state(chi)
    L = np.asarray(L, dtype=complex)
    mean = (np.vdot(chi, (L + L.conj().T) @ chi) / np.vdot(chi, chi)).real
    return float(dY - mean * dt)


# --- N atoms ---------------------------------------------------------------


def _operator_schmidt(A: InteractionTensor, tol=1e-13):
    """``A = sum_k X_k (x) Y_k`` from an SVD of the realigned two-site matrix."""
    d = A.dim
    c = A.coeffs  # (j, k, j', k'): site1 out, site2 out, site1 in, site2 in
    r = c.transpose(0, 2, 1, 3).reshape(d * d, d * d)
    U, s, Vh = np.linalg.svd(r)
    keep = s > tol * max(s[0], 1.0) if s.size else s > 0
    X = [(np.sqrt(sv) * U[:, k]).reshape(d, d) for k, sv in enumerate(s) if keep[k]]
    Y = [(np.sqrt(sv) * Vh[k]).reshape(d, d) for k, sv in enumerate(s) if keep[k]]
    return X, Y


class PairSum:
    """Applies ``sum_{l<j} A_{lj}`` to N-site states.

    Two strided routes give the same operator: direct two-site contractions
    over all pairs, or collective one-site sums from the operator-Schmidt
    decomposition (uses the pair symmetry ``A_{lj} = A_{jl}``).  The cheaper
    one is chosen from the pair count and the Schmidt rank.
    """

    def __init__(self, A: InteractionTensor, n_sites: int, route: str | None = None):
        self.A = A
        self.n = n_sites
        self.X, self.Y = _operator_schmidt(A)
        self.diag = sum((x @ y for x, y in zip(self.X, self.Y)), np.zeros((A.dim, A.dim), dtype=complex))
        n_pairs = n_sites * (n_sites - 1) // 2
        collective_cost = len(self.X) * 2 * n_sites
        if route is None:
            route = "collective" if collective_cost < 2 * n_pairs else "pairs"
        if route not in ("pairs", "collective"):
            raise ValueError(route)
        self.route = route

    def apply(self, psi):
        d, n = self.A.dim, self.n
        if n < 2 or self.A.is_zero:
            return np.zeros_like(psi)
        if self.route == "pairs":
            out = np.zeros_like(psi)
            for l in range(1, n + 1):
                for j in range(l + 1, n + 1):
                    out += pair_operator(self.A.matrix, psi, l, j, d)
            return out
        out = np.zeros_like(psi)
        for x, y in zip(self.X, self.Y):
            sy = sum(site_operator(y, psi, j, d) for j in range(1, n + 1))
            out += 0.5 * sum(site_operator(x, sy, j, d) for j in range(1, n + 1))
        out += sum(site_operator(-0.5 * self.diag, psi, j, d) for j in range(1, n + 1))
        return out


def evaluate_controls(controls, t, marginals):
    """Control values ``u_j = control_j(t, Gamma^(j))`` with shape ``marginals.shape[:-2]``."""
    if controls is None:
        return np.zeros(marginals.shape[:-2])
    if isinstance(controls, FeedbackControl):
        return controls(t, marginals)
    if callable(controls):
        return np.asarray(controls(t, marginals), dtype=float)
    n = marginals.shape[-3]
    if len(controls) != n:
        raise ValueError("one control per site required")
    return np.stack([np.asarray(c(t, marginals[..., j, :, :]), dtype=float) for j, c in enumerate(controls)], axis=-1)


def step_nparticle(psi, H, Ls, dY, dt, *, Hc=None, A=None, controls=None, u=None, t=0.0, d=2,
                   scheme="euler-maruyama", pair_sum: PairSum | None = None):
    """One explicit step of the N-atom filtering equation.

    Site terms ``H_j + u_j Hc_j`` and channels ``L^p_j dY^{j,p}``, plus the pair
    term ``(1/N) sum_{l<j} A_{lj}``.  The one-site factors ``I + G_j`` commute
    and are applied one after another, which keeps the cross-site products
    ``G_i G_j`` (the Milstein terms of independent sites).  Without them every
    site would lose O(N dt) fidelity per unit time relative to its one-site
    step, and a product state would not stay a product of one-site steps.  ``dY`` has shape ``batch + (N, P)``.  Controls
    are evaluated at the left endpoint on the site marginals unless explicit
    values ``u`` (shape ``batch + (N,)``) are given.
    """
    psi = as_state(psi)
    H = np.asarray(H, dtype=complex)
    n = num_sites(psi, d)
    dY = np.asarray(dY, dtype=float)
    if dY.shape[-2] != n:
        raise ValueError("noise must have one row per site")
    if u is None and Hc is not None and controls is not None:
        u = evaluate_controls(controls, t, all_marginals(psi, d))
    if u is None:
        u = np.zeros(dY.shape[:-1])
    u = np.broadcast_to(np.asarray(u, dtype=float), dY.shape[:-1])
    if A is not None and not A.is_zero and n > 1:
        if pair_sum is None or pair_sum.n != n:
            pair_sum = PairSum(A, n)
    else:
        pair_sum = None
    out = psi.copy()
    for j in range(1, n + 1):
        G = _site_generator(H, Ls, dY[..., j - 1, :], dt, u[..., j - 1], Hc, scheme)
        out = out + site_operator(G, out, j, d)
    if pair_sum is not None:
        out += (-1j * dt / n) * pair_sum.apply(psi)
    _check_finite(out)
    return out


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    marginals: np.ndarray
    controls: np.ndarray
    norm_defects: np.ndarray
    seed: int
    trajectory: int


def simulate_trajectory(initial, model: FilterModel, config: SdeConfig, seed: int, *,
                        controls=None, trajectory: int = 0, noise: NoisePath | None = None) -> Trajectory:
    """Integrate one filtered path on ``[0, T]``; deterministic given ``(seed, trajectory)``.

    ``initial`` is a single-atom vector (length ``d``) or an N-atom vector.
    Site marginals are recorded every ``config.sample_every`` steps, together
    with the control values applied at those times.  ``norm_defects[k]`` is
    ``||psi|| - 1`` after step ``k`` before any renormalization.
    """
    psi = as_state(initial).copy()
    d = model.d
    n = num_sites(psi, d)
    steps = config.steps
    P = len(model.Ls)
    if noise is None:
        noise = NoisePath.generate(seed, steps, n, P, config.dt, trajectory)
    if noise.steps < steps or noise.sites != n or noise.channels != P:
        raise ValueError("noise path does not match the model")
    pair_sum = PairSum(model.A, n) if model.A is not None and n > 1 else None
    times, states, margs, ctrl = [], [], [], []
    defects = np.empty(steps)
    for k in range(steps + 1):
        t = k * config.dt
        m = all_marginals(psi, d)
        u = evaluate_controls(controls, t, m) if (controls is not None and model.Hc is not None) else np.zeros(n)
        if k % config.sample_every == 0 or k == steps:
            times.append(t)
            states.append(psi.copy())
            margs.append(m)
            ctrl.append(u)
        if k == steps:
            break
        psi = step_nparticle(psi, model.H, model.Ls, noise.increments[k], config.dt, Hc=model.Hc, A=model.A,
                             u=u, d=d, scheme=config.scheme, pair_sum=pair_sum)
        nrm = np.linalg.norm(psi)
        defects[k] = nrm - 1.0
        if config.renormalize:
            psi = psi / nrm
    return Trajectory(np.array(times), np.array(states), np.array(margs), np.array(ctrl), defects, seed, trajectory)


def rk4(f, y0, dt, steps, sample_every=1):
    """Classical fixed-step Runge-Kutta; returns samples every ``sample_every`` steps (including both ends)."""
    y = np.asarray(y0, dtype=complex)
    out = [y]
    for k in range(steps):
        t = k * dt
        k1 = f(t, y)
        k2 = f(t + dt / 2, y + dt / 2 * k1)
        k3 = f(t + dt / 2, y + dt / 2 * k2)
        k4 = f(t + dt, y + dt * k3)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if (k + 1) % sample_every == 0 or k + 1 == steps:
            out.append(y)
    return np.array(out)


def solve_lindblad(gamma0, H, Ls, dt, steps, sample_every=1):
    """Averaged (master-equation) dynamics by RK4."""
    return rk4(lambda t, g: lindblad_rhs(g, H, Ls), gamma0, dt, steps, sample_every)
