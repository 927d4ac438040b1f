"""Finite-N games built on the mean-field equilibrium.

Every player of the N-atom system observes its own marginal ``Gamma^(j)``
and plays the equilibrium feedback looked up at the Bloch direction of that
marginal.  One player deviates; its expected payoff gain over the symmetric
profile is the Nash defect measured here.  Deviating and symmetric runs
consume identical noise (common random numbers), so the gain is estimated
from paired differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .core import PAULIS, InteractionTensor, all_marginals, gell_mann_family, operator_norm
from .filtering import NoisePath, PairSum, renormalize, step_nparticle
from .meanfield import MAX_AMPLITUDES, estimate_lipschitz, theorem_bound
from .mfg import GameSpec, MfgSolution, bilinear_lookup, hjb_backward_solve, time_node
from .projective import bloch_drift, bloch_vector
from .sphere import SphereGrid

BEST_RESPONSE = "best-response"


def quantum_empirical_measure(psi, d: int = 2) -> np.ndarray:
    """Average of the single-site marginals, ``(1/N) sum_j Gamma^(j)``."""
    return all_marginals(psi, d).mean(axis=-3)


def running_payoff(times, gammas, controls, spec: GameSpec) -> np.ndarray:
    """``int (tr(J gamma) - c u^2 / 2) ds + tr(F gamma_T)`` along sampled paths.

    ``gammas`` has shape ``batch + (K + 1, 2, 2)`` on the time nodes and
    ``controls`` shape ``batch + (K,)`` holds the control applied on each step.
    The state term uses the trapezoid rule, the control cost is exact for
    piecewise-constant controls.
    """
    times = np.asarray(times, dtype=float)
    gammas = np.asarray(gammas)
    controls = np.asarray(controls, dtype=float)
    if gammas.shape[-3] != len(times) or controls.shape[-1] != len(times) - 1:
        raise ValueError("samples missing: need states on every node and one control per step")
    j = np.einsum("ij,...ji->...", spec.J, gammas).real
    f = np.einsum("ij,...ji->...", spec.F, gammas[..., -1, :, :]).real
    dt = np.diff(times)
    state = np.sum(0.5 * (j[..., 1:] + j[..., :-1]) * dt, axis=-1)
    cost = 0.5 * spec.c * np.sum(controls**2 * dt, axis=-1)
    return state - cost + f


def payoff_nagent(times, marginals, j: int, controls, spec: GameSpec) -> np.ndarray:
    """Payoff of player ``j`` (1-based) from marginals ``batch + (K + 1, N, 2, 2)``."""
    return running_payoff(times, np.asarray(marginals)[..., j - 1, :, :], np.asarray(controls)[..., j - 1], spec)


def payoff_limit(times, gammas, controls, spec: GameSpec) -> np.ndarray:
    """Payoff of a limiting player from its pure-state densities ``batch + (K + 1, 2, 2)``."""
    return running_payoff(times, gammas, controls, spec)


def bloch_angles(gamma):
    """Angles of the Bloch direction of (possibly mixed) qubit states; the centre maps to the pole."""
    r = bloch_vector(gamma)
    nrm = np.linalg.norm(r, axis=-1)
    cos = np.where(nrm > 0, r[..., 2] / np.where(nrm > 0, nrm, 1.0), 1.0)
    return np.arccos(np.clip(cos, -1.0, 1.0)), np.mod(np.arctan2(r[..., 1], r[..., 0]), 2 * np.pi)


class GridFeedback:
    """Feedback tabulated on the sphere grid at the time nodes ``k dt``.

    Evaluated at the Bloch direction of the marginal, bilinear in the angles
    and piecewise constant in time.
    """

    def __init__(self, grid: SphereGrid, dt: float, values, bound: float):
        self.grid = grid
        self.dt = float(dt)
        self.values = np.clip(np.asarray(values, dtype=float), -bound, bound)
        self.bound = float(bound)

    @classmethod
    def constant(cls, grid: SphereGrid, dt: float, nodes: int, value: float, bound: float) -> "GridFeedback":
        return cls(grid, dt, np.full((nodes,) + grid.shape, float(value)), bound)

    def __call__(self, t, gamma):
        th, ph = bloch_angles(gamma)
        k = time_node(t, self.dt, len(self.values))
        return bilinear_lookup(self.grid, self.values[k], th, ph)


def policy_control(solution: MfgSolution) -> GridFeedback:
    """Equilibrium feedback evaluated at the Bloch direction of a marginal."""
    return GridFeedback(solution.grid, solution.dt, solution.policy, solution.spec.U0)


def environment(spec: GameSpec, N: int) -> GameSpec:
    """The game seen by one player when the other ``N - 1`` follow the equilibrium.

    The pair term weights the others by ``1/N``, so the mean-field operator
    is scaled by ``(N - 1) / N``.
    """
    return GameSpec(spec.H, spec.Hc, InteractionTensor(spec.A.coeffs * (N - 1) / N), spec.J, spec.F, spec.c,
                    spec.U0, spec.T, spec.psi0)


def best_response(solution: MfgSolution, N: int) -> GridFeedback:
    """Optimal feedback against the equilibrium ``eta`` in the ``N``-player environment."""
    val = hjb_backward_solve(environment(solution.spec, N), solution.etas, solution.dt, solution.grid)
    return GridFeedback(solution.grid, solution.dt, val.policy, solution.spec.U0)


def noise_sensitivities(solution: MfgSolution, spec: GameSpec, control: GridFeedback) -> np.ndarray:
    """``grad S . v_p`` on the grid for the value ``S`` of ``control`` in ``spec``.

    ``v_p`` is the Bloch velocity generated by one unit of ``dY^p`` for the
    channel ``i sigma_p``; shape ``(K + 1, 3) + grid.shape``.
    """
    grid = solution.grid
    S = hjb_backward_solve(spec, solution.etas, solution.dt, grid, policy=control.values).value
    T_, P_ = grid.mesh
    vel = [bloch_drift(-s, T_, P_) for s in PAULIS]
    out = np.empty((len(S), 3) + grid.shape)
    for k in range(len(S)):
        gt, gp = grid.gradient(S[k])
        for p, (vt, vp) in enumerate(vel):
            out[k, p] = vt * gt + vp * gp
    return out


@dataclass
class EmpiricalControl:
    """Feedback that also reads the quantum empirical measure of the population."""

    evaluator: object
    bound: float = np.inf

    def __call__(self, t, gamma, empirical):
        return np.clip(np.asarray(self.evaluator(t, gamma, empirical), dtype=float), -self.bound, self.bound)


def nash_envelope(spec: GameSpec, kappa: float, N, T: float | None = None) -> np.ndarray:
    """Theorem-form ceiling on the deviation gain.

    ``2 (||J|| T + ||F||) * 2 sqrt(2) * sqrt(bound)`` with ``bound`` the
    Gronwall estimate of ``E alpha`` when one player deviates; the gain is
    compared once for the deviating and once for the symmetric profile.
    """
    T = spec.T if T is None else T
    a = theorem_bound(T, spec.A.hs_norm, 0.0, np.asarray(N, dtype=float), kappa=kappa,
                      norm_hc=operator_norm(spec.Hc), variant="controlled-30", deviation=True)
    return 2.0 * (operator_norm(spec.J) * T + operator_norm(spec.F)) * 2.0 * np.sqrt(2.0) * np.sqrt(a)


@dataclass
class NashRow:
    N: int
    deviation: str
    gain: float
    stderr: float
    raw_gain: float
    raw_stderr: float
    envelope: float


@dataclass
class NashReport:
    """Deviation gains of player 1.

    ``gains`` are control-variate estimates (raw paired differences minus the
    zero-mean noise martingales of both runs); ``raw_gains`` are the plain
    paired differences.  Both are unbiased for the same quantity.
    """

    Ns: list
    deviations: list
    gains: np.ndarray  # (len(Ns), len(deviations))
    stderr: np.ndarray
    raw_gains: np.ndarray
    raw_stderr: np.ndarray
    envelope: np.ndarray  # (len(Ns),)
    kappa: float
    replicas: int
    seed: int
    symmetric_payoffs: list = field(default_factory=list)  # per N: (mean, stderr) per player

    def gain_of(self, name: str) -> np.ndarray:
        return self.gains[:, self.deviations.index(name)]

    def stderr_of(self, name: str) -> np.ndarray:
        return self.stderr[:, self.deviations.index(name)]

    @property
    def fitted_constant(self) -> float:
        """Least-squares ``C`` in ``gain ~ C N^{-1/4}`` for the strongest deviator (reported only)."""
        g = self.gain_of(BEST_RESPONSE) if BEST_RESPONSE in self.deviations else self.gains.max(axis=1)
        x = np.asarray(self.Ns, dtype=float) ** -0.25
        return float(np.dot(g, x) / np.dot(x, x))

    def spearman(self, name: str = BEST_RESPONSE) -> float:
        return float(spearmanr(self.Ns, self.gain_of(name)).statistic)

    def under_envelope(self) -> bool:
        return bool(np.all(self.gains <= self.envelope[:, None]))

    def rows(self):
        for i, N in enumerate(self.Ns):
            for k, name in enumerate(self.deviations):
                yield NashRow(int(N), name, float(self.gains[i, k]), float(self.stderr[i, k]),
                              float(self.raw_gains[i, k]), float(self.raw_stderr[i, k]), float(self.envelope[i]))


def _deviation_values(ctrl, t, marg):
    if isinstance(ctrl, EmpiricalControl):
        return ctrl(t, marg[:, 0], marg.mean(axis=1))
    return ctrl(t, marg[:, 0])


@dataclass
class PlayResult:
    times: np.ndarray
    payoffs: np.ndarray  # (runs, replicas, N); run 0 is the symmetric profile
    martingales: np.ndarray  # (runs, replicas) for player 1


def play(spec: GameSpec, common, deviations: list, N: int, replicas: int, seed: int, dt: float, *,
         sensitivities=None, sensitivity_grid: SphereGrid | None = None, sensitivity_dt: float | None = None,
         scheme: str = "euler-maruyama") -> PlayResult:
    """Run the symmetric profile and each deviation of player 1 on shared noise.

    Measurement uses the channels ``i sigma_p``.  Replica ``r`` consumes stream
    ``(seed, N, r)`` in every run.  ``sensitivities`` optionally gives, per
    run, fields ``(K' + 1, 3)`` on ``sensitivity_grid`` at nodes ``k sensitivity_dt``
    (or ``None``); player 1 then accumulates ``sum_k g_p(t_k, Gamma^(1)) dY^p_k``,
    a martingale with zero mean.
    """
    d = 2
    if d**N > MAX_AMPLITUDES:
        raise MemoryError(f"{d}^{N} amplitudes exceed the guard {MAX_AMPLITUDES}")
    runs = 1 + len(deviations)
    if d**N * replicas * runs > 16 * MAX_AMPLITUDES:
        raise MemoryError("batch too large for the amplitude guard")
    Ls = gell_mann_family(1)
    steps = int(round(spec.T / dt))
    if steps < 1 or abs(steps * dt - spec.T) > 1e-9 * spec.T:
        raise ValueError("T must be a positive integer multiple of dt")
    sens = list(sensitivities) if sensitivities is not None else [None] * runs
    if len(sens) != runs:
        raise ValueError("one sensitivity entry per run required")
    P = len(Ls)
    noise = np.stack([NoisePath.generate(seed, steps, N, P, dt, (N, r)).increments for r in range(replicas)], axis=1)
    prod = spec.psi0
    for _ in range(N - 1):
        prod = np.kron(prod, spec.psi0)
    psi = np.tile(prod, (runs * replicas, 1))
    pair_sum = PairSum(spec.A, N) if (not spec.A.is_zero and N > 1) else None
    margs = np.empty((steps + 1, runs * replicas, N, d, d), dtype=complex)
    ctrl = np.empty((steps, runs * replicas, N))
    mart = np.zeros((runs, replicas))
    for k in range(steps + 1):
        t = k * dt
        m = all_marginals(psi, d)
        margs[k] = m
        if k == steps:
            break
        u = common(t, m)
        for i, dev in enumerate(deviations):
            sl = slice((i + 1) * replicas, (i + 2) * replicas)
            u[sl, 0] = _deviation_values(dev, t, m[sl])
        ctrl[k] = u
        th, ph = bloch_angles(m[:, 0])
        for i, g in enumerate(sens):
            if g is None:
                continue
            sl = slice(i * replicas, (i + 1) * replicas)
            gk = g[time_node(t, sensitivity_dt, len(g))]
            vals = bilinear_lookup(sensitivity_grid, gk, th[sl], ph[sl])  # (3, replicas)
            mart[i] += np.sum(vals * noise[k, :, 0, :].T, axis=0)
        dY = np.tile(noise[k], (runs, 1, 1))
        psi = step_nparticle(psi, spec.H, Ls, dY, dt, Hc=spec.Hc, A=spec.A, u=u, d=d, scheme=scheme,
                             pair_sum=pair_sum)
        psi, _ = renormalize(psi)
    times = np.arange(steps + 1) * dt
    pay = running_payoff(times, np.moveaxis(margs, 0, 2), np.moveaxis(ctrl, 0, 2), spec)
    return PlayResult(times, pay.reshape(runs, replicas, N), mart)


def default_deviations(solution: MfgSolution) -> dict:
    spec, grid, dt, K = solution.spec, solution.grid, solution.dt, len(solution.times)
    return {"const+U0": GridFeedback.constant(grid, dt, K, spec.U0, spec.U0),
            "const-U0": GridFeedback.constant(grid, dt, K, -spec.U0, spec.U0),
            "const0": GridFeedback.constant(grid, dt, K, 0.0, spec.U0),
            BEST_RESPONSE: BEST_RESPONSE}


def nash_experiment(solution: MfgSolution, Ns, replicas: int, seed: int, *, dt: float = 1e-3, deviations=None,
                    kappa: float | None = None, control_variate: bool = True, mapper=map) -> NashReport:
    """Deviation gains of player 1 for each ``N``.

    ``deviations`` maps names to controls (``GridFeedback``, any callable
    ``u(t, gamma)``, an ``EmpiricalControl`` or the marker ``BEST_RESPONSE``).
    The default menu is the constants ``+U0``, ``-U0``, ``0`` and the best
    response.  ``kappa`` (trace-norm Lipschitz constant of the equilibrium
    feedback) is estimated when not given.  With ``control_variate`` the
    gains of grid-tabulated controls are corrected by the martingale of
    their value in the ``N``-player environment.  ``mapper`` runs the
    independent per-N tasks (e.g. ``ThreadPoolExecutor.map``); results do not
    depend on execution order.
    """
    spec = solution.spec
    common = policy_control(solution)
    deviations = default_deviations(solution) if deviations is None else dict(deviations)
    names = list(deviations)
    if kappa is None:
        rng = np.random.default_rng([seed, 1])
        kappa = max(estimate_lipschitz(common, 2, rng, 2000, t=float(t)) for t in solution.times[:-1])

    def one(N):
        ctrls = [best_response(solution, N) if isinstance(deviations[n], str) and deviations[n] == BEST_RESPONSE
                 else deviations[n] for n in names]
        sens = None
        if control_variate:
            env = environment(spec, N)
            sens = [noise_sensitivities(solution, env, c) if isinstance(c, GridFeedback) else None
                    for c in [common] + ctrls]
        res = play(spec, common, ctrls, N, replicas, seed, dt, sensitivities=sens, sensitivity_grid=solution.grid,
                   sensitivity_dt=solution.dt)
        diff = res.payoffs[1:, :, 0] - res.payoffs[0][None, :, 0]
        adj = diff - (res.martingales[1:] - res.martingales[0][None, :])
        root = np.sqrt(replicas)
        sym = (res.payoffs[0].mean(axis=0), res.payoffs[0].std(axis=0, ddof=1) / root)
        return (adj.mean(axis=1), adj.std(axis=1, ddof=1) / root, diff.mean(axis=1),
                diff.std(axis=1, ddof=1) / root, sym)

    out = list(mapper(one, list(Ns)))
    gains, errs, raw, raw_errs = (np.array([o[k] for o in out]).reshape(len(Ns), len(names)) for k in range(4))
    sym = [o[4] for o in out]
    env_curve = np.atleast_1d(nash_envelope(spec, kappa, Ns))
    return NashReport(list(Ns), names, gains, errs, raw, raw_errs, env_curve, float(kappa), replicas, seed, sym)
