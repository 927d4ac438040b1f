"""Mean-field limit: the nonlinear filtering equation and N-atom convergence runs.

The limiting single-atom equation carries the extra Hamiltonian ``A^{eta-bar}``
where ``eta_t = E psi_t psi_t^*`` is the law-level correlation matrix.  It is
approximated by an ensemble of copies whose empirical ``eta`` is refreshed
every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    InteractionTensor,
    all_marginals,
    as_state,
    check_density_matrix,
    contract_interaction,
    operator_norm,
    trace_distance,
)
from .filtering import (
    FeedbackControl,
    NoisePath,
    PairSum,
    SdeConfig,
    lindblad_rhs,
    renormalize,
    rk4,
    step_linear_belavkin,
    step_nparticle,
)

MAX_AMPLITUDES = 2**24


def ensemble_eta(members) -> np.ndarray:
    """Empirical correlation matrix ``mean psi psi^*`` over all leading axes."""
    m = np.asarray(members)
    flat = m.reshape(-1, m.shape[-1])
    return np.einsum("bi,bj->ij", flat, flat.conj()) / flat.shape[0]


@dataclass
class EnsembleState:
    members: np.ndarray

    @property
    def copies(self) -> int:
        return self.members.shape[0]

    @property
    def eta(self) -> np.ndarray:
        return ensemble_eta(self.members)


@dataclass
class EnsembleTrajectory:
    times: np.ndarray
    etas: np.ndarray
    members: np.ndarray
    controls: np.ndarray


def mean_field_step(chis, H, Ls, dY, dt, *, A: InteractionTensor | None = None, Hc=None, u=0.0,
                    eta=None, scheme="euler-maruyama"):
    """One step of the nonlinear filtering equation for every copy in ``chis``.

    ``eta`` defaults to the empirical correlation of ``chis`` themselves.
    """
    H = np.asarray(H, dtype=complex)
    if A is not None and not A.is_zero:
        if eta is None:
            eta = ensemble_eta(chis)
        H = H + contract_interaction(A, eta)
    return step_linear_belavkin(chis, H, Ls, dY, dt, u=u, Hc=Hc, scheme=scheme)


def _pure_densities(chis):
    return np.einsum("...i,...j->...ij", chis, chis.conj())


def solve_nonlinear_sse(psi0, H, Ls, M: int, config: SdeConfig, seed: int, *, A=None, Hc=None,
                        control: FeedbackControl | None = None) -> EnsembleTrajectory:
    """Self-consistent ensemble of ``M`` copies started from the same ``psi0``.

    Copy ``m`` draws its noise from stream ``(seed, m)``.
    """
    psi0 = as_state(psi0)
    d = psi0.shape[0]
    steps = config.steps
    P = len(Ls)
    noise = np.stack([NoisePath.generate(seed, steps, 1, P, config.dt, m).increments[:, 0] for m in range(M)], axis=1)
    chis = np.tile(psi0 / np.linalg.norm(psi0), (M, 1))
    times, etas, mem, ctrl = [], [], [], []
    for k in range(steps + 1):
        t = k * config.dt
        u = control(t, _pure_densities(chis)) if (control is not None and Hc is not None) else np.zeros(M)
        if k % config.sample_every == 0 or k == steps:
            times.append(t)
            etas.append(ensemble_eta(chis))
            mem.append(chis.copy())
            ctrl.append(u)
        if k == steps:
            break
        chis = mean_field_step(chis, H, Ls, noise[k], config.dt, A=A, Hc=Hc, u=u, scheme=config.scheme)
        if config.renormalize:
            chis, _ = renormalize(chis)
    return EnsembleTrajectory(np.array(times), np.array(etas), np.array(mem), np.array(ctrl))


def nonlinear_lindblad_rhs(eta, H, Ls, A=None):
    """``-i[H + A^{eta-bar}, eta] + dissipator``."""
    if A is not None and not A.is_zero:
        H = np.asarray(H, dtype=complex) + contract_interaction(A, eta)
    return lindblad_rhs(eta, H, Ls)


def solve_nonlinear_lindblad(eta0, H, Ls, T, dt, *, A=None, Hc=None, u=None, sample_every=1, tol=1e-8):
    """RK4 for the nonlinear master equation with a time-only control ``u(t)``.

    Returns ``(times, etas)``; raises if the trace or Hermiticity drifts by more
    than ``tol``.
    """
    eta0 = np.asarray(eta0, dtype=complex)
    check_density_matrix(eta0)
    H = np.asarray(H, dtype=complex)
    steps = int(round(T / dt))

    def f(t, eta):
        ham = H if (u is None or Hc is None) else H + float(u(t)) * np.asarray(Hc)
        return nonlinear_lindblad_rhs(eta, ham, Ls, A)

    etas = rk4(f, eta0, dt, steps, sample_every)
    tr_def = np.max(np.abs(np.trace(etas, axis1=-2, axis2=-1) - 1))
    herm_def = np.max(np.abs(etas - np.conj(np.swapaxes(etas, -1, -2))))
    if tr_def > tol or herm_def > tol:
        raise FloatingPointError(f"nonlinear Lindblad drift: trace {tr_def:.2e}, hermiticity {herm_def:.2e}")
    idx = list(range(0, steps + 1, sample_every))
    if idx[-1] != steps:
        idx.append(steps)
    return np.array(idx) * dt, etas


def theorem_bound(t, hs_norm_a, alpha0, N, *, kappa=0.0, norm_hc=0.0, variant="integral-24", deviation=False):
    """Gronwall bound on ``E alpha_N(t)``.

    ``e^{r t} alpha0 + (e^{r t} - 1) f / sqrt(N)`` with ``r = 7 ||A||_HS`` for
    the integral variant and ``r = 7(||A||_HS + kappa ||Hc||)`` for the
    controlled one; ``f = 5`` when one player deviates, else 1.
    """
    for name, v in (("t", t), ("hs_norm_a", hs_norm_a), ("alpha0", alpha0), ("N", N), ("kappa", kappa),
                    ("norm_hc", norm_hc)):
        if np.any(np.asarray(v) < 0):
            raise ValueError(f"{name} must be non-negative")
    if variant == "integral-24":
        rate = 7.0 * hs_norm_a
    elif variant == "controlled-30":
        rate = 7.0 * (hs_norm_a + kappa * norm_hc)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    g = np.exp(rate * np.asarray(t, dtype=float))
    f = 5.0 if deviation else 1.0
    return g * alpha0 + (g - 1.0) * f / np.sqrt(N)


def estimate_lipschitz(control: FeedbackControl, d: int, rng: np.random.Generator, samples: int = 4000,
                       t: float = 0.0) -> float:
    """Largest observed ``|u(g1) - u(g2)| / tr|g1 - g2|`` over random state pairs.

    Pairs mix random pure states with nearby perturbations so that both global
    and local slopes are probed.
    """
    def rand_pure(k):
        v = rng.normal(size=(k, d)) + 1j * rng.normal(size=(k, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v

    a = rand_pure(samples)
    b = rand_pure(samples)
    near = a + 1e-3 * rand_pure(samples)
    near /= np.linalg.norm(near, axis=1, keepdims=True)
    g1 = np.concatenate([_pure_densities(a), _pure_densities(a)])
    g2 = np.concatenate([_pure_densities(b), _pure_densities(near)])
    du = np.abs(control(t, g1) - control(t, g2))
    dist = trace_distance(g1, g2)
    ok = dist > 1e-12
    return float(np.max(du[ok] / dist[ok]))


# --- coupled N-atom vs limiting runs --------------------------------------


@dataclass
class ConvergenceModel:
    H: np.ndarray
    Ls: list
    psi0: np.ndarray
    A: InteractionTensor
    Hc: np.ndarray | None = None
    control: FeedbackControl | None = None
    kappa: float = 0.0

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=complex)
        self.Ls = [np.asarray(L, dtype=complex) for L in self.Ls]
        p = as_state(self.psi0)
        self.psi0 = p / np.linalg.norm(p)

    @property
    def d(self) -> int:
        return self.H.shape[0]

    @property
    def norm_hc(self) -> float:
        return 0.0 if self.Hc is None else operator_norm(self.Hc)


@dataclass
class CoupledRun:
    """Per-sample statistics of one N: arrays indexed ``[sample, replica, site]``."""

    N: int
    times: np.ndarray
    alpha: np.ndarray
    trace_dist: np.ndarray
    sandwich_violation: float
    etas: np.ndarray

    @property
    def alpha_mean(self) -> np.ndarray:
        return self.alpha.mean(axis=(1, 2))

    @property
    def alpha_stderr(self) -> np.ndarray:
        per_rep = self.alpha.mean(axis=2)
        r = per_rep.shape[1]
        return per_rep.std(axis=1, ddof=1) / np.sqrt(r) if r > 1 else np.zeros(per_rep.shape[0])

    @property
    def trace_dist_mean(self) -> np.ndarray:
        return self.trace_dist.mean(axis=(1, 2))


def sandwich_margin(alpha, td):
    """Worst violation of ``alpha <= td <= 2 sqrt(2 alpha)`` (positive means violated)."""
    alpha = np.asarray(alpha)
    td = np.asarray(td)
    low = alpha - td
    high = td - 2.0 * np.sqrt(2.0 * np.clip(alpha, 0, None))
    return float(max(np.max(low), np.max(high)))


def coupled_run(model: ConvergenceModel, N: int, replicas: int, config: SdeConfig, seed: int, *,
                background: int = 0, deviation=None) -> CoupledRun:
    """Run ``replicas`` N-atom systems alongside their limiting copies.

    Site ``j`` of replica ``r`` and limiting copy ``(r, j)`` consume the same
    increments, drawn from stream ``(seed, N, r)``.  The limiting ensemble
    (``replicas * N`` coupled copies plus ``background`` free ones, stream
    ``(seed, N, replicas + b)``) supplies ``eta`` at every step.

    ``deviation`` optionally replaces the control of site 1 in the N-atom
    system (a ``FeedbackControl``); limiting copies always use ``model.control``.
    """
    d = model.d
    if d**N > MAX_AMPLITUDES:
        raise MemoryError(f"{d}^{N} amplitudes exceed the guard {MAX_AMPLITUDES}")
    steps, dt = config.steps, config.dt
    P = len(model.Ls)
    R = replicas
    noise = np.stack([NoisePath.generate(seed, steps, N, P, dt, (N, r)).increments for r in range(R)], axis=1)
    bg_noise = None
    if background:
        bg_noise = np.stack([NoisePath.generate(seed, steps, 1, P, dt, (N, R + b)).increments[:, 0]
                             for b in range(background)], axis=1)
    psi1 = model.psi0
    prod = psi1
    for _ in range(N - 1):
        prod = np.kron(prod, psi1)
    big = np.tile(prod, (R, 1))
    lim = np.tile(psi1, (R, N, 1))
    bg = np.tile(psi1, (background, 1)) if background else None
    pair_sum = PairSum(model.A, N) if (not model.A.is_zero and N > 1) else None
    use_ctrl = model.control is not None and model.Hc is not None

    times, alphas, tds, etas = [], [], [], []
    worst = -np.inf
    for k in range(steps + 1):
        t = k * dt
        sample = k % config.sample_every == 0 or k == steps
        need_marg = sample or use_ctrl
        marg = all_marginals(big, d) if need_marg else None
        pool = lim.reshape(-1, d) if bg is None else np.concatenate([lim.reshape(-1, d), bg])
        eta = ensemble_eta(pool)
        if sample:
            gam = _pure_densities(lim)
            al = 1.0 - np.einsum("rja,rjab,rjb->rj", lim.conj(), marg, lim).real
            td = trace_distance(marg, gam)
            worst = max(worst, sandwich_margin(al, td))
            times.append(t)
            alphas.append(al)
            tds.append(td)
            etas.append(eta)
        if k == steps:
            break
        if use_ctrl:
            u_big = model.control(t, marg)
            if deviation is not None:
                u_big[:, 0] = deviation(t, marg[:, 0])
            u_lim = model.control(t, _pure_densities(lim))
            u_bg = model.control(t, _pure_densities(bg)) if bg is not None else None
        else:
            u_big = np.zeros((R, N))
            u_lim = np.zeros((R, N))
            u_bg = np.zeros(background) if bg is not None else None
        big = step_nparticle(big, model.H, model.Ls, noise[k], dt, Hc=model.Hc, A=model.A, u=u_big, d=d,
                             scheme=config.scheme, pair_sum=pair_sum)
        lim = mean_field_step(lim, model.H, model.Ls, noise[k], dt, A=model.A, Hc=model.Hc, u=u_lim, eta=eta,
                              scheme=config.scheme)
        if bg is not None:
            bg = mean_field_step(bg, model.H, model.Ls, bg_noise[k], dt, A=model.A, Hc=model.Hc, u=u_bg, eta=eta,
                                 scheme=config.scheme)
        if config.renormalize:
            big, _ = renormalize(big)
            lim, _ = renormalize(lim)
            if bg is not None:
                bg, _ = renormalize(bg)
    return CoupledRun(N, np.array(times), np.array(alphas), np.array(tds), worst, np.array(etas))


@dataclass
class ConvergenceReport:
    Ns: list
    times: np.ndarray
    alpha_mean: np.ndarray
    alpha_stderr: np.ndarray
    trace_dist_mean: np.ndarray
    bound_24: np.ndarray
    bound_30: np.ndarray
    sandwich_violation: float
    alpha0: np.ndarray
    kappa: float
    runs: list = field(default_factory=list, repr=False)

    @property
    def sup_alpha(self) -> np.ndarray:
        return self.alpha_mean.max(axis=1)

    @property
    def fit_slope(self) -> float:
        """Slope of ``log sup_t E alpha_N`` against ``log N``."""
        s = self.sup_alpha
        ok = s > 0
        if ok.sum() < 2:
            return float("nan")
        return float(np.polyfit(np.log(np.asarray(self.Ns)[ok]), np.log(s[ok]), 1)[0])

    def bound_holds(self, variant="integral-24") -> bool:
        b = self.bound_24 if variant == "integral-24" else self.bound_30
        return bool(np.all(self.alpha_mean <= b))

    def rows(self):
        for i, n in enumerate(self.Ns):
            for k, t in enumerate(self.times):
                yield {
                    "N": n,
                    "t": t,
                    "alpha_mean": self.alpha_mean[i, k],
                    "alpha_stderr": self.alpha_stderr[i, k],
                    "trace_dist_mean": self.trace_dist_mean[i, k],
                    "bound_24": self.bound_24[i, k],
                    "bound_30": self.bound_30[i, k],
                }


def convergence_experiment(model: ConvergenceModel, Ns, config: SdeConfig, replicas: int, seed: int, *,
                           background: int = 0, keep_runs: bool = False, mapper=map) -> ConvergenceReport:
    """Measure ``E alpha_N(t)`` for each N and evaluate both Gronwall bounds.

    ``mapper`` runs the independent per-N tasks; each N draws its own noise
    streams, so results do not depend on execution order.
    """
    a = model.A.hs_norm
    runs = list(mapper(lambda n: coupled_run(model, n, replicas, config, seed, background=background), list(Ns)))
    times = runs[0].times
    am = np.array([r.alpha_mean for r in runs])
    se = np.array([r.alpha_stderr for r in runs])
    tdm = np.array([r.trace_dist_mean for r in runs])
    alpha0 = am[:, 0]
    b24 = np.array([theorem_bound(times, a, max(a0, 0.0), n) for n, a0 in zip(Ns, alpha0)])
    b30 = np.array([theorem_bound(times, a, max(a0, 0.0), n, kappa=model.kappa, norm_hc=model.norm_hc,
                                  variant="controlled-30") for n, a0 in zip(Ns, alpha0)])
    worst = max(r.sandwich_violation for r in runs)
    return ConvergenceReport(list(Ns), times, am, se, tdm, b24, b30, worst, alpha0, model.kappa,
                             runs if keep_runs else [])
