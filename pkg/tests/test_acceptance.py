"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Runtime is dominated by the N-atom convergence runs (criteria 3, 5, 6; a few
minutes each) and the deviation experiment (criterion 10; about ten
minutes).  Run alone with ``pytest tests/test_acceptance.py``.
"""

import numpy as np
import pytest
import yaml

from qmfg.cli import run
from qmfg.core import (
    PAULI_X,
    PAULI_Y,
    PAULI_Z,
    cancellation_check,
    exchange_tensor,
    gell_mann_family,
    pure_density,
    random_interaction_tensor,
    trace_distance,
)
from qmfg.filtering import FeedbackControl, FilterModel, NoisePath, SdeConfig, batch_noise, simulate_trajectory
from qmfg.filtering import solve_lindblad, step_nparticle
from qmfg.game import BEST_RESPONSE, nash_experiment
from qmfg.meanfield import ConvergenceModel, convergence_experiment, estimate_lipschitz
from qmfg.mfg import GameSpec, picard_solve
from qmfg.projective import ito_drift_terms, mc_generator, w_to_bloch
from qmfg.sphere import SphereGrid, coefficient_mask, heat_kernel_point, real_sph_harm, smoothing_constant_probe

pytestmark = pytest.mark.slow

PSI0 = np.array([np.cos(0.6), np.sin(0.6) * np.exp(0.7j)])
QUBIT_CHANNELS = gell_mann_family(1)  # i sx, i sy, i sz
CONVERGENCE_NS = [2, 4, 6, 8, 10, 12]
CONVERGENCE_CFG = SdeConfig(dt=1e-3, T=0.5, sample_every=50)
SEED = 2024


@pytest.fixture
def report(request):
    tr = request.config.pluginmanager.getplugin("terminalreporter")

    def emit(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        else:
            print(line)
        return ok

    return emit


# --- 1 ----------------------------------------------------------------------------


def test_01_conservative_norm_preservation(report):
    model = FilterModel(0.5 * PAULI_Z, QUBIT_CHANNELS)
    fine_dt, T = 5e-5, 1.0
    coarse_defect, fine_defect = [], []
    for k in range(4):
        fine = NoisePath.generate(SEED, int(round(T / fine_dt)), 1, 3, fine_dt, trajectory=k)
        for noise, out in ((fine.coarsen(), coarse_defect), (fine, fine_defect)):
            cfg = SdeConfig(dt=noise.dt, T=T, scheme="milstein", renormalize=False)
            tr = simulate_trajectory(PSI0, model, cfg, SEED, noise=noise)
            out.append(np.max(np.abs(tr.norm_defects)))
    coarse_defect, fine_defect = np.array(coarse_defect), np.array(fine_defect)
    ratios = coarse_defect / fine_defect
    ok = bool(np.all(coarse_defect <= 0.01) and np.all(ratios >= 1.8))
    report(1, ok, f"max|norm-1| at dt=1e-4: {coarse_defect.max():.2e}; halving ratios {np.round(ratios, 3)}")
    assert ok


# --- 2 ----------------------------------------------------------------------------


def test_02_lindblad_consistency(report):
    M, dt, steps, every = 4000, 1e-3, 1000, 50
    H = 0.5 * PAULI_Z + 0.4 * PAULI_X
    Ls = [0.5j * PAULI_X, 0.3j * PAULI_Z]
    dY = batch_noise(SEED, range(M), steps, 1, len(Ls), dt)
    chis = np.tile(PSI0, (M, 1))
    means = [pure_density(PSI0)]
    for k in range(steps):
        chis = step_nparticle(chis, H, Ls, dY[k], dt)
        chis /= np.linalg.norm(chis, axis=-1, keepdims=True)
        if (k + 1) % every == 0:
            means.append(np.einsum("bi,bj->ij", chis, chis.conj()) / M)
    ref = solve_lindblad(pure_density(PSI0), H, Ls, dt, steps, sample_every=every)
    dist = trace_distance(np.array(means), ref)
    tol = 5 / np.sqrt(M) + 10 * dt
    ok = bool(np.all(dist <= tol))
    report(2, ok, f"max trace distance {dist.max():.4f} <= {tol:.4f} over {len(dist)} sample times")
    assert ok


# --- 3, 5, 6 ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def uncontrolled_report():
    model = ConvergenceModel(0.5 * PAULI_Z, QUBIT_CHANNELS, PSI0, exchange_tensor(1.0))
    return convergence_experiment(model, CONVERGENCE_NS, CONVERGENCE_CFG, 200, SEED, background=1000)


@pytest.fixture(scope="module")
def controlled_report():
    control = FeedbackControl.linear(PAULI_Z, 1.0, 1.0)
    kappa = estimate_lipschitz(control, 2, np.random.default_rng([SEED, 1]))
    model = ConvergenceModel(0.5 * PAULI_Z, QUBIT_CHANNELS, PSI0, exchange_tensor(1.0), PAULI_Y, control, kappa)
    return convergence_experiment(model, CONVERGENCE_NS, CONVERGENCE_CFG, 200, SEED, background=1000)


def test_03_sandwich_inequality(report, uncontrolled_report, controlled_report):
    worst = max(uncontrolled_report.sandwich_violation, controlled_report.sandwich_violation)
    ok = worst <= 1e-9
    report(3, ok, f"worst violation of alpha <= tr|G-g| <= 2 sqrt(2 alpha) over all samples: {worst:.2e}")
    assert ok


# --- 4 ----------------------------------------------------------------------------


def test_04_cancellation_identity(report):
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for k in range(1000):
        d = 2 + k % 2
        a = random_interaction_tensor(d, rng)
        phi = rng.normal(size=d) + 1j * rng.normal(size=d)
        worst = max(worst, cancellation_check(a, phi / np.linalg.norm(phi)))
    ok = worst <= 1e-10
    report(4, ok, f"max defect over 1000 random tensor/state draws (d=2,3): {worst:.2e}")
    assert ok


def test_05_uncontrolled_bound_and_decrease(report, uncontrolled_report):
    rep = uncontrolled_report
    sup = rep.sup_alpha
    under = rep.bound_holds("integral-24")
    decreasing = bool(np.all(np.diff(sup) < 0))
    ok = under and decreasing
    report(5, ok, f"E alpha <= bound: {under}; sup_t E alpha over N={CONVERGENCE_NS}: {np.array2string(sup, precision=5)}"
                  f" (strictly decreasing: {decreasing}; log-log slope {rep.fit_slope:.2f})")
    assert ok


def test_06_controlled_bound(report, controlled_report):
    rep = controlled_report
    ok = rep.bound_holds("controlled-30")
    margin = float(np.min(rep.bound_30[:, 1:] - rep.alpha_mean[:, 1:]))
    report(6, ok, f"estimated kappa {rep.kappa:.4f}; E alpha <= controlled bound at every sample: {ok}"
                  f" (min margin {margin:.3e}); sup_t E alpha {np.array2string(rep.sup_alpha, precision=5)}")
    assert ok


# --- 7 ----------------------------------------------------------------------------


def _harmonic(l, m, L=6):
    def f(w):
        t, p = w_to_bloch(np.asarray(w)[..., 0])
        return real_sph_harm(L, t, p)[l, L + m]

    return f


def test_07_gell_mann_laplace_beltrami(report):
    rng = np.random.default_rng(SEED)
    w0 = np.array([0.55 * np.exp(0.9j)])
    errs = []
    for l, m in [(1, 0), (1, 1), (2, -1), (3, 2), (4, -3)]:
        f = _harmonic(l, m)
        est, _ = mc_generator(f, w0, QUBIT_CHANNELS, 1e-4, 50_000, rng)  # 1e5 samples as antithetic pairs
        expect = -2 * l * (l + 1) * f(w0[None, :])[0]
        errs.append(abs(est - expect) / abs(expect))
    ws = (rng.normal(size=(200, 1)) + 1j * rng.normal(size=(200, 1))) * 2
    ito = max(float(np.max(np.abs(ito_drift_terms(w, QUBIT_CHANNELS)))) for w in ws)
    ok = max(errs) <= 0.05 and ito <= 1e-10
    report(7, ok, f"MC generator vs 2 Delta_pro rel. errors {np.round(errs, 4)}; Ito-term residual {ito:.1e}")
    assert ok


# --- 8 ----------------------------------------------------------------------------


def test_08_heat_machinery(report):
    grid = SphereGrid()
    rng = np.random.default_rng(SEED)
    c = rng.normal(size=(grid.L + 1, 2 * grid.L + 1)) * coefficient_mask(grid.L)
    l = np.arange(grid.L + 1)[:, None]
    decay = 0.0
    for t in (1e-3, 1e-2, 0.1):
        expect = c * np.exp(-2 * l * (l + 1) * t)
        ok_mask = np.abs(expect) > 0
        decay = max(decay, float(np.max(np.abs(grid.heat(c, t)[ok_mask] - expect[ok_mask]) / np.abs(expect[ok_mask]))))
    T, P = grid.mesh
    mass = max(abs(grid.integrate(heat_kernel_point(t, (0.7, 2.3), (T, P))) - 1) for t in (0.005, 0.02, 0.1, 0.5))
    probe = smoothing_constant_probe(grid, np.geomspace(1e-3, 1e-1, 9), 6, rng)
    ok = decay <= 1e-10 and mass <= 1e-10 and -0.6 <= probe.exponent <= -0.4
    report(8, ok, f"eigen-decay rel. error {decay:.1e}; kernel mass defect {mass:.1e}; "
                  f"smoothing exponent {probe.exponent:.3f}")
    assert ok


# --- 9 ----------------------------------------------------------------------------


def acceptance_game() -> GameSpec:
    return GameSpec(H=0.5 * PAULI_Z, Hc=PAULI_Y, A=exchange_tensor(1.0), J=PAULI_Z, F=PAULI_X, c=1.0, U0=1.0,
                    T=0.1, psi0=PSI0)


@pytest.fixture(scope="module")
def equilibrium():
    return picard_solve(acceptance_game(), dt=0.005, grid=SphereGrid(), max_iter=20, tol=1e-5)


def test_09_picard_contraction(report, equilibrium):
    sol = equilibrium
    tol = 1e-5
    q = sol.contraction_factors
    fine = picard_solve(acceptance_game(), dt=0.005, grid=SphereGrid().refined(), max_iter=20, tol=tol)
    eta_shift = float(np.max(trace_distance(fine.etas, sol.etas)))
    ok = (sol.converged and sol.iterations <= 20 and np.all(q < 1) and sol.consistency_residual <= 1e-4
          and fine.converged and eta_shift <= 2 * tol and fine.consistency_residual <= 2 * 1e-4)
    report(9, ok, f"{sol.iterations} iterations, q_k {np.array2string(q, precision=4)}, residual "
                  f"{sol.consistency_residual:.1e}; doubled grid: residual {fine.consistency_residual:.1e}, "
                  f"sup_t tr|eta - eta_fine| {eta_shift:.1e}")
    assert ok


# --- 10 ---------------------------------------------------------------------------


def test_10_nash_trend(report, equilibrium):
    Ns = [2, 4, 8, 12]
    rep = nash_experiment(equilibrium, Ns, 800, SEED, deviations={BEST_RESPONSE: BEST_RESPONSE})
    gains = rep.gain_of(BEST_RESPONSE)
    rho = rep.spearman(BEST_RESPONSE)
    under = rep.under_envelope()
    ok = rho <= 0 and under
    report(10, ok, f"best-response gains {np.array2string(gains, precision=3)} "
                   f"(stderr {np.array2string(rep.stderr_of(BEST_RESPONSE), precision=2)}); Spearman {rho:.2f}; "
                   f"under envelope {np.array2string(rep.envelope, precision=2)}: {under}")
    assert ok


# --- 11 ---------------------------------------------------------------------------

DETERMINISM_CONFIGS = {
    "filtering": {"spec": {"T": 0.05}, "numerics": {"dt": 0.001, "M": 8, "sites": 3, "sampleEvery": 10}},
    "meanfield-convergence": {"spec": {"T": 0.05}, "numerics": {"dt": 0.001, "Ns": [2, 4], "replicas": 4, "M": 8}},
    "mfg-solve": {"numerics": {"dt": 0.01, "bandLimit": 24, "grid": {"nlat": 32, "nlon": 64}}},
    "nash": {"numerics": {"dt": 0.01, "bandLimit": 24, "grid": {"nlat": 32, "nlon": 64}, "Ns": [2, 3],
                          "replicas": 6, "agentDt": 0.005}},
}


def test_11_determinism(report, tmp_path):
    compared = 0
    identical = True
    for name, body in DETERMINISM_CONFIGS.items():
        path = tmp_path / f"{name}.yaml"
        path.write_text(yaml.safe_dump({"experiment": name, "seed": SEED, **body}))
        a, b = tmp_path / f"{name}-a", tmp_path / f"{name}-b"
        assert run(path, out=str(a), threads=1) == 0
        assert run(path, out=str(b), threads=2) == 0
        for f in sorted(a.glob("*.csv")) + sorted(a.glob("*.qmfgfld")):
            compared += 1
            identical &= f.read_bytes() == (b / f.name).read_bytes()
    ok = identical and compared >= 4
    report(11, ok, f"{compared} CSV/field files from 4 experiment families, re-run with 1 and 2 threads: "
                   f"byte-identical {identical}")
    assert ok
