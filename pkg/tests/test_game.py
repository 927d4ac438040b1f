import numpy as np
import pytest

from qmfg.core import PAULI_X, PAULI_Y, PAULI_Z, InteractionTensor, exchange_tensor, product_state, pure_density
from qmfg.game import (
    BEST_RESPONSE,
    EmpiricalControl,
    GridFeedback,
    best_response,
    bloch_angles,
    default_deviations,
    nash_envelope,
    nash_experiment,
    payoff_limit,
    payoff_nagent,
    play,
    policy_control,
    quantum_empirical_measure,
)
from qmfg.mfg import GameSpec, picard_solve
from qmfg.projective import bloch_to_psi
from qmfg.sphere import SphereGrid

PSI0 = np.array([np.cos(0.6), np.sin(0.6) * np.exp(0.7j)])
ZERO = np.zeros((2, 2))


def game(**kw):
    base = dict(H=0.5 * PAULI_Z, Hc=PAULI_Y, A=exchange_tensor(1.0), J=PAULI_Z, F=PAULI_X, c=1.0, U0=1.0,
                T=0.1, psi0=PSI0)
    base.update(kw)
    return GameSpec(**base)


@pytest.fixture(scope="module")
def solution():
    return picard_solve(game(), 0.01, SphereGrid(L=24, nlat=32, nlon=64))


def test_payoff_closed_forms():
    times = np.linspace(0, 0.1, 11)
    spec0 = game(J=ZERO, F=ZERO, c=2.0)
    gam = np.tile(pure_density(PSI0), (11, 1, 1))
    assert payoff_limit(times, gam, np.zeros(10), spec0) == 0.0
    assert payoff_limit(times, gam, np.full(10, 0.3), spec0) == pytest.approx(-0.5 * 2.0 * 0.09 * 0.1)
    # frozen state |0><0|
    spec = game(J=np.diag([0.7, -0.2]), F=np.diag([1.5, 0.0]), c=1.0)
    g0 = np.tile(np.diag([1.0, 0.0]).astype(complex), (11, 1, 1))
    assert payoff_limit(times, g0, np.full(10, 0.4), spec) == pytest.approx(0.1 * 0.7 + 1.5 - 0.5 * 0.16 * 0.1)
    marg = np.stack([g0, gam], axis=1)  # (K + 1, N, 2, 2)
    ctrl = np.stack([np.full(10, 0.4), np.zeros(10)], axis=1)
    assert payoff_nagent(times, marg, 1, ctrl, spec) == pytest.approx(payoff_limit(times, g0, np.full(10, 0.4), spec))
    with pytest.raises(ValueError):
        payoff_limit(times, gam[:5], np.zeros(10), spec)


def test_quantum_empirical_measure():
    np.testing.assert_allclose(quantum_empirical_measure(product_state([PSI0] * 3)), pure_density(PSI0), atol=1e-15)
    bell = np.array([1, 0, 0, 1]) / np.sqrt(2)
    np.testing.assert_allclose(quantum_empirical_measure(bell), np.eye(2) / 2, atol=1e-15)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=2) + 1j * rng.normal(size=2), rng.normal(size=2) + 1j * rng.normal(size=2)
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    sym = (product_state([a, b]) + product_state([b, a]))
    sym /= np.linalg.norm(sym)
    emp = quantum_empirical_measure(sym)
    assert np.trace(emp).real == pytest.approx(1)
    np.testing.assert_allclose(emp, quantum_empirical_measure(sym.reshape(2, 2).T.reshape(4)), atol=1e-14)


def test_bloch_angles_of_mixed_states():
    th, ph = bloch_angles(0.7 * pure_density(bloch_to_psi(1.1, 2.0)) + 0.3 * np.eye(2) / 2)
    assert th == pytest.approx(1.1) and ph == pytest.approx(2.0)
    assert bloch_angles(np.eye(2) / 2)[0] == 0.0


def test_policy_control_reproduces_grid(solution):
    ctrl = policy_control(solution)
    g = solution.grid
    for k, i, j in [(0, 3, 5), (7, 20, 41)]:
        psi = bloch_to_psi(g.theta[i], g.phi[j])
        assert ctrl(k * solution.dt, pure_density(psi)) == pytest.approx(solution.policy[k][i, j], abs=1e-12)
    assert np.all(np.abs(ctrl.values) <= solution.spec.U0)
    c = GridFeedback.constant(g, 0.01, 11, 3.0, 1.0)
    assert np.all(c(0.01, np.tile(np.eye(2) / 2, (4, 1, 1))) == 1.0)


def test_deviating_with_common_policy_gains_nothing(solution):
    common = policy_control(solution)
    res = play(solution.spec, common, [common], 3, 20, seed=1, dt=1e-3)
    np.testing.assert_array_equal(res.payoffs[1], res.payoffs[0])


def test_uncontrollable_game_gains():
    spec = game(Hc=ZERO)
    sol = picard_solve(spec, 0.01, SphereGrid(L=24, nlat=32, nlon=64))
    assert np.all(sol.policy == 0)
    rep = nash_experiment(sol, [2, 3], 10, seed=2, kappa=0.0)
    for name in ("const0", BEST_RESPONSE):
        np.testing.assert_allclose(rep.gain_of(name), 0, atol=1e-15)
    cost = -0.5 * spec.c * spec.U0**2 * spec.T
    np.testing.assert_allclose(rep.gain_of("const+U0"), cost, atol=1e-12)
    np.testing.assert_allclose(rep.gain_of("const-U0"), cost, atol=1e-12)


def test_nash_invariants_small_n(solution):
    rep = nash_experiment(solution, [2, 3], 60, seed=3)
    br = rep.gain_of(BEST_RESPONSE)
    br_se = rep.stderr_of(BEST_RESPONSE)
    for name in ("const+U0", "const-U0", "const0"):
        assert np.all(br + 2 * np.hypot(br_se, rep.stderr_of(name)) >= rep.gain_of(name))
    assert rep.under_envelope()
    # symmetric players agree within 3 stderr
    for mean, se in rep.symmetric_payoffs:
        assert np.all(np.abs(mean[1:] - mean[0]) <= 3 * np.hypot(se[1:], se[0]) + 1e-12)
    # the control variate only reduces noise: both estimators agree
    assert np.all(np.abs(rep.gains - rep.raw_gains) <= 3 * rep.raw_stderr + 1e-12)
    assert np.all(rep.stderr[:, -1] < rep.raw_stderr[:, -1])
    rows = list(rep.rows())
    assert len(rows) == 2 * 4 and rows[0].N == 2


def test_martingale_has_zero_mean(solution):
    from qmfg.game import environment, noise_sensitivities

    common = policy_control(solution)
    sens = [noise_sensitivities(solution, environment(solution.spec, 2), common)]
    res = play(solution.spec, common, [], 2, 400, seed=4, dt=1e-3, sensitivities=sens, sensitivity_grid=solution.grid,
               sensitivity_dt=solution.dt)
    m = res.martingales[0]
    assert abs(m.mean()) < 3 * m.std(ddof=1) / np.sqrt(len(m))
    # and it captures most of the payoff fluctuation
    assert np.var(res.payoffs[0, :, 0] - m) < 0.2 * np.var(res.payoffs[0, :, 0])


def test_empirical_information_does_not_change_gains(solution):
    br = best_response(solution, 3)
    eta = solution.etas

    def ev(t, gamma, emp):
        k = min(int(t / solution.dt), len(eta) - 1)
        shift = np.einsum("ij,...ji->...", PAULI_Z, emp - eta[k]).real
        return br(t, gamma) + 0.5 * shift

    rep = nash_experiment(solution, [3], 80, seed=5, kappa=1.0,
                          deviations={BEST_RESPONSE: BEST_RESPONSE, "empirical": EmpiricalControl(ev, 1.0)})
    a, b = rep.raw_gains[0]
    sa, sb = rep.raw_stderr[0]
    assert abs(a - b) <= 3 * np.hypot(sa, sb)


def test_envelope_and_guards(solution):
    env = nash_envelope(solution.spec, 1.0, np.array([2, 8, 32]))
    assert np.all(np.diff(env) < 0)
    assert env[0] / env[1] == pytest.approx(4**0.25)
    with pytest.raises(MemoryError):
        play(solution.spec, policy_control(solution), [], 25, 1, seed=0, dt=0.05)
    assert set(default_deviations(solution)) == {"const+U0", "const-U0", "const0", BEST_RESPONSE}
