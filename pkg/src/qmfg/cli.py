"""Command-line driver: ``qmfg run | validate | show-defaults``.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure
(non-finite state, clipped-mass overflow or a diverging Picard iteration).
"""

from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, Model, defaults_yaml, load, load_file, validate
from .core import PAULIS, InteractionTensor
from .filtering import FilterModel, SdeConfig, simulate_trajectory, solve_lindblad
from .game import BEST_RESPONSE, default_deviations, nash_experiment
from .io import write_csv, write_field, write_manifest
from .meanfield import ConvergenceModel, convergence_experiment
from .mfg import MfgSolution, picard_solve
from .sphere import SphereGrid

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
THREADS_ENV = "QMFG_THREADS"

log = logging.getLogger("qmfg")


class NumericalFailure(RuntimeError):
    pass


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        value, source = flag, "--threads"
    elif os.environ.get(THREADS_ENV):
        value, source = os.environ[THREADS_ENV], THREADS_ENV
    else:
        return 1
    try:
        n = int(value)
    except ValueError:
        raise ConfigError([f"{source}: not an integer: {value!r}"]) from None
    if n < 1:
        raise ConfigError([f"{source}: must be at least 1, got {n}"])
    return n


@contextmanager
def worker_map(threads: int):
    """``map``-like callable backed by a thread pool of the given size."""
    if threads == 1:
        yield map
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield pool.map


def _rho_columns(d: int, prefix: str = "rho") -> list[str]:
    return [f"{prefix}_{i}{j}_{part}" for i in range(d) for j in range(d) for part in ("re", "im")]


def _rho_values(rho) -> list[float]:
    flat = np.asarray(rho).reshape(-1)
    return [x for z in flat for x in (z.real, z.imag)]


# --- experiments -----------------------------------------------------------------


def run_filtering(cfg: dict, model: Model, out: Path, mapper) -> dict:
    num = cfg["numerics"]
    n = num["sites"]
    psi = model.psi0 / np.linalg.norm(model.psi0)
    initial = psi
    for _ in range(n - 1):
        initial = np.kron(initial, psi)
    fm = FilterModel(model.H, model.Ls, model.Hc, model.A if n > 1 else None)
    sde = SdeConfig(num["dt"], model.T, num["scheme"], num["renormalize"], num["sampleEvery"])
    seed = cfg["seed"]
    trajs = list(mapper(lambda m: simulate_trajectory(initial, fm, sde, seed, controls=model.control, trajectory=m),
                        range(num["M"])))
    d = model.d
    rows = []
    for tr in trajs:
        for k, t in enumerate(tr.times):
            for j in range(n):
                rows.append([tr.trajectory, t, j + 1, tr.controls[k][j], *_rho_values(tr.marginals[k][j])])
    files = [write_csv(out / "filtering.csv", ["trajectory", "t", "site", "u", *_rho_columns(d)], rows)]
    summary = {"trajectories": len(trajs),
               "max_norm_defect": float(max(np.max(np.abs(tr.norm_defects)) for tr in trajs))}
    if n == 1:
        mean = np.mean([tr.marginals[:, 0] for tr in trajs], axis=0)
        times = trajs[0].times
        rows = []
        if model.control is None:
            ref = solve_lindblad(np.outer(psi, psi.conj()), model.H, model.Ls, num["dt"], sde.steps,
                                 num["sampleEvery"])
            td = 0.5 * np.abs(np.linalg.eigvalsh(mean - ref)).sum(axis=-1)
            summary["max_trace_distance_to_lindblad"] = float(td.max())
            for k, t in enumerate(times):
                rows.append([t, td[k], *_rho_values(mean[k]), *_rho_values(ref[k])])
            cols = ["t", "trace_distance", *_rho_columns(d, "mean"), *_rho_columns(d, "lindblad")]
        else:
            for k, t in enumerate(times):
                rows.append([t, *_rho_values(mean[k])])
            cols = ["t", *_rho_columns(d, "mean")]
        files.append(write_csv(out / "filtering_mean.csv", cols, rows))
    return {"files": files, "results": summary}


def run_convergence(cfg: dict, model: Model, out: Path, mapper) -> dict:
    num = cfg["numerics"]
    A = model.A if model.A is not None else InteractionTensor.zero(model.d)
    kappa = model.control.kappa if model.control is not None else 0.0
    cm = ConvergenceModel(model.H, model.Ls, model.psi0, A, model.Hc, model.control, kappa)
    sde = SdeConfig(num["dt"], model.T, num["scheme"], num["renormalize"], num["sampleEvery"])
    rep = convergence_experiment(cm, num["Ns"], sde, num["replicas"], cfg["seed"], background=num["M"],
                                 mapper=mapper)
    cols = ["N", "t", "alpha_mean", "alpha_stderr", "trace_dist_mean", "bound_24", "bound_30"]
    files = [write_csv(out / "convergence.csv", cols, rep.rows())]
    results = {
        "kappa": kappa,
        "sandwich_violation": rep.sandwich_violation,
        "sup_alpha": rep.sup_alpha,
        "fit_slope": rep.fit_slope,
        "bound_24_holds": rep.bound_holds("integral-24"),
        "bound_30_holds": rep.bound_holds("controlled-30"),
    }
    return {"files": files, "results": results}


def solve_game(cfg: dict, model: Model) -> MfgSolution:
    num = cfg["numerics"]
    grid = SphereGrid(num["bandLimit"], num["grid"]["nlat"], num["grid"]["nlon"])
    sol = picard_solve(model.game(), num["dt"], grid, num["maxIter"], num["tol"])
    if sol.diverged:
        raise NumericalFailure(f"Picard iteration diverged after {sol.iterations} iterations "
                               f"(increments {sol.tv_increments})")
    if not sol.converged:
        log.warning("Picard iteration stopped at max_iter=%d without reaching tol", num["maxIter"])
    return sol


def _solution_summary(sol: MfgSolution) -> dict:
    return {
        "iterations": sol.iterations,
        "converged": sol.converged,
        "diverged": sol.diverged,
        "tv_increments": sol.tv_increments,
        "eta_increments": sol.eta_increments,
        "contraction_factors": sol.contraction_factors,
        "consistency_residual": sol.consistency_residual,
        "max_clip_defect": float(np.max(sol.clip_defects)) if sol.clip_defects is not None else 0.0,
    }


def run_mfg(cfg: dict, model: Model, out: Path, mapper) -> dict:
    sol = solve_game(cfg, model)
    grid = sol.grid
    every = cfg["numerics"]["sampleEvery"]
    K = len(sol.times) - 1
    idx = sorted(set(range(0, K + 1, every)) | {K})
    th, ph = grid.mesh
    value = np.array([grid.synthesize(sol.value[k]) for k in idx])
    density = np.array([grid.synthesize(sol.flow[k]) for k in idx])
    policy = sol.policy[idx]
    rows = []
    for n, k in enumerate(idx):
        t = sol.times[k]
        for a, b, s, u, m in zip(th.ravel(), ph.ravel(), value[n].ravel(), policy[n].ravel(), density[n].ravel()):
            rows.append([t, a, b, s, u, m])
    files = [write_csv(out / "mfg_fields.csv", ["t", "theta", "phi", "S", "u", "mu"], rows)]
    q = np.concatenate([[np.nan], sol.contraction_factors])
    files.append(write_csv(out / "mfg_iterations.csv", ["iteration", "tv_increment", "eta_increment", "q"],
                           [[i + 1, a, b, c] for i, (a, b, c) in enumerate(zip(sol.tv_increments,
                                                                               sol.eta_increments, q))]))
    bloch = np.array([[np.trace(p @ e).real for p in PAULIS] for e in sol.etas])
    files.append(write_csv(out / "mfg_eta.csv", ["t", "rx", "ry", "rz"],
                           [[t, *r] for t, r in zip(sol.times, bloch)]))
    for name, data in (("value", value), ("policy", policy), ("density", density)):
        files.append(write_field(out / f"{name}.qmfgfld", data, grid.L))
    results = _solution_summary(sol)
    results["field_times"] = sol.times[idx]
    results["grid"] = {"bandLimit": grid.L, "nlat": grid.nlat, "nlon": grid.nlon}
    return {"files": files, "results": results}


def run_nash(cfg: dict, model: Model, out: Path, mapper) -> dict:
    num = cfg["numerics"]
    sol = solve_game(cfg, model)
    menu = default_deviations(sol)
    devs = {name: menu[name] for name in num["deviations"]}
    rep = nash_experiment(sol, num["Ns"], num["replicas"], cfg["seed"], dt=num["agentDt"], deviations=devs,
                          control_variate=num["controlVariate"], mapper=mapper)
    cols = ["N", "deviation", "gain", "stderr", "envelope", "raw_gain", "raw_stderr"]
    rows = [[r.N, r.deviation, r.gain, r.stderr, r.envelope, r.raw_gain, r.raw_stderr] for r in rep.rows()]
    files = [write_csv(out / "nash.csv", cols, rows)]
    results = {
        "mfg": _solution_summary(sol),
        "kappa": rep.kappa,
        "under_envelope": rep.under_envelope(),
        "fitted_constant": rep.fitted_constant,
    }
    if BEST_RESPONSE in rep.deviations and len(rep.Ns) > 1:
        results["spearman_best_response"] = rep.spearman(BEST_RESPONSE)
    return {"files": files, "results": results}


EXPERIMENT_RUNNERS = {
    "filtering": run_filtering,
    "meanfield-convergence": run_convergence,
    "mfg-solve": run_mfg,
    "nash": run_nash,
}


def run(config_path, *, seed: int | None = None, out: str | None = None, threads: int | None = None) -> int:
    """Run the configured experiment and write its artifacts; return the exit code."""
    try:
        n_threads = resolve_threads(threads)
        cfg, model = load(config_path, seed=seed, output=out)
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(cfg["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        with worker_map(n_threads) as mapper:
            artifacts = EXPERIMENT_RUNNERS[cfg["experiment"]](cfg, model, out_dir, mapper)
    except (FloatingPointError, NumericalFailure, MemoryError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    manifest = {
        "experiment": cfg["experiment"],
        "config": cfg,
        "seed": cfg["seed"],
        "version": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
        "threads": n_threads,
        "wall_time_s": time.perf_counter() - start,
        "files": sorted(p.name for p in artifacts["files"]),
        "results": artifacts["results"],
    }
    write_manifest(out_dir / "manifest.json", manifest)
    log.info("wrote %s", out_dir)
    return EXIT_OK


def validate_file(config_path) -> list[str]:
    try:
        raw = load_file(config_path)
    except ConfigError as exc:
        return exc.diagnostics
    return validate(raw)[2]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qmfg", description="Quantum mean-field game experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiment described by a config file")
    r.add_argument("--config", required=True, metavar="PATH")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--out", metavar="DIR", help="override the output directory")
    r.add_argument("--threads", type=int, help=f"worker pool size (fallback: ${THREADS_ENV}, then 1)")
    v = sub.add_parser("validate", help="check a config file without running it")
    v.add_argument("--config", required=True, metavar="PATH")
    sub.add_parser("show-defaults", help="print the default configuration as YAML")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "show-defaults":
        sys.stdout.write(defaults_yaml())
        return EXIT_OK
    if args.command == "validate":
        diags = validate_file(args.config)
        for d in diags:
            print(d)
        return EXIT_CONFIG if diags else EXIT_OK
    return run(args.config, seed=args.seed, out=args.out, threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
