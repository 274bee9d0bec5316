"""Command-line experiment runner.

Subcommands::

    rhcrom openloop-study --config desk.cfg --out runs/study
    rhcrom rhc --mode fom|rom --config desk.cfg --out runs/desk
    rhcrom compare --out runs/desk
    rhcrom validate gradients|prox|dualnorm|rigor|sandwich|equivalence|all

``--config`` accepts a file path or the name of a shipped configuration
(``paper_full`` or ``desk``). Exit codes: 0 success, 1 numerical failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .dynamics import CSV_VERSION, FullOrderModel, TimeGrid, Trajectory
from .certify import EstimatorInputs, delta_value
from .ocp import solve_open_loop
from .rhc import ClosedLoopResult, PerformanceRecord, RHCAbort, compare, run_fom_rhc, run_rom_rhc
from .rom import ReducedModel, SnapshotSet, cache_key, load_basis, pod, save_basis
from .validate import SUITES, run_suite

log = logging.getLogger("rhcrom")

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG = 0, 1, 2


# ----------------------------------------------------------------------------
# csv helpers
# ----------------------------------------------------------------------------

def _write_csv(path: Path, name: str, header: list[str], rows) -> Path:
    with path.open("w", newline="") as fh:
        fh.write(f"# {CSV_VERSION} {name}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with path.open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.16e}"


# ----------------------------------------------------------------------------
# openloop-study
# ----------------------------------------------------------------------------

def openloop_cell(cfg: ExperimentConfig, T: float, lam: float, cell_dir: str | None = None) -> list[tuple]:
    """Truth error and value estimator over basis sizes for one ``(T, lam)`` pair."""
    disc = cfg.discretization()
    fom = FullOrderModel(disc)
    y0 = cfg.initial_state(disc)
    cost = cfg.cost_spec(lam=lam)
    rc = cfg.rhc_config(T=T)
    grid = TimeGrid(cfg.time.tau, 0, rc.n_horizon)
    full = solve_open_loop(fom, y0, grid, cost, cfg.solver_options())
    key = cache_key(cfg.mesh, cfg.physics, cfg.cost, cfg.actuators, cfg.time, T, lam,
                    cfg.study.r_pod_max, cfg.solver, "pod:energy=1,rank_rtol=0")
    basis = None
    cache_path = Path(cell_dir) / "basis.npz" if cell_dir and cfg.output.basis_cache else None
    if cache_path is not None:
        basis = load_basis(cache_path, key)
    if basis is None:
        snaps = SnapshotSet()
        snaps.add(full.state, origin="state@0")
        snaps.add(full.adjoint, origin="adjoint@0")
        basis = pod(disc, snaps, r_max=cfg.study.r_pod_max, energy_tol=1.0, rank_rtol=0.0)
        if cache_path is not None:
            save_basis(cache_path, basis, key)
    rows = []
    for r in cfg.study.r_values:
        if r > basis.r:
            log.info("T=%g lam=%g: r=%d exceeds the %d available POD modes; skipped", T, lam, r, basis.r)
            continue
        rm = ReducedModel(disc, basis.basis[:, :r])
        a0, _ = rm.project_initial(y0)
        red = solve_open_loop(rm, a0, grid, cost, cfg.solver_options())
        inp = EstimatorInputs.from_reduced(rm, red.state, red.u, red.adjoint, y0, 0.0, cost.lam)
        e = abs(full.J - red.J)
        d = delta_value(inp)
        rows.append((T, lam, r, e, d, e / d if d > 0 else np.nan))
    if cell_dir:
        _write_csv(Path(cell_dir) / "cell.csv", "openloop-cell",
                   ["T", "lambda", "r", "e_VT", "delta_VT", "effectivity"], [[_fmt(v) for v in row] for row in rows])
    return rows


def cmd_openloop_study(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    cells = [(T, lam) for T in cfg.study.horizons for lam in cfg.study.lambdas]
    dirs = []
    for T, lam in cells:
        d = out / f"cell_T{T:g}_lam{lam:g}"
        d.mkdir(parents=True, exist_ok=True)
        dirs.append(str(d))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(openloop_cell, [cfg] * len(cells), *zip(*cells), dirs))
    else:
        results = [openloop_cell(cfg, T, lam, d) for (T, lam), d in zip(cells, dirs)]
    rows = [row for res in results for row in res]
    _write_csv(out / "openloop_study.csv", "openloop-study", ["T", "lambda", "r", "e_VT", "delta_VT", "effectivity"],
               [[_fmt(v) for v in row] for row in rows])
    for row in rows:
        log.info("T=%-4g lam=%-6g r=%-3d e=%.2e Delta=%.2e eff=%.2e", *row)
    return EXIT_OK


# ----------------------------------------------------------------------------
# rhc
# ----------------------------------------------------------------------------

RHC_LOG_COLUMNS = ["k", "t_k", "r", "alpha_lower", "alpha_upper", "alpha_fom", "accepted", "J_delta", "V_T_r",
                   "delta_VT", "fom_grads", "wall_ms", "n_model_updates"]


def write_rhc_outputs(res: ClosedLoopResult, out: Path, disc) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    tau = res.config.tau
    _write_csv(out / "rhc_log.csv", "rhc-log", RHC_LOG_COLUMNS, [
        [str(r.k), _fmt(r.t_k), str(r.r), _fmt(r.alpha_lower), _fmt(r.alpha_upper), _fmt(r.alpha_fom),
         _fmt(r.accepted), _fmt(r.J_delta), _fmt(r.V_T_r), _fmt(r.delta_VT), str(r.fom_grads),
         f"{r.wall_ms:.3f}", str(r.n_model_updates_so_far)] for r in res.records])
    ell = np.concatenate([[np.nan], res.stage_costs])
    _write_csv(out / "decay.csv", "decay", ["t", "y_H", "ell"], [
        [_fmt(t), _fmt(h), "" if np.isnan(e) else _fmt(e)] for t, h, e in zip(res.grid.times, res.y_norms, ell)])
    labels = [f"u{i + 1}" for i in range(res.u.shape[1])]
    _write_csv(out / "controls.csv", "controls", ["t"] + labels, [
        [_fmt(t)] + [_fmt(v) for v in row] for t, row in zip(res.grid.times[1:], res.u)])
    np.savez_compressed(out / "trajectory.npz", u=res.u, y=res.y.states, tau=tau)

    accepted = [r for r in res.records if r.accepted]
    if res.mode == "fom":
        alphas = [r.alpha_fom for r in res.records if r.alpha_fom is not None]
    else:
        alphas = [r.alpha_lower for r in accepted]
    c = res.counters
    summary = {
        "mode": res.mode, "T": res.config.T_snapped, "delta": res.config.delta_snapped,
        "alpha_tilde": res.config.alpha_tilde, "index_variant": res.config.index_variant,
        "J": res.J, "V_T0": res.V_T0, "y0_H": float(res.y_norms[0]), "y_final_H": float(res.y_norms[-1]),
        "alpha_min": min(alphas) if alphas else None, "alpha_avg": float(np.mean(alphas)) if alphas else None,
        "alpha_max": max(alphas) if alphas else None,
        "zero_actuators": [int(i) + 1 for i in np.flatnonzero(np.all(res.u == 0, axis=0))],
        "fom_grads": c["fom_grads"], "rom_grads": c["rom_grads"], "model_updates": c["model_updates"],
        "update_steps": c["update_steps"], "final_r": c["final_r"], "validation_fom_grads": c["validation_fom_grads"],
        "cpu_time": c["wall_time"], "n_steps": len(accepted), "n_dofs": disc.n,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def load_rhc_result(out: Path, cfg: ExperimentConfig) -> ClosedLoopResult:
    """Rebuild the parts of a :class:`ClosedLoopResult` that ``compare`` needs."""
    summary = json.loads((out / "summary.json").read_text())
    with np.load(out / "trajectory.npz") as z:
        u, y = z["u"], z["y"]
    _, rows = _read_csv(out / "rhc_log.csv")
    recs = []
    for row in rows:
        v = dict(zip(RHC_LOG_COLUMNS, row))
        recs.append(PerformanceRecord(int(v["k"]), float(v["t_k"]), int(v["r"]), float(v["alpha_lower"]),
                                      float(v["alpha_upper"]), float(v["alpha_fom"]) if v["alpha_fom"] else None,
                                      v["accepted"] == "1", float(v["J_delta"]), float(v["V_T_r"]),
                                      float(v["delta_VT"]), int(v["fom_grads"]), float(v["wall_ms"]),
                                      int(v["n_model_updates"])))
    rc = cfg.rhc_config()
    grid = TimeGrid(rc.tau, 0, len(u))
    counters = {"wall_time": summary["cpu_time"], "fom_grads": summary["fom_grads"]}
    return ClosedLoopResult(summary["mode"], rc, grid, u, Trajectory(grid, y), summary["J"], np.array([]), recs,
                            counters, summary["V_T0"])


def cmd_rhc(cfg: ExperimentConfig, out: Path, mode: str) -> int:
    disc = cfg.discretization()
    y0 = cfg.initial_state(disc)
    rc = cfg.rhc_config()
    log.info("%s-RHC: n=%d, tau=%g, delta=%g (%d steps), T=%g (%d steps), alpha_tilde=%g", mode.upper(), disc.n,
             rc.tau, rc.delta_snapped, rc.n_delta, rc.T_snapped, rc.n_horizon, rc.alpha_tilde)

    def progress(k, step, total):
        log.debug("step %d: %d/%d", k, step, total)

    runner = run_fom_rhc if mode == "fom" else run_rom_rhc
    res = runner(rc, FullOrderModel(disc), y0, progress)
    target = out / mode
    target.mkdir(parents=True, exist_ok=True)
    with (target / "config.cfg").open("w") as fh:
        cfg.resolved(disc).write(fh)
    summary = write_rhc_outputs(res, target, disc)
    log.info("J=%.6g |y(T_inf)|_H=%.3e FOM grads=%d updates=%d r=%d time=%.1fs", summary["J"],
             summary["y_final_H"], summary["fom_grads"], summary["model_updates"], summary["final_r"],
             summary["cpu_time"])
    if (out / "fom" / "summary.json").exists() and (out / "rom" / "summary.json").exists():
        return cmd_compare(cfg, out, disc)
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, out: Path, disc=None) -> int:
    for mode in ("fom", "rom"):
        if not (out / mode / "summary.json").exists():
            raise ConfigError(f"no {mode.upper()} run found in {out / mode}; run 'rhc --mode {mode}' first")
    disc = disc or cfg.discretization()
    fom_res, rom_res = load_rhc_result(out / "fom", cfg), load_rhc_result(out / "rom", cfg)
    metrics = compare(fom_res, rom_res, disc.M)
    (out / "compare.json").write_text(json.dumps(metrics, indent=2) + "\n")
    log.info("compare: " + ", ".join(f"{k}={v:.3e}" for k, v in metrics.items()))
    return EXIT_OK


# ----------------------------------------------------------------------------
# validate
# ----------------------------------------------------------------------------

def cmd_validate(suite: str, seed: int) -> int:
    names = SUITES if suite == "all" else (suite,)
    ok = True
    for name in names:
        rep = run_suite(name, seed=seed)
        print("\n".join(rep.lines()), flush=True)
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_NUMERICAL


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="desk", help="config file or shipped name (paper_full, desk)")
    common.add_argument("--out", default=None, help="output directory (default: output.directory of the config)")
    common.add_argument("--seed", type=int, default=None, help="random seed (default: run.seed of the config)")
    common.add_argument("--threads", type=int, default=None, help="worker processes for sweeps")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="rhcrom", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("openloop-study", parents=[common], help="estimator study for the first open-loop problem")
    r = sub.add_parser("rhc", parents=[common], help="closed-loop run")
    r.add_argument("--mode", choices=("fom", "rom"), required=True)
    r.add_argument("--T", type=float, default=None, help="override rhc.T")
    r.add_argument("--alpha", type=float, default=None, help="override rhc.alpha_tilde")
    r.add_argument("--variant", choices=("mixed", "fullrom"), default=None, help="override rhc.index_variant")
    r.add_argument("--validation", action="store_true", help="also compute the full-order index")
    sub.add_parser("compare", parents=[common], help="compare stored FOM and ROM runs")
    v = sub.add_parser("validate", parents=[common], help="run an oracle suite")
    v.add_argument("suite", choices=SUITES + ("all",))
    return p


def _load_config(spec: str) -> ExperimentConfig:
    path = Path(spec)
    if path.suffix == ".cfg" or path.exists():
        return ExperimentConfig.load(path)
    return ExperimentConfig.builtin(spec)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            seed = 0 if args.seed is None else args.seed
            return cmd_validate(args.suite, seed)
        cfg = _load_config(args.config)
        run = {}
        if args.seed is not None:
            run["seed"] = args.seed
        if args.threads is not None:
            run["threads"] = args.threads
        rhc = {}
        if args.command == "rhc":
            for key, val in (("T", args.T), ("alpha_tilde", args.alpha), ("index_variant", args.variant)):
                if val is not None:
                    rhc[key] = val
            if args.validation:
                rhc["validation_mode"] = True
        sections = {k: v for k, v in (("run", run), ("rhc", rhc)) if v}
        if sections:
            cfg = cfg.replace(**sections)
        out = Path(args.out or cfg.output.directory)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        if args.command == "openloop-study":
            with (out / "config.cfg").open("w") as fh:
                cfg.resolved().write(fh)
            code = cmd_openloop_study(cfg, out, cfg.run.threads)
        elif args.command == "rhc":
            code = cmd_rhc(cfg, out, args.mode)
        else:
            code = cmd_compare(cfg, out)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
        return code
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RHCAbort, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
