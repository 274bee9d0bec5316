"""Receding-horizon control loops with full-order and certified reduced-order models.

``run_fom_rhc`` solves a full-order open-loop problem at every sampling
instant. ``run_rom_rhc`` solves reduced problems instead and accepts a
reduced control only if a certified lower bound on the induced performance
index reaches the target ``alpha_tilde``; otherwise the POD model is
enriched with full-order optimal trajectories and the step is retried.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .certify import EstimatorInputs, delta_cost, delta_state, delta_value
from .dynamics import FullOrderModel, LinearModel, TimeGrid, Trajectory
from .fem import Discretization
from .ocp import CostSpec, OpenLoopSolution, SolverOptions, evaluate_cost, solve_open_loop
from .rom import ReducedModel, SnapshotSet, pod

log = logging.getLogger(__name__)

DENOMINATOR_GUARD = 1e-14
VARIANTS = ("mixed", "fullrom")


class RHCAbort(RuntimeError):
    """Raised when model updates cannot certify a step."""


@dataclass(frozen=True)
class RHCConfig:
    T_inf: float
    tau: float
    delta: float
    T: float
    alpha_tilde: float = 0.35
    index_variant: str = "mixed"
    r_max: int = 100
    energy_eps: float = 1 - 1e-13
    validation_mode: bool = False
    max_updates: int = 10
    cost: CostSpec = field(default_factory=CostSpec)
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.tau <= 0 or self.T_inf <= 0:
            raise ValueError("tau and T_inf must be positive")
        if self.n_delta < 1:
            raise ValueError(f"delta={self.delta} is shorter than half a time step")
        if self.n_horizon < self.n_delta:
            raise ValueError("prediction horizon must be at least the sampling time")
        if not self.alpha_tilde < 1:
            # values <= 0 accept every certified step; useful for validation runs
            raise ValueError("alpha_tilde must be below 1")
        if self.index_variant not in VARIANTS:
            raise ValueError(f"index_variant must be one of {VARIANTS}")

    @property
    def n_total(self) -> int:
        return int(round(self.T_inf / self.tau))

    @property
    def n_delta(self) -> int:
        return int(round(self.delta / self.tau))

    @property
    def n_horizon(self) -> int:
        return int(round(self.T / self.tau))

    @property
    def delta_snapped(self) -> float:
        return self.n_delta * self.tau

    @property
    def T_snapped(self) -> float:
        return self.n_horizon * self.tau


@dataclass
class PerformanceRecord:
    k: int
    t_k: float
    r: int
    alpha_lower: float
    alpha_upper: float
    alpha_fom: float | None
    accepted: bool
    J_delta: float
    V_T_r: float
    delta_VT: float
    fom_grads: int
    wall_ms: float
    n_model_updates_so_far: int = 0


@dataclass
class ClosedLoopResult:
    mode: str
    config: RHCConfig
    grid: TimeGrid
    u: np.ndarray                  # (n_total, m)
    y: Trajectory                  # plant states at every time point
    J: float
    stage_costs: np.ndarray        # per step, J = tau * sum
    records: list
    counters: dict
    V_T0: float | None = None

    @property
    def y_norms(self) -> np.ndarray:
        return self.counters["_h_norms"]

    @property
    def sample_indices(self) -> np.ndarray:
        return np.asarray(self.counters["sample_indices"])


def stage_costs(model: LinearModel, traj: Trajectory, u: np.ndarray, cost: CostSpec) -> np.ndarray:
    """``l(y_{k+1}, u_k)`` for every step of ``traj``."""
    y2 = model.h_inner_diag(traj.states[1:])
    return 0.5 * y2 + 0.5 * cost.lam * np.sum(u * u, axis=1) + 0.5 * cost.beta * np.sum(np.abs(u), axis=1) ** 2


def _shift_warm_start(u: np.ndarray, shift: int, n_steps: int) -> np.ndarray:
    out = np.zeros((n_steps, u.shape[1]))
    tail = u[shift:shift + n_steps]
    out[: len(tail)] = tail
    return out


def _index(num: float, den: float) -> float:
    if abs(den) < DENOMINATOR_GUARD:
        return 1.0
    return num / den


def performance_index_fom(fom: LinearModel, cfg: RHCConfig, y_in: np.ndarray, t_start: int,
                          u_delta: np.ndarray, warm: np.ndarray | None = None) -> tuple[float, dict]:
    """Induced performance index of ``u_delta`` applied on the sampling interval.

    ``alpha = (V_T(t_in, y_in) - V_T(t_in + delta, y(t_in + delta))) / J_delta``.
    """
    n_d = len(u_delta)
    g_d = TimeGrid(cfg.tau, t_start, n_d)
    roll = fom.solve_state(y_in, u_delta, g_d)
    J_d = evaluate_cost(fom, roll, u_delta, cfg.cost)
    g0 = TimeGrid(cfg.tau, t_start, cfg.n_horizon)
    s0 = solve_open_loop(fom, y_in, g0, cfg.cost, cfg.solver, warm)
    s1 = solve_open_loop(fom, roll.final, g0.shifted(n_d), cfg.cost, cfg.solver,
                         _shift_warm_start(s0.u, n_d, cfg.n_horizon))
    alpha = 1.0 if J_d < DENOMINATOR_GUARD else (s0.J - s1.J) / J_d
    return alpha, {"J_delta": J_d, "V0": s0.J, "V1": s1.J, "grads": s0.n_grad + s1.n_grad, "rollout": roll}


# ----------------------------------------------------------------------------
# full-order loop
# ----------------------------------------------------------------------------

def _as_fom(model) -> FullOrderModel:
    return model if isinstance(model, LinearModel) else FullOrderModel(model)


def run_fom_rhc(cfg: RHCConfig, model: Discretization | FullOrderModel, y0: np.ndarray,
                progress=None) -> ClosedLoopResult:
    """Full-order receding-horizon loop with warm-started open-loop solves."""
    fom = _as_fom(model)
    t0 = time.perf_counter()
    n_tot, n_d, n_h = cfg.n_total, cfg.n_delta, cfg.n_horizon
    U = np.zeros((n_tot, fom.m))
    Y = np.zeros((n_tot + 1, fom.n))
    Y[0] = y0
    records, V_list, Jd_list, samples = [], [], [], []
    grads = 0
    warm = None
    step, k = 0, 0
    V_T0 = None
    while step < n_tot:
        tick = time.perf_counter()
        grid = TimeGrid(cfg.tau, step, n_h)
        sol = solve_open_loop(fom, Y[step], grid, cfg.cost, cfg.solver, warm)
        if not sol.converged:
            log.debug("FOM open-loop solve at step %d stopped at residual %.2e", k, sol.residual)
        grads += sol.n_grad
        if V_T0 is None:
            V_T0 = sol.J
        n_k = min(n_d, n_tot - step)
        u_c = sol.u[:n_k]
        # the plant advance coincides with the first n_k steps of the optimal trajectory
        Y[step + 1: step + n_k + 1] = sol.state.states[1: n_k + 1]
        U[step: step + n_k] = u_c
        J_d = float(cfg.tau * np.sum(stage_costs(fom, Trajectory(grid.sub(n_k), sol.state.states[: n_k + 1]),
                                                 u_c, cfg.cost)))
        V_list.append(sol.J)
        Jd_list.append(J_d)
        samples.append(step)
        records.append(PerformanceRecord(k, step * cfg.tau, fom.n, np.nan, np.nan, None, True, J_d, sol.J, 0.0,
                                         grads, 1e3 * (time.perf_counter() - tick)))
        warm = _shift_warm_start(sol.u, n_k, n_h)
        step += n_k
        k += 1
        if progress:
            progress(k, step, n_tot)
    # alpha_k from consecutive value functions; the last one needs no extra solve
    for i in range(len(records) - 1):
        a = 1.0 if Jd_list[i] < DENOMINATOR_GUARD else (V_list[i] - V_list[i + 1]) / Jd_list[i]
        records[i].alpha_fom = records[i].alpha_lower = records[i].alpha_upper = a
    samples.append(n_tot)
    traj = Trajectory(TimeGrid(cfg.tau, 0, n_tot), Y)
    ell = stage_costs(fom, traj, U, cfg.cost)
    counters = {"fom_grads": grads, "rom_grads": 0, "model_updates": 0, "update_steps": [],
                "validation_fom_grads": 0, "wall_time": time.perf_counter() - t0,
                "sample_indices": samples, "_h_norms": np.sqrt(np.maximum(fom.h_inner_diag(Y), 0.0)),
                "factorizations": fom.n_factorizations, "final_r": fom.n}
    return ClosedLoopResult("fom", cfg, traj.grid, U, traj, float(cfg.tau * ell.sum()), ell, records,
                            counters, V_T0)


# ----------------------------------------------------------------------------
# reduced-order loop
# ----------------------------------------------------------------------------

@dataclass
class ReducedSolve:
    sol: OpenLoopSolution
    inputs: EstimatorInputs
    delta_VT: float
    a_in: np.ndarray

    @property
    def V(self) -> float:
        return self.sol.J


def reduced_value(rm: ReducedModel, y_in: np.ndarray, grid: TimeGrid, cfg: RHCConfig,
                  delta_y_in: float = 0.0, warm: np.ndarray | None = None,
                  a_in: np.ndarray | None = None) -> ReducedSolve:
    """Reduced optimal value ``V_T^r`` and its certificate ``Delta_{V_T}``."""
    if a_in is None:
        a_in, _ = rm.project_initial(y_in)
    sol = solve_open_loop(rm, a_in, grid, cfg.cost, cfg.solver, warm)
    if not sol.converged:
        log.debug("reduced open-loop solve at t=%.4f stopped at residual %.2e", grid.t_in, sol.residual)
    inp = EstimatorInputs.from_reduced(rm, sol.state, sol.u, sol.adjoint, y_in, delta_y_in, cfg.cost.lam)
    return ReducedSolve(sol, inp, delta_value(inp), a_in)


def performance_bounds_mixed(S_k: ReducedSolve, S_k1: ReducedSolve, J_delta: float) -> tuple[float, float]:
    """Certified bounds on the index using the FOM rollout cost ``J_delta``."""
    if J_delta < DENOMINATOR_GUARD:
        return 1.0, 1.0
    lo = (S_k.V - S_k.delta_VT - S_k1.V - S_k1.delta_VT) / J_delta
    hi = (S_k.V + S_k.delta_VT - S_k1.V + S_k1.delta_VT) / J_delta
    return lo, min(hi, 1.0)


def performance_bounds_fullrom(S_k: ReducedSolve, S_k1: ReducedSolve, J_r: float,
                               delta_J: float) -> tuple[float, float]:
    """Certified bounds that need no full-order evaluation.

    The cost denominator is only known up to ``J_r +- delta_J``; each bound
    picks the end of that interval that keeps it valid for either sign of
    its numerator.
    """
    d_lo, d_hi = J_r - delta_J, J_r + delta_J
    if d_hi < DENOMINATOR_GUARD:
        return 1.0, 1.0
    n_lo = S_k.V - S_k.delta_VT - S_k1.V - S_k1.delta_VT
    n_hi = S_k.V + S_k.delta_VT - S_k1.V + S_k1.delta_VT
    if n_lo >= 0:
        lo = n_lo / d_hi
    else:
        lo = n_lo / d_lo if d_lo > 0 else -np.inf
    if d_lo <= 0:
        hi = 1.0
    else:
        hi = min(n_hi / d_lo if n_hi >= 0 else n_hi / d_hi, 1.0)
    return lo, hi


class _RomLoop:
    def __init__(self, cfg: RHCConfig, fom: FullOrderModel, y0: np.ndarray, progress=None):
        self.cfg, self.fom, self.y0, self.progress = cfg, fom, y0, progress
        self.snapshots = SnapshotSet()
        self.rm: ReducedModel | None = None
        self.fom_grads = 0
        self.rom_grads = 0
        self.val_grads = 0
        self.n_updates = 0
        self.update_steps: list = []
        self.records: list = []
        self.r_history: list = []
        self.V_T0: float | None = None

    # -- model update --------------------------------------------------------
    def model_update(self, step: int, k: int, y_k: np.ndarray, warm: np.ndarray | None):
        cfg = self.cfg
        g0 = TimeGrid(cfg.tau, step, cfg.n_horizon)
        s0 = solve_open_loop(self.fom, y_k, g0, cfg.cost, cfg.solver, warm)
        n_d = min(cfg.n_delta, cfg.n_total - step)
        s1 = solve_open_loop(self.fom, s0.state.states[n_d], g0.shifted(n_d), cfg.cost, cfg.solver,
                             _shift_warm_start(s0.u, n_d, cfg.n_horizon))
        self.fom_grads += s0.n_grad + s1.n_grad
        if step == 0 and self.V_T0 is None:
            self.V_T0 = s0.J
        for s in (s0, s1):
            self.snapshots.add(s.state, origin=f"state@{k}")
            self.snapshots.add(s.adjoint, origin=f"adjoint@{k}")
        res = pod(self.fom.disc, self.snapshots, cfg.r_max, cfg.energy_eps)
        self.rm = ReducedModel(self.fom.disc, res.basis)
        self.n_updates += 1
        self.update_steps.append(k)
        log.info("model update %d at RHC step %d: r=%d", self.n_updates, k, self.rm.r)
        return s0

    def _solve(self, y_in, grid, warm, delta_y_in=0.0, a_in=None) -> ReducedSolve:
        rs = reduced_value(self.rm, y_in, grid, self.cfg, delta_y_in, warm, a_in)
        self.rom_grads += rs.sol.n_grad
        return rs

    # -- loop ------------------------------------------------------------------
    def run(self) -> ClosedLoopResult:
        cfg, fom = self.cfg, self.fom
        t0 = time.perf_counter()
        n_tot, n_d, n_h = cfg.n_total, cfg.n_delta, cfg.n_horizon
        U = np.zeros((n_tot, fom.m))
        Y = np.zeros((n_tot + 1, fom.n))
        Y[0] = self.y0
        samples = []
        warm = None
        cached: ReducedSolve | None = None
        V_val_cache: tuple | None = None
        step, k = 0, 0
        while step < n_tot:
            n_k = min(n_d, n_tot - step)
            grid = TimeGrid(cfg.tau, step, n_h)
            grid1 = grid.shifted(n_k)
            updates_here = 0
            if self.rm is None:
                self.model_update(step, k, Y[step], warm)
                cached = None
            while True:
                tick = time.perf_counter()
                S_k = cached if cached is not None else self._solve(Y[step], grid, warm)
                cached = None
                u_c = S_k.sol.u[:n_k]
                roll = fom.solve_state(Y[step], u_c, grid.sub(n_k))
                J_d = evaluate_cost(fom, roll, u_c, cfg.cost)
                w1 = _shift_warm_start(S_k.sol.u, n_k, n_h)
                if cfg.index_variant == "mixed":
                    S_k1 = self._solve(roll.final, grid1, w1)
                    lo, hi = performance_bounds_mixed(S_k, S_k1, J_d)
                    J_log = J_d
                else:
                    sub = Trajectory(grid.sub(n_k), S_k.sol.state.states[: n_k + 1])
                    J_r = evaluate_cost(self.rm, sub, u_c, cfg.cost)
                    adj = self.rm.solve_adjoint(sub)
                    inp_d = EstimatorInputs.from_reduced(self.rm, sub, u_c, adj, Y[step], 0.0, cfg.cost.lam)
                    dJ = delta_cost(inp_d)
                    a1 = S_k.sol.state.states[n_k]
                    d_y1 = delta_state(S_k.inputs, n_k, 0.0, 0.0)
                    S_k1 = self._solve(self.rm.lift(a1), grid1, w1, d_y1, a_in=a1)
                    lo, hi = performance_bounds_fullrom(S_k, S_k1, J_r, dJ)
                    J_log = J_r
                alpha_fom = None
                if cfg.validation_mode:
                    alpha_fom, V_val_cache = self._validate(step, n_k, Y[step], u_c, roll, J_d, S_k, V_val_cache)
                accepted = lo >= cfg.alpha_tilde
                self.records.append(PerformanceRecord(
                    k, step * cfg.tau, self.rm.r, lo, hi, alpha_fom, accepted, J_log, S_k.V, S_k.delta_VT,
                    self.fom_grads, 1e3 * (time.perf_counter() - tick), self.n_updates))
                if accepted:
                    break
                if updates_here >= cfg.max_updates:
                    raise RHCAbort(f"step {k}: lower index {lo:.3e} < {cfg.alpha_tilde} after "
                                   f"{updates_here} model updates (r={self.rm.r})")
                updates_here += 1
                self.model_update(step, k, Y[step], S_k.sol.u)
            U[step: step + n_k] = u_c
            Y[step + 1: step + n_k + 1] = roll.states[1:]
            samples.append(step)
            warm = w1
            if cfg.index_variant == "mixed":
                cached = S_k1
            else:
                warm = S_k1.sol.u
            self.r_history.append(self.rm.r)
            step += n_k
            k += 1
            if self.progress:
                self.progress(k, step, n_tot)
        samples.append(n_tot)
        traj = Trajectory(TimeGrid(cfg.tau, 0, n_tot), Y)
        ell = stage_costs(fom, traj, U, cfg.cost)
        counters = {"fom_grads": self.fom_grads, "rom_grads": self.rom_grads, "model_updates": self.n_updates,
                    "update_steps": self.update_steps, "validation_fom_grads": self.val_grads,
                    "wall_time": time.perf_counter() - t0, "sample_indices": samples,
                    "_h_norms": np.sqrt(np.maximum(fom.h_inner_diag(Y), 0.0)),
                    "factorizations": fom.n_factorizations, "final_r": self.rm.r if self.rm else 0,
                    "r_history": self.r_history}
        return ClosedLoopResult("rom", cfg, traj.grid, U, traj, float(cfg.tau * ell.sum()), ell, self.records,
                                counters, self.V_T0)

    def _validate(self, step, n_k, y_k, u_c, roll, J_d, S_k, cache):
        cfg = self.cfg
        grid = TimeGrid(cfg.tau, step, cfg.n_horizon)
        if cache is not None and cache[0] == step and np.array_equal(cache[1], y_k):
            V0, u0 = cache[2], cache[3]
        else:
            s0 = solve_open_loop(self.fom, y_k, grid, cfg.cost, cfg.solver, S_k.sol.u)
            self.val_grads += s0.n_grad
            V0, u0 = s0.J, s0.u
        s1 = solve_open_loop(self.fom, roll.final, grid.shifted(n_k), cfg.cost, cfg.solver,
                             _shift_warm_start(u0, n_k, cfg.n_horizon))
        self.val_grads += s1.n_grad
        alpha = 1.0 if J_d < DENOMINATOR_GUARD else (V0 - s1.J) / J_d
        return alpha, (step + n_k, roll.final.copy(), s1.J, s1.u)


def run_rom_rhc(cfg: RHCConfig, model: Discretization | FullOrderModel, y0: np.ndarray,
                progress=None) -> ClosedLoopResult:
    """Certified reduced-order receding-horizon loop with POD model updates."""
    return _RomLoop(cfg, _as_fom(model), np.asarray(y0, dtype=float), progress).run()


# ----------------------------------------------------------------------------
# comparison
# ----------------------------------------------------------------------------

def compare(fom_res: ClosedLoopResult, rom_res: ClosedLoopResult, M=None) -> dict:
    """Relative closed-loop discrepancies between the ROM and FOM loops.

    ``M`` is the H Gram matrix used for the state error (Euclidean if omitted).
    """
    tau = fom_res.config.tau

    def rel(a, b, M=None):
        d = a - b
        if M is None:
            num, den = np.sum(d * d), np.sum(b * b)
        else:
            num = np.sum(np.einsum("ki,ki->k", d, (M @ d.T).T))
            den = np.sum(np.einsum("ki,ki->k", b, (M @ b.T).T))
        return float(np.sqrt(tau * num) / np.sqrt(tau * den)) if den > 0 else float(np.sqrt(tau * num))

    # compare the steps at which the full-order index is known
    alpha_f = {r.k: r.alpha_fom for r in fom_res.records if r.alpha_fom is not None}
    alphas_f = list(alpha_f.values())
    lowers = [r.alpha_lower for r in rom_res.records if r.accepted and r.k in alpha_f]
    a_min = min(alphas_f) if alphas_f else np.nan
    out = {
        "e_J": abs(rom_res.J - fom_res.J) / fom_res.J if fom_res.J > 0 else abs(rom_res.J),
        "e_u": rel(rom_res.u, fom_res.u),
        "e_y": rel(rom_res.y.states[1:], fom_res.y.states[1:], M),
        "e_alpha": abs(min(lowers) - a_min) / abs(a_min) if lowers and alphas_f else np.nan,
        "speed_up": fom_res.counters["wall_time"] / rom_res.counters["wall_time"],
        "grad_ratio": fom_res.counters["fom_grads"] / max(rom_res.counters["fom_grads"], 1),
    }
    return out
