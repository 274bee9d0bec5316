"""Finite-horizon optimal control with a squared-l1 penalty.

Minimises, over piecewise-constant controls ``u_k`` on a :class:`TimeGrid`,

    J(u) = sum_k tau [ 1/2 |y_{k+1}|_H^2 + lam/2 |u_k|^2 + beta/2 |u_k|_1^2 ]

by a proximal gradient method with Barzilai-Borwein steps and a
non-monotone Armijo line search.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import LinearModel, TimeGrid, Trajectory, check_controls

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostSpec:
    lam: float = 1e-3
    beta: float = 1e-4

    def __post_init__(self):
        if self.lam <= 0 or self.beta < 0:
            raise ValueError("need lam > 0 and beta >= 0")


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 1000
    abs_tol: float = 1e-13
    rel_tol: float = 1e-13
    ls_memory: int = 5
    ls_sigma: float = 1e-4
    step_min: float = 1e-12
    step_max: float = 1e12
    max_backtracks: int = 60
    stall_iter: int = 30  # stop when the best residual has not improved for this many iterations


@dataclass
class OpenLoopSolution:
    u: np.ndarray
    state: Trajectory
    adjoint: Trajectory
    J: float
    converged: bool
    iterations: int
    n_grad: int
    n_state: int
    residual: float
    history: list = field(default_factory=list)


def l1sq_penalty(u: np.ndarray, tau: float, beta: float) -> float:
    return float(0.5 * tau * beta * np.sum(np.sum(np.abs(u), axis=1) ** 2))


def evaluate_cost(model: LinearModel, traj: Trajectory, u: np.ndarray, cost: CostSpec) -> float:
    tau = traj.grid.tau
    track = 0.5 * tau * float(np.sum(model.h_inner_diag(traj.states[1:])))
    return track + 0.5 * tau * cost.lam * float(np.sum(u * u)) + l1sq_penalty(u, tau, cost.beta)


def smooth_gradient(model: LinearModel, adjoint: Trajectory, u: np.ndarray, cost: CostSpec) -> np.ndarray:
    """Euclidean gradient of the smooth part with respect to the ``(N, m)`` array."""
    tau = adjoint.grid.tau
    return tau * (cost.lam * u + adjoint.states[:-1] @ model.B)


def prox_squared_l1(w: np.ndarray, sigma: float | np.ndarray) -> np.ndarray:
    """Row-wise proximal map of ``v -> sigma/2 |v|_1^2``.

    ``w`` is a vector or a stack of rows; ``sigma`` a scalar or one value per row.
    """
    w = np.asarray(w, dtype=float)
    W = np.atleast_2d(w)
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), W.shape[:1])[:, None]
    if np.any(sig < 0):
        raise ValueError("sigma must be non-negative")
    a = np.sort(np.abs(W), axis=1)[:, ::-1]
    S = np.cumsum(a, axis=1)
    k = np.arange(1, W.shape[1] + 1)[None, :]
    thresh = sig * S / (1.0 + sig * k)
    active = a > thresh  # monotone in k: True then False
    n_act = active.sum(axis=1)
    t = np.where(n_act > 0, np.take_along_axis(thresh, np.maximum(n_act - 1, 0)[:, None], axis=1)[:, 0], 0.0)
    out = np.sign(W) * np.maximum(np.abs(W) - t[:, None], 0.0)
    return out[0] if w.ndim == 1 else out


class _Problem:
    def __init__(self, model, y0, grid, cost):
        self.model, self.y0, self.grid, self.cost = model, y0, grid, cost
        self.n_grad = 0
        self.n_state = 0

    def state(self, u):
        self.n_state += 1
        tr = self.model.solve_state(self.y0, u, self.grid)
        return tr, evaluate_cost(self.model, tr, u, self.cost)

    def gradient(self, u, tr):
        self.n_grad += 1
        adj = self.model.solve_adjoint(tr)
        return adj, smooth_gradient(self.model, adj, u, self.cost)

    def hess_vec(self, d):
        # f is quadratic: H d from the linearised state with zero initial data
        self.n_grad += 1
        self.n_state += 1
        tr = self.model.solve_state(np.zeros(self.model.n), d, self.grid)
        adj = self.model.solve_adjoint(tr)
        return smooth_gradient(self.model, adj, d, self.cost)

    def prox(self, v, s):
        return prox_squared_l1(v, s * self.grid.tau * self.cost.beta)


def solve_open_loop(model: LinearModel, y0: np.ndarray, grid: TimeGrid, cost: CostSpec,
                    options: SolverOptions | None = None, u0: np.ndarray | None = None) -> OpenLoopSolution:
    """Proximal BB gradient method for the finite-horizon problem."""
    opt = options or SolverOptions()
    pb = _Problem(model, np.asarray(y0, dtype=float), grid, cost)
    u = np.zeros((grid.n_steps, model.m)) if u0 is None else check_controls(grid, u0, model.m).copy()

    tr, F = pb.state(u)
    adj, g = pb.gradient(u, tr)

    # curvature probe for the initial step and the reference step of the residual
    d = g if np.any(g) else np.ones_like(g)
    Hd = pb.hess_vec(d)
    curv = float(np.vdot(d, Hd))
    L_est = curv / float(np.vdot(d, d)) if curv > 0 else 1.0 / opt.step_max
    s = float(np.clip(1.0 / L_est, opt.step_min, opt.step_max))

    def residual(u, g):
        s_ref = 1.0 / L_est
        return float(np.linalg.norm(u - pb.prox(u - s_ref * g, s_ref)))

    recent = [F]
    res = residual(u, g)
    best = (res, F, u, tr, adj)
    history = [(0, F, res)]
    converged = res <= opt.abs_tol or res <= opt.rel_tol * max(1.0, float(np.linalg.norm(u)))
    it = 0
    last_gain = 0
    while not converged and it < opt.max_iter and it - last_gain < opt.stall_iter:
        it += 1
        F_ref = max(recent)
        for _ in range(opt.max_backtracks):
            u_new = pb.prox(u - s * g, s)
            du = u_new - u
            tr_new, F_new = pb.state(u_new)
            if F_new <= F_ref - opt.ls_sigma / (2 * s) * float(np.vdot(du, du)):
                break
            s = max(0.5 * s, opt.step_min)
        else:
            log.warning("line search failed at iteration %d", it)
            break
        adj_new, g_new = pb.gradient(u_new, tr_new)
        dg = g_new - g
        sy, ss, yy = float(np.vdot(du, dg)), float(np.vdot(du, du)), float(np.vdot(dg, dg))
        if sy > 0 and ss > 0:
            L_est = max(L_est, sy / ss)
            s = (ss / sy) if it % 2 else (sy / yy)
        s = float(np.clip(s, opt.step_min, opt.step_max))
        u, g, F, tr, adj = u_new, g_new, F_new, tr_new, adj_new
        recent = (recent + [F])[-opt.ls_memory:]
        res = residual(u, g)
        if res < 0.5 * best[0]:
            last_gain = it
        if res < best[0]:
            best = (res, F, u, tr, adj)
        history.append((it, F, res))
        converged = res <= opt.abs_tol or res <= opt.rel_tol * max(1.0, float(np.linalg.norm(u)))

    if not converged:
        res, F, u, tr, adj = best
        level = logging.WARNING if res > 1e-8 * max(1.0, float(np.linalg.norm(u))) else logging.DEBUG
        log.log(level, "open-loop solver stopped without convergence after %d iterations (residual %.3e)", it, res)
    return OpenLoopSolution(u, tr, adj, F, converged, it, pb.n_grad, pb.n_state, res, history)
