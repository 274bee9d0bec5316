"""Implicit-Euler time stepping for the state and its discrete adjoint.

The same driver serves the full-order model (sparse matrices, cached sparse
LU factors) and reduced models (dense matrices, cached dense LU factors).

Time indexing: a :class:`TimeGrid` starts at global step ``start`` and covers
``n_steps`` intervals of length ``tau``. ``controls[k]`` acts on
``(t_k, t_{k+1}]`` and the state recursion is

    (M + tau A(t_{k+1})) y_{k+1} = M y_k + tau B u_k.

The adjoint recursion is its exact transpose for the right-endpoint cost
``sum_k tau/2 y_{k+1}^T M y_{k+1}``:

    p_N = 0,   (M + tau A(t_{k+1}))^T p_k = M p_{k+1} + tau M y_{k+1}.
"""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import Discretization

CSV_VERSION = "rhcrom-csv/1"


@dataclass(frozen=True)
class TimeGrid:
    tau: float
    start: int
    n_steps: int

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.n_steps < 1:
            raise ValueError("a time grid needs at least one step")

    @property
    def t_in(self) -> float:
        return self.start * self.tau

    @property
    def horizon(self) -> float:
        return self.n_steps * self.tau

    @property
    def times(self) -> np.ndarray:
        return (self.start + np.arange(self.n_steps + 1)) * self.tau

    def sub(self, n_steps: int) -> "TimeGrid":
        return TimeGrid(self.tau, self.start, min(n_steps, self.n_steps))

    def shifted(self, steps: int, n_steps: int | None = None) -> "TimeGrid":
        return TimeGrid(self.tau, self.start + steps, self.n_steps if n_steps is None else n_steps)


@dataclass
class Trajectory:
    grid: TimeGrid
    states: np.ndarray  # (N+1, n)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def check_controls(grid: TimeGrid, u: np.ndarray, m: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (grid.n_steps, m):
        raise ValueError(f"control shape {u.shape} does not match grid ({grid.n_steps}, {m})")
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite control values")
    return u


class LinearModel:
    """Common implicit-Euler driver; subclasses provide the linear algebra."""

    M: object
    B: np.ndarray
    A_q: tuple
    theta_q: tuple
    eta_H: float
    eta_V: float

    def __init__(self, cache_size: int = 160):
        self.cache_size = int(cache_size)
        self._cache: OrderedDict = OrderedDict()
        self.n_factorizations = 0
        self.n_state_solves = 0
        self.n_adjoint_solves = 0

    # -- to be specialised --------------------------------------------------
    def _factor(self, mat):
        raise NotImplementedError

    def _solve(self, fac, rhs: np.ndarray, trans: bool) -> np.ndarray:
        raise NotImplementedError

    def _system_matrix(self, t: float, tau: float):
        th = [float(f(t)) for f in self.theta_q]
        S = self.M + tau * th[0] * self.A_q[0]
        for c, Aq in zip(th[1:], self.A_q[1:]):
            S = S + (tau * c) * Aq
        return S

    # -- shared -------------------------------------------------------------
    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def thetas(self, t) -> np.ndarray:
        return np.stack([np.asarray(f(t), dtype=float) * np.ones_like(np.asarray(t, dtype=float))
                         for f in self.theta_q])

    def A(self, t: float):
        th = self.thetas(t)
        S = th[0] * self.A_q[0]
        for c, Aq in zip(th[1:], self.A_q[1:]):
            S = S + c * Aq
        return S

    def step_factor(self, j: int, tau: float):
        """Factor of ``M + tau A(j tau)``, cached by global step index."""
        key = (int(j), float(tau))
        fac = self._cache.get(key)
        if fac is not None:
            self._cache.move_to_end(key)
            return fac
        fac = self._factor(self._system_matrix(j * tau, tau))
        self.n_factorizations += 1
        self._cache[key] = fac
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return fac

    def clear_cache(self):
        self._cache.clear()

    def h_inner_diag(self, Y: np.ndarray) -> np.ndarray:
        """``y_k^T M y_k`` for each row."""
        return np.einsum("ki,ki->k", Y, (self.M @ Y.T).T)

    def solve_state(self, y0: np.ndarray, u: np.ndarray, grid: TimeGrid) -> Trajectory:
        u = check_controls(grid, u, self.m)
        y = np.asarray(y0, dtype=float)
        if y.shape != (self.n,):
            raise ValueError(f"initial state has shape {y.shape}, expected ({self.n},)")
        Y = np.empty((grid.n_steps + 1, self.n))
        Y[0] = y
        forcing = grid.tau * (u @ self.B.T)
        for k in range(grid.n_steps):
            fac = self.step_factor(grid.start + k + 1, grid.tau)
            Y[k + 1] = self._solve(fac, self.M @ Y[k] + forcing[k], trans=False)
        if not np.all(np.isfinite(Y[-1])):
            raise FloatingPointError("state solve produced non-finite values")
        self.n_state_solves += 1
        return Trajectory(grid, Y)

    def solve_adjoint(self, traj: Trajectory, p_end: np.ndarray | None = None) -> Trajectory:
        grid = traj.grid
        P = np.empty_like(traj.states)
        P[-1] = 0.0 if p_end is None else p_end
        for k in range(grid.n_steps - 1, -1, -1):
            fac = self.step_factor(grid.start + k + 1, grid.tau)
            P[k] = self._solve(fac, self.M @ (P[k + 1] + grid.tau * traj.states[k + 1]), trans=True)
        if not np.all(np.isfinite(P[0])):
            raise FloatingPointError("adjoint solve produced non-finite values")
        self.n_adjoint_solves += 1
        return Trajectory(grid, P)


class FullOrderModel(LinearModel):
    """Sparse model on the finite element space.

    ``solver='direct'`` caches sparse LU factors; ``solver='gmres'`` uses
    GMRES preconditioned with the factor of a reference matrix.
    """

    def __init__(self, disc: Discretization, cache_size: int = 160, solver: str = "direct",
                 gmres_rtol: float = 1e-13):
        super().__init__(cache_size)
        if solver not in ("direct", "gmres"):
            raise ValueError(f"unknown linear solver {solver!r}")
        self.disc = disc
        self.M = disc.M.tocsc()
        self.B = np.asarray(disc.B)
        self.A_q = disc.A_q
        self.theta_q = disc.theta_q
        self.eta_H = disc.eta_H
        self.eta_V = disc.eta_V
        self.solver = solver
        self.gmres_rtol = gmres_rtol
        self._precond: dict = {}

    def _factor(self, mat):
        mat = sp.csc_matrix(mat)
        if self.solver == "direct":
            return spla.splu(mat)
        return mat

    def _solve(self, fac, rhs, trans):
        if self.solver == "direct":
            return fac.solve(rhs, trans="T" if trans else "N")
        mat = fac.T.tocsc() if trans else fac
        key = (trans, mat.shape)
        if key not in self._precond:
            self._precond[key] = spla.splu(mat)
        pre = self._precond[key]
        P = spla.LinearOperator(mat.shape, matvec=pre.solve)
        x, info = spla.gmres(mat, rhs, M=P, rtol=self.gmres_rtol, atol=0.0, restart=50, maxiter=200)
        if info != 0:
            raise FloatingPointError(f"GMRES did not converge (info={info})")
        return x


class DenseModel(LinearModel):
    """Dense model; used for reduced-order systems."""

    def __init__(self, M, A_q, theta_q, B, eta_H: float, eta_V: float, cache_size: int = 400):
        super().__init__(cache_size)
        self.M = np.asarray(M, dtype=float)
        self.A_q = tuple(np.asarray(a, dtype=float) for a in A_q)
        self.theta_q = tuple(theta_q)
        self.B = np.asarray(B, dtype=float)
        self.eta_H = float(eta_H)
        self.eta_V = float(eta_V)

    def _factor(self, mat):
        return sla.lu_factor(np.asarray(mat))

    def _solve(self, fac, rhs, trans):
        return sla.lu_solve(fac, rhs, trans=1 if trans else 0)


def write_trajectory_csv(path: str | Path, traj: Trajectory, h_norms: np.ndarray | None = None,
                         coefficients: bool = False) -> Path:
    """Write ``t`` (and optionally ``||y||_H`` and all coefficients) per time point."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# {CSV_VERSION}\n")
        w = csv.writer(fh)
        header = ["t"] + (["y_H"] if h_norms is not None else [])
        if coefficients:
            header += [f"c{i}" for i in range(traj.states.shape[1])]
        w.writerow(header)
        for k, t in enumerate(traj.grid.times):
            row = [f"{t:.10g}"]
            if h_norms is not None:
                row.append(f"{h_norms[k]:.16e}")
            if coefficients:
                row += [f"{v:.16e}" for v in traj.states[k]]
            w.writerow(row)
    return path
