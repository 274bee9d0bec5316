"""POD reduced-order models with offline-online residual dual norms.

The basis is orthonormal in the V inner product. Dual norms of residuals are
evaluated through a QR factorisation of the Cholesky-whitened residual
dictionary, which avoids the cancellation of the naive Gram-matrix route.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .dynamics import DenseModel, Trajectory
from .fem import Discretization

log = logging.getLogger(__name__)


@dataclass
class SnapshotSet:
    """Weighted state snapshots; every time point of a trajectory gets weight ``tau``."""

    blocks: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    origins: list = field(default_factory=list)

    def add(self, traj: Trajectory | np.ndarray, weight: float | None = None, origin: str = "state") -> None:
        if isinstance(traj, Trajectory):
            states, w = traj.states, traj.grid.tau if weight is None else weight
        else:
            states, w = np.atleast_2d(traj), 1.0 if weight is None else weight
        if not np.all(np.isfinite(states)):
            raise FloatingPointError("non-finite snapshot")
        self.blocks.append(np.asarray(states, dtype=float))
        self.weights.append(float(w))
        self.origins.append(origin)

    def __len__(self) -> int:
        return sum(len(b) for b in self.blocks)

    @property
    def n_trajectories(self) -> int:
        return len(self.blocks)

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Snapshots as columns and the matching weights."""
        S = np.concatenate(self.blocks).T
        w = np.concatenate([np.full(len(b), wt) for b, wt in zip(self.blocks, self.weights)])
        return S, w


@dataclass
class PODResult:
    basis: np.ndarray          # (n, r), V-orthonormal columns
    singular_values: np.ndarray
    r: int
    energy: float


def pod(disc: Discretization, snapshots: SnapshotSet, r_max: int = 100,
        energy_tol: float = 1 - 1e-13, rank_rtol: float | None = None) -> PODResult:
    """V-orthonormal POD basis capturing ``energy_tol`` of the weighted snapshot energy.

    Singular values below ``rank_rtol * sigma_1`` are treated as zero; the
    default is the usual numerical-rank threshold ``max(shape) * eps``.
    Pass ``rank_rtol=0`` to keep every mode with a positive singular value.
    """
    S, w = snapshots.matrix()
    L = disc.K_V_chol
    W = (L.T @ S) * np.sqrt(w)[None, :]
    U, sv, _ = sla.svd(W, full_matrices=False, lapack_driver="gesvd")
    if sv.size == 0 or sv[0] == 0:
        raise ValueError("snapshot set is empty or identically zero")
    rtol = max(W.shape) * np.finfo(float).eps if rank_rtol is None else rank_rtol
    keep = sv > sv[0] * rtol
    sv_k = sv[keep]
    energy = np.cumsum(sv_k**2) / np.sum(sv_k**2)
    # energy_tol >= 1 keeps every retained mode (the cumulative sum reaches 1.0 early in floating point)
    r_energy = sv_k.size if energy_tol >= 1 else np.searchsorted(energy, energy_tol) + 1
    r = int(min(r_max, r_energy, sv_k.size))
    Phi = sla.solve_triangular(L.T, U[:, :r], lower=False)
    # one pass of re-orthonormalisation in the V inner product
    G = Phi.T @ (disc.K_V @ Phi)
    R = sla.cholesky(0.5 * (G + G.T), lower=False)
    Phi = sla.solve_triangular(R, Phi.T, trans="T", lower=False).T
    return PODResult(Phi, sv, r, float(energy[r - 1]))


class ReducedModel(DenseModel):
    """Galerkin projection of the discretisation onto ``span(Phi)``."""

    def __init__(self, disc: Discretization, Phi: np.ndarray, cache_size: int = 400):
        Phi = np.asarray(Phi, dtype=float)
        M = Phi.T @ (disc.M @ Phi)
        A_q = [Phi.T @ (Aq @ Phi) for Aq in disc.A_q]
        super().__init__(0.5 * (M + M.T), A_q, disc.theta_q, Phi.T @ disc.B, disc.eta_H, disc.eta_V,
                         cache_size)
        self.disc = disc
        self.Phi = Phi
        self.r = Phi.shape[1]
        L = disc.K_V_chol
        MPhi = disc.M @ Phi
        D_y = np.hstack([Aq @ Phi for Aq in disc.A_q] + [disc.B, MPhi])
        D_p = np.hstack([Aq.T @ Phi for Aq in disc.A_q] + [MPhi])
        self.F_y = sla.qr(sla.solve_triangular(L, D_y, lower=True), mode="r")[0][: D_y.shape[1]]
        self.F_p = sla.qr(sla.solve_triangular(L, D_p, lower=True), mode="r")[0][: D_p.shape[1]]
        self._MPhi = MPhi

    def lift(self, a: np.ndarray) -> np.ndarray:
        return np.asarray(a) @ self.Phi.T

    def project_initial(self, y: np.ndarray) -> tuple[np.ndarray, float]:
        """H-orthogonal projection coefficients and the H-norm of the projection error."""
        a = sla.solve(self.M, self._MPhi.T @ y, assume_a="pos")
        e = y - self.Phi @ a
        return a, float(np.sqrt(max(e @ (self.disc.M @ e), 0.0)))

    def state_residual_norms(self, traj: Trajectory, u: np.ndarray) -> np.ndarray:
        """``||R_k||_{V'}`` of the reduced state on each interval ``(t_k, t_{k+1}]``."""
        g, a = traj.grid, traj.states
        th = self.thetas(g.times[1:])  # (Q, N)
        coef = np.hstack([(-th[q][:, None] * a[1:]) for q in range(self.Q)]
                         + [np.asarray(u), -(a[1:] - a[:-1]) / g.tau])
        return np.linalg.norm(coef @ self.F_y.T, axis=1)

    def adjoint_residual_norms(self, state: Trajectory, adjoint: Trajectory) -> np.ndarray:
        g, a, b = state.grid, state.states, adjoint.states
        th = self.thetas(g.times[1:])
        coef = np.hstack([(-th[q][:, None] * b[:-1]) for q in range(self.Q)]
                         + [a[1:] + (b[1:] - b[:-1]) / g.tau])
        return np.linalg.norm(coef @ self.F_p.T, axis=1)

    @property
    def Q(self) -> int:
        return len(self.A_q)


def cache_key(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode())
    return h.hexdigest()[:16]


def save_basis(path: str | Path, result: PODResult, key: str) -> Path:
    path = Path(path)
    np.savez(path, basis=result.basis, singular_values=result.singular_values,
             r=result.r, energy=result.energy, key=key)
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def load_basis(path: str | Path, key: str) -> PODResult | None:
    """Return the cached basis, or ``None`` if missing or built for another configuration."""
    path = Path(path)
    if not path.exists():
        return None
    with np.load(path) as z:
        if str(z["key"]) != key:
            log.info("basis cache %s has key %s, expected %s; ignoring", path, z["key"], key)
            return None
        return PODResult(z["basis"], z["singular_values"], int(z["r"]), float(z["energy"]))
