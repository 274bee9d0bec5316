"""A posteriori error estimators for reduced open-loop solutions.

All time integrals use the right-endpoint rule of the cost, and the
exponential weights are evaluated at the right endpoints ``t_{k+1}``.
Every estimator is a pure function of the residual norms stored in
:class:`EstimatorInputs`, so certificates can be audited by recomputation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import TimeGrid, Trajectory
from .rom import ReducedModel


# ----------------------------------------------------------------------------
# constants
# ----------------------------------------------------------------------------

def c1_state(t_rel: float, eta_H: float, eta_V: float, exact_control: bool = False) -> float:
    c = 2.0 * np.exp(2 * eta_H * t_rel) / (min(1.0, eta_V) * eta_V)
    return 0.5 * c if exact_control else c


def c2_state(t_rel: float, eta_H: float, eta_V: float) -> float:
    return float(np.exp(2 * eta_H * t_rel) / min(1.0, eta_V))


def c_adjoint(T: float, eta_H: float, eta_V: float, exact_data: bool = False) -> float:
    c = 2.0 * np.exp(2 * eta_H * T) / (min(1.0, eta_V) * eta_V)
    return 0.5 * c if exact_data else c


def c_control(T: float, eta_H: float, eta_V: float) -> float:
    return float(np.exp(2 * eta_H * T) / (2 * eta_V))


# ----------------------------------------------------------------------------
# inputs
# ----------------------------------------------------------------------------

@dataclass
class EstimatorInputs:
    """Residual data of a reduced solution on one horizon.

    ``state`` and ``adjoint`` hold reduced coordinates; ``y_in`` is the
    (possibly perturbed) initial value the reduced model was started from,
    known to satisfy ``|y_in_true - y_in|_H <= delta_y_in``.
    """

    grid: TimeGrid
    eta_H: float
    eta_V: float
    B_norm: float
    lam: float
    delta_y_in: float
    res_y: np.ndarray            # ||R_y,k||_{V'}, k = 0..N-1
    res_p: np.ndarray | None     # ||R_p,k||_{V'}
    proj_error: float            # ||y_in - Pi y_in||_H
    init_mismatch: float         # ||y^r(t_in) - y_in||_H
    p_in_norm: float             # ||p^r(t_in)||_H
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.delta_y_in < 0:
            raise ValueError("delta_y_in must be non-negative")

    @classmethod
    def from_reduced(cls, rm: ReducedModel, state: Trajectory, u: np.ndarray, adjoint: Trajectory | None,
                     y_in: np.ndarray, delta_y_in: float = 0.0, lam: float = 1.0) -> "EstimatorInputs":
        _, proj = rm.project_initial(y_in)
        diff = rm.lift(state.states[0]) - y_in
        mismatch = float(np.sqrt(max(diff @ (rm.disc.M @ diff), 0.0)))
        res_p, p_in = None, 0.0
        if adjoint is not None:
            res_p = rm.adjoint_residual_norms(state, adjoint)
            b0 = adjoint.states[0]
            p_in = float(np.sqrt(max(b0 @ rm.M @ b0, 0.0)))
        return cls(state.grid, rm.eta_H, rm.eta_V, rm.disc.B_dualnorm, lam, float(delta_y_in),
                   rm.state_residual_norms(state, u), res_p, proj, mismatch, p_in)

    # weighted and plain residual integrals -----------------------------------
    @property
    def t_rel(self) -> np.ndarray:
        return self.grid.times[1:] - self.grid.t_in

    def res_y_weighted_sq(self, k: int | None = None) -> float:
        """``sum_{j<k} tau e^{-2 eta_H (t_{j+1}-t_in)} ||R_y,j||^2``; all steps if ``k`` is None."""
        k = self.grid.n_steps if k is None else k
        w = np.exp(-2 * self.eta_H * self.t_rel[:k])
        return float(self.grid.tau * np.sum(w * self.res_y[:k] ** 2))

    def res_p_weighted_sq(self) -> float:
        w = np.exp(2 * self.eta_H * (self.t_rel - self.grid.horizon))
        return float(self.grid.tau * np.sum(w * self._res_p() ** 2))

    def res_y_L2(self) -> float:
        return float(np.sqrt(self.grid.tau * np.sum(self.res_y**2)))

    def res_p_L2(self) -> float:
        return float(np.sqrt(self.grid.tau * np.sum(self._res_p() ** 2)))

    def _res_p(self) -> np.ndarray:
        if self.res_p is None:
            raise ValueError("adjoint residuals are required for this estimator")
        return self.res_p


@dataclass(frozen=True)
class Certificate:
    delta_y_final: float
    delta_y_L2H: float
    delta_p: float
    delta_u: float
    delta_VT: float
    delta_JT: float
    constants_used: tuple[float, float, float, float]


# ----------------------------------------------------------------------------
# estimators
# ----------------------------------------------------------------------------

def delta_state(inp: EstimatorInputs, k: int | None = None, delta_u: float = 0.0,
                delta_y_in: float | None = None) -> float:
    """Bound on ``sqrt(|e_y(t_k)|_H^2 + |e_y|^2_{L2(t_in,t_k;V)})``; ``k`` defaults to the final index."""
    k = inp.grid.n_steps if k is None else int(k)
    if not 0 <= k <= inp.grid.n_steps:
        raise ValueError(f"time index {k} outside the horizon")
    dyin = inp.delta_y_in if delta_y_in is None else delta_y_in
    t_rel = k * inp.grid.tau
    c1 = c1_state(t_rel, inp.eta_H, inp.eta_V, exact_control=(delta_u == 0))
    c2 = c2_state(t_rel, inp.eta_H, inp.eta_V)
    sq = c1 * (inp.B_norm**2 * delta_u**2 + inp.res_y_weighted_sq(k)) + c2 * (dyin + inp.proj_error) ** 2
    return float(np.sqrt(sq))


def delta_adjoint(inp: EstimatorInputs, delta_y_data: float = 0.0) -> tuple[float, float]:
    """``(Delta_p, improved bound on |e_p(t_in)|_H)``."""
    cp = c_adjoint(inp.grid.horizon, inp.eta_H, inp.eta_V, exact_data=(delta_y_data == 0))
    dp = float(np.sqrt(cp * (delta_y_data**2 + inp.res_p_weighted_sq())))
    return dp, dp / np.sqrt(2.0)


def delta_optimal_control(inp: EstimatorInputs) -> tuple[float, float]:
    """``(Delta_u, Delta_{y,H})`` for an optimal reduced solution."""
    lam = inp.lam
    cu = c_control(inp.grid.horizon, inp.eta_H, inp.eta_V)
    dp2 = delta_adjoint(inp, 0.0)[0] ** 2
    dy2 = delta_state(inp, None, 0.0, 0.0) ** 2
    dyin2 = inp.delta_y_in**2
    du2 = inp.B_norm**2 / lam**2 * dp2 + dy2 / lam + cu / lam * dyin2
    dyh2 = inp.B_norm**2 / (4 * lam) * dp2 + 2 * dy2 + 2 * cu * dyin2
    return float(np.sqrt(du2)), float(np.sqrt(dyh2))


def delta_value(inp: EstimatorInputs) -> float:
    """Bound on ``|V_T(t_in, y_in_true) - V_T^r(t_in, y_in)|`` for an optimal reduced solution."""
    du, dyh = delta_optimal_control(inp)
    dy_bar = delta_state(inp, None, du, inp.delta_y_in)
    dp_bar = delta_adjoint(inp, dyh)[0]
    dyin = inp.delta_y_in
    return float(0.5 * inp.res_p_L2() * dy_bar
                 + 0.5 * np.sqrt(inp.res_y_L2() ** 2 + inp.init_mismatch**2) * dp_bar
                 + 0.5 * inp.B_norm * dp_bar * du
                 + dyin * inp.p_in_norm + 0.25 * dyin * dp_bar)


def delta_cost(inp: EstimatorInputs) -> float:
    """Bound on ``|J_T(u) - J_T^r(u)|`` for a fixed control ``u``."""
    dy = delta_state(inp, None, 0.0, inp.delta_y_in)
    dp = delta_adjoint(inp, dy)[0]
    dyin = inp.delta_y_in
    return float(0.5 * inp.res_p_L2() * dy
                 + 0.5 * np.sqrt(inp.res_y_L2() ** 2 + inp.init_mismatch**2) * dp
                 + dyin * inp.p_in_norm + 0.25 * dyin * dp)


def certify(inp: EstimatorInputs) -> Certificate:
    """All estimators for an optimal reduced solution."""
    T = inp.grid.horizon
    du, dyh = delta_optimal_control(inp)
    return Certificate(
        delta_y_final=delta_state(inp, None, du, inp.delta_y_in),
        delta_y_L2H=dyh,
        delta_p=delta_adjoint(inp, dyh)[0],
        delta_u=du,
        delta_VT=delta_value(inp),
        delta_JT=delta_cost(inp),
        constants_used=(c1_state(T, inp.eta_H, inp.eta_V), c2_state(T, inp.eta_H, inp.eta_V),
                        c_adjoint(T, inp.eta_H, inp.eta_V), c_control(T, inp.eta_H, inp.eta_V)),
    )
