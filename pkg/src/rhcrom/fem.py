"""P1 finite elements on a uniform triangulation of the unit square.

Assembles the advection-diffusion-reaction operator as an affine family
``A(t) = sum_q theta_q(t) A_q`` on the interior (homogeneous Dirichlet)
degrees of freedom, together with the mass (H) and stiffness (V) Gram
matrices and indicator-function actuators.

The V-norm is the H^1_0 seminorm ``|v|_V^2 = int |grad v|^2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import sympy

log = logging.getLogger(__name__)

# 7-point, degree-5 rule on the reference triangle (barycentric coordinates).
_A1, _B1 = (6 - np.sqrt(15)) / 21, (9 + 2 * np.sqrt(15)) / 21
_A2, _B2 = (6 + np.sqrt(15)) / 21, (9 - 2 * np.sqrt(15)) / 21
QUAD_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _A1, _B1], [_A1, _B1, _A1], [_B1, _A1, _A1],
    [_A2, _A2, _B2], [_A2, _B2, _A2], [_B2, _A2, _A2],
])
QUAD_W = np.array([9 / 40] + [(155 - np.sqrt(15)) / 1200] * 3 + [(155 + np.sqrt(15)) / 1200] * 3)

T_SYM, X1_SYM, X2_SYM = sympy.symbols("t x1 x2", real=True)


class NonSeparableError(ValueError):
    """Raised when a coefficient cannot be written as sum_q f_q(x) g_q(t)."""


# --------------------------------------------------------------------------
# mesh
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Mesh:
    n_per_side: int
    nodes: np.ndarray          # (n_nodes, 2)
    triangles: np.ndarray      # (n_tri, 3), counter-clockwise
    interior_dofs: np.ndarray  # indices into nodes

    @property
    def h(self) -> float:
        return 1.0 / (self.n_per_side - 1)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_dofs(self) -> int:
        return len(self.interior_dofs)

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def to_full(self, v: np.ndarray) -> np.ndarray:
        """Extend interior coefficients (last axis) by zero boundary values."""
        v = np.asarray(v)
        out = np.zeros(v.shape[:-1] + (self.n_nodes,), dtype=v.dtype)
        out[..., self.interior_dofs] = v
        return out


def build_mesh(n_per_side: int) -> Mesh:
    """Uniform structured triangulation of (0,1)^2 with ``n_per_side`` nodes per axis."""
    n = int(n_per_side)
    if n < 3:
        raise ValueError(f"n_per_side must be >= 3, got {n_per_side}")
    s = np.linspace(0.0, 1.0, n)
    X, Y = np.meshgrid(s, s)  # node (i, j) -> index j*n + i
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1))
    i, j = i.ravel(), j.ravel()
    v00, v10 = j * n + i, j * n + i + 1
    v01, v11 = (j + 1) * n + i, (j + 1) * n + i + 1
    tris = np.concatenate([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])
    ii, jj = np.meshgrid(np.arange(1, n - 1), np.arange(1, n - 1))
    interior = (jj * n + ii).ravel()
    return Mesh(n, nodes, tris, interior)


# --------------------------------------------------------------------------
# coefficients
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PhysicalParams:
    """Diffusion ``nu``, reaction ``a(t, x)`` and velocity ``b(x)`` as sympy strings.

    Strings may use ``t``, ``x1``, ``x2`` and the usual elementary functions.
    ``advection="convective"`` discretises ``b . grad y``; ``"conservative"``
    discretises ``div(b y)``, i.e. adds ``div b`` to the reaction.
    """

    nu: float = 0.1
    reaction: str = "-2 - 0.8*Abs(sin(t))"
    velocity: tuple[str, str] = ("-0.01*(x1 + x2)", "0.2*x1*x2")
    theta_period: float = 2 * np.pi
    advection: str = "convective"

    def __post_init__(self):
        if self.advection not in ("convective", "conservative"):
            raise ValueError(f"unknown advection form {self.advection!r}")


def _lambdify_x(expr) -> Callable[[np.ndarray], np.ndarray]:
    f = sympy.lambdify((X1_SYM, X2_SYM), expr, modules="numpy")

    def ev(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(f(x[..., 0], x[..., 1]), dtype=float), x.shape[:-1]).copy()

    return ev


def _lambdify_t(expr) -> Callable:
    f = sympy.lambdify(T_SYM, expr, modules="numpy")

    def ev(t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(f(t), dtype=float), t.shape) * 1.0

    return ev


def split_reaction(reaction: str) -> tuple[object, list[tuple[object, object]]]:
    """Split ``a(t,x)`` into ``a0(x) + sum_q a_q(x) theta_q(t)``.

    Returns the static sympy part and a list of ``(x_part, t_part)`` pairs.
    """
    expr = sympy.expand(sympy.sympify(reaction, locals={"t": T_SYM, "x1": X1_SYM, "x2": X2_SYM}))
    static = sympy.Integer(0)
    dynamic: dict = {}
    for term in sympy.Add.make_args(expr):
        if not term.has(T_SYM):
            static += term
            continue
        x_part, t_part = term.as_independent(T_SYM, as_Add=False)
        if t_part.has(X1_SYM) or t_part.has(X2_SYM):
            raise NonSeparableError(
                f"reaction term {term} couples t and x; only sums of f(x)*g(t) are supported")
        dynamic[t_part] = dynamic.get(t_part, sympy.Integer(0)) + x_part
    return static, [(xp, tp) for tp, xp in dynamic.items()]


# --------------------------------------------------------------------------
# assembly helpers
# --------------------------------------------------------------------------

def _bary_gradients(mesh: Mesh) -> np.ndarray:
    p = mesh.nodes[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    two_a = 2 * mesh.areas
    g = np.empty((len(p), 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        g[:, i, 0] = (y[:, j] - y[:, k]) / two_a
        g[:, i, 1] = (x[:, k] - x[:, j]) / two_a
    return g


def _quad_points(mesh: Mesh, bary: np.ndarray = QUAD_BARY) -> np.ndarray:
    p = mesh.nodes[mesh.triangles]  # (nt, 3, 2)
    return np.einsum("qi,tid->tqd", bary, p)


def _scatter(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _restrict(mesh: Mesh, A: sp.spmatrix) -> sp.csr_matrix:
    idx = mesh.interior_dofs
    return A.tocsr()[idx][:, idx].tocsr()


def assemble_stiffness(mesh: Mesh, interior_only: bool = True) -> sp.csr_matrix:
    g = _bary_gradients(mesh)
    local = mesh.areas[:, None, None] * np.einsum("tid,tjd->tij", g, g)
    A = _scatter(mesh, local)
    return _restrict(mesh, A) if interior_only else A


def assemble_mass(mesh: Mesh, coeff: Callable | None = None, interior_only: bool = True) -> sp.csr_matrix:
    """Weighted mass matrix ``int c(x) phi_i phi_j``; exact for c of degree <= 3."""
    if coeff is None:
        local = mesh.areas[:, None, None] / 12.0 * (np.ones((3, 3)) + np.eye(3))
    else:
        c = coeff(_quad_points(mesh))  # (nt, nq)
        local = mesh.areas[:, None, None] * np.einsum("q,tq,qi,qj->tij", QUAD_W, c, QUAD_BARY, QUAD_BARY)
    A = _scatter(mesh, local)
    return _restrict(mesh, A) if interior_only else A


def assemble_convection(mesh: Mesh, velocity: Callable, interior_only: bool = True) -> sp.csr_matrix:
    """``C_ij = int (b . grad phi_j) phi_i``."""
    g = _bary_gradients(mesh)
    b = velocity(_quad_points(mesh))  # (nt, nq, 2)
    bg = np.einsum("tqd,tjd->tqj", b, g)
    local = mesh.areas[:, None, None] * np.einsum("q,qi,tqj->tij", QUAD_W, QUAD_BARY, bg)
    A = _scatter(mesh, local)
    return _restrict(mesh, A) if interior_only else A


# --------------------------------------------------------------------------
# actuators
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    @classmethod
    def from_center(cls, cx: float, cy: float, side: float) -> "Box":
        return cls(cx - side / 2, cx + side / 2, cy - side / 2, cy + side / 2)

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def overlaps(self, other: "Box", tol: float = 1e-12) -> bool:
        return (min(self.xmax, other.xmax) - max(self.xmin, other.xmin) > tol
                and min(self.ymax, other.ymax) - max(self.ymin, other.ymin) > tol)


@dataclass(frozen=True)
class ActuatorLayout:
    rectangles: tuple[Box, ...]

    def __post_init__(self):
        for i, r in enumerate(self.rectangles):
            if not (r.xmin < r.xmax and r.ymin < r.ymax):
                raise ValueError(f"actuator {i + 1} is degenerate: {r}")
            if r.xmin < -1e-12 or r.ymin < -1e-12 or r.xmax > 1 + 1e-12 or r.ymax > 1 + 1e-12:
                raise ValueError(f"actuator {i + 1} leaves the unit square: {r}")
            for j in range(i):
                if r.overlaps(self.rectangles[j]):
                    raise ValueError(f"actuators {j + 1} and {i + 1} overlap")

    @property
    def m(self) -> int:
        return len(self.rectangles)


def default_layout(area: float = 0.0106, corner: tuple[float, float] = (0.74, 0.75)) -> ActuatorLayout:
    """Thirteen square actuators in an L-shape.

    ``R1..R6`` form a vertical column (bottom to top) below the corner box
    ``R7``; ``R7..R13`` run from the corner leftwards. Boxes are placed
    edge-to-edge with side ``sqrt(area)``.
    """
    s = float(np.sqrt(area))
    cx, cy = corner
    boxes = [Box.from_center(cx, cy - (7 - i) * s, s) for i in range(1, 7)]
    boxes += [Box.from_center(cx - (i - 7) * s, cy, s) for i in range(7, 14)]
    return ActuatorLayout(tuple(boxes))


def _clip_polygon(poly: list, box: Box) -> list:
    """Sutherland-Hodgman clipping of a convex polygon against an axis-aligned box."""
    def clip(pts, inside, intersect):
        out = []
        for k in range(len(pts)):
            cur, prev = pts[k], pts[k - 1]
            if inside(cur):
                if not inside(prev):
                    out.append(intersect(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(intersect(prev, cur))
        return out

    def at_x(x0):
        return lambda p, q: (x0, p[1] + (q[1] - p[1]) * (x0 - p[0]) / (q[0] - p[0]))

    def at_y(y0):
        return lambda p, q: (p[0] + (q[0] - p[0]) * (y0 - p[1]) / (q[1] - p[1]), y0)

    for inside, inter in (
        (lambda p: p[0] >= box.xmin, at_x(box.xmin)),
        (lambda p: p[0] <= box.xmax, at_x(box.xmax)),
        (lambda p: p[1] >= box.ymin, at_y(box.ymin)),
        (lambda p: p[1] <= box.ymax, at_y(box.ymax)),
    ):
        poly = clip(poly, inside, inter)
        if not poly:
            break
    return poly


def _polygon_area_centroid(poly: list) -> tuple[float, np.ndarray]:
    P = np.asarray(poly, dtype=float)
    x, y = P[:, 0], P[:, 1]
    xs, ys = np.roll(x, -1), np.roll(y, -1)
    cross = x * ys - xs * y
    a = 0.5 * cross.sum()
    if abs(a) < 1e-300:
        return 0.0, P.mean(axis=0)
    cx = ((x + xs) * cross).sum() / (6 * a)
    cy = ((y + ys) * cross).sum() / (6 * a)
    return a, np.array([cx, cy])


def _box_load_exact(mesh: Mesh, box: Box) -> np.ndarray:
    load = np.zeros(mesh.n_nodes)
    p = mesh.nodes[mesh.triangles]
    lo, hi = p.min(axis=1), p.max(axis=1)
    hit = np.nonzero((hi[:, 0] > box.xmin) & (lo[:, 0] < box.xmax)
                     & (hi[:, 1] > box.ymin) & (lo[:, 1] < box.ymax))[0]
    for t in hit:
        verts = p[t]
        poly = _clip_polygon([tuple(v) for v in verts], box)
        if len(poly) < 3:
            continue
        a, c = _polygon_area_centroid(poly)
        if a <= 0:
            continue
        # barycentric coordinates of the clipped centroid; P1 is linear on the element
        T = np.column_stack([verts[1] - verts[0], verts[2] - verts[0]])
        l12 = np.linalg.solve(T, c - verts[0])
        lam = np.array([1 - l12.sum(), l12[0], l12[1]])
        load[mesh.triangles[t]] += a * lam
    return load


def _box_load_subcell(mesh: Mesh, box: Box, levels: int = 4) -> np.ndarray:
    # levels x levels uniform split of every element, 7-point rule on each subcell
    sub = []
    for i in range(levels):
        for j in range(levels - i):
            a = np.array([i, j]) / levels
            sub.append([a, a + [1 / levels, 0], a + [0, 1 / levels]])
            if i + j < levels - 1:
                sub.append([a + [1 / levels, 0], a + [1 / levels, 1 / levels], a + [0, 1 / levels]])
    pts, wts = [], []
    for tri in sub:
        tri = np.asarray(tri)
        for b, w in zip(QUAD_BARY, QUAD_W):
            pts.append(b @ tri)
            wts.append(w / levels**2)
    ref = np.asarray(pts)  # (nq, 2) reference coords (xi, eta)
    bary = np.column_stack([1 - ref.sum(axis=1), ref])
    X = _quad_points(mesh, bary)
    ind = ((X[..., 0] >= box.xmin) & (X[..., 0] <= box.xmax)
           & (X[..., 1] >= box.ymin) & (X[..., 1] <= box.ymax)).astype(float)
    local = mesh.areas[:, None] * np.einsum("q,tq,qi->ti", np.asarray(wts), ind, bary)
    load = np.zeros(mesh.n_nodes)
    np.add.at(load, mesh.triangles, local)
    return load


def assemble_actuators(mesh: Mesh, layout: ActuatorLayout, method: str = "exact") -> np.ndarray:
    """Input matrix with columns ``int 1_{R_i} phi_j`` on interior DOFs."""
    if method == "exact":
        loads = [_box_load_exact(mesh, r) for r in layout.rectangles]
    elif method == "subcell":
        loads = [_box_load_subcell(mesh, r) for r in layout.rectangles]
    else:
        raise ValueError(f"unknown actuator integration method {method!r}")
    return np.column_stack(loads)[mesh.interior_dofs]


# --------------------------------------------------------------------------
# discretization
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Discretization:
    mesh: Mesh
    M: sp.csc_matrix
    K_V: sp.csc_matrix
    A_q: tuple[sp.csc_matrix, ...]
    theta_q: tuple[Callable, ...]
    B: np.ndarray
    eta_V: float
    eta_H: float
    params: PhysicalParams | None = None
    layout: ActuatorLayout | None = None
    labels: tuple[str, ...] = field(default=())

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def Q(self) -> int:
        return len(self.A_q)

    def thetas(self, t) -> np.ndarray:
        """Coefficient values, shape ``(Q,) + shape(t)``."""
        return np.stack([np.asarray(th(t), dtype=float) for th in self.theta_q])

    def A(self, t: float) -> sp.csc_matrix:
        th = self.thetas(t)
        out = self.A_q[0] * th[0]
        for c, Aq in zip(th[1:], self.A_q[1:]):
            out = out + c * Aq
        return out.tocsc()

    @cached_property
    def K_V_lu(self):
        return spla.splu(self.K_V.tocsc())

    @cached_property
    def K_V_chol(self) -> np.ndarray:
        """Dense lower Cholesky factor of the V-Gram matrix."""
        return sla.cholesky(self.K_V.toarray(), lower=True)

    @cached_property
    def B_dualnorm(self) -> float:
        return operator_norm_B(self)

    def h_norm(self, v: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(v)
        return np.sqrt(np.maximum(np.einsum("ki,ki->k", v, (self.M @ v.T).T), 0.0))

    def v_norm(self, v: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(v)
        return np.sqrt(np.maximum(np.einsum("ki,ki->k", v, (self.K_V @ v.T).T), 0.0))

    def export_matrix_market(self, directory: str | Path) -> list[Path]:
        """Write M, K_V, A_q and B as MatrixMarket files (debugging aid)."""
        import scipy.io

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        out = []
        for name, mat in [("M", self.M), ("K_V", self.K_V), ("B", self.B)] + [
                (f"A_{q}", Aq) for q, Aq in enumerate(self.A_q)]:
            path = d / f"{name}.mtx"
            scipy.io.mmwrite(str(path), mat)
            out.append(path)
        return out


def compute_eta_H(mesh: Mesh, static, dynamic, div_b, period: float, n_t: int = 1025) -> float:
    """``max(0, -inf_{t,x} (a(t,x) - div(b)(x)/2))`` over nodes and quadrature points."""
    X = np.concatenate([mesh.nodes, _quad_points(mesh).reshape(-1, 2)])
    base = _lambdify_x(static)(X) - 0.5 * _lambdify_x(div_b)(X)
    ts = np.linspace(0.0, period, n_t)
    worst = np.inf
    if not dynamic:
        worst = base.min()
    else:
        xs = np.stack([_lambdify_x(xp)(X) for xp, _ in dynamic])     # (D, nx)
        th = np.stack([_lambdify_t(tp)(ts) for _, tp in dynamic])    # (D, nt)
        for lo in range(0, X.shape[0], 4096):
            vals = base[lo:lo + 4096, None] + xs[:, lo:lo + 4096].T @ th
            worst = min(worst, vals.min())
    return max(0.0, -float(worst))


def assemble(mesh: Mesh, params: PhysicalParams | None = None, layout: ActuatorLayout | None = None,
             actuator_method: str = "exact") -> Discretization:
    params = params or PhysicalParams()
    layout = layout or default_layout()
    if params.nu <= 0:
        raise ValueError("diffusion nu must be positive")
    loc = {"t": T_SYM, "x1": X1_SYM, "x2": X2_SYM}
    bexpr = [sympy.sympify(s, locals=loc) for s in params.velocity]
    if any(e.has(T_SYM) for e in bexpr):
        raise NonSeparableError("time-dependent velocity fields are not supported")
    div_b = sympy.diff(bexpr[0], X1_SYM) + sympy.diff(bexpr[1], X2_SYM)
    reaction = params.reaction
    if params.advection == "conservative":
        reaction = f"({reaction}) + ({div_b})"
    static, dynamic = split_reaction(reaction)

    bfun = [_lambdify_x(e) for e in bexpr]
    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh)
    C = assemble_convection(mesh, lambda x: np.stack([f(x) for f in bfun], axis=-1))
    A0 = params.nu * K + assemble_mass(mesh, _lambdify_x(static)) + C
    A_q = [A0.tocsc()] + [assemble_mass(mesh, _lambdify_x(xp)).tocsc() for xp, _ in dynamic]
    theta_q = [lambda t: np.ones_like(np.asarray(t, dtype=float))] + [_lambdify_t(tp) for _, tp in dynamic]
    labels = ("1",) + tuple(str(tp) for _, tp in dynamic)

    eta_H = compute_eta_H(mesh, static, dynamic, div_b, params.theta_period)
    B = assemble_actuators(mesh, layout, actuator_method)
    log.info("assembled n=%d m=%d Q=%d eta_V=%g eta_H=%g", M.shape[0], B.shape[1], len(A_q), params.nu, eta_H)
    return Discretization(mesh, M.tocsc(), K.tocsc(), tuple(A_q), tuple(theta_q), B,
                          float(params.nu), eta_H, params, layout, labels)


# --------------------------------------------------------------------------
# dual norms
# --------------------------------------------------------------------------

def dual_norm_Vprime(disc: Discretization, r: np.ndarray) -> np.ndarray | float:
    """``sqrt(r^T K_V^{-1} r)``; accepts a vector or a stack of row vectors."""
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("non-finite residual passed to dual_norm_Vprime")
    R = np.atleast_2d(r)
    z = disc.K_V_lu.solve(np.ascontiguousarray(R.T))
    out = np.sqrt(np.maximum(np.einsum("ik,ik->k", R.T, z), 0.0))
    return float(out[0]) if r.ndim == 1 else out


def operator_norm_B(disc: Discretization) -> float:
    """``||B||_{L(U,V')}`` as ``sqrt(lambda_max(B^T K_V^{-1} B))``."""
    Z = disc.K_V_lu.solve(np.asarray(disc.B, dtype=float))
    G = disc.B.T @ Z
    return float(np.sqrt(max(np.linalg.eigvalsh(0.5 * (G + G.T))[-1], 0.0)))
