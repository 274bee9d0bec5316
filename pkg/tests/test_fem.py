import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, strategies as st

from rhcrom.fem import (ActuatorLayout, Box, NonSeparableError, PhysicalParams, assemble, assemble_actuators,
                        assemble_mass, build_mesh, default_layout, dual_norm_Vprime, operator_norm_B,
                        split_reaction)


# ----------------------------------------------------------------------------
# mesh
# ----------------------------------------------------------------------------

def test_mesh_61_has_3721_nodes():
    m = build_mesh(61)
    assert m.n_nodes == 3721
    assert m.n_dofs == 59**2


def test_smallest_mesh():
    m = build_mesh(3)
    assert m.n_nodes == 9 and m.n_dofs == 1


@pytest.mark.parametrize("n", [3, 5, 8])
def test_areas_partition_unit_square(n):
    m = build_mesh(n)
    assert np.all(m.areas > 0)
    assert abs(m.areas.sum() - 1.0) < 1e-14


def test_reject_tiny_mesh():
    with pytest.raises(ValueError):
        build_mesh(2)


def test_boundary_nodes_excluded():
    m = build_mesh(6)
    X = m.nodes[m.interior_dofs]
    assert np.all((X > 0) & (X < 1))


# ----------------------------------------------------------------------------
# matrices
# ----------------------------------------------------------------------------

def test_symmetry(disc7):
    for X in (disc7.M, disc7.K_V):
        assert abs(X - X.T).max() <= 1e-14
    assert np.all(np.linalg.eigvalsh(disc7.M.toarray()) > 0)
    assert np.all(np.linalg.eigvalsh(disc7.K_V.toarray()) > 0)


def test_mass_partition_of_unity_without_elimination():
    m = build_mesh(7)
    M = assemble_mass(m, interior_only=False)
    row = np.asarray(M.sum(axis=1)).ravel()
    lumped = np.zeros(m.n_nodes)
    for tri, a in zip(m.triangles, m.areas):
        lumped[tri] += a / 3
    assert np.allclose(row, lumped, atol=1e-15)
    assert abs(M.sum() - 1.0) < 1e-12


def test_pure_diffusion_is_scaled_stiffness():
    d = assemble(build_mesh(6), PhysicalParams(nu=0.3, reaction="0", velocity=("0", "0")))
    assert abs(d.A(0.7) - 0.3 * d.K_V).max() < 1e-15
    assert d.eta_H == 0.0
    assert d.eta_V == 0.3


def test_affine_split_reproduces_operator(disc7):
    # build A(t) directly with the coefficient evaluated at fixed t
    for t in (0.0, 1.0, np.pi / 2, 3.0):
        a_t = -2 - 0.8 * abs(np.sin(t))
        ref = assemble(build_mesh(7), PhysicalParams(reaction=repr(float(a_t))))
        assert abs(disc7.A(t) - ref.A(0.0)).max() < 1e-14


def test_conservative_form_adds_divergence():
    m = build_mesh(6)
    conv = assemble(m)
    cons = assemble(m, PhysicalParams(advection="conservative"))
    div = assemble_mass(m, lambda x: -0.01 + 0.2 * x[..., 0])
    assert abs(cons.A(1.0) - conv.A(1.0) - div).max() < 1e-14
    # conservative form: a + div b - div(b)/2 = a + div(b)/2, inf at |sin t| = 1, x1 = 0
    assert cons.eta_H == pytest.approx(2.8 + 0.005, abs=1e-12)


def test_eta_H_matches_closed_form(disc7):
    # -inf(a - div(b)/2) = 2 + 0.8 + (0.19)/2 at |sin t| = 1, x1 = 1
    assert disc7.eta_H == pytest.approx(2.895, abs=1e-12)


def test_coercivity_certificate(disc7, rng):
    K, M = disc7.K_V.toarray(), disc7.M.toarray()
    worst = np.inf
    for _ in range(1000):
        v = rng.standard_normal(disc7.n)
        t = rng.uniform(0, 2 * np.pi)
        Av = disc7.A(t) @ v
        worst = min(worst, v @ Av - disc7.eta_V * v @ K @ v + disc7.eta_H * v @ M @ v)
    assert worst >= -1e-10


@pytest.mark.parametrize("t", [0.0, np.pi / 2, 3.0])
def test_coercivity_at_listed_times(disc7, rng, t):
    A = disc7.A(t).toarray()
    for _ in range(100):
        v = rng.standard_normal(disc7.n)
        lhs = v @ A @ v + disc7.eta_H * v @ disc7.M @ v
        assert lhs >= disc7.eta_V * v @ disc7.K_V @ v - 1e-10


def test_free_dynamics_unstable():
    # dense generalised eigensolve; at t = 0 the 9x9-node mesh is still slightly
    # too stiff (+0.0124), the finer 17x17 mesh and t = pi/2 are unstable
    d9 = assemble(build_mesh(9))
    w = sla.eigvals(d9.A(np.pi / 2).toarray(), d9.M.toarray())
    assert np.min(w.real) == pytest.approx(-0.7876264, abs=1e-6)
    w0 = sla.eigvals(d9.A(0.0).toarray(), d9.M.toarray())
    assert np.min(w0.real) == pytest.approx(0.0123736, abs=1e-6)
    d17 = assemble(build_mesh(17))
    w17 = sla.eigvals(d17.A(0.0).toarray(), d17.M.toarray())
    assert np.min(w17.real) < 0


def test_split_reaction_rejects_non_separable():
    with pytest.raises(NonSeparableError):
        split_reaction("sin(t*x1)")
    with pytest.raises(NonSeparableError):
        assemble(build_mesh(4), PhysicalParams(velocity=("t*x1", "0")))


def test_split_reaction_example():
    static, dyn = split_reaction("-2 - 0.8*Abs(sin(t))")
    assert float(static) == -2.0
    assert len(dyn) == 1


# ----------------------------------------------------------------------------
# actuators
# ----------------------------------------------------------------------------

def test_default_layout_geometry():
    lay = default_layout()
    assert lay.m == 13
    side = np.sqrt(0.0106)
    for b in lay.rectangles:
        assert b.area == pytest.approx(0.0106, rel=1e-12)
    # R7 is the corner of the L, R1 the bottom of the column, R13 the left end of the row
    r = lay.rectangles
    assert np.allclose([(r[6].xmin + r[6].xmax) / 2, (r[6].ymin + r[6].ymax) / 2], [0.74, 0.75])
    assert r[0].ymin < r[5].ymin and r[12].xmin < r[7].xmin
    assert r[0].xmax - r[0].xmin == pytest.approx(side)


def test_actuator_columns_sum_to_area():
    d = assemble(build_mesh(61))
    assert np.allclose(d.B.sum(axis=0), 0.0106, atol=1e-12)


def test_full_box_gives_load_of_one():
    m = build_mesh(6)
    B = assemble_actuators(m, ActuatorLayout((Box(0, 1, 0, 1),)))
    ref = assemble_mass(m) @ np.ones(m.n_dofs)  # interior rows of M times 1 miss boundary contributions
    full = np.asarray(assemble_mass(m, interior_only=False).sum(axis=1)).ravel()[m.interior_dofs]
    assert np.allclose(B[:, 0], full, atol=1e-15)
    assert np.all(B[:, 0] >= ref - 1e-15)


@given(st.floats(0.15, 0.6), st.floats(0.15, 0.6), st.floats(0.01, 0.25), st.floats(0.01, 0.25))
def test_random_box_column_sum_is_area(x0, y0, w, h):
    # away from the boundary cell layer the interior hats sum to one
    m = build_mesh(11)
    box = Box(x0, x0 + w, y0, y0 + h)
    col = assemble_actuators(m, ActuatorLayout((box,)))[:, 0]
    assert col.sum() == pytest.approx(w * h, abs=1e-10)


def test_subcell_quadrature_close_to_exact():
    m = build_mesh(21)
    lay = default_layout()
    ex = assemble_actuators(m, lay, "exact")
    sc = assemble_actuators(m, lay, "subcell")
    # the indicator is discontinuous inside elements, so subcell quadrature converges slowly
    assert np.max(np.abs(ex - sc)) < 3e-2 * np.max(np.abs(ex))
    assert np.allclose(sc.sum(axis=0), ex.sum(axis=0), rtol=4e-2)


def test_layout_validation():
    with pytest.raises(ValueError):
        ActuatorLayout((Box(0.1, 0.3, 0.1, 0.3), Box(0.2, 0.4, 0.2, 0.4)))
    with pytest.raises(ValueError):
        ActuatorLayout((Box(0.9, 1.1, 0.1, 0.3),))


# ----------------------------------------------------------------------------
# dual norms
# ----------------------------------------------------------------------------

def test_riesz_identity(disc7, rng):
    v = rng.standard_normal(disc7.n)
    assert dual_norm_Vprime(disc7, disc7.K_V @ v) == pytest.approx(np.sqrt(v @ disc7.K_V @ v), rel=1e-13)
    assert dual_norm_Vprime(disc7, np.zeros(disc7.n)) == 0.0


@pytest.mark.parametrize("n", [3, 4, 5])
def test_dual_norm_dense_oracle(n, rng):
    d = assemble(build_mesh(n))
    Kinv = np.linalg.inv(d.K_V.toarray())
    for _ in range(10):
        r = rng.standard_normal(d.n)
        assert dual_norm_Vprime(d, r) == pytest.approx(np.sqrt(r @ Kinv @ r), rel=1e-12)


def test_B_norm_power_iteration_oracle(disc7):
    Kinv = np.linalg.inv(disc7.K_V.toarray())
    G = disc7.B.T @ Kinv @ disc7.B
    x = np.ones(G.shape[0])
    for _ in range(2000):
        x = G @ x
        x /= np.linalg.norm(x)
    assert operator_norm_B(disc7) == pytest.approx(np.sqrt(x @ G @ x), rel=1e-10)


def test_B_norm_full_scale_frozen():
    # frozen from the dense eigensolve, cross-checked by power iteration on small meshes
    d = assemble(build_mesh(61))
    assert d.B_dualnorm == pytest.approx(0.012256505336876361, rel=1e-10)


def test_B_norm_scaling_and_single_column(disc5, rng):
    v = rng.standard_normal(disc5.n)
    B = (disc5.K_V @ v)[:, None]

    class Stub:
        K_V_lu = disc5.K_V_lu

    Stub.B = B
    assert operator_norm_B(Stub) == pytest.approx(np.sqrt(v @ disc5.K_V @ v), rel=1e-12)
    Stub.B = 2 * disc5.B
    assert operator_norm_B(Stub) == pytest.approx(2 * operator_norm_B(disc5), rel=1e-14)


def test_matrix_market_export(tmp_path, disc3):
    files = disc3.export_matrix_market(tmp_path)
    assert files and all(f.exists() for f in files)
