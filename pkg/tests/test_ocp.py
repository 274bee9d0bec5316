import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize

from rhcrom.dynamics import FullOrderModel, TimeGrid
from rhcrom.fem import assemble, build_mesh
from rhcrom.ocp import (CostSpec, SolverOptions, evaluate_cost, l1sq_penalty, prox_squared_l1, smooth_gradient,
                        solve_open_loop)

from conftest import sine

FOM5 = FullOrderModel(assemble(build_mesh(5)))
vecs = arrays(np.float64, st.integers(1, 13), elements=st.floats(-50, 50, allow_nan=False))
sigmas = st.floats(0, 1e3, allow_nan=False)


def prox_oracle(w, sigma):
    # split v = p - q with p, q >= 0 and hand the smooth problem to L-BFGS-B
    m = w.size

    def f(z):
        p, q = z[:m], z[m:]
        s = p.sum() + q.sum()
        r = p - q - w
        return 0.5 * r @ r + 0.5 * sigma * s * s, np.concatenate([r + sigma * s, -r + sigma * s])

    z0 = np.concatenate([np.maximum(w, 0), np.maximum(-w, 0)])
    res = minimize(f, z0, jac=True, method="L-BFGS-B", bounds=[(0, None)] * 2 * m,
                   options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 5000})
    return res.x[:m] - res.x[m:]


def prox_objective(v, w, sigma):
    return 0.5 * np.sum((v - w) ** 2) + 0.5 * sigma * np.sum(np.abs(v)) ** 2


# ----------------------------------------------------------------------------
# proximal map
# ----------------------------------------------------------------------------

@given(vecs, sigmas)
def test_prox_matches_oracle(w, sigma):
    v = prox_squared_l1(w, sigma)
    ref = prox_oracle(w, sigma)
    assert prox_objective(v, w, sigma) <= prox_objective(ref, w, sigma) + 1e-9 * (1 + np.sum(w * w))


@given(vecs, sigmas)
def test_prox_optimality_conditions(w, sigma):
    # w - v in sigma |v|_1 d|v|_1
    v = prox_squared_l1(w, sigma)
    s = sigma * np.sum(np.abs(v))
    g = w - v
    act = v != 0
    tol = 1e-9 * (1 + np.abs(w).max())
    assert np.allclose(g[act], s * np.sign(v[act]), atol=tol)
    assert np.all(np.abs(g[~act]) <= s + tol)
    assert np.all(np.sign(v[act]) == np.sign(w[act]))


@given(vecs, vecs, sigmas)
def test_prox_nonexpansive(w1, w2, sigma):
    m = min(w1.size, w2.size)
    w1, w2 = w1[:m], w2[:m]
    d = np.linalg.norm(prox_squared_l1(w1, sigma) - prox_squared_l1(w2, sigma))
    assert d <= np.linalg.norm(w1 - w2) * (1 + 1e-12) + 1e-12


@given(vecs)
def test_prox_sigma_zero_is_identity(w):
    assert np.array_equal(prox_squared_l1(w, 0.0), w)


def test_prox_closed_form_examples():
    # one active entry: v = w/(1+sigma)
    assert prox_squared_l1(np.array([2.0, 0.1]), 1.0) == pytest.approx([1.0, 0.0])
    # equal entries share the threshold sigma*S/(1+sigma*k)
    v = prox_squared_l1(np.array([3.0, -3.0, 3.0]), 0.5)
    assert v == pytest.approx([1.2, -1.2, 1.2])
    assert np.all(prox_squared_l1(np.zeros(4), 2.0) == 0)


def test_prox_rowwise_and_validation(rng):
    W = rng.standard_normal((7, 13))
    sig = rng.uniform(0, 3, 7)
    V = prox_squared_l1(W, sig)
    for i in range(7):
        assert np.allclose(V[i], prox_squared_l1(W[i], sig[i]), atol=1e-15)
    with pytest.raises(ValueError):
        prox_squared_l1(W[0], -1.0)


# ----------------------------------------------------------------------------
# cost and gradient
# ----------------------------------------------------------------------------

def test_cost_components(rng):
    grid = TimeGrid(0.1, 0, 4)
    u = rng.standard_normal((4, 13))
    tr = FOM5.solve_state(rng.standard_normal(FOM5.n), u, grid)
    c = CostSpec(0.3, 0.2)
    track = 0.05 * sum(y @ FOM5.M @ y for y in tr.states[1:])
    ctrl = 0.05 * 0.3 * np.sum(u * u)
    l1 = 0.05 * 0.2 * sum(np.sum(np.abs(uk)) ** 2 for uk in u)
    assert evaluate_cost(FOM5, tr, u, c) == pytest.approx(track + ctrl + l1, rel=1e-13)
    assert l1sq_penalty(u, 0.1, 0.2) == pytest.approx(l1, rel=1e-13)


def test_cost_spec_validation():
    with pytest.raises(ValueError):
        CostSpec(0.0, 1.0)
    with pytest.raises(ValueError):
        CostSpec(1.0, -1.0)


@given(st.integers(0, 10_000))
def test_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    grid = TimeGrid(0.05, int(rng.integers(0, 20)), 5)
    cost = CostSpec(1e-2, 0.0)
    y0 = rng.standard_normal(FOM5.n)
    u = rng.standard_normal((5, 13))
    d = rng.standard_normal((5, 13))
    tr = FOM5.solve_state(y0, u, grid)
    g = smooth_gradient(FOM5, FOM5.solve_adjoint(tr), u, cost)

    def J(v):
        return evaluate_cost(FOM5, FOM5.solve_state(y0, v, grid), v, cost)

    h = 1e-4
    fd = (J(u + h * d) - J(u - h * d)) / (2 * h)  # exact for a quadratic up to round-off
    assert np.vdot(g, d) == pytest.approx(fd, rel=1e-7, abs=1e-12)


# ----------------------------------------------------------------------------
# open-loop solver
# ----------------------------------------------------------------------------

def _quadratic_data(model, y0, grid, cost):
    """Dense Hessian and linear term of the smooth cost, assembled column by column."""
    m, N = model.m, grid.n_steps
    zero = np.zeros((N, m))
    g0 = smooth_gradient(model, model.solve_adjoint(model.solve_state(y0, zero, grid)), zero, cost).ravel()
    H = np.empty((N * m, N * m))
    for j in range(N * m):
        e = np.zeros(N * m)
        e[j] = 1
        E = e.reshape(N, m)
        tr = model.solve_state(np.zeros(model.n), E, grid)
        H[:, j] = smooth_gradient(model, model.solve_adjoint(tr), E, cost).ravel()
    return 0.5 * (H + H.T), g0


def test_no_sparsity_matches_linear_solve():
    grid = TimeGrid(0.05, 0, 6)
    cost = CostSpec(1e-3, 0.0)
    y0 = sine(FOM5.disc)
    H, g0 = _quadratic_data(FOM5, y0, grid, cost)
    u_ref = -np.linalg.solve(H, g0).reshape(6, 13)
    sol = solve_open_loop(FOM5, y0, grid, cost)
    assert sol.converged
    assert np.allclose(sol.u, u_ref, rtol=1e-7, atol=1e-9 * np.abs(u_ref).max())


def test_sparse_problem_matches_generic_solver():
    grid = TimeGrid(0.05, 3, 5)
    cost = CostSpec(1e-3, 1e-2)
    y0 = sine(FOM5.disc)
    H, g0 = _quadratic_data(FOM5, y0, grid, cost)
    c0 = evaluate_cost(FOM5, FOM5.solve_state(y0, np.zeros((5, 13)), grid), np.zeros((5, 13)), cost)
    n = H.shape[0]
    tb = grid.tau * cost.beta

    def f(z):
        p, q = z[:n], z[n:]
        u = p - q
        s = (p + q).reshape(5, 13).sum(axis=1)
        gs = np.repeat(tb * s, 13)
        gu = H @ u + g0
        return 0.5 * u @ H @ u + g0 @ u + c0 + 0.5 * tb * s @ s, np.concatenate([gu + gs, -gu + gs])

    ref = minimize(f, np.zeros(2 * n), jac=True, method="L-BFGS-B", bounds=[(0, None)] * 2 * n,
                   options={"ftol": 1e-16, "gtol": 1e-14, "maxiter": 20000, "maxcor": 50})
    sol = solve_open_loop(FOM5, y0, grid, cost)
    assert sol.converged
    assert sol.J <= ref.fun + 1e-10 * abs(ref.fun)
    assert sol.J == pytest.approx(ref.fun, rel=1e-8)
    u_ref = (ref.x[:n] - ref.x[n:]).reshape(5, 13)
    assert np.allclose(sol.u, u_ref, atol=1e-4 * np.abs(u_ref).max())


def test_solution_is_a_fixed_point_of_the_prox_step(fom7):
    grid = TimeGrid(0.025, 0, 16)
    cost = CostSpec(5e-4, 5e-5)
    sol = solve_open_loop(fom7, sine(fom7.disc), grid, cost)
    g = smooth_gradient(fom7, sol.adjoint, sol.u, cost)
    s = 1.0
    u_next = prox_squared_l1(sol.u - s * g, s * grid.tau * cost.beta)
    assert np.linalg.norm(u_next - sol.u) <= 1e-10 * max(1.0, np.linalg.norm(sol.u))
    assert sol.n_grad >= 2 and sol.n_state >= 1


def test_warm_start_gives_same_optimum(fom7, rng):
    grid = TimeGrid(0.025, 4, 12)
    cost = CostSpec(5e-4, 5e-5)
    y0 = sine(fom7.disc)
    cold = solve_open_loop(fom7, y0, grid, cost)
    warm = solve_open_loop(fom7, y0, grid, cost, u0=cold.u + 0.3 * rng.standard_normal(cold.u.shape))
    assert warm.J == pytest.approx(cold.J, rel=1e-10)
    assert np.allclose(warm.u, cold.u, atol=1e-6 * np.abs(cold.u).max())
    again = solve_open_loop(fom7, y0, grid, cost, u0=cold.u)
    assert again.iterations <= 2


@pytest.mark.parametrize("beta", [0.0, 1e-4])
def test_value_nondecreasing_in_horizon(fom7, beta):
    cost = CostSpec(1e-3, beta)
    y0 = sine(fom7.disc)
    vals = [solve_open_loop(fom7, y0, TimeGrid(0.025, 0, N), cost).J for N in (4, 8, 16, 24)]
    assert all(b >= a * (1 - 1e-10) for a, b in zip(vals, vals[1:]))


def test_larger_beta_gives_sparser_controls(fom7):
    grid = TimeGrid(0.025, 0, 12)
    y0 = sine(fom7.disc)
    nnz = [np.count_nonzero(solve_open_loop(fom7, y0, grid, CostSpec(1e-3, b)).u) for b in (0.0, 1e-1, 10.0)]
    assert nnz[0] >= nnz[1] >= nnz[2]
    assert nnz[2] < nnz[0]


def test_iteration_cap_returns_best_iterate(fom7):
    grid = TimeGrid(0.025, 0, 12)
    sol = solve_open_loop(fom7, sine(fom7.disc), grid, CostSpec(1e-3, 1e-4), SolverOptions(max_iter=3))
    assert not sol.converged
    assert sol.iterations == 3
    assert sol.residual == min(h[2] for h in sol.history)


# ----------------------------------------------------------------------------
# hand-sized examples
# ----------------------------------------------------------------------------

def test_prox_scalar_example_against_scan():
    assert np.allclose(prox_squared_l1(np.array([1.0, 0.0]), 1.0), [0.5, 0.0])
    v = np.linspace(-1, 2, 300_001)
    assert v[np.argmin(0.5 * (v - 1) ** 2 + 0.5 * v**2)] == pytest.approx(0.5, abs=1e-5)


@pytest.mark.parametrize("sigma", [0.1, 1.0, 10.0])
def test_prox_threshold_scan(sigma, rng):
    # brute force over the threshold t on a fine grid, refined by the piecewise-linear root
    w = rng.standard_normal(5)
    ts = np.linspace(0, np.abs(w).max(), 200_001)
    f = ts - sigma * np.maximum(np.abs(w)[None, :] - ts[:, None], 0).sum(axis=1)
    i = np.flatnonzero(f >= 0)[0]
    t = ts[i - 1] - f[i - 1] * (ts[i] - ts[i - 1]) / (f[i] - f[i - 1]) if i > 0 else 0.0
    ref = np.sign(w) * np.maximum(np.abs(w) - t, 0)
    assert np.allclose(prox_squared_l1(w, sigma), ref, atol=1e-10)


def test_one_dof_two_step_cost(disc3):
    # y1 = (M y0 + tau b.u0)/(M + tau a(t1)), y2 likewise; cost by hand
    fom = FullOrderModel(disc3)
    tau, y0 = 0.1, 1.5
    u = np.zeros((2, 13))
    u[0, 3], u[1, 5], u[1, 6] = 2.0, -1.0, 0.5
    b = disc3.B[0]
    M, A0, A1 = 0.125, disc3.A_q[0].toarray()[0, 0], disc3.A_q[1].toarray()[0, 0]
    y = [y0]
    for k in range(2):
        a = A0 + abs(np.sin((k + 1) * tau)) * A1
        y.append((M * y[-1] + tau * b @ u[k]) / (M + tau * a))
    lam, beta = 0.3, 0.7
    hand = sum(tau * (0.5 * M * y[k + 1] ** 2 + 0.5 * lam * u[k] @ u[k] + 0.5 * beta * np.abs(u[k]).sum() ** 2)
               for k in range(2))
    tr = fom.solve_state(np.array([y0]), u, TimeGrid(tau, 0, 2))
    assert evaluate_cost(fom, tr, u, CostSpec(lam, beta)) == pytest.approx(hand, rel=1e-14)


def test_gradient_fd_on_one_dof_mesh(disc3, rng):
    fom = FullOrderModel(disc3)
    grid = TimeGrid(0.1, 0, 4)
    cost = CostSpec(1e-3, 0.0)
    u = rng.standard_normal((4, 13))
    g = smooth_gradient(fom, fom.solve_adjoint(fom.solve_state(np.array([1.0]), u, grid)), u, cost)
    h = 1e-5
    for idx in [(0, 3), (2, 7), (3, 12)]:
        e = np.zeros_like(u)
        e[idx] = h
        Jp = evaluate_cost(fom, fom.solve_state(np.array([1.0]), u + e, grid), u + e, cost)
        Jm = evaluate_cost(fom, fom.solve_state(np.array([1.0]), u - e, grid), u - e, cost)
        assert g[idx] == pytest.approx((Jp - Jm) / (2 * h), rel=1e-6, abs=1e-12)


def test_zero_data_gives_zero_control(fom7):
    sol = solve_open_loop(fom7, np.zeros(fom7.n), TimeGrid(0.05, 0, 5), CostSpec(1e-3, 1e-4))
    assert sol.converged and sol.J == 0 and np.all(sol.u == 0)


def test_variational_inequality(fom7, rng):
    grid = TimeGrid(0.025, 0, 16)
    cost = CostSpec(5e-4, 5e-5)
    sol = solve_open_loop(fom7, sine(fom7.disc), grid, cost)
    g = smooth_gradient(fom7, sol.adjoint, sol.u, cost)
    g0 = l1sq_penalty(sol.u, grid.tau, cost.beta)
    for _ in range(100):
        v = sol.u + rng.standard_normal(sol.u.shape) * 10 ** rng.uniform(-3, 1)
        assert np.vdot(g, v - sol.u) + l1sq_penalty(v, grid.tau, cost.beta) - g0 >= -1e-9


def test_line_search_keeps_cost_below_reference(fom7):
    # non-monotone descent: every iterate is below the max of the last five
    sol = solve_open_loop(fom7, sine(fom7.disc), TimeGrid(0.025, 0, 16), CostSpec(5e-4, 5e-5))
    F = [h[1] for h in sol.history]
    for i in range(1, len(F)):
        assert F[i] <= max(F[max(0, i - 5):i]) + 1e-14
    assert F[-1] < F[0]
