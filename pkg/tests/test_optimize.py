import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_ops, make_spec, problem_from
from sparsectl import kernels
from sparsectl.discretize import TimeGrid, Trajectory
from sparsectl.forward import solve_forward
from sparsectl.adjoint import solve_adjoint
from sparsectl.model import Ball, Box, Field, Nonlinearity, Omega
from sparsectl.optimize import (
    ProxCheckError,
    SolveOptions,
    extract_multipliers,
    project,
    prox_sparse_ball,
    prox_sparse_box,
    solve_pt,
    verify_kkt,
)

SCHLOEGL = Nonlinearity.schloegl(0.25, 1.0)


def wnorm(v, w):
    return float(np.sqrt(np.sum(w * v * v)))


# prox: oracle examples -------------------------------------------------------


def scalar_oracle(r, c, cap, step=1e-6):
    s = np.arange(0.0, min(cap, r + 1.0) + step, step)
    return s[np.argmin(0.5 * (s - r) ** 2 + c * s)]


def test_ball_zero_rule():
    v = np.array([0.5])
    assert np.all(prox_sparse_ball(v, 1.0, 2.0, np.ones(1)) == 0.0)


def test_ball_capped_magnitude():
    w = np.array([0.5, 0.25, 0.25])
    v = np.array([2.0, -3.0, 1.0])
    v *= 3.0 / wnorm(v, w)
    u = prox_sparse_ball(v, 1.0, 1.5, w)
    assert wnorm(u, w) == pytest.approx(scalar_oracle(3.0, 1.0, 1.5), abs=1e-5)
    np.testing.assert_allclose(u / wnorm(u, w), v / 3.0, rtol=1e-14)


def test_ball_uncapped_is_group_soft_threshold():
    w = np.ones(2)
    v = np.array([3.0, 0.0])
    u = prox_sparse_ball(v, 1.0, np.inf, w)
    assert wnorm(u, w) == pytest.approx(scalar_oracle(3.0, 1.0, np.inf), abs=1e-5)


def test_box_scalar():
    grid = np.arange(-2.0, 2.0 + 1e-5, 1e-4)
    best = grid[np.argmin(0.5 * (grid - 5.0) ** 2 + np.abs(grid))]
    u = prox_sparse_box(np.array([5.0]), 1.0, -2.0, 2.0, np.ones(1))
    assert u[0] == pytest.approx(best, abs=2e-3)
    assert u[0] == 2.0


def test_box_two_cells_brute_force():
    v = np.array([3.0, -0.5])
    g = np.arange(-2.0, 2.0 + 5e-4, 1e-3)
    best, arg = np.inf, None
    for i in range(0, len(g), 500):
        A, B = np.meshgrid(g[i:i + 500], g, indexing="ij")
        obj = 0.5 * ((A - v[0]) ** 2 + (B - v[1]) ** 2) + np.sqrt(A * A + B * B)
        k = np.argmin(obj)
        if obj.flat[k] < best:
            best, arg = obj.flat[k], (A.flat[k], B.flat[k])
    u = prox_sparse_box(v, 1.0, -2.0, 2.0, np.ones(2), check=True)
    np.testing.assert_allclose(u, arg, atol=2e-3)


def test_box_zero_rule():
    assert np.all(prox_sparse_box(np.array([0.3, -0.4]), 0.5, -1.0, 1.0, np.ones(2)) == 0.0)


def test_box_check_hook_detects_wrong_result(monkeypatch):
    real = kernels.backend.prox_box_batch

    def broken(*args):
        U, f = real(*args)
        return U * 0.9, f

    monkeypatch.setattr(kernels.backend, "prox_box_batch", broken)
    with pytest.raises(ProxCheckError):
        prox_sparse_box(np.array([3.0, -0.5]), 1.0, -2.0, 2.0, np.ones(2), check=True)


def test_box_dykstra_fallback(backend, rng):
    V = rng.standard_normal((20, 6))
    w = np.full(6, 0.2)
    th = np.full(20, 0.1)
    ref, f0 = backend.prox_box_batch(V, w, th, -0.3, 0.4, 1e-12, 500, 10_000)
    fb, f1 = backend.prox_box_batch(V, w, th, -0.3, 0.4, 1e-12, 1, 10_000)
    active = np.sqrt(np.sum(w * V * V, axis=1)) > th
    assert np.all(f0 == 0) and np.all(f1[~active] == 0)
    assert set(f1[active]) <= {0, 1} and np.sum(f1 == 1) >= active.sum() // 2
    np.testing.assert_allclose(fb, ref, atol=1e-8)


# prox: properties --------------------------------------------------------------

vecs = arrays(np.float64, 5, elements=st.floats(-10, 10, allow_nan=False))
W = np.array([0.1, 0.2, 0.3, 0.25, 0.15])


@settings(max_examples=200, deadline=None)
@given(v1=vecs, v2=vecs, c=st.floats(0, 3), gamma=st.floats(0.01, 5))
def test_ball_properties(v1, v2, c, gamma):
    p1, p2 = prox_sparse_ball(v1, c, gamma, W), prox_sparse_ball(v2, c, gamma, W)
    assert wnorm(p1, W) <= gamma + 1e-12
    assert wnorm(p1 - p2, W) <= wnorm(v1 - v2, W) * (1 + 1e-12) + 1e-14
    if wnorm(v1, W) <= c:
        assert np.all(p1 == 0.0)


@settings(max_examples=200, deadline=None)
@given(v1=vecs, v2=vecs, c=st.floats(0, 3), alpha=st.floats(-5, -0.01), beta=st.floats(0.01, 5))
def test_box_properties(v1, v2, c, alpha, beta):
    p1, p2 = prox_sparse_box(v1, c, alpha, beta, W), prox_sparse_box(v2, c, alpha, beta, W)
    assert np.all(p1 >= alpha) and np.all(p1 <= beta)
    assert wnorm(p1 - p2, W) <= wnorm(v1 - v2, W) * (1 + 1e-8) + 1e-10
    if wnorm(v1, W) <= c:
        assert np.all(p1 == 0.0)


def test_project():
    w = np.full(2, 0.5)
    U = np.array([[3.0, 4.0], [0.1, 0.0]])
    P = project(U, Ball(1.0), w)
    assert wnorm(P[0], w) == pytest.approx(1.0)
    np.testing.assert_array_equal(P[1], U[1])
    np.testing.assert_array_equal(project(U, Box(-1, 2), w), [[2.0, 2.0], [0.1, 0.0]])


# solver -----------------------------------------------------------------------


def test_solve_options_validation():
    with pytest.raises(ValueError):
        SolveOptions(step=-1.0)
    with pytest.raises(ValueError):
        SolveOptions(kkt_tol=0.0)


def test_uncontrolled_target_gives_zero_control():
    base = make_spec(f=SCHLOEGL, y0="0.2*cos(pi*x)", g="sin(pi*x)", g_support=0.5, a=0.5,
                     omega=Omega(box=((0.25, 0.75),)))
    ops = make_ops(base, (16,))
    tg = TimeGrid(2.0, 40)
    Y = solve_forward(base, ops, tg, np.zeros((tg.N, ops.n_omega))).y.values
    yd = Field.grid(Y, (1.0,), times=tg.times.tolist())
    spec = make_spec(f=SCHLOEGL, y0="0.2*cos(pi*x)", g="sin(pi*x)", g_support=0.5, a=0.5, yd=yd,
                     omega=Omega(box=((0.25, 0.75),)))
    sol = solve_pt(spec, ops, tg)
    assert sol.iterations <= 2
    assert np.all(sol.u.values == 0.0)


def test_large_kappa_gives_zero_control(schloegl):
    spec, ops, dt = schloegl
    tg = TimeGrid.from_dt(4.0, dt)
    y = solve_forward(spec, ops, tg, np.zeros((tg.N, ops.n_omega))).y
    phi = solve_adjoint(spec, ops, tg, y).phi
    threshold = float(np.max(ops.omega_norm(phi.values[:-1, ops.omega])))
    big, _ = problem_from("schloegl", kappa=1.01 * threshold)
    sol = solve_pt(big, ops, tg)
    assert np.all(sol.u.values == 0.0) and sol.converged
    rep = verify_kkt(sol.kkt, sol.u, big, ops)
    assert rep.passed
    assert all(not c["active"] and c["phi_below_kappa"] for c in sol.kkt.per_time_certificates)


@pytest.fixture(scope="module")
def ball_solution(schloegl):
    spec, ops, dt = schloegl
    tg = TimeGrid.from_dt(4.0, dt)
    return spec, ops, solve_pt(spec, ops, tg, opts=SolveOptions(kkt_tol=1e-9))


@pytest.fixture(scope="module")
def box_solution():
    spec, ops = problem_from("tracking_box")
    tg = TimeGrid.from_dt(4.0, 0.05)
    return spec, ops, solve_pt(spec, ops, tg, opts=SolveOptions(kkt_tol=1e-9))


@pytest.mark.parametrize("which", ["ball_solution", "box_solution"])
def test_solver_converges_monotonically(which, request):
    spec, ops, sol = request.getfixturevalue(which)
    assert sol.converged and sol.residual <= 1e-9
    J = np.array([r["J"] for r in sol.log])
    assert np.all(np.diff(J) <= 1e-12 * np.maximum(1.0, np.abs(J[:-1])))
    assert sol.J == pytest.approx(J[-1])
    lines = sol.log_csv().splitlines()
    assert lines[0] == "iter,J_T,residual,step" and len(lines) == len(sol.log) + 1


@pytest.mark.parametrize("which", ["ball_solution", "box_solution"])
def test_kkt_of_converged_solution(which, request):
    spec, ops, sol = request.getfixturevalue(which)
    rep = verify_kkt(sol.kkt, sol.u, spec, ops, n_probe=64)
    assert rep.passed, [c for c in rep.failed()]
    k = sol.kkt
    P = k.phi_omega.values
    np.testing.assert_allclose(P + k.kappa * k.lam.values + k.mu.values, 0.0, atol=1e-12 * max(1, np.abs(P).max()))
    ln = ops.omega_norm(k.lam.values)
    assert np.all(ln <= 1 + 1e-10)
    active = ops.omega_norm(sol.u.values) > k.eps_u
    assert active.any() and (~active).any()
    np.testing.assert_allclose(ln[active], 1.0, atol=1e-8)


def test_ball_boundary_slices(ball_solution):
    spec, ops, sol = ball_solution
    un = ops.omega_norm(sol.u.values)
    mu = sol.kkt.mu.values
    mn = ops.omega_norm(mu)
    at = (np.abs(un - spec.constraints.gamma) < 1e-10) & (mn > 1e-10)
    assert at.any()
    for j in np.flatnonzero(at):
        np.testing.assert_allclose(sol.u.values[j], spec.constraints.gamma * mu[j] / mn[j], atol=1e-8)


def test_extract_inactive_slice():
    spec = make_spec(kappa=0.2, omega=Omega(cells=(0, 1)))
    ops = make_ops(spec, (2,))
    w = ops.omega_weights
    phi = np.array([[0.06, 0.08], [0.3, -0.1]])
    phi[0] *= (0.1 / wnorm(phi[0], w))  # ||phi_0|| = kappa / 2
    u = np.array([[0.0, 0.0], [0.5, 0.2]])
    b = extract_multipliers(Trajectory("control", u, 0.1), Trajectory("control", phi, 0.1), spec, ops)
    np.testing.assert_allclose(b.lam.values[0], -phi[0] / 0.2)
    assert wnorm(b.lam.values[0], w) == pytest.approx(0.5)
    np.testing.assert_allclose(b.mu.values[0], 0.0, atol=1e-15)
    assert wnorm(b.lam.values[1], w) == pytest.approx(1.0, abs=1e-15)
    assert b.subgradient_violation == 0.0 and b.clipped_slices == []


def test_extract_clips_inconsistent_lambda():
    spec = make_spec(kappa=0.1, omega=Omega(cells=(0,)))
    ops = make_ops(spec, (2,))
    phi = np.array([[1.0]])
    b = extract_multipliers(Trajectory("control", np.zeros((1, 1)), 0.1), Trajectory("control", phi, 0.1), spec, ops)
    assert b.clipped_slices == [0] and b.subgradient_violation > 0
    assert wnorm(b.lam.values[0], ops.omega_weights) == pytest.approx(1.0)


@pytest.mark.parametrize("which", ["ball_solution", "box_solution"])
def test_corrupted_mu_names_the_slice(which, request):
    spec, ops, sol = request.getfixturevalue(which)
    k = sol.kkt
    mn = ops.omega_norm(k.mu.values)
    j = int(np.argmax(mn))
    assert mn[j] > 1e-6
    mu = k.mu.values.copy()
    mu[j] *= -1
    from dataclasses import replace
    bad = replace(k, mu=Trajectory("control", mu, k.mu.dt))
    rep = verify_kkt(bad, sol.u, spec, ops)
    assert not rep.passed
    for c in rep.failed():
        assert c.slices == [j], c


def test_fixed_step_and_infeasible_start(schloegl):
    spec, ops, dt = schloegl
    tg = TimeGrid.from_dt(2.0, dt)
    u0 = np.full((tg.N, ops.n_omega), 5.0)
    sol = solve_pt(spec, ops, tg, u0, SolveOptions(step=0.5, kkt_tol=1e-8))
    assert sol.converged
    assert np.all(ops.omega_norm(sol.u.values) <= spec.constraints.gamma + 1e-12)
