import warnings

import numpy as np
import pytest
import scipy.linalg as sla

from conftest import make_ops, make_spec
from sparsectl.discretize import (
    InvalidCoefficientError,
    Mesh,
    TimeGrid,
    Trajectory,
    estimate_coercivity,
    estimate_embedding_c4,
)
from sparsectl.model import ConfigError, Field, Omega


def dense_ca(ops):
    """Independent oracle: eigenvalues of the non-symmetric B^-1 A."""
    A = ops.stiffness.toarray() + np.diag(ops.reaction)
    B = ops.stiffness.toarray() + np.diag(ops.mass)
    return float(np.sqrt(np.min(np.linalg.eigvals(np.linalg.solve(B, A)).real)))


def test_mesh_geometry():
    m = Mesh((4,), (1.0,))
    assert m.size == 4 and m.h == (0.25,)
    np.testing.assert_allclose(m.centers[:, 0], [0.125, 0.375, 0.625, 0.875])
    m2 = Mesh((3, 2), (1.5, 1.0))
    assert m2.size == 6 and m2.cell_volume == pytest.approx(0.25)
    # flat index i*ny + j
    np.testing.assert_allclose(m2.centers[1], [0.25, 0.75])


@pytest.mark.parametrize("cells,extent", [((7,), (1.0,)), ((5, 4), (1.0, 2.0))])
def test_stiffness_neumann_kernel_and_symmetry(cells, extent, rng):
    ops = make_ops(make_spec(extent=extent), cells)
    K = ops.stiffness
    np.testing.assert_allclose(K @ np.ones(ops.n), 0.0, atol=1e-12)
    v, w = rng.standard_normal((2, ops.n))
    assert abs(v @ (K @ w) - w @ (K @ v)) <= 1e-12 * max(1.0, abs(v @ (K @ w)))
    assert np.min(np.linalg.eigvalsh(K.toarray())) > -1e-10


def test_interior_stencil():
    ops = make_ops(make_spec(), (4,))
    L = ops.laplacian().toarray()
    h = 0.25
    np.testing.assert_allclose(L[1, 0:3], -np.array([1.0, -2.0, 1.0]) / h**2)
    np.testing.assert_allclose(L[2, 1:4], -np.array([1.0, -2.0, 1.0]) / h**2)


def test_a_equal_one_smallest_eigenvalue():
    ops = make_ops(make_spec(a=1.0), (16,))
    M = np.diag(ops.mass)
    ev = np.linalg.eigvals(np.linalg.solve(M, ops.stiffness.toarray() + np.diag(ops.reaction)))
    assert np.min(ev.real) == pytest.approx(1.0, abs=1e-10)


def test_coercivity_a_one_is_exactly_one():
    ops = make_ops(make_spec(a=1.0), (32,))
    assert ops.C_a_estimate == pytest.approx(1.0, abs=1e-12)


def test_coercivity_half_zero():
    ops = make_ops(make_spec(a=Field.grid([0.0] * 16 + [1.0] * 16, (1.0,))), (32,))
    assert 0.0 < ops.C_a_estimate < 1.0
    assert ops.C_a_estimate == pytest.approx(dense_ca(ops), rel=1e-8)


@pytest.mark.parametrize("a", [4.0, 0.01, "1 + x"])
def test_coercivity_matches_dense(a):
    ops = make_ops(make_spec(a=a), (32,))
    assert ops.C_a_estimate == pytest.approx(dense_ca(ops), rel=1e-8)


def test_coercivity_large_grid_uses_iterative_path():
    ops = make_ops(make_spec(extent=(1.0, 1.0), a=4.0), (24, 24))
    assert ops.n > 400
    assert ops.C_a_estimate == pytest.approx(dense_ca(ops), rel=1e-8)


def test_negative_a_rejected():
    with pytest.raises(InvalidCoefficientError):
        make_ops(make_spec(a="x - 0.5"), (8,))


def test_zero_a_warns():
    with pytest.warns(RuntimeWarning):
        ops = make_ops(make_spec(a=0.0), (8,))
    assert ops.C_a_estimate == 0.0


def test_restriction_injection():
    ops = make_ops(make_spec(omega=Omega(box=((0.25, 0.75),))), (8,))
    R, E = ops.restriction, ops.injection
    np.testing.assert_array_equal((R @ E).toarray(), np.eye(ops.n_omega))
    P = (E @ R).toarray()
    mask = np.zeros(ops.n)
    mask[ops.omega] = 1.0
    np.testing.assert_array_equal(P, np.diag(mask))
    np.testing.assert_array_equal(ops.omega, [2, 3, 4, 5])


def test_omega_cells_and_errors():
    ops = make_ops(make_spec(omega=Omega(cells=(0, 3))), (4,))
    np.testing.assert_array_equal(ops.omega, [0, 3])
    with pytest.raises(ConfigError):
        make_ops(make_spec(omega=Omega(cells=(9,))), (4,))
    with pytest.raises(ConfigError):
        make_ops(make_spec(omega=Omega(box=((0.0, 0.01),))), (4,))


def test_operator_dump():
    ops = make_ops(make_spec(), (4,))
    d = ops.to_json()
    np.testing.assert_allclose(np.array(d["stiffness"]), ops.stiffness.toarray())
    assert d["mass"] == [0.25] * 4


def test_c4_constant_candidate():
    ops = make_ops(make_spec(), (8,))
    assert estimate_embedding_c4(ops) >= 1.0 - 1e-12


def test_c4_matches_monte_carlo():
    ops = make_ops(make_spec(), (8,))
    est = estimate_embedding_c4(ops)
    B = ops.stiffness.toarray() + np.diag(ops.mass)
    m = ops.mass
    rng = np.random.default_rng(7)
    best = 0.0
    for sigma in (0.03, 0.1, 0.3, 1.0, 3.0):
        for _ in range(4):
            V = 1.0 + sigma * rng.standard_normal((50_000, ops.n))
            r = np.sum(m * V**4, axis=1) ** 0.25 / np.sqrt(np.einsum("ij,jk,ik->i", V, B, V))
            best = max(best, r.max())
    assert abs(est - best) <= 0.02 * best
    assert est >= best - 1e-12  # ascent never does worse than random search


def test_c4_refinement_nondecreasing():
    vals = [estimate_embedding_c4(make_ops(make_spec(), (n,))) for n in (8, 16, 32, 64)]
    assert all(b >= a - 1e-3 for a, b in zip(vals, vals[1:]))


def test_time_grid():
    tg = TimeGrid.from_dt(4.0, 0.05)
    assert tg.N == 80 and tg.dt == pytest.approx(0.05)
    assert tg.times[-1] == pytest.approx(4.0)
    with pytest.raises(ConfigError):
        TimeGrid.from_dt(1.0, 0.3)
    with pytest.raises(ConfigError):
        TimeGrid(0.0, 4)


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory("state", np.array([[np.nan]]), 0.1)
    with pytest.raises(ValueError):
        Trajectory("velocity", np.zeros((2, 2)), 0.1)
    u = Trajectory("control", np.ones((3, 2)), 0.5)
    np.testing.assert_allclose(u.times, [0.5, 1.0, 1.5])
    ext = u.extend_zero(5)
    assert ext.values.shape == (5, 2) and np.all(ext.values[3:] == 0) and np.all(ext.values[:3] == 1)
    y = Trajectory("state", np.ones((4, 2)), 0.5)
    assert y.extend_zero(5).values.shape == (6, 2)
    assert y.steps == 3 and u.steps == 3
