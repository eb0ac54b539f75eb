"""Tensor-grid finite differences, time grids and trajectories.

Unknowns sit at cell centres of a uniform grid.  The homogeneous Neumann
condition is imposed with reflected ghost cells, so the discrete Laplacian
has zero row sums.  Controls live on the cells of omega, piecewise
constant in time on the intervals ``(t_k, t_{k+1}]``.

Matrices are stored in the "mass-weighted" convention: ``stiffness`` is
``M (-Laplace_h)``, which is symmetric; ``laplacian()`` returns ``-Laplace_h``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import ConfigError, ProblemSpec

__all__ = [
    "Mesh",
    "DiscreteOperators",
    "TimeGrid",
    "Trajectory",
    "InvalidCoefficientError",
    "EigenSolverError",
    "build_operators",
    "estimate_coercivity",
    "estimate_embedding_c4",
]


class InvalidCoefficientError(ConfigError):
    pass


class EigenSolverError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Mesh:
    """Uniform cell-centred grid on ``[0, L]`` or ``[0, Lx] x [0, Ly]``."""

    cells: tuple
    extent: tuple

    def __post_init__(self):
        cells = tuple(int(c) for c in self.cells)
        extent = tuple(float(e) for e in self.extent)
        if len(cells) != len(extent) or len(cells) not in (1, 2):
            raise ConfigError("mesh cells and domain extent must both be 1D or 2D", "mesh.cells")
        if any(c < 1 for c in cells):
            raise ConfigError("cells per axis must be positive", "mesh.cells")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "extent", extent)

    @classmethod
    def for_domain(cls, domain, cells):
        if isinstance(cells, int):
            cells = (cells,) * domain.dim
        return cls(tuple(cells), domain.extent)

    @property
    def dim(self):
        return len(self.cells)

    @property
    def h(self):
        return tuple(e / c for e, c in zip(self.extent, self.cells))

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    @property
    def size(self):
        return int(np.prod(self.cells))

    @cached_property
    def centers(self):
        axes = [(np.arange(c) + 0.5) * h for c, h in zip(self.cells, self.h)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def multi_index(self, flat):
        return np.unravel_index(np.asarray(flat), self.cells)


def _neumann_1d(n, h):
    """``-d^2/dx^2`` with reflected ghost cells (zero row sums)."""
    main = np.full(n, 2.0)
    if n == 1:
        return sp.csr_matrix((1, 1))
    main[0] = main[-1] = 1.0
    off = -np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h**2


@dataclass(frozen=True, eq=False)
class DiscreteOperators:
    """Assembled operators on one mesh.

    ``mass`` is the diagonal of the lumped mass matrix, ``reaction`` the
    diagonal of the ``a``-weighted mass, ``omega`` the flat cell indices of
    the control region, ``restriction`` selects them and ``injection`` is
    its transpose.
    """

    mesh: Mesh
    stiffness: sp.csr_matrix
    mass: np.ndarray
    reaction: np.ndarray
    omega: np.ndarray
    restriction: sp.csr_matrix
    C_a_estimate: float
    a_values: np.ndarray

    @property
    def injection(self):
        return self.restriction.T.tocsr()

    @property
    def n(self):
        return self.mesh.size

    @property
    def n_omega(self):
        return len(self.omega)

    @cached_property
    def omega_weights(self):
        return self.mass[self.omega]

    def laplacian(self):
        return sp.diags(1.0 / self.mass) @ self.stiffness

    @cached_property
    def tridiagonal(self):
        """``(sub, diag, sup)`` of the stiffness for 1D meshes, else ``None``."""
        if self.mesh.dim != 1:
            return None
        K = self.stiffness
        n = K.shape[0]
        return (
            np.concatenate([[0.0], K.diagonal(-1)]) if n > 1 else np.zeros(1),
            K.diagonal().copy(),
            np.concatenate([K.diagonal(1), [0.0]]) if n > 1 else np.zeros(1),
        )

    def l2_norm(self, v):
        """L2(Omega) norm of a nodal vector (or of each row of a 2D array)."""
        v = np.asarray(v)
        return np.sqrt(np.sum(self.mass * v * v, axis=-1))

    def omega_norm(self, v):
        """L2(omega) norm of an omega vector (or of each row)."""
        v = np.asarray(v)
        return np.sqrt(np.sum(self.omega_weights * v * v, axis=-1))

    def to_json(self):
        """Dense dump for small oracle cross-checks."""
        return {
            "cells": list(self.mesh.cells),
            "extent": list(self.mesh.extent),
            "stiffness": self.stiffness.toarray().tolist(),
            "mass": self.mass.tolist(),
            "reaction": self.reaction.tolist(),
            "omega": self.omega.tolist(),
            "C_a": self.C_a_estimate,
        }

    def dumps(self):
        return json.dumps(self.to_json())


def _omega_cells(spec: ProblemSpec, mesh: Mesh):
    om = spec.omega
    if om.cells is not None:
        cells = np.unique(np.asarray(om.cells, dtype=int))
        if cells.min() < 0 or cells.max() >= mesh.size:
            raise ConfigError("omega cell index out of range", "omega.cells")
        return cells
    if len(om.box) != mesh.dim:
        raise ConfigError("omega box dimension differs from the domain", "omega.box")
    inside = np.ones(mesh.size, dtype=bool)
    eps = 1e-12 * max(mesh.extent)
    for ax, (lo, hi) in enumerate(om.box):
        c = mesh.centers[:, ax]
        inside &= (c >= lo - eps) & (c <= hi + eps)
    cells = np.flatnonzero(inside)
    if cells.size == 0:
        raise ConfigError("omega box contains no cell centre on this mesh", "omega.box")
    return cells


def build_operators(spec: ProblemSpec, mesh: Mesh) -> DiscreteOperators:
    """Assemble stiffness, lumped mass, reaction mass and omega maps."""
    if tuple(mesh.extent) != tuple(spec.domain.extent):
        raise ConfigError("mesh does not cover the problem domain", "mesh")
    n = mesh.size
    if mesh.dim == 1:
        lap = _neumann_1d(mesh.cells[0], mesh.h[0])
    else:
        lx = _neumann_1d(mesh.cells[0], mesh.h[0])
        ly = _neumann_1d(mesh.cells[1], mesh.h[1])
        lap = sp.kron(lx, sp.identity(mesh.cells[1])) + sp.kron(sp.identity(mesh.cells[0]), ly)
    vol = mesh.cell_volume
    stiffness = (vol * lap).tocsr()
    mass = np.full(n, vol)
    a = spec.a.evaluate(mesh.centers, 0.0)
    if np.any(a < 0):
        i = int(np.argmin(a))
        raise InvalidCoefficientError(f"a < 0 at x={mesh.centers[i].tolist()} (a={a[i]:.3g})", "a")
    omega = _omega_cells(spec, mesh)
    R = sp.csr_matrix((np.ones(len(omega)), (np.arange(len(omega)), omega)), shape=(len(omega), n))
    ops = DiscreteOperators(mesh, stiffness, mass, mass * a, omega, R, 0.0, a)
    if not np.any(a > 0):
        warnings.warn("a vanishes identically; the coercivity constant is zero", RuntimeWarning, stacklevel=2)
        return ops
    object.__setattr__(ops, "C_a_estimate", estimate_coercivity(ops))
    return ops


def estimate_coercivity(ops: DiscreteOperators, tol=1e-8, max_iter=10_000, seed=0) -> float:
    """``C_a = sqrt(lambda_min)`` for ``(K + M_a) v = lambda (K + M) v``.

    Small grids use a dense symmetric-definite eigensolve.  Larger grids
    use shift-invert Lanczos (ARPACK) with a shift below the known lower
    bound ``min(1, min a)`` of the spectrum; plain inverse iteration
    stalls there because the smallest eigenvalues cluster near 1 when
    ``a > 1``.
    """
    K = ops.stiffness
    A = (K + sp.diags(ops.reaction)).tocsc()
    B = (K + sp.diags(ops.mass)).tocsc()
    if ops.n <= 400:
        try:
            lam = sla.eigh(A.toarray(), B.toarray(), eigvals_only=True, subset_by_index=[0, 0])[0]
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise EigenSolverError(f"dense eigensolve failed: {exc}") from None
    else:
        a_min = float(np.min(ops.reaction / ops.mass))
        sigma = min(1.0, a_min) - 1e-2
        v0 = np.random.default_rng(seed).standard_normal(ops.n)
        try:
            vals = spla.eigsh(A, k=1, M=B, sigma=sigma, which="LM", tol=tol, maxiter=max_iter,
                              v0=v0, return_eigenvectors=False)
        except spla.ArpackNoConvergence as exc:
            raise EigenSolverError(f"eigensolver did not converge in {max_iter} steps") from exc
        lam = float(np.min(vals))
    if not lam > 0:
        raise EigenSolverError("K + M_a is not positive definite")
    return math.sqrt(lam)


def estimate_embedding_c4(ops: DiscreteOperators, starts=32, seed=0, max_iter=500, tol=1e-12) -> float:
    """Lower estimate of ``max ||v||_{L4} / ||v||_{H1}`` on the grid.

    Projected ascent in the H1 metric on the unit sphere, started from the
    constant vector and ``starts`` random vectors; the best value found is
    returned.  Being a maximum over finitely many local searches, it
    bounds the discrete constant from below.
    """
    B = (ops.stiffness + sp.diags(ops.mass)).tocsc()
    solve = spla.factorized(B)
    m = ops.mass
    rng = np.random.default_rng(seed)

    def ratio(v):
        return (np.sum(m * v**4)) ** 0.25 / math.sqrt(v @ (B @ v))

    candidates = [np.ones(ops.n)] + [rng.standard_normal(ops.n) for _ in range(starts)]
    best = 0.0
    for v in candidates:
        v = v / math.sqrt(v @ (B @ v))
        prev = ratio(v)
        for _ in range(max_iter):
            w = solve(m * v**3)
            w /= math.sqrt(w @ (B @ w))
            cur = ratio(w)
            v = w
            if abs(cur - prev) <= tol * max(cur, 1.0):
                break
            prev = cur
        best = max(best, ratio(v))
    return best


@dataclass(frozen=True)
class TimeGrid:
    """``N`` uniform steps on ``[0, T]``."""

    T: float
    N: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigError("horizon T must be positive", "T")
        if int(self.N) < 1:
            raise ConfigError("number of steps must be positive", "N")
        object.__setattr__(self, "N", int(self.N))

    @classmethod
    def from_dt(cls, T, dt):
        N = int(round(T / dt))
        if N < 1 or abs(N * dt - T) > 1e-9 * max(T, 1.0):
            raise ConfigError(f"horizon {T} is not a multiple of dt={dt}", "dt")
        return cls(N * dt, N)

    @property
    def dt(self):
        return self.T / self.N

    @property
    def times(self):
        return np.arange(self.N + 1) * self.dt


_ROLES = ("state", "adjoint", "control")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-indexed vectors: nodes ``t_0..t_N`` for state/adjoint, ``N`` slices for controls."""

    role: str
    values: np.ndarray
    dt: float

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"role must be one of {_ROLES}")
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2:
            raise ValueError("trajectory values must be a 2D array (time, space)")
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"{self.role} trajectory has non-finite entries")
        object.__setattr__(self, "values", vals)

    @property
    def steps(self):
        return self.values.shape[0] - (0 if self.role == "control" else 1)

    @property
    def times(self):
        """Node times, or the right end of each control interval."""
        if self.role == "control":
            return (np.arange(self.values.shape[0]) + 1) * self.dt
        return np.arange(self.values.shape[0]) * self.dt

    def __len__(self):
        return self.values.shape[0]

    def extend_zero(self, steps):
        """Extend (zero padding) or restrict to ``steps`` intervals."""
        rows = steps if self.role == "control" else steps + 1
        out = np.zeros((rows, self.values.shape[1]))
        k = min(rows, self.values.shape[0])
        out[:k] = self.values[:k]
        return Trajectory(self.role, out, self.dt)
