"""Discrete adjoint of the implicit Euler scheme.

The adjoint is the exact transpose of the linearized forward steps, so the
reduced gradient agrees with finite differences of the discrete cost up to
the Newton tolerance.  Node ``j < N`` of the adjoint trajectory pairs with
the control slice on ``(t_j, t_{j+1}]``:

    (M/dt + K + M_a + M f'(y_{j+1})) phi_j = M/dt phi_{j+1} + M r_{j+1},   phi_N = 0,

with ``r = y - y_d`` or, in anchor mode, ``r = 2 y - y_d - anchor``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .discretize import DiscreteOperators, Trajectory
from .forward import StepData, prepare


class IndefiniteStepWarning(RuntimeWarning):
    pass


@dataclass(eq=False)
class AdjointResult:
    phi: Trajectory
    phi_norm_history: np.ndarray
    energy_identity_residual: float
    indefinite_steps: int = 0


def tracking_residual(data: StepData, y, anchor=None):
    """``r_k`` for ``k = 1..N`` as an ``(N, n)`` array."""
    Y = np.asarray(y.values if isinstance(y, Trajectory) else y)
    if anchor is None:
        return Y[1:] - data.yd[1:]
    A = np.asarray(anchor.values if isinstance(anchor, Trajectory) else anchor)
    if A.shape != Y.shape:
        raise ValueError(f"anchor has shape {A.shape}, expected {Y.shape}")
    return 2.0 * Y[1:] - data.yd[1:] - A[1:]


def _dfdy(data: StepData, Y):
    f, pts = data.spec.f, data.ops.mesh.centers
    times = data.tgrid.times
    if f.family == "polynomial" and data.coefs is not None and data.coefs.shape[0] == 1:
        c = data.coefs[0]
        Z = Y[1:]
        d = np.zeros_like(Z)
        for j in range(c.shape[0] - 1, 0, -1):
            d = d * Z + j * c[j]
        return d
    return np.stack([f.derivative(pts, times[k], Y[k]) for k in range(1, len(times))])


def solve_adjoint(spec, ops: DiscreteOperators, tgrid, y, anchor=None, *, data: StepData = None, backend=None):
    """Backward sweep for the adjoint state; ``phi_N = 0``."""
    data = data or prepare(spec, ops, tgrid)
    Y = np.asarray(y.values if isinstance(y, Trajectory) else y)
    r = tracking_residual(data, Y, anchor)
    rhs = ops.mass * r
    dfdy = np.ascontiguousarray(_dfdy(data, Y))
    dt = tgrid.dt
    N = tgrid.N
    if ops.tridiagonal is not None:
        sub = ops.tridiagonal[0]
        Phi, bad = kernels.get(backend).adjoint_sweep(sub, data.diag0, ops.mass, dfdy, np.ascontiguousarray(rhs), dt)
    else:
        Phi = np.zeros((N + 1, ops.n))
        bad = 0
        for k in range(N - 1, -1, -1):
            dk = ops.mass / dt + ops.reaction + ops.mass * dfdy[k]
            if np.any(dk <= 0):
                bad += 1  # Gershgorin test for positive definiteness failed
            A = (data.base + sp.diags(ops.mass * dfdy[k])).tocsc()
            Phi[k] = spla.spsolve(A, ops.mass / dt * Phi[k + 1] + rhs[k])
    if bad:
        warnings.warn(
            f"{bad} adjoint step matrices were not positive definite; solved with pivoting",
            IndefiniteStepWarning,
            stacklevel=2,
        )
    phi = Trajectory("adjoint", Phi, dt)
    res = _energy_residual(ops, dt, Phi, r, dfdy)
    return AdjointResult(phi, ops.l2_norm(Phi), res, int(bad))


def reduced_gradient(phi, ops: DiscreteOperators) -> Trajectory:
    """Gradient of the smooth cost in the ``L2(0,T; L2(omega))`` metric."""
    P = np.asarray(phi.values if isinstance(phi, Trajectory) else phi)
    return Trajectory("control", P[:-1, ops.omega], phi.dt if isinstance(phi, Trajectory) else 1.0)


def _energy_residual(ops, dt, Phi, r, dfdy):
    P = Phi[:-1]
    KP = (ops.stiffness @ P.T).T
    form = np.sum(P * KP, axis=1) + np.sum(ops.reaction * P * P, axis=1) + np.sum(ops.mass * dfdy * P * P, axis=1)
    lhs = 0.5 * float(ops.l2_norm(Phi[0]) ** 2) + dt * float(np.sum(form))
    rhs = dt * float(np.sum(ops.mass * r * P))
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1.0)


def energy_identity_probe(phi, y, spec, ops, tgrid, *, data: StepData = None) -> float:
    """Relative defect of the adjoint energy identity at ``t = 0``.

    Compares ``1/2 ||phi(0)||^2 + int (|grad phi|^2 + a phi^2 + f'(y) phi^2)``
    with ``int (y - y_d) phi``.  The implicit scheme dissipates
    ``1/2 sum ||phi_j - phi_{j+1}||^2``, so the defect is first order in dt.
    """
    data = data or prepare(spec, ops, tgrid)
    Y = np.asarray(y.values if isinstance(y, Trajectory) else y)
    Phi = np.asarray(phi.values if isinstance(phi, Trajectory) else phi)
    return _energy_residual(ops, tgrid.dt, Phi, tracking_residual(data, Y), _dfdy(data, Y))


def adjoint_step_residuals(data: StepData, y, phi, anchor=None):
    """Relative residual of each backward step for a stored adjoint trajectory."""
    Y = np.asarray(y.values if isinstance(y, Trajectory) else y)
    Phi = np.asarray(phi.values if isinstance(phi, Trajectory) else phi)
    ops = data.ops
    dt = data.tgrid.dt
    rhs = ops.mass * tracking_residual(data, Y, anchor)
    dfdy = _dfdy(data, Y)
    out = np.zeros(data.tgrid.N + 1)
    out[-1] = np.max(np.abs(Phi[-1]))
    for k in range(data.tgrid.N):
        b = ops.mass / dt * Phi[k + 1] + rhs[k]
        G = data.base @ Phi[k] + ops.mass * dfdy[k] * Phi[k] - b
        out[k] = np.max(np.abs(G / ops.mass)) / (1.0 + np.max(np.abs(b / ops.mass)))
    return out
