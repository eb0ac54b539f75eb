"""Implicit Euler for the semilinear state equation, plus stability probes.

Step ``k`` (``k = 1..N``) solves

    (M/dt + K + M_a) y_k + M f(t_k, y_k) = M/dt y_{k-1} + M g_k + M E u_{k-1}

where ``u_{k-1}`` is the control slice acting on ``(t_{k-1}, t_k]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .discretize import DiscreteOperators, TimeGrid, Trajectory
from .model import ProblemSpec, SampleBox, check_assumptions

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
NEWTON_MAX_BACKTRACK = 20
BLOWUP = 1e12


class StepFailure(ArithmeticError):
    """Newton did not converge at ``step``; retrying with a smaller dt may help."""

    def __init__(self, step, message=None):
        super().__init__(message or f"Newton iteration failed at step {step}")
        self.step = step


class DivergenceError(ArithmeticError):
    def __init__(self, step):
        super().__init__(f"state exceeded {BLOWUP:g} at step {step}")
        self.step = step


class PreconditionError(ValueError):
    """A hypothesis of a stability probe does not hold."""


@dataclass(eq=False)
class StepData:
    """Problem data sampled on one space-time grid (shared by all solves on it)."""

    spec: ProblemSpec
    ops: DiscreteOperators
    tgrid: TimeGrid
    y0: np.ndarray
    g: np.ndarray
    yd: np.ndarray
    coefs: Optional[np.ndarray]
    diag0: np.ndarray
    base: sp.csc_matrix

    @property
    def polynomial_fast_path(self):
        return self.coefs is not None and self.ops.tridiagonal is not None


def prepare(spec: ProblemSpec, ops: DiscreteOperators, tgrid: TimeGrid) -> StepData:
    pts = ops.mesh.centers
    times = tgrid.times
    y0 = spec.y0.evaluate(pts, 0.0)
    if not np.all(np.isfinite(y0)):
        raise ValueError("initial state has non-finite values")
    g = np.stack([spec.g.evaluate(pts, t) for t in times])
    yd = np.stack([spec.yd.evaluate(pts, t) for t in times])
    coefs = None
    if spec.f.family == "polynomial":
        if spec.f.time_dependent:
            coefs = np.stack([spec.f.poly_coefficients(pts, t) for t in times])
        else:
            coefs = spec.f.poly_coefficients(pts, 0.0)[None]
        coefs = np.ascontiguousarray(coefs)
    dt = tgrid.dt
    diag0 = ops.stiffness.diagonal() + ops.mass / dt + ops.reaction
    base = (ops.stiffness + sp.diags(ops.mass / dt + ops.reaction)).tocsc()
    return StepData(spec, ops, tgrid, y0, g, yd, coefs, diag0, base)


@dataclass(eq=False)
class ForwardResult:
    y: Trajectory
    newton_iters_per_step: np.ndarray
    state_norm_history: np.ndarray
    linf_bound: float


def _control_load(data: StepData, u: np.ndarray):
    ops = data.ops
    load = ops.mass * data.g[1:]
    load[:, ops.omega] += ops.omega_weights * u
    return load


def _check_control(data, u):
    u = np.asarray(u.values if isinstance(u, Trajectory) else u, dtype=float)
    if u.shape != (data.tgrid.N, data.ops.n_omega):
        raise ValueError(f"control has shape {u.shape}, expected {(data.tgrid.N, data.ops.n_omega)}")
    return u


def _newton_generic(data, k, yprev, load_k, tol):
    """One implicit step for arbitrary f (sparse or tridiagonal linear algebra)."""
    ops, f = data.ops, data.spec.f
    t = data.tgrid.times[k]
    dt = data.tgrid.dt
    mass = ops.mass
    pts = ops.mesh.centers
    b = mass / dt * yprev + load_k
    scale = 1.0 + np.max(np.abs(b / mass))
    tri = ops.tridiagonal
    be = kernels.backend

    def resid(z):
        fz = f.value(pts, t, z)
        return data.base @ z + mass * fz - b

    z = yprev.copy()
    G = resid(z)
    res = np.max(np.abs(G / mass))
    it = 0
    while res > tol * scale:
        if it >= NEWTON_MAX_ITER:
            raise StepFailure(k)
        dfz = f.derivative(pts, t, z)
        if tri is not None:
            delta = be.tridiag_solve(tri[0], data.diag0 + mass * dfz, tri[2], -G)
        else:
            delta = spla.spsolve((data.base + sp.diags(mass * dfz)).tocsc(), -G)
        if not np.all(np.isfinite(delta)):
            raise StepFailure(k, f"singular Newton matrix at step {k}")
        alpha = 1.0
        for _ in range(NEWTON_MAX_BACKTRACK + 1):
            zn = z + alpha * delta
            with np.errstate(over="ignore", invalid="ignore"):
                Gn = resid(zn)
            resn = np.max(np.abs(Gn / mass))
            if resn < res:
                break
            alpha *= 0.5
        z, G, res = zn, Gn, resn
        it += 1
        if not np.isfinite(res) or np.max(np.abs(z)) > BLOWUP:
            raise DivergenceError(k)
    return z, it


def solve_forward(spec, ops, tgrid, u, *, data: StepData = None, backend=None) -> ForwardResult:
    """Integrate the state equation for the control ``u`` (shape ``(N, n_omega)``)."""
    data = data or prepare(spec, ops, tgrid)
    u = _check_control(data, u)
    load = _control_load(data, u)
    N = tgrid.N
    be = kernels.get(backend)
    if data.polynomial_fast_path:
        sub, _, sup = ops.tridiagonal
        Y, iters, status, step = be.forward_poly_sweep(
            data.y0, sub, data.diag0, sup, ops.mass, data.coefs, load, tgrid.dt,
            NEWTON_TOL, NEWTON_MAX_ITER, NEWTON_MAX_BACKTRACK, BLOWUP,
        )
        if status == kernels.NEWTON_FAIL or status == kernels.SINGULAR:
            raise StepFailure(step)
        if status == kernels.BLOWUP:
            raise DivergenceError(step)
    else:
        Y = np.zeros((N + 1, ops.n))
        Y[0] = data.y0
        iters = np.zeros(N, dtype=np.int64)
        for k in range(1, N + 1):
            Y[k], iters[k - 1] = _newton_generic(data, k, Y[k - 1], load[k - 1], NEWTON_TOL)
    y = Trajectory("state", Y, tgrid.dt)
    return ForwardResult(y, np.asarray(iters), ops.l2_norm(Y), float(np.max(np.abs(Y))))


def step_residuals(data: StepData, u, Y):
    """Relative residual of each implicit step for a given trajectory ``Y``."""
    u = _check_control(data, u)
    Y = np.asarray(Y.values if isinstance(Y, Trajectory) else Y)
    ops, f = data.ops, data.spec.f
    dt = data.tgrid.dt
    load = _control_load(data, u)
    out = np.zeros(data.tgrid.N)
    for k in range(1, data.tgrid.N + 1):
        b = ops.mass / dt * Y[k - 1] + load[k - 1]
        G = data.base @ Y[k] + ops.mass * f.value(ops.mesh.centers, data.tgrid.times[k], Y[k]) - b
        out[k - 1] = np.max(np.abs(G / ops.mass)) / (1.0 + np.max(np.abs(b / ops.mass)))
    return out


# --------------------------------------------------------------------------
# norms on the space-time grid (right-endpoint rectangle rule)


def l2_time(ops, dt, values):
    """``L2(Q_T)`` norm of node values ``t_1..t_N`` (rows), rectangle rule."""
    return math.sqrt(dt * float(np.sum(ops.l2_norm(values) ** 2)))


def control_l2(ops, dt, u):
    return math.sqrt(dt * float(np.sum(ops.omega_norm(u) ** 2)))


# --------------------------------------------------------------------------
# probes


@dataclass
class DecayReport:
    ratios: np.ndarray
    C_a: float
    tol: float
    passed: bool

    @property
    def max_ratio(self):
        return float(np.max(self.ratios)) if self.ratios.size else 0.0


def sign_stable_interval(f):
    """``(rho_minus, rho_plus)``: no sign change of f on ``(rho_minus, 0)`` and ``(0, rho_plus)``.

    Only for constant-coefficient polynomials; other families must declare it.
    """
    if f.family != "polynomial" or f.time_dependent:
        raise PreconditionError("sign-stable interval must be declared for this nonlinearity")
    c = np.array([0.0] + [co.data for co in f.params["coefficients"]])
    roots = np.roots(c[::-1])
    real = roots[np.abs(roots.imag) < 1e-12].real
    pos = real[real > 1e-14]
    neg = real[real < -1e-14]
    return (float(neg.max()) if neg.size else -math.inf, float(pos.min()) if pos.size else math.inf)


def uncontrolled_decay_probe(spec, ops, tgrid, rho=None, tol=0.05, data=None) -> DecayReport:
    """Compare ``||y(t)||`` for ``u = 0`` with ``exp(-C_a t) ||y0||``."""
    data = data or prepare(spec, ops, tgrid)
    if np.any(data.g != 0):
        raise PreconditionError("decay probe needs g = 0")
    if spec.f.time_dependent:
        raise PreconditionError("decay probe needs f independent of (x, t)")
    fp0 = spec.f.derivative(ops.mesh.centers[:1], 0.0, np.zeros(1))[0]
    if not fp0 > 0:
        raise PreconditionError(f"decay probe needs f'(0) > 0 (got {fp0:.3g})")
    lo, hi = rho if rho is not None else sign_stable_interval(spec.f)
    if np.any(data.y0 < lo) or np.any(data.y0 > hi):
        raise PreconditionError(f"initial state leaves the sign-stable interval [{lo}, {hi}]")
    res = solve_forward(spec, ops, tgrid, np.zeros((tgrid.N, ops.n_omega)), data=data)
    norms = res.state_norm_history
    n0 = norms[0]
    if n0 == 0.0:
        ratios = np.zeros_like(norms)
    else:
        ratios = norms / (np.exp(-ops.C_a_estimate * tgrid.times) * n0)
    return DecayReport(ratios, ops.C_a_estimate, tol, bool(np.all(ratios <= 1.0 + tol)))


@dataclass
class SmallnessReport:
    K_f: float
    lam: Optional[float]
    y0_norm: float
    satisfied: bool
    C_a: float
    C4: float
    C_M_f: float
    m_f: float


def smallness_threshold(spec, ops, C4=None, sample=None) -> SmallnessReport:
    """Threshold ``K_f = m_f C_a^4 / (C_{M_f} C_4)^2`` and the decay rate ``lambda``."""
    from .discretize import estimate_embedding_c4
    from .model import polynomial_m_f

    consts = spec.f.resolved_constants()
    m_f = consts.m_f
    if m_f is None and spec.f.family == "polynomial" and not spec.f.time_dependent:
        m_f = polynomial_m_f(spec.f)
        if m_f is not None and consts.M_f > 0:
            m_f = min(m_f, consts.M_f * (1 - 1e-12))
    if m_f is None or not m_f > 0:
        raise PreconditionError("smallness threshold needs m_f > 0")
    if sample is None:
        span = max(2 * consts.M_f, 1.0)
        sample = SampleBox.for_domain(spec.domain, (-span, span), t_max=1.0, n=16)
    C_M = check_assumptions(spec.f, sample).C_M_f
    C_a = ops.C_a_estimate
    C4 = estimate_embedding_c4(ops) if C4 is None else C4
    K_f = m_f * C_a**4 / (C_M * C4) ** 2
    y0n = float(ops.l2_norm(spec.y0.evaluate(ops.mesh.centers, 0.0)))
    if y0n >= K_f:
        return SmallnessReport(K_f, None, y0n, False, C_a, C4, C_M, m_f)
    K0 = 0.5 * (y0n + K_f)
    lam = 0.5 * (C_a**2 - C_M**2 * C4**2 * K0 / (m_f * C_a**2))
    return SmallnessReport(K_f, lam, y0n, True, C_a, C4, C_M, m_f)


@dataclass
class ProbeResult:
    lhs: float
    rhs: float
    passed: bool


def smallness_decay_probe(spec, ops, tgrid, report: SmallnessReport = None, data=None) -> ProbeResult:
    """Check ``||y||_{L2(Q_T)} <= (||y0|| + ||g||_{L2(Q_T)}) / sqrt(lambda)`` for ``u = 0``."""
    report = report or smallness_threshold(spec, ops)
    if not report.satisfied:
        return ProbeResult(math.nan, math.nan, False)
    data = data or prepare(spec, ops, tgrid)
    res = solve_forward(spec, ops, tgrid, np.zeros((tgrid.N, ops.n_omega)), data=data)
    dt = tgrid.dt
    lhs = l2_time(ops, dt, res.y.values[1:])
    rhs = (report.y0_norm + l2_time(ops, dt, data.g[1:])) / math.sqrt(report.lam)
    return ProbeResult(lhs, rhs, lhs <= rhs)


def nonlinearity_bound_probe(result: ForwardResult, spec, ops, tgrid, u) -> float:
    """Empirical ``||f(y)|| / (||u|| + ||g|| + ||y||)`` on ``Q_T``."""
    dt = tgrid.dt
    Y = result.y.values
    pts = ops.mesh.centers
    fv = np.stack([spec.f.value(pts, t, Y[k]) for k, t in enumerate(tgrid.times)])
    gv = np.stack([spec.g.evaluate(pts, t) for t in tgrid.times])
    u = np.asarray(u.values if isinstance(u, Trajectory) else u)
    num = l2_time(ops, dt, fv[1:])
    den = control_l2(ops, dt, u) + l2_time(ops, dt, gv[1:]) + l2_time(ops, dt, Y[1:])
    return 0.0 if num == 0.0 else num / den
