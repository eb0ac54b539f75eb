"""Accelerated proximal gradient for the finite-horizon problem and its KKT system.

The reduced cost is

    J_T(u) = 1/2 sum_k dt ||y_k - yd_k||^2 + kappa sum_j dt ||u_j||_{L2(omega)}

(plus ``1/2 sum_k dt ||y_k - anchor_k||^2`` in anchor mode).  All inner
products on controls are those of ``L2(0,T; L2(omega))``:
``<a, b> = dt sum_j sum_i w_i a_ji b_ji`` with the cell volumes ``w``.
In that metric the prox of ``tau kappa j_T`` acts slice by slice with
threshold ``tau kappa``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import kernels
from .adjoint import reduced_gradient, solve_adjoint
from .discretize import Trajectory
from .forward import DivergenceError, StepFailure, prepare, solve_forward
from .model import Ball, Box

PROX_TOL = 1e-12
PROX_MAX_ITER = 500
DYKSTRA_MAX_SWEEPS = 10_000


class SolverError(RuntimeError):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log or []


class ProxCheckError(AssertionError):
    pass


# --------------------------------------------------------------------------
# prox operators


def _as_thresh(thresh, S):
    return np.broadcast_to(np.asarray(thresh, dtype=float), (S,)).copy()


def prox_sparse_ball(v, tau_kappa, gamma, weights):
    """Prox of ``tau_kappa ||u||_w`` plus the indicator of ``||u||_w <= gamma``.

    Returns ``v / ||v||_w * min(max(||v||_w - tau_kappa, 0), gamma)``.
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(weights, dtype=float)
    return kernels.backend.prox_ball_batch(v[None, :], w, _as_thresh(tau_kappa, 1), float(gamma))[0]


def _radius_prox_box(v, w, c, alpha, beta):
    """Reference value: bisection on ``r = ||clip(v r/(r+c))||_w``."""
    def phi(r):
        return np.sqrt(np.sum(w * np.clip(v * r / (r + c), alpha, beta) ** 2)) - r

    lo, hi = 0.0, np.sqrt(np.sum(w * v * v))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if phi(mid) > 0:
            lo = mid
        else:
            hi = mid
    r = 0.5 * (lo + hi)
    return np.clip(v * r / (r + c), alpha, beta)


def prox_sparse_box(v, tau_kappa, alpha, beta, weights, check=False):
    """Prox of ``tau_kappa ||u||_w`` plus the indicator of ``alpha <= u <= beta``.

    Zero when ``||v||_w <= tau_kappa``; otherwise the damped fixed point of
    ``u = clip(v - tau_kappa u / ||u||_w)``, with a Dykstra fallback.  With
    ``check=True`` the result is compared to an independent bisection on the
    radius of the solution.
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(weights, dtype=float)
    U, flags = kernels.backend.prox_box_batch(
        v[None, :], w, _as_thresh(tau_kappa, 1), float(alpha), float(beta),
        PROX_TOL, PROX_MAX_ITER, DYKSTRA_MAX_SWEEPS,
    )
    u = U[0]
    if check and np.sqrt(np.sum(w * v * v)) > tau_kappa:
        ref = _radius_prox_box(v, w, float(tau_kappa), alpha, beta)
        err = np.sqrt(np.sum(w * (u - ref) ** 2))
        if err > 1e-8 * max(1.0, np.sqrt(np.sum(w * ref * ref))):
            raise ProxCheckError(f"box prox differs from the radius reference by {err:.3e}")
    return u


def prox_slices(V, thresh, constraints, w):
    """Apply the prox to every row of ``V``; returns ``(U, flags)``."""
    V = np.ascontiguousarray(V, dtype=float)
    th = _as_thresh(thresh, V.shape[0])
    be = kernels.backend
    if isinstance(constraints, Ball):
        return be.prox_ball_batch(V, w, th, float(constraints.gamma)), np.zeros(V.shape[0], dtype=np.int64)
    return be.prox_box_batch(V, w, th, float(constraints.alpha), float(constraints.beta),
                             PROX_TOL, PROX_MAX_ITER, DYKSTRA_MAX_SWEEPS)


def project(U, constraints, w):
    U = np.array(U, dtype=float)
    if isinstance(constraints, Box):
        return np.clip(U, constraints.alpha, constraints.beta)
    r = np.sqrt(np.sum(w * U * U, axis=1))
    s = np.where(r > constraints.gamma, constraints.gamma / np.maximum(r, 1e-300), 1.0)
    return U * s[:, None]


# --------------------------------------------------------------------------
# reduced problem


@dataclass
class SolveOptions:
    """``step`` is a fixed step size or ``"backtracking"``."""

    step: Union[float, str] = "backtracking"
    max_outer_iters: int = 5000
    kkt_tol: float = 1e-8
    restart: bool = True
    initial_step: float = 1.0

    def __post_init__(self):
        if self.step != "backtracking" and not (isinstance(self.step, (int, float)) and self.step > 0):
            raise ValueError("step must be positive or 'backtracking'")
        if not (self.kkt_tol > 0 and self.initial_step > 0 and self.max_outer_iters > 0):
            raise ValueError("tolerances, initial step and iteration limit must be positive")


class ReducedProblem:
    """Cost, gradient and prox of ``J_T`` on one grid."""

    def __init__(self, spec, ops, tgrid, anchor=None, data=None):
        self.spec, self.ops, self.tgrid = spec, ops, tgrid
        self.data = data or prepare(spec, ops, tgrid)
        self.anchor = anchor
        self.w = ops.omega_weights
        self.dt = tgrid.dt
        self.kappa = spec.kappa
        self.constraints = spec.constraints

    def inner(self, a, b):
        return self.dt * float(np.sum(self.w * a * b))

    def norm(self, a):
        return math.sqrt(max(self.inner(a, a), 0.0))

    def slice_norms(self, U):
        return np.sqrt(np.sum(self.w * U * U, axis=1))

    def sparsity_term(self, U):
        return self.dt * float(np.sum(self.slice_norms(U)))

    def smooth(self, U):
        """``(F, forward_result)``."""
        fwd = solve_forward(self.spec, self.ops, self.tgrid, U, data=self.data)
        Y = fwd.y.values
        r = Y[1:] - self.data.yd[1:]
        F = 0.5 * self.dt * float(np.sum(self.ops.mass * r * r))
        if self.anchor is not None:
            ra = Y[1:] - self.anchor.values[1:]
            F += 0.5 * self.dt * float(np.sum(self.ops.mass * ra * ra))
        return F, fwd

    def objective(self, U):
        F, _ = self.smooth(U)
        return F + self.kappa * self.sparsity_term(U)

    def gradient(self, U, fwd=None):
        """``(G, adjoint_result, forward_result)``."""
        if fwd is None:
            _, fwd = self.smooth(U)
        adj = solve_adjoint(self.spec, self.ops, self.tgrid, fwd.y, self.anchor, data=self.data)
        return reduced_gradient(adj.phi, self.ops).values, adj, fwd

    def prox(self, V, tau):
        return prox_slices(V, tau * self.kappa, self.constraints, self.w)

    def prox_residual(self, U, G, tau):
        P, _ = self.prox(U - tau * G, tau)
        return self.norm(U - P) / tau


@dataclass(eq=False)
class KktBundle:
    """Multipliers and per-slice certificates of a (near-)stationary control."""

    lam: Trajectory
    mu: Trajectory
    phi_omega: Trajectory
    kappa: float
    eps_u: float
    stationarity_residual: float
    vi_violation: float
    subgradient_violation: float
    clipped_slices: list
    per_time_certificates: list

    def to_json(self):
        return {
            "kappa": self.kappa,
            "eps_u": self.eps_u,
            "stationarity_residual": self.stationarity_residual,
            "vi_violation": self.vi_violation,
            "subgradient_violation": self.subgradient_violation,
            "clipped_slices": self.clipped_slices,
            "certificates": self.per_time_certificates,
        }


@dataclass(eq=False)
class PtSolution:
    u: Trajectory
    y: Trajectory
    phi: Trajectory
    gradient: Trajectory
    kkt: KktBundle
    J: float
    F: float
    iterations: int
    converged: bool
    residual: float
    log: list = field(default_factory=list)

    def log_csv(self):
        lines = ["iter,J_T,residual,step"]
        lines += [f"{r['iter']},{r['J']:.17g},{r['residual']:.17g},{r['step']:.17g}" for r in self.log]
        return "\n".join(lines) + "\n"


def solve_pt(spec, ops, tgrid, u0=None, opts: SolveOptions = None, anchor=None, *, data=None) -> PtSolution:
    """FISTA with backtracking and (optional) monotone restart."""
    opts = opts or SolveOptions()
    prob = ReducedProblem(spec, ops, tgrid, anchor, data)
    shape = (tgrid.N, ops.n_omega)
    if u0 is None:
        x = np.zeros(shape)
    else:
        x = np.asarray(u0.values if isinstance(u0, Trajectory) else u0, dtype=float)
        if x.shape != shape:
            raise ValueError(f"initial control has shape {x.shape}, expected {shape}")
        x = project(x, spec.constraints, prob.w)
    kappa = spec.kappa
    backtrack = opts.step == "backtracking"
    tau = opts.initial_step if backtrack else float(opts.step)

    try:
        Fx, fwd_x = prob.smooth(x)
    except (StepFailure, DivergenceError) as exc:
        raise SolverError(f"forward solve failed at the initial control: {exc}") from exc
    Gx, adj_x, _ = prob.gradient(x, fwd_x)
    Jx = Fx + kappa * prob.sparsity_term(x)
    y, Fy, Gy = x, Fx, Gx
    t = 1.0
    log = []
    residual = prob.prox_residual(x, Gx, tau)
    log.append({"iter": 0, "J": Jx, "residual": residual, "step": tau})
    converged = residual <= opts.kkt_tol
    it = 0
    while not converged and it < opts.max_outer_iters:
        it += 1
        for _ in range(60):
            V = y - tau * Gy
            xn, _ = prob.prox(V, tau)
            try:
                Fn, fwd_n = prob.smooth(xn)
            except (StepFailure, DivergenceError):
                if not backtrack:
                    raise SolverError("forward solve diverged with the fixed step", log)
                tau *= 0.5
                continue
            d = xn - y
            bound = Fy + prob.inner(Gy, d) + prob.inner(d, d) / (2 * tau)
            if not backtrack or Fn <= bound + 1e-14 * max(1.0, abs(Fy)):
                break
            tau *= 0.5
        else:
            raise SolverError("line search failed to find an admissible step", log)
        Jn = Fn + kappa * prob.sparsity_term(xn)
        if opts.restart and Jn > Jx + 1e-13 * max(1.0, abs(Jx)) and y is not x:
            # momentum made things worse: restart from x with a plain step
            y, Fy, Gy, t = x, Fx, Gx, 1.0
            log.append({"iter": it, "J": Jx, "residual": residual, "step": tau})
            continue
        Gn, adj_n, _ = prob.gradient(xn, fwd_n)
        residual = prob.prox_residual(xn, Gn, tau)
        restart_now = opts.restart and prob.inner(y - xn, xn - x) > 0
        xprev = x
        x, Fx, Gx, Jx, fwd_x, adj_x = xn, Fn, Gn, Jn, fwd_n, adj_n
        log.append({"iter": it, "J": Jx, "residual": residual, "step": tau})
        if residual <= opts.kkt_tol:
            converged = True
            break
        if restart_now:
            t = 1.0
            y, Fy, Gy = x, Fx, Gx
            continue
        tn = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / tn
        t = tn
        if beta == 0.0:
            y, Fy, Gy = x, Fx, Gx
            continue
        y = x + beta * (x - xprev)
        try:
            Fy, fwd_y = prob.smooth(y)
            Gy, _, _ = prob.gradient(y, fwd_y)
        except (StepFailure, DivergenceError):
            t = 1.0
            y, Fy, Gy = x, Fx, Gx

    u = Trajectory("control", x, tgrid.dt)
    grad = Trajectory("control", Gx, tgrid.dt)
    kkt = extract_multipliers(u, grad, spec, ops)
    return PtSolution(u, fwd_x.y, adj_x.phi, grad, kkt, Jx, Fx, it, converged, residual, log)


# --------------------------------------------------------------------------
# multipliers and verification


def numeric_zero(u):
    """Slice-norm threshold below which a control slice counts as zero."""
    U = np.asarray(u.values if isinstance(u, Trajectory) else u)
    return 1e-8 * max(1.0, float(np.max(np.abs(U))) if U.size else 0.0)


def _vi_sup(mu, U, constraints, w):
    """Per slice ``sup_{v in K} <mu_j, v - u_j>_w`` (exact)."""
    if isinstance(constraints, Ball):
        return constraints.gamma * np.sqrt(np.sum(w * mu * mu, axis=1)) - np.sum(w * mu * U, axis=1)
    a, b = constraints.alpha, constraints.beta
    return np.sum(w * np.maximum(mu * (a - U), mu * (b - U)), axis=1)


def extract_multipliers(u, phi_omega, spec, ops, eps_u=None) -> KktBundle:
    """Build ``lambda`` and ``mu`` from ``phi|_omega + kappa lambda + mu = 0``.

    Active slices take ``lambda = u / ||u||``; on zero slices ``lambda =
    -phi / kappa``, pulled back to the unit ball if needed (counted as a
    subgradient violation).
    """
    U = np.asarray(u.values if isinstance(u, Trajectory) else u, dtype=float)
    P = np.asarray(phi_omega.values if isinstance(phi_omega, Trajectory) else phi_omega, dtype=float)
    dt = u.dt if isinstance(u, Trajectory) else 1.0
    w = ops.omega_weights
    kappa = spec.kappa
    eps = numeric_zero(U) if eps_u is None else eps_u
    un = np.sqrt(np.sum(w * U * U, axis=1))
    pn = np.sqrt(np.sum(w * P * P, axis=1))
    active = un > eps
    lam = np.empty_like(U)
    lam[active] = U[active] / un[active, None]
    lam[~active] = -P[~active] / kappa
    ln = np.sqrt(np.sum(w * lam * lam, axis=1))
    over = (~active) & (ln > 1.0)
    lam[over] /= ln[over, None]
    sub_violation = float(np.max(np.maximum(ln[~active] - 1.0, 0.0))) if (~active).any() else 0.0
    mu = -P - kappa * lam

    # fixed-point residual of the prox-gradient map at unit step
    R, _ = prox_slices(U - P, kappa, spec.constraints, w)
    stat = math.sqrt(dt * float(np.sum(w * (U - R) ** 2)))
    vi = dt * float(np.sum(np.maximum(_vi_sup(mu, U, spec.constraints, w), 0.0)))

    lnorm = np.sqrt(np.sum(w * lam * lam, axis=1))
    certs = []
    for j in range(U.shape[0]):
        certs.append({
            "slice": j,
            "t_start": j * dt,
            "t_end": (j + 1) * dt,
            "u_norm": float(un[j]),
            "phi_norm": float(pn[j]),
            "lambda_norm": float(lnorm[j]),
            "active": bool(active[j]),
            "phi_below_kappa": bool(pn[j] <= kappa),
        })
    return KktBundle(
        Trajectory("control", lam, dt), Trajectory("control", mu, dt), Trajectory("control", P, dt),
        kappa, eps, stat, vi, sub_violation, np.flatnonzero(over).tolist(), certs,
    )


@dataclass
class CheckResult:
    name: str
    passed: bool
    slices: list
    worst: float = 0.0

    def to_json(self):
        return {"name": self.name, "passed": self.passed, "slices": self.slices, "worst": self.worst}


@dataclass
class VerificationReport:
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failed(self):
        return [c for c in self.checks if not c.passed]

    def to_json(self):
        return {"passed": self.passed, "checks": [c.to_json() for c in self.checks]}


def _check(name, bad, worst):
    idx = np.flatnonzero(bad).tolist()
    return CheckResult(name, not idx, idx, float(worst))


def _random_feasible(rng, constraints, w, shape):
    S, p = shape
    if isinstance(constraints, Box):
        V = rng.uniform(constraints.alpha, constraints.beta, size=shape)
        corners = rng.random(shape) < 0.3
        V[corners] = np.where(rng.random(corners.sum()) < 0.5, constraints.alpha, constraints.beta)
        return V
    V = rng.standard_normal(shape)
    n = np.sqrt(np.sum(w * V * V, axis=1))
    rad = constraints.gamma * np.where(rng.random(S) < 0.3, 1.0, rng.random(S))
    return V * (rad / np.maximum(n, 1e-300))[:, None]


def verify_kkt(bundle: KktBundle, u, spec, ops, n_probe=32, tol=1e-6, seed=0, stationarity_tol=None) -> VerificationReport:
    """Check the optimality system slice by slice.

    Covers the multiplier identity, the subgradient characterization of
    ``lambda``, the prox fixed-point residual, the variational inequality
    for ``mu`` (exact per-slice supremum plus ``n_probe`` random feasible
    controls), the ball or box structure of ``mu``, the sparsity
    implications between ``||phi(t)||`` and ``kappa``, and
    ``||kappa lambda + mu|| >= kappa ||lambda||``.
    """
    U = np.asarray(u.values if isinstance(u, Trajectory) else u, dtype=float)
    dt = bundle.lam.dt
    w = ops.omega_weights
    kappa = bundle.kappa
    lam, mu, P = bundle.lam.values, bundle.mu.values, bundle.phi_omega.values
    cons = spec.constraints
    eps = bundle.eps_u
    un = np.sqrt(np.sum(w * U * U, axis=1))
    ln = np.sqrt(np.sum(w * lam * lam, axis=1))
    mn = np.sqrt(np.sum(w * mu * mu, axis=1))
    pn = np.sqrt(np.sum(w * P * P, axis=1))
    active = un > eps
    scale = max(1.0, float(np.max(np.abs(P))) if P.size else 0.0)
    checks = []

    ident = np.max(np.abs(P + kappa * lam + mu), axis=1) if U.size else np.zeros(0)
    checks.append(_check("multiplier identity", ident > 1e-12 * scale, ident.max(initial=0.0)))
    lam_dev = np.where(active, np.abs(ln - 1.0), np.maximum(ln - 1.0, 0.0))
    checks.append(_check("lambda characterization", np.where(active, lam_dev > 1e-8, lam_dev > 1e-10),
                         lam_dev.max(initial=0.0)))

    st_tol = tol * max(1.0, float(np.max(un, initial=0.0))) if stationarity_tol is None else stationarity_tol
    R, _ = prox_slices(U - P, kappa, cons, w)
    st = np.sqrt(np.sum(w * (U - R) ** 2, axis=1))
    checks.append(_check("stationarity", st > st_tol, st.max(initial=0.0)))

    sup = _vi_sup(mu, U, cons, w)
    bound = tol * (1.0 + mn * (cons.gamma if isinstance(cons, Ball) else max(-cons.alpha, cons.beta)))
    checks.append(_check("normal cone", sup > bound, sup.max(initial=0.0)))

    rng = np.random.default_rng(seed)
    worst = np.zeros(U.shape[0])
    for _ in range(n_probe):
        V = _random_feasible(rng, cons, w, U.shape)
        contrib = np.sum(w * mu * (V - U), axis=1)
        dv = np.sqrt(np.sum(w * (V - U) ** 2, axis=1))
        worst = np.maximum(worst, contrib - tol * (1.0 + mn * dv))
    checks.append(_check("variational inequality (sampled)", worst > 0, worst.max(initial=0.0)))

    if isinstance(cons, Ball):
        g = cons.gamma
        interior = un < g * (1 - tol)
        c37 = interior & (mn > tol)
        checks.append(_check("ball: interior slices have mu = 0", c37, mn[interior].max(initial=0.0)))
        nz = mn > tol
        dev = np.zeros(U.shape[0])
        dev[nz] = np.sqrt(np.sum(w * (U[nz] - g * mu[nz] / mn[nz, None]) ** 2, axis=1))
        checks.append(_check("ball: u = gamma mu/||mu|| where mu != 0", dev > tol * max(1.0, g),
                             dev.max(initial=0.0)))
    else:
        a, b = cons.alpha, cons.beta
        at_lo = U <= a + 1e-8
        at_hi = U >= b - 1e-8
        inner = ~(at_lo | at_hi)
        viol = np.zeros_like(U)
        viol = np.where(at_lo, np.maximum(mu, 0.0), viol)
        viol = np.where(at_hi, np.maximum(-mu, 0.0), viol)
        viol = np.where(inner, np.abs(mu), viol)
        rowv = viol.max(axis=1) if U.size else np.zeros(0)
        checks.append(_check("box: sign pattern of mu", rowv > tol, rowv.max(initial=0.0)))

    s1 = (pn < kappa * (1 - tol)) & active
    s2 = (~active) & (pn > kappa * (1 + tol))
    checks.append(_check("sparsity: ||phi|| < kappa => u = 0", s1, (un * s1).max(initial=0.0)))
    checks.append(_check("sparsity: u = 0 => ||phi|| <= kappa", s2, (pn * s2).max(initial=0.0)))

    lhs = np.sqrt(np.sum(w * (kappa * lam + mu) ** 2, axis=1))
    d54 = kappa * ln - lhs
    checks.append(_check("||kappa lambda + mu|| >= kappa ||lambda||", d54 > tol * kappa, d54.max(initial=0.0)))
    return VerificationReport(checks)
