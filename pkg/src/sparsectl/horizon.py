"""Horizon continuation towards the infinite-horizon problem.

Finite-horizon problems are solved on a fixed time step for an increasing
list of horizons.  Each solve is warm-started from the previous control
extended by zero, and the diagnostics that should settle as ``T`` grows are
recorded: control and state distances on the common interval, tail norms,
``||u_T||_{L1(L2)}`` and the shutdown time of the control.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .discretize import TimeGrid, Trajectory
from .forward import DivergenceError, StepFailure, prepare
from .optimize import (
    ReducedProblem,
    SolveOptions,
    SolverError,
    numeric_zero,
    solve_pt,
    verify_kkt,
)


@dataclass(frozen=True)
class HorizonSchedule:
    """Strictly increasing horizons sharing one time step ``dt``."""

    T_list: tuple
    dt: float

    def __post_init__(self):
        Ts = tuple(float(T) for T in self.T_list)
        if not Ts:
            raise ValueError("schedule needs at least one horizon")
        if any(b <= a for a, b in zip(Ts, Ts[1:])):
            raise ValueError("horizons must be strictly increasing")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        for T in Ts:
            TimeGrid.from_dt(T, self.dt)  # raises when T is not a multiple of dt
        object.__setattr__(self, "T_list", Ts)

    @classmethod
    def geometric(cls, T0, count, dt):
        return cls(tuple(T0 * 2**k for k in range(count)), dt)

    def grid(self, T):
        return TimeGrid.from_dt(T, self.dt)

    def steps(self, T):
        return self.grid(T).N


def shutdown_time(u, eps_u=None, weights=None):
    """``dt * (1 + last active slice)``; 0 for ``u = 0``; ``None`` if the last slice is active.

    A slice is active when its ``L2(omega)`` norm (cell volumes ``weights``,
    unit weights by default) exceeds ``eps_u``.
    """
    U = u.values
    w = 1.0 if weights is None else weights
    norms = np.sqrt(np.sum(w * U * U, axis=1))
    eps = numeric_zero(U) if eps_u is None else eps_u
    active = np.flatnonzero(norms > eps)
    if active.size == 0:
        return 0.0
    if active[-1] == U.shape[0] - 1:
        return None
    return u.dt * (active[-1] + 1)


@dataclass
class HorizonRecord:
    T: float
    N: int
    J: float
    l1l2_norm: float
    terminal_state_norm: float
    tail_state_norm: float
    tail_adjoint_norm: float
    phi_l2: float
    T0: Optional[float]
    iterations: int
    converged: bool
    residual: float
    n_active: int
    sparsity_violations: int
    kkt_passed: bool
    J_warm_start: float
    J_zero: float
    control_distance: Optional[float] = None
    state_distance: Optional[float] = None
    J_restricted_next: Optional[float] = None

    def to_json(self):
        return asdict(self)


@dataclass
class HorizonReport:
    records: list = field(default_factory=list)
    stopped_early: bool = False
    error: Optional[str] = None
    dt: float = 0.0

    @property
    def horizons(self):
        return [r.T for r in self.records]

    def sequence(self, name):
        return [getattr(r, name) for r in self.records]

    def to_json(self):
        return {
            "dt": self.dt,
            "stopped_early": self.stopped_early,
            "error": self.error,
            "horizons": [r.to_json() for r in self.records],
        }

    def monitors_csv(self):
        cols = ["T", "J", "l1l2_norm", "terminal_state_norm", "tail_state_norm", "tail_adjoint_norm",
                "phi_l2", "control_distance", "state_distance", "T0"]
        lines = [",".join(cols)]
        for r in self.records:
            vals = [getattr(r, c) for c in cols]
            lines.append(",".join("" if v is None else f"{v:.17g}" for v in vals))
        return "\n".join(lines) + "\n"


@dataclass(eq=False)
class ContinuationResult:
    report: HorizonReport
    solution: object  # last PtSolution, or None when the first horizon failed
    tgrid: Optional[TimeGrid] = None


def _common_l2(ops, dt, A, B, rows, weights):
    D = A[:rows] - B[:rows]
    return math.sqrt(dt * float(np.sum(weights * D * D)))


def run_continuation(spec, ops, schedule: HorizonSchedule, opts: SolveOptions = None, *,
                     horizon_tol=None, tail_tol=None, kkt_tol=1e-6, n_probe=16, seed=0,
                     callback: Callable = None) -> ContinuationResult:
    """Solve on every horizon of ``schedule`` with zero-extension warm starts.

    Stops early once the control distance to the previous horizon is below
    ``horizon_tol``, the shutdown time agrees with the previous one to
    ``dt`` and the tail state norm is below ``tail_tol``.  ``callback`` is
    called as ``callback(record, solution, tgrid)`` after every horizon.
    """
    opts = opts or SolveOptions()
    dt = schedule.dt
    w = ops.omega_weights
    y0_norm = float(ops.l2_norm(spec.y0.evaluate(ops.mesh.centers, 0.0)))
    tail_tol = 1e-6 * y0_norm if tail_tol is None else tail_tol
    report = HorizonReport(dt=dt)
    prev = None
    prev_sol = None
    last_grid = None
    for T in schedule.T_list:
        tg = schedule.grid(T)
        try:
            data = prepare(spec, ops, tg)
            prob = ReducedProblem(spec, ops, tg, data=data)
            u0 = None
            J_zero = prob.objective(np.zeros((tg.N, ops.n_omega)))
            J_warm = J_zero
            if prev_sol is not None:
                u0 = prev_sol.u.extend_zero(tg.N)
                J_warm = prob.objective(u0.values)
            sol = solve_pt(spec, ops, tg, u0, opts, data=data)
        except (SolverError, StepFailure, DivergenceError, ArithmeticError) as exc:
            report.error = f"horizon T={T:g}: {exc}"
            break

        U = sol.u.values
        un = np.sqrt(np.sum(w * U * U, axis=1))
        eps = numeric_zero(U)
        Y, Phi = sol.y.values, sol.phi.values
        half = int(math.floor(tg.N / 2))
        ynorms = ops.l2_norm(Y)
        pnorms = ops.omega_norm(Phi[:, ops.omega])
        kkt = verify_kkt(sol.kkt, sol.u, spec, ops, n_probe=n_probe, tol=kkt_tol, seed=seed)
        viol = len(set(kkt["sparsity: ||phi|| < kappa => u = 0"].slices)
                   | set(kkt["sparsity: u = 0 => ||phi|| <= kappa"].slices))
        rec = HorizonRecord(
            T=tg.T, N=tg.N, J=sol.J,
            l1l2_norm=dt * float(np.sum(un)),
            terminal_state_norm=float(ynorms[-1]),
            tail_state_norm=float(np.max(ynorms[half:])),
            tail_adjoint_norm=float(np.max(pnorms[half:])),
            phi_l2=math.sqrt(dt * float(np.sum(ops.l2_norm(Phi[:-1]) ** 2))),
            T0=shutdown_time(sol.u, eps, w),
            iterations=sol.iterations, converged=sol.converged, residual=sol.residual,
            n_active=int(np.sum(un > eps)), sparsity_violations=viol, kkt_passed=kkt.passed,
            J_warm_start=J_warm, J_zero=J_zero,
        )
        if prev is not None:
            rows = prev.N
            rec.control_distance = _common_l2(ops, dt, U, prev_sol.u.values, rows, w)
            rec.state_distance = _common_l2(ops, dt, Y[1:], prev_sol.y.values[1:], rows, ops.mass)
            prev_prob = ReducedProblem(spec, ops, schedule.grid(prev.T))
            prev.J_restricted_next = prev_prob.objective(U[:rows])
        report.records.append(rec)
        if callback is not None:
            callback(rec, sol, tg)

        stop = False
        if prev is not None:
            htol = 1e-6 * max(1.0, float(np.max(np.abs(U)))) if horizon_tol is None else horizon_tol
            t0_stable = (rec.T0 is not None and prev.T0 is not None and abs(rec.T0 - prev.T0) <= dt + 1e-12)
            stop = rec.control_distance <= htol and t0_stable and rec.tail_state_norm <= tail_tol
        prev, prev_sol, last_grid = rec, sol, tg
        if stop and T != schedule.T_list[-1]:
            report.stopped_early = True
            break
    return ContinuationResult(report, prev_sol, last_grid)


@dataclass
class Monitor:
    name: str
    verdict: str
    sequence: list
    bound: Optional[float] = None


@dataclass
class MonitorSummary:
    monitors: dict

    def __getitem__(self, name):
        return self.monitors[name]

    def to_json(self):
        return {k: asdict(m) for k, m in self.monitors.items()}


def _verdict(seq, atol=1e-14):
    x = np.asarray(seq, dtype=float)
    scale = max(1.0, float(np.max(np.abs(x)))) if x.size else 1.0
    if x.size == 0 or float(np.ptp(x)) <= atol * scale:
        return "stable"
    if np.all(np.diff(x) < 0):
        return "decreasing"
    return "non-monotone"


def convergence_monitors(report: HorizonReport) -> MonitorSummary:
    """Trend verdicts for the quantities that should settle as ``T`` grows."""
    if len(report.records) < 3:
        raise ValueError("convergence monitors need at least three completed horizons")
    recs = report.records
    l1 = [r.l1l2_norm for r in recs]
    seqs = {
        "control_distance": [r.control_distance for r in recs[1:]],
        "state_distance": [r.state_distance for r in recs[1:]],
        "l1l2_difference": [abs(b - a) for a, b in zip(l1, l1[1:])],
        "terminal_state_norm": [r.terminal_state_norm for r in recs],
        "tail_state_norm": [r.tail_state_norm for r in recs],
        "tail_adjoint_norm": [r.tail_adjoint_norm for r in recs],
        "phi_l2": [r.phi_l2 for r in recs],
    }
    out = {}
    for name, seq in seqs.items():
        if name == "phi_l2":
            # only boundedness is expected here; the verdict carries the common bound
            v = _verdict(seq)
            m = Monitor(name, v if v == "stable" else "bounded", list(seq), float(max(seq)))
        else:
            m = Monitor(name, _verdict(seq), list(seq))
        out[name] = m
    return MonitorSummary(out)


@dataclass
class AnchorStudy:
    anchored_distance: float
    unanchored_distance: float
    T_short: float
    T_long: float

    @property
    def anchored_closer(self):
        return self.anchored_distance < self.unanchored_distance


def anchor_study(spec, ops, dt, T_short=4.0, T_long=16.0, opts: SolveOptions = None) -> AnchorStudy:
    """Compare short-horizon solutions with and without the long-horizon state as anchor.

    Empirical probe only: the long-horizon state stands in for the
    infinite-horizon optimal state on ``[0, T_short]``.
    """
    opts = opts or SolveOptions()
    g_long = TimeGrid.from_dt(T_long, dt)
    g_short = TimeGrid.from_dt(T_short, dt)
    long = solve_pt(spec, ops, g_long, None, opts)
    plain = solve_pt(spec, ops, g_short, None, opts)
    anchor = Trajectory("state", long.y.values[: g_short.N + 1], dt)
    anchored = solve_pt(spec, ops, g_short, plain.u, opts, anchor=anchor)
    w = ops.omega_weights
    ref = long.u.values[: g_short.N]
    return AnchorStudy(
        _common_l2(ops, dt, anchored.u.values, ref, g_short.N, w),
        _common_l2(ops, dt, plain.u.values, ref, g_short.N, w),
        T_short, T_long,
    )
