import numpy as np
import pytest

from conftest import problem_from
from sparsectl.discretize import TimeGrid, Trajectory
from sparsectl.horizon import (
    HorizonReport,
    HorizonRecord,
    HorizonSchedule,
    anchor_study,
    convergence_monitors,
    run_continuation,
    shutdown_time,
)
from sparsectl.optimize import SolveOptions

OPTS = SolveOptions(kkt_tol=1e-9)


def test_schedule_validation():
    with pytest.raises(ValueError):
        HorizonSchedule((4.0, 4.0), 0.05)
    with pytest.raises(ValueError):
        HorizonSchedule((8.0, 4.0), 0.05)
    with pytest.raises(ValueError):
        HorizonSchedule((4.0, 8.03), 0.05)
    with pytest.raises(ValueError):
        HorizonSchedule((), 0.05)
    s = HorizonSchedule.geometric(4.0, 4, 0.05)
    assert s.T_list == (4.0, 8.0, 16.0, 32.0)
    assert [s.steps(T) for T in s.T_list] == [80, 160, 320, 640]


def test_grids_nest_exactly():
    s = HorizonSchedule.geometric(4.0, 3, 0.05)
    g = [s.grid(T) for T in s.T_list]
    for a, b in zip(g, g[1:]):
        np.testing.assert_array_equal(b.times[: a.N + 1], a.times)


def test_shutdown_time():
    U = np.zeros((20, 3))
    U[1:6] = 0.4
    assert shutdown_time(Trajectory("control", U, 0.1)) == pytest.approx(0.6)
    assert shutdown_time(Trajectory("control", np.zeros((20, 3)), 0.1)) == 0.0
    U[-1] = 1.0
    assert shutdown_time(Trajectory("control", U, 0.1)) is None
    U = np.zeros((4, 2))
    U[0] = 1e-3
    # with weights the slice norm is 1e-3 * sqrt(0.2); below eps it counts as inactive
    assert shutdown_time(Trajectory("control", U, 0.5), eps_u=1e-3, weights=np.full(2, 0.1)) == 0.0
    assert shutdown_time(Trajectory("control", U, 0.5), eps_u=1e-4, weights=np.full(2, 0.1)) == 0.5


@pytest.fixture(scope="module")
def continuation():
    spec, ops = problem_from("schloegl")
    seen = []
    res = run_continuation(spec, ops, HorizonSchedule((4.0, 8.0, 16.0), 0.05), OPTS,
                           callback=lambda rec, sol, tg: seen.append((rec.T, sol.u.values.shape, tg.N)))
    return spec, ops, res, seen


def test_continuation_records(continuation):
    spec, ops, res, seen = continuation
    rep = res.report
    assert rep.horizons == [4.0, 8.0, 16.0] and not rep.stopped_early and rep.error is None
    assert seen == [(4.0, (80, ops.n_omega), 80), (8.0, (160, ops.n_omega), 160), (16.0, (320, ops.n_omega), 320)]
    for r in rep.records:
        assert r.converged and r.kkt_passed and r.sparsity_violations == 0
        assert r.T0 is not None and r.T0 < r.T
    assert len({r.T0 for r in rep.records}) == 1
    assert rep.records[0].control_distance is None
    assert res.tgrid.N == 320


def test_objective_chain(continuation):
    # J_T(u_T) <= J_T(u_T' on [0,T]) <= J_T'(u_T') for T < T'
    recs = continuation[2].report.records
    for a, b in zip(recs, recs[1:]):
        assert a.J <= a.J_restricted_next * (1 + 1e-9)
        assert a.J_restricted_next <= b.J * (1 + 1e-12)


def test_warm_start_beats_zero(continuation):
    recs = continuation[2].report.records
    for r in recs[1:]:
        assert r.J_warm_start < r.J_zero
        assert r.J <= r.J_warm_start
    assert recs[1].iterations < recs[0].iterations


def test_report_serialization(continuation):
    rep = continuation[2].report
    js = rep.to_json()
    assert js["dt"] == 0.05 and len(js["horizons"]) == 3
    lines = rep.monitors_csv().splitlines()
    assert lines[0].startswith("T,J,") and len(lines) == 4
    assert lines[1].split(",")[7] == ""  # no control distance on the first horizon


def test_monitors_on_schloegl(continuation):
    mon = convergence_monitors(continuation[2].report)
    for name in ("control_distance", "state_distance", "l1l2_difference", "terminal_state_norm", "tail_state_norm"):
        assert mon[name].verdict == "decreasing", (name, mon[name].sequence)
    assert mon["phi_l2"].verdict in ("stable", "bounded")
    assert mon["phi_l2"].bound == max(mon["phi_l2"].sequence)


def _rec(T, **kw):
    base = dict(T=T, N=int(T * 10), J=0.0, l1l2_norm=0.0, terminal_state_norm=0.0, tail_state_norm=0.0,
                tail_adjoint_norm=0.0, phi_l2=0.0, T0=0.0, iterations=0, converged=True, residual=0.0,
                n_active=0, sparsity_violations=0, kkt_passed=True, J_warm_start=0.0, J_zero=0.0,
                control_distance=0.0, state_distance=0.0)
    base.update(kw)
    return HorizonRecord(**base)


def test_monitors_all_zero_are_stable():
    rep = HorizonReport([_rec(1.0, control_distance=None, state_distance=None), _rec(2.0), _rec(4.0)], dt=0.1)
    mon = convergence_monitors(rep)
    assert all(m.verdict == "stable" for m in mon.monitors.values())


def test_monitors_flag_non_monotone():
    rep = HorizonReport([_rec(1.0, tail_state_norm=1.0), _rec(2.0, tail_state_norm=0.5),
                         _rec(4.0, tail_state_norm=0.7)], dt=0.1)
    assert convergence_monitors(rep)["tail_state_norm"].verdict == "non-monotone"
    with pytest.raises(ValueError):
        convergence_monitors(HorizonReport(rep.records[:2]))


def test_early_stop_on_zero_target():
    spec, ops = problem_from("zero_target")
    res = run_continuation(spec, ops, HorizonSchedule((4.0, 8.0, 16.0), 0.05), OPTS)
    rep = res.report
    assert rep.stopped_early and rep.horizons == [4.0, 8.0]
    assert all(r.T0 == 0.0 for r in rep.records)
    assert np.all(res.solution.u.values == 0.0)


def test_solver_error_truncates_report(monkeypatch):
    import sparsectl.horizon as hz
    from sparsectl.optimize import SolverError

    spec, ops = problem_from("schloegl")
    real = hz.solve_pt
    calls = []

    def failing(spec, ops, tg, *a, **k):
        calls.append(tg.T)
        if tg.T > 4.0:
            raise SolverError("forced", [])
        return real(spec, ops, tg, *a, **k)

    monkeypatch.setattr(hz, "solve_pt", failing)
    res = run_continuation(spec, ops, HorizonSchedule((4.0, 8.0), 0.05), OPTS)
    assert res.report.horizons == [4.0]
    assert "T=8" in res.report.error and res.solution is not None


def test_anchor_study_moves_towards_long_horizon():
    spec, ops = problem_from("schloegl")
    st = anchor_study(spec, ops, 0.05, T_short=4.0, T_long=8.0, opts=OPTS)
    assert st.anchored_closer
    assert st.anchored_distance > 0
