"""Command line entry point: ``sparsectl check|solve|verify``.

Exit codes: 0 success, 1 solver or verification failure, 2 input error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import dataclass, field
from importlib import resources

import jsonschema
import numpy as np

from . import __version__, storage, svg
from .adjoint import adjoint_step_residuals, reduced_gradient, solve_adjoint
from .discretize import Mesh, TimeGrid, build_operators, estimate_embedding_c4
from .forward import DivergenceError, PreconditionError, StepFailure, prepare, solve_forward, step_residuals
from .horizon import HorizonSchedule, convergence_monitors, run_continuation, shutdown_time
from .model import ConfigError, ProblemSpec, SampleBox, check_assumptions
from .optimize import SolveOptions, extract_multipliers, verify_kkt

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
TRAJECTORIES = ("u", "y", "phi")
RESIDUAL_TOL = 1e-8


class InputError(Exception):
    pass


def load_schema():
    text = resources.files("sparsectl").joinpath("schema/run_config.schema.json").read_text()
    return json.loads(text)


def bundled_config(name):
    """Path of a config shipped with the package (``schloegl``, ``tracking_box``, ``zero_target``)."""
    return str(resources.files("sparsectl").joinpath(f"configs/{name}.json"))


@dataclass
class RunConfig:
    spec: ProblemSpec
    cells: tuple
    schedule: HorizonSchedule
    solver: SolveOptions
    seed: int = 0
    emit: tuple = ("csv", "json", "svg")
    output: str = None
    horizon_tol: float = None
    tail_tol: float = None
    verify_tol: float = 1e-6
    n_probe: int = 32
    check: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def mesh(self):
        return Mesh.for_domain(self.spec.domain, self.cells)


def _schema_message(err, raw):
    path = ".".join(str(p) for p in err.absolute_path) or "<root>"
    cons = raw.get("problem", {}).get("constraints") if isinstance(raw.get("problem"), dict) else None
    if "constraints" in path and isinstance(cons, dict) and cons.get("kind") == "box":
        a, b = cons.get("alpha"), cons.get("beta")
        if isinstance(a, (int, float)) and isinstance(b, (int, float)) and not a < 0 < b:
            return f"problem.constraints: box bounds violate alpha < 0 < beta (alpha={a}, beta={b})"
    return f"{path}: {err.message}"


def parse_config(raw, base_dir="."):
    """Validate a config dict against the schema and build a :class:`RunConfig`."""
    validator = jsonschema.Draft202012Validator(load_schema())
    err = jsonschema.exceptions.best_match(validator.iter_errors(raw))
    if err is not None:
        raise InputError(_schema_message(err, raw))
    if "problem_file" in raw:
        pf = os.path.join(base_dir, raw["problem_file"])
        problem = _read_json(pf)
        raw = dict(raw, problem=problem)
        raw.pop("problem_file")
        err = jsonschema.exceptions.best_match(validator.iter_errors(raw))
        if err is not None:
            raise InputError(f"{pf}: " + _schema_message(err, raw))
    try:
        spec = ProblemSpec.from_json(raw["problem"])
    except ConfigError as exc:
        where = f"problem.{exc.field}" if exc.field else "problem"
        raise InputError(f"{where}: {exc}") from None
    if len(raw["mesh"]["cells"]) != spec.domain.dim:
        raise InputError("mesh.cells: needs one entry per domain dimension")
    sch = raw["schedule"]
    try:
        if "horizons" in sch:
            schedule = HorizonSchedule(tuple(sch["horizons"]), sch["dt"])
        else:
            schedule = HorizonSchedule.geometric(sch["T0"], sch["count"], sch["dt"])
    except (ValueError, ConfigError) as exc:
        raise InputError(f"schedule: {exc}") from None
    s = raw.get("solver", {})
    solver = SolveOptions(
        step=s.get("step", "backtracking"),
        max_outer_iters=s.get("max_outer_iters", 5000),
        kkt_tol=s.get("kkt_tol", 1e-8),
        restart=s.get("restart", True),
        initial_step=s.get("initial_step", 1.0),
    )
    cont = raw.get("continuation", {})
    ver = raw.get("verify", {})
    return RunConfig(
        spec, tuple(raw["mesh"]["cells"]), schedule, solver,
        seed=raw.get("seed", 0), emit=tuple(raw.get("emit", ("csv", "json", "svg"))),
        output=raw.get("output"), horizon_tol=cont.get("horizon_tol"), tail_tol=cont.get("tail_tol"),
        verify_tol=ver.get("tol", 1e-6), n_probe=ver.get("n_probe", 32), check=raw.get("check", {}), raw=raw,
    )


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def load_config(path):
    return parse_config(_read_json(path), os.path.dirname(os.path.abspath(path)))


# --------------------------------------------------------------------------
# check


def run_check(cfg: RunConfig):
    """Assumption report plus the stabilizability constants, as a dict."""
    spec = cfg.spec
    caught = []
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        ops = build_operators(spec, cfg.mesh())
        caught = [str(w.message) for w in rec]
    consts = spec.f.resolved_constants()
    span = max(2.0 * consts.M_f, 1.0)
    y_range = cfg.check.get("y_range", (-span, span))
    n = cfg.check.get("samples", 32)
    t_max = cfg.check.get("t_max", cfg.schedule.T_list[-1])
    sample = SampleBox.for_domain(spec.domain, y_range, t_max=t_max, n=n)
    report = check_assumptions(spec.f, sample)
    C4 = estimate_embedding_c4(ops, seed=cfg.seed)
    out = {
        "name": cfg.raw.get("name", spec.name),
        "passed": report.passed,
        "assumptions": report.to_json(),
        "constants": {
            "M_f": report.M_f, "delta": report.delta, "m_f": report.m_f, "C_M_f": report.C_M_f,
            "C_a": ops.C_a_estimate, "C4": C4,
        },
        "warnings": caught,
    }
    try:
        sm = _smallness(spec, ops, C4, sample)
        out["constants"].update(m_f=sm.m_f, K_f=sm.K_f, decay_rate=sm.lam, y0_norm=sm.y0_norm,
                                small_data=sm.satisfied)
    except PreconditionError as exc:
        out["constants"].update(K_f=None, decay_rate=None)
        out["warnings"].append(f"smallness threshold unavailable: {exc}")
    return out


def _smallness(spec, ops, C4, sample):
    from .forward import smallness_threshold

    return smallness_threshold(spec, ops, C4=C4, sample=sample)


def cmd_check(cfg: RunConfig, out_dir=None, quiet=False):
    result = run_check(cfg)
    for w in result["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        storage.write_json(os.path.join(out_dir, "check.json"), result)
    if not quiet:
        print(json.dumps(result, indent=2, default=storage._json_default))
    return EXIT_OK if result["passed"] else EXIT_FAIL


# --------------------------------------------------------------------------
# solve


def _write_trajectories(out_dir, sol, shape, emit):
    for name, traj in zip(TRAJECTORIES, (sol.u, sol.y, sol.phi)):
        storage.write_binary(os.path.join(out_dir, f"{name}.bin"), traj)
        if "csv" in emit:
            storage.write_csv(os.path.join(out_dir, f"{name}.csv"), traj, shape)


def _manifest(cfg, tg, complete, T_done):
    return {
        "version": __version__,
        "complete": complete,
        "T": tg.T if tg is not None else None,
        "N": tg.N if tg is not None else None,
        "dt": cfg.schedule.dt,
        "completed_horizons": T_done,
        "seed": cfg.seed,
    }


def _plots(out_dir, cfg, ops, sol, tg, T0):
    spec = cfg.spec
    un = ops.omega_norm(sol.u.values)
    ut = np.concatenate([[0.0], sol.u.times])
    uu = np.concatenate([[un[0]], un])
    Y = sol.y.values
    yd = np.stack([spec.yd.evaluate(ops.mesh.centers, t) for t in tg.times])
    pn = ops.omega_norm(sol.phi.values[:, ops.omega])
    files = {
        "control.svg": svg.control_plot(ut, uu, T0),
        "state.svg": svg.state_plot(tg.times, ops.l2_norm(Y), ops.l2_norm(Y - yd)),
        "adjoint.svg": svg.adjoint_plot(tg.times, pn, spec.kappa),
    }
    for name, text in files.items():
        storage.atomic_write(os.path.join(out_dir, name), text)


def cmd_solve(cfg: RunConfig, out_dir, quiet=False):
    os.makedirs(out_dir, exist_ok=True)
    ops = build_operators(cfg.spec, cfg.mesh())
    shape = cfg.cells if len(cfg.cells) > 1 else None
    storage.write_json(os.path.join(out_dir, "config.json"), cfg.raw)
    done = []

    def flush(rec, sol, tg):
        done.append(rec.T)
        _write_trajectories(out_dir, sol, shape, cfg.emit)
        storage.write_json(os.path.join(out_dir, "manifest.json"), _manifest(cfg, tg, False, list(done)))
        if not quiet:
            print(f"T={rec.T:g}: J={rec.J:.10g} iters={rec.iterations} T0={rec.T0} "
                  f"residual={rec.residual:.2e}", file=sys.stderr)

    try:
        res = run_continuation(
            cfg.spec, ops, cfg.schedule, cfg.solver, horizon_tol=cfg.horizon_tol, tail_tol=cfg.tail_tol,
            kkt_tol=cfg.verify_tol, n_probe=cfg.n_probe, seed=cfg.seed, callback=flush,
        )
    except KeyboardInterrupt:
        storage.write_json(os.path.join(out_dir, "error.json"),
                           {"error": "interrupted", "completed_horizons": done})
        print("interrupted; partial artifacts kept", file=sys.stderr)
        return EXIT_FAIL
    report = res.report
    sol, tg = res.solution, res.tgrid
    storage.write_json(os.path.join(out_dir, "horizon_report.json"), report.to_json())
    if sol is None:
        storage.write_json(os.path.join(out_dir, "error.json"), {"error": report.error, "completed_horizons": []})
        print(f"error: {report.error}", file=sys.stderr)
        return EXIT_FAIL

    T0 = shutdown_time(sol.u, sol.kkt.eps_u, ops.omega_weights)
    kkt_report = verify_kkt(sol.kkt, sol.u, cfg.spec, ops, n_probe=cfg.n_probe, tol=cfg.verify_tol, seed=cfg.seed)
    storage.write_json(os.path.join(out_dir, "kkt.json"),
                       {"T": tg.T, "T0": T0, "bundle": sol.kkt.to_json(), "verification": kkt_report.to_json()})
    if "csv" in cfg.emit:
        storage.atomic_write(os.path.join(out_dir, "iterations.csv"), sol.log_csv())
        storage.atomic_write(os.path.join(out_dir, "monitors.csv"), report.monitors_csv())
    if "json" in cfg.emit and len(report.records) >= 3:
        storage.write_json(os.path.join(out_dir, "monitors.json"), convergence_monitors(report).to_json())
    if "svg" in cfg.emit:
        _plots(out_dir, cfg, ops, sol, tg, T0)

    failed = report.error is not None or not sol.converged
    storage.write_json(os.path.join(out_dir, "manifest.json"), _manifest(cfg, tg, not failed, list(done)))
    if failed:
        msg = report.error or f"solver stopped at the iteration limit (residual {sol.residual:.3e})"
        storage.write_json(os.path.join(out_dir, "error.json"), {"error": msg, "completed_horizons": done})
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_FAIL
    if not quiet:
        print(json.dumps({"T": tg.T, "J": sol.J, "T0": T0, "kkt_passed": kkt_report.passed}))
    return EXIT_OK


# --------------------------------------------------------------------------
# verify


def _load_traj(out_dir, name):
    """Values from the CSV record when present; the binary file is always format-checked."""
    bpath = os.path.join(out_dir, f"{name}.bin")
    cpath = os.path.join(out_dir, f"{name}.csv")
    traj = None
    if os.path.exists(bpath):
        traj = storage.read_binary(bpath)
    if os.path.exists(cpath):
        traj = storage.read_csv(cpath)
    if traj is None:
        raise InputError(f"missing trajectory {name}.bin / {name}.csv in {out_dir}")
    return traj


def run_verify(out_dir, seed=None):
    """Re-check stored artifacts; returns ``(passed, report_dict)``."""
    cfg = parse_config(_read_json(os.path.join(out_dir, "config.json")), out_dir)
    man = _read_json(os.path.join(out_dir, "manifest.json"))
    seed = cfg.seed if seed is None else seed
    try:
        u, y, phi = (_load_traj(out_dir, n) for n in TRAJECTORIES)
    except storage.TrajectoryFormatError as exc:
        raise InputError(f"corrupt artifact: {exc}") from None
    if man.get("N") is None:
        raise InputError("manifest has no completed horizon")
    tg = TimeGrid(man["T"], man["N"])
    ops = build_operators(cfg.spec, cfg.mesh())
    if u.values.shape != (tg.N, ops.n_omega) or y.values.shape != (tg.N + 1, ops.n) or phi.values.shape != y.values.shape:
        raise InputError("trajectory shapes do not match the manifest and mesh")
    data = prepare(cfg.spec, ops, tg)
    fres = step_residuals(data, u.values, y.values)
    ares = adjoint_step_residuals(data, y.values, phi.values)
    # optimality is judged on the state and adjoint recomputed from the stored control
    try:
        fwd = solve_forward(cfg.spec, ops, tg, u.values, data=data)
    except (StepFailure, DivergenceError) as exc:
        return False, {"passed": False, "T": tg.T, "checks": [
            {"name": "forward solve", "passed": False, "worst": float("inf"), "slices": [exc.step]}]}
    adj = solve_adjoint(cfg.spec, ops, tg, fwd.y, data=data)
    bundle = extract_multipliers(u, reduced_gradient(adj.phi, ops), cfg.spec, ops)
    kkt = verify_kkt(bundle, u, cfg.spec, ops, n_probe=cfg.n_probe, tol=cfg.verify_tol, seed=seed)
    checks = [
        {"name": "forward step residual", "passed": bool(fres.max() <= RESIDUAL_TOL), "worst": float(fres.max()),
         "slices": np.flatnonzero(fres > RESIDUAL_TOL).tolist()},
        {"name": "adjoint step residual", "passed": bool(ares.max() <= RESIDUAL_TOL), "worst": float(ares.max()),
         "slices": np.flatnonzero(ares > RESIDUAL_TOL).tolist()},
    ] + [c.to_json() for c in kkt.checks]
    passed = all(c["passed"] for c in checks)
    return passed, {"passed": passed, "T": tg.T, "stationarity_residual": bundle.stationarity_residual,
                    "checks": checks}


def cmd_verify(out_dir, seed=None, quiet=False):
    if not os.path.isdir(out_dir):
        raise InputError(f"{out_dir}: not a directory")
    passed, rep = run_verify(out_dir, seed)
    storage.write_json(os.path.join(out_dir, "verification.json"), rep)
    if not quiet:
        for c in rep["checks"]:
            status = "ok  " if c["passed"] else "FAIL"
            extra = "" if c["passed"] else f"  slices={c['slices'][:10]} worst={c['worst']:.3e}"
            print(f"{status} {c['name']}{extra}")
    return EXIT_OK if passed else EXIT_FAIL


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="sparsectl", description="Sparse optimal control of semilinear parabolic equations.")
    p.add_argument("--version", action="version", version=f"sparsectl {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config's RNG seed")
    common.add_argument("--quiet", action="store_true", help="suppress the report on stdout")
    for verb in ("check", "solve"):
        sp = sub.add_parser(verb, parents=[common])
        sp.add_argument("--config", required=True, help="run configuration (JSON)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--emit", default=None, help="comma-separated subset of csv,json,svg")
    sv = sub.add_parser("verify", parents=[common])
    sv.add_argument("dir", help="artifact directory written by 'solve'")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "verify":
            return cmd_verify(args.dir, args.seed, args.quiet)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.raw = dict(cfg.raw, seed=args.seed)
        if args.emit is not None:
            emit = tuple(e for e in args.emit.split(",") if e)
            bad = set(emit) - {"csv", "json", "svg"}
            if bad:
                raise InputError(f"--emit: unknown kinds {sorted(bad)}")
            cfg.emit = emit
            cfg.raw = dict(cfg.raw, emit=list(emit))
        if args.verb == "check":
            return cmd_check(cfg, args.out, args.quiet)
        out = args.out or cfg.output or "sparsectl-out"
        return cmd_solve(cfg, out, args.quiet)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
