"""Compare the compiled and pure-Python kernel backends.

Usage: python benchmarks/bench_kernels.py [--cells 32 128] [--steps 640] [--repeat 5]
"""
import argparse
import time

import numpy as np

from sparsectl import kernels
from sparsectl.discretize import Mesh, build_operators, TimeGrid
from sparsectl.forward import prepare
from sparsectl.model import Ball, Domain, Field, Nonlinearity, Omega, ProblemSpec


def make_problem(cells):
    spec = ProblemSpec(
        Domain((1.0,)), Field.constant(0.2), Field.expression("0.5*sin(pi*x)", support=1.0),
        Field.expression("0.1*cos(pi*x)"), Field.constant(0.2, support=2.0),
        Nonlinearity.schloegl(0.25, 1.0), 0.01, Omega(box=((0.25, 0.75),)), Ball(1.0),
    )
    return spec, build_operators(spec, Mesh.for_domain(spec.domain, [cells]))


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(cells, steps, rng):
    spec, ops = make_problem(cells)
    tg = TimeGrid(steps * 0.05, steps)
    data = prepare(spec, ops, tg)
    sub, _, sup = ops.tridiagonal
    load = np.ascontiguousarray(ops.mass * (data.g[1:] + 0.1 * rng.standard_normal((steps, ops.n))))
    y0 = data.y0
    dfdy = np.ascontiguousarray(np.full((steps, ops.n), 0.25))
    rhs = np.ascontiguousarray(ops.mass * rng.standard_normal((steps, ops.n)))
    V = np.ascontiguousarray(rng.standard_normal((steps, ops.n_omega)))
    w = ops.omega_weights
    th = np.full(steps, 0.05)

    def run(be):
        return {
            "forward_poly_sweep": lambda: be.forward_poly_sweep(
                y0, sub, data.diag0, sup, ops.mass, data.coefs, load, tg.dt, 1e-10, 50, 20, 1e12),
            "adjoint_sweep": lambda: be.adjoint_sweep(sub, data.diag0, ops.mass, dfdy, rhs, tg.dt),
            "prox_ball_batch": lambda: be.prox_ball_batch(V, w, th, 0.5),
            "prox_box_batch": lambda: be.prox_box_batch(V, w, th, -0.3, 0.3, 1e-12, 500, 10_000),
        }
    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", type=int, nargs="+", default=[32, 128])
    ap.add_argument("--steps", type=int, default=640)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.compiled is None:
        print("compiled backend not available; only the Python backend can be timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'cells':>6} {'python [ms]':>12} {'compiled [ms]':>14} {'speedup':>8}")
    for cells in args.cells:
        run = cases(cells, args.steps, rng)
        py = run(kernels.python)
        cy = run(kernels.compiled) if kernels.compiled is not None else None
        for name in py:
            tp = best_of(py[name], args.repeat)
            if cy is None:
                print(f"{name:<20} {cells:>6} {tp * 1e3:>12.2f} {'n/a':>14} {'n/a':>8}")
                continue
            tc = best_of(cy[name], args.repeat)
            print(f"{name:<20} {cells:>6} {tp * 1e3:>12.2f} {tc * 1e3:>14.2f} {tp / tc:>7.1f}x")


if __name__ == "__main__":
    main()
