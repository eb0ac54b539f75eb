import json

import numpy as np
import pytest

from sparsectl import kernels
from sparsectl.cli import bundled_config
from sparsectl.discretize import Mesh, TimeGrid, build_operators
from sparsectl.model import ProblemSpec


def load_bundled(name):
    with open(bundled_config(name)) as fh:
        return json.load(fh)


def problem_from(cfg_or_name, **overrides):
    cfg = load_bundled(cfg_or_name) if isinstance(cfg_or_name, str) else cfg_or_name
    prob = dict(cfg["problem"])
    prob.update(overrides)
    for key in [k for k, v in overrides.items() if v is None]:
        prob.pop(key)
    spec = ProblemSpec.from_json(prob)
    ops = build_operators(spec, Mesh.for_domain(spec.domain, cfg["mesh"]["cells"]))
    return spec, ops


@pytest.fixture(scope="session")
def schloegl():
    """Bundled 1D Schlögl tracking problem: ``(spec, ops, dt)``."""
    spec, ops = problem_from("schloegl")
    return spec, ops, load_bundled("schloegl")["schedule"]["dt"]


@pytest.fixture(scope="session")
def schloegl_t4(schloegl):
    spec, ops, dt = schloegl
    return spec, ops, TimeGrid.from_dt(4.0, dt)


@pytest.fixture(params=kernels.available())
def backend(request):
    return kernels.get(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_spec(extent=(1.0,), a=1.0, g=0.0, y0=0.0, yd=0.0, f=None, kappa=0.1, omega=None, constraints=None,
              g_support=None, yd_support=None):
    from sparsectl.model import Ball, Domain, Field, Nonlinearity, Omega

    def fld(v, support=None):
        if isinstance(v, Field):
            return v
        return Field.constant(v, support) if isinstance(v, (int, float)) else Field.expression(v, support)

    f = f if f is not None else Nonlinearity.polynomial([0.0])
    omega = omega if omega is not None else Omega(box=tuple((0.0, e) for e in extent))
    return ProblemSpec(Domain(tuple(extent)), fld(a), fld(g, g_support), fld(y0), fld(yd, yd_support), f, kappa,
                       omega, constraints if constraints is not None else Ball(1.0))


def make_ops(spec, cells):
    return build_operators(spec, Mesh.for_domain(spec.domain, cells))


ACCEPTANCE = {}


def record_criterion(number, title, passed, detail):
    ACCEPTANCE[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
