import math

import numpy as np
import pytest

from sparsectl.model import (
    Ball,
    Box,
    ConfigError,
    Domain,
    Field,
    Nonlinearity,
    NonlinearityConstants,
    NonlinearityEvaluationError,
    ProblemSpec,
    SampleBox,
    UnsupportedFamilyError,
    check_assumptions,
    constraint_from_json,
    paper_constants,
    polynomial_m_f,
)

DOM = Domain((1.0,))


def sample(M_f, n=16):
    span = max(2 * M_f, 1.0) * 1.01
    return SampleBox.for_domain(DOM, (-span, span), t_max=1.0, n=n)


# paper constants -----------------------------------------------------------


def test_polynomial_cubic_constants():
    c = paper_constants(Nonlinearity.polynomial([0.0, 0.0, 1.0]))
    assert c.M_f == 4.0
    assert c.delta == pytest.approx(1 / 6, rel=1e-15)
    assert c.envelope(2.0) == pytest.approx(3 * 8.0)


def test_polynomial_linear_constants():
    c = paper_constants(Nonlinearity.polynomial([1.0]))
    assert c.M_f == 1.0 and c.delta == 0.5


def test_cubic_sine_constants():
    c = paper_constants(Nonlinearity.cubic_sine(1.0, 1e3))
    assert c.M_f == pytest.approx(10 * math.sqrt(10 / 3), rel=1e-15)
    assert c.delta == 0.25
    assert c.envelope(3.0) == pytest.approx(54.0)


def test_exponential_constants_and_checks():
    f = Nonlinearity.exponential(2.0)
    c = paper_constants(f)
    assert c.M_f == 0.0 and c.delta == 1.0
    assert c.envelope(1.0) == pytest.approx(2 * (math.e - 1))
    assert check_assumptions(f, SampleBox.for_domain(DOM, (-5, 5), n=16)).passed


def test_schloegl_constants():
    f = Nonlinearity.schloegl(0.25, 1.0)
    c = paper_constants(f)
    assert c.M_f == 5.0
    assert c.delta == pytest.approx(1 / 7.5, rel=1e-15)
    assert polynomial_m_f(f) == pytest.approx((2.5 - math.sqrt(3.25)) / 6, rel=1e-12)


def test_custom_family_has_no_builtin_constants():
    f = Nonlinearity.custom(lambda p, t, y: y, lambda p, t, y: np.ones_like(y),
                            NonlinearityConstants(1.0, 0.5, lambda y: y))
    with pytest.raises(UnsupportedFamilyError):
        paper_constants(f)


@pytest.mark.parametrize("f", [
    Nonlinearity.polynomial([0.0, 0.0, 1.0]),
    Nonlinearity.polynomial([0.5, -0.3, 2.0]),
    Nonlinearity.schloegl(0.25, 1.0),
    Nonlinearity.exponential(2.0),
    Nonlinearity.cubic_sine(1.0),
])
def test_builtin_families_satisfy_assumptions(f):
    rep = check_assumptions(f, sample(paper_constants(f).M_f))
    assert rep.passed, [c for c in rep.checks if not c.passed]


@pytest.mark.parametrize("f", [
    Nonlinearity.polynomial([0.5, -0.3, 2.0]),
    Nonlinearity.schloegl(0.25, 1.0),
    Nonlinearity.cubic_sine(1.0),
])
def test_envelope_sandwich_pointwise(f):
    c = paper_constants(f)
    ys = np.concatenate([np.linspace(c.M_f, 4 * c.M_f + 1, 200), -np.linspace(c.M_f, 4 * c.M_f + 1, 200)])
    fv = np.abs(f.value(np.full((len(ys), 1), 0.5), 0.0, ys))
    env = np.abs(c.envelope(ys))
    assert np.all(c.delta * env <= fv * (1 + 1e-12))
    assert np.all(fv <= env * (1 + 1e-12))


def test_sign_violation_reported_with_witness():
    f = Nonlinearity.custom(lambda p, t, y: -(y**3), lambda p, t, y: -3 * y**2,
                            NonlinearityConstants(1.0, 0.5, lambda y: np.asarray(y) ** 3))
    rep = check_assumptions(f, sample(1.0))
    assert not rep.passed
    bad = rep["growth envelope"]
    assert not bad.passed and bad.witness is not None


def test_f0_violation():
    f = Nonlinearity.custom(lambda p, t, y: y**3 + 1.0, lambda p, t, y: 3 * y**2,
                            NonlinearityConstants(2.0, 0.1, lambda y: 2 * np.asarray(y) ** 3))
    assert not check_assumptions(f, sample(2.0))["f(x,t,0)=0"].passed


def test_non_finite_callback_raises():
    f = Nonlinearity.custom(lambda p, t, y: np.where(y > 1.5, np.nan, y), lambda p, t, y: np.ones_like(y),
                            NonlinearityConstants(1.0, 0.5, lambda y: y))
    with pytest.raises(NonlinearityEvaluationError) as exc:
        check_assumptions(f, sample(1.0))
    assert exc.value.y > 1.5


def test_sample_box_must_cover_two_M_f():
    with pytest.raises(ValueError):
        check_assumptions(Nonlinearity.schloegl(0.25, 1.0), SampleBox.for_domain(DOM, (-5, 5)))


def test_C_M_f_is_max_abs_derivative_on_M_f_ball():
    f = Nonlinearity.schloegl(0.25, 1.0)
    rep = check_assumptions(f, sample(5.0))
    ys = np.linspace(-5, 5, 200001)
    assert rep.C_M_f == pytest.approx(np.max(np.abs(3 * ys**2 - 2.5 * ys + 0.25)), rel=1e-6)


def test_derivative_matches_finite_difference(rng):
    fams = [Nonlinearity.schloegl(0.25, 1.0), Nonlinearity.exponential(Field.expression("1+x*t")),
            Nonlinearity.cubic_sine(Field.expression("2+sin(x)"))]
    pts = rng.random((1000, 1))
    ys = rng.uniform(-3, 3, 1000)
    for f in fams:
        for k in range(0, 1000, 100):
            p, y = pts[k:k + 100], ys[k:k + 100]
            h = 1e-5 * np.maximum(1, np.abs(y))
            fd = (f.value(p, 0.7, y + h) - f.value(p, 0.7, y - h)) / (2 * h)
            d = f.derivative(p, 0.7, y)
            assert np.all(np.abs(fd - d) <= 1e-6 * np.maximum(1.0, np.abs(d)))


def test_time_dependent_coefficients_use_infimum():
    f = Nonlinearity.polynomial([0.0, 0.0, Field.expression("2 + sin(pi*x)")])
    pts = DOM.sample_points(64)
    c = f.resolved_constants(pts, np.array([0.0]))
    lead = 2 + np.sin(np.pi * pts[:, 0])
    K, d0 = lead.max(), lead.min()
    assert c.M_f == pytest.approx(4 * K / d0, rel=1e-14)
    assert c.delta == pytest.approx(d0 / (6 * K), rel=1e-14)


# fields, constraints, specs ---------------------------------------------------


def test_field_kinds():
    pts = np.array([[0.1], [0.9]])
    assert np.all(Field.constant(2.0).evaluate(pts) == 2.0)
    np.testing.assert_allclose(Field.expression("x*t").evaluate(pts, 2.0), [0.2, 1.8])
    g = Field.grid([1.0, 2.0], (1.0,))
    np.testing.assert_array_equal(g.evaluate(pts), [1.0, 2.0])
    gt = Field.grid([[0.0, 0.0], [2.0, 4.0]], (1.0,), times=[0.0, 1.0])
    np.testing.assert_allclose(gt.evaluate(pts, 0.5), [1.0, 2.0])
    assert np.all(Field.constant(1.0, support=1.0).evaluate(pts, 1.5) == 0.0)


def test_constraints_validation():
    assert constraint_from_json({"kind": "ball", "gamma": 2}).gamma == 2.0
    with pytest.raises(ConfigError):
        Box(0.5, 1.0)
    with pytest.raises(ConfigError):
        Ball(0.0)
    with pytest.raises(ConfigError):
        constraint_from_json({"kind": "simplex"})


def test_problem_spec_json_roundtrip():
    obj = {
        "name": "t", "domain": {"extent": [1.0]}, "a": 1.0, "g": "sin(x)", "g_support": 1.0, "y0": 0.1,
        "yd": {"grid": [0.0, 1.0]}, "f": {"family": "schloegl", "roots": [0.25, 1.0]}, "kappa": 0.1,
        "omega": {"box": [[0.2, 0.8]]}, "constraints": {"kind": "box", "alpha": -1.0, "beta": 1.0},
    }
    spec = ProblemSpec.from_json(obj)
    again = ProblemSpec.from_json(spec.to_json())
    pts = np.linspace(0.05, 0.95, 7)[:, None]
    for name in ("a", "g", "y0", "yd"):
        np.testing.assert_array_equal(getattr(spec, name).evaluate(pts, 0.5), getattr(again, name).evaluate(pts, 0.5))
    assert again.constraints == spec.constraints


def test_problem_spec_rejects_bad_kappa_and_expression():
    base = {"domain": {"extent": [1.0]}, "f": {"family": "schloegl", "roots": [0.25, 1]},
            "omega": {"box": [[0, 1]]}, "constraints": {"kind": "ball", "gamma": 1}}
    with pytest.raises(ConfigError):
        ProblemSpec.from_json(dict(base, kappa=0.0))
    with pytest.raises(ConfigError) as exc:
        ProblemSpec.from_json(dict(base, kappa=1.0, g="import os"))
    assert exc.value.field == "g"
