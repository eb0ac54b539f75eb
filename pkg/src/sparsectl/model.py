"""Continuous problem data: fields, nonlinearities, constraint sets.

The state equation is

    y_t - Laplace(y) + a y + f(x, t, y) = g + u chi_omega,   d_n y = 0,

and the cost tracks ``y_d`` in L2 plus ``kappa`` times the L1-in-time,
L2-in-space norm of the control.  Everything here is immutable once built.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .expr import Expression, ExpressionError, compile_expression

__all__ = [
    "ConfigError",
    "Field",
    "Domain",
    "Omega",
    "Ball",
    "Box",
    "NonlinearityConstants",
    "Nonlinearity",
    "NonlinearityEvaluationError",
    "UnsupportedFamilyError",
    "SampleBox",
    "AssumptionCheck",
    "AssumptionReport",
    "ProblemSpec",
    "check_assumptions",
    "paper_constants",
    "polynomial_m_f",
]


class ConfigError(ValueError):
    """Invalid problem data; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class NonlinearityEvaluationError(ArithmeticError):
    """A nonlinearity callback produced a non-finite value."""

    def __init__(self, x, t, y, what="value"):
        super().__init__(f"non-finite {what} of f at x={x}, t={t}, y={y}")
        self.x, self.t, self.y = x, t, y


class UnsupportedFamilyError(ValueError):
    pass


# --------------------------------------------------------------------------
# fields


class Field:
    """A scalar field on the domain, optionally time dependent.

    ``kind`` is one of ``"constant"``, ``"expression"``, ``"grid"`` (cell
    values on a uniform grid over the domain, optionally with a time axis)
    or ``"callable"``.  ``support`` is a time beyond which the field is
    identically zero.
    """

    def __init__(self, kind, data, *, extent=None, times=None, support=None, source=None):
        self.kind = kind
        self.data = data
        self.extent = None if extent is None else tuple(float(e) for e in extent)
        self.times = None if times is None else np.asarray(times, dtype=float)
        self.support = None if support is None else float(support)
        self.source = source

    @classmethod
    def constant(cls, value, support=None):
        return cls("constant", float(value), support=support, source=float(value))

    @classmethod
    def expression(cls, text, support=None, variables=("x", "y", "t")):
        return cls("expression", compile_expression(text, variables), support=support, source=text)

    @classmethod
    def from_callable(cls, fn, support=None):
        """``fn(points, t) -> values``; not JSON serializable."""
        return cls("callable", fn, support=support)

    @classmethod
    def grid(cls, values, extent, times=None, support=None):
        values = np.asarray(values, dtype=float)
        src = {"grid": values.tolist()}
        if times is not None:
            src["times"] = list(map(float, times))
        return cls("grid", values, extent=extent, times=times, support=support, source=src)

    @classmethod
    def from_json(cls, obj, extent, name="field", support=None):
        if isinstance(obj, bool):
            raise ConfigError("expected number, expression string or grid object", name)
        if isinstance(obj, (int, float)):
            return cls.constant(obj, support=support)
        if isinstance(obj, str):
            try:
                return cls.expression(obj, support=support)
            except ExpressionError as exc:
                raise ConfigError(str(exc), name) from None
        if isinstance(obj, dict) and "grid" in obj:
            values = np.asarray(obj["grid"], dtype=float)
            times = obj.get("times")
            if times is not None and len(times) != values.shape[0]:
                raise ConfigError("grid time axis length differs from 'times'", name)
            if not np.all(np.isfinite(values)):
                raise ConfigError("grid contains non-finite values", name)
            return cls.grid(values, extent, times=times, support=support)
        raise ConfigError("expected number, expression string or grid object", name)

    def to_json(self):
        if self.kind == "callable":
            raise TypeError("callable fields cannot be serialized")
        return self.source

    @property
    def is_constant(self):
        return self.kind == "constant"

    def _grid_lookup(self, values, points):
        dim = points.shape[1]
        shape = values.shape[-dim:]
        idx = []
        for ax in range(dim):
            n = shape[ax]
            i = np.floor(points[:, ax] / self.extent[ax] * n).astype(int)
            idx.append(np.clip(i, 0, n - 1))
        return values[(Ellipsis, *idx)]

    def evaluate(self, points, t=0.0):
        """Values at ``points`` (shape ``(n, dim)``) and time ``t``."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        if self.support is not None and t > self.support:
            return np.zeros(n)
        if self.kind == "constant":
            return np.full(n, self.data)
        if self.kind == "expression":
            env = {"x": points[:, 0], "y": points[:, 1] if points.shape[1] > 1 else np.zeros(n), "t": t}
            return np.broadcast_to(self.data(**env), (n,)).astype(float)
        if self.kind == "callable":
            return np.broadcast_to(np.asarray(self.data(points, t), dtype=float), (n,)).copy()
        vals = self.data
        if self.times is None:
            return self._grid_lookup(vals, points).astype(float)
        tt = self.times
        if t <= tt[0]:
            return self._grid_lookup(vals[0], points)
        if t >= tt[-1]:
            return self._grid_lookup(vals[-1], points)
        k = int(np.searchsorted(tt, t) - 1)
        w = (t - tt[k]) / (tt[k + 1] - tt[k])
        return (1 - w) * self._grid_lookup(vals[k], points) + w * self._grid_lookup(vals[k + 1], points)

    def sup_abs(self, points, times):
        return max(float(np.max(np.abs(self.evaluate(points, t)))) for t in times)

    def inf(self, points, times):
        return min(float(np.min(self.evaluate(points, t))) for t in times)

    def __repr__(self):
        return f"Field({self.kind}, {self.source!r})"


# --------------------------------------------------------------------------
# geometry and constraints


@dataclass(frozen=True)
class Domain:
    """The interval ``[0, L]`` or the rectangle ``[0, Lx] x [0, Ly]``."""

    extent: tuple

    def __post_init__(self):
        ext = tuple(float(e) for e in self.extent)
        if len(ext) not in (1, 2):
            raise ConfigError("only 1D and 2D domains are supported", "domain.extent")
        if any(not (e > 0 and math.isfinite(e)) for e in ext):
            raise ConfigError("extents must be positive", "domain.extent")
        object.__setattr__(self, "extent", ext)

    @property
    def dim(self):
        return len(self.extent)

    @property
    def volume(self):
        return float(np.prod(self.extent))

    def sample_points(self, n=64):
        axes = [(np.arange(n) + 0.5) / n * e for e in self.extent]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class Omega:
    """Control region: an axis-aligned box or an explicit list of cell indices."""

    box: Optional[tuple] = None
    cells: Optional[tuple] = None

    def __post_init__(self):
        if (self.box is None) == (self.cells is None):
            raise ConfigError("give exactly one of 'box' or 'cells'", "omega")
        if self.box is not None:
            box = tuple(tuple(float(v) for v in b) for b in self.box)
            for lo, hi in box:
                if not hi > lo:
                    raise ConfigError("box bounds must satisfy lo < hi", "omega.box")
            object.__setattr__(self, "box", box)
        else:
            cells = tuple(int(c) for c in self.cells)
            if not cells:
                raise ConfigError("omega must contain at least one cell", "omega.cells")
            object.__setattr__(self, "cells", cells)

    def to_json(self):
        return {"box": [list(b) for b in self.box]} if self.box is not None else {"cells": list(self.cells)}


@dataclass(frozen=True)
class Ball:
    """L2(omega) ball of radius ``gamma``; ``math.inf`` disables the bound."""

    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError("ball radius gamma must be positive", "constraints.gamma")

    kind = "ball"

    def to_json(self):
        return {"kind": "ball", "gamma": self.gamma}


@dataclass(frozen=True)
class Box:
    """Pointwise bounds ``alpha <= u <= beta`` with ``alpha < 0 < beta``."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha < 0 < self.beta):
            raise ConfigError(
                f"box bounds violate alpha < 0 < beta (alpha={self.alpha}, beta={self.beta})",
                "constraints",
            )

    kind = "box"

    def to_json(self):
        return {"kind": "box", "alpha": self.alpha, "beta": self.beta}


def constraint_from_json(obj):
    kind = obj.get("kind")
    if kind == "ball":
        return Ball(float(obj["gamma"]))
    if kind == "box":
        return Box(float(obj["alpha"]), float(obj["beta"]))
    raise ConfigError(f"unknown constraint kind {kind!r}", "constraints.kind")


# --------------------------------------------------------------------------
# nonlinearities


@dataclass(frozen=True)
class NonlinearityConstants:
    """Growth constants of ``f``.

    ``envelope`` is the comparison function ``fhat`` with
    ``delta |fhat(y)| <= |f(x,t,y)| <= |fhat(y)|`` for ``|y| >= M_f``.
    """

    M_f: float
    delta: float
    envelope: Callable
    m_f: Optional[float] = None
    envelope_label: str = ""

    def __post_init__(self):
        if not self.M_f >= 0:
            raise ConfigError("M_f must be nonnegative", "constants.M_f")
        if not self.delta > 0:
            raise ConfigError("delta must be positive", "constants.delta")
        if self.m_f is not None and not (0 < self.m_f and (self.M_f == 0 or self.m_f < self.M_f)):
            raise ConfigError("m_f must lie in (0, M_f)", "constants.m_f")


_FAMILIES = ("polynomial", "exponential", "cubic_sine", "custom")


class Nonlinearity:
    """The reaction term ``f(x, t, y)`` with its derivative in ``y``.

    Use the constructors :meth:`polynomial`, :meth:`schloegl`,
    :meth:`exponential`, :meth:`cubic_sine` and :meth:`custom`.
    """

    def __init__(self, family, params, constants=None, spec=None):
        if family not in _FAMILIES:
            raise ConfigError(f"unknown nonlinearity family {family!r}", "f.family")
        self.family = family
        self.params = params
        self.constants = constants
        self.spec = spec

    # constructors -----------------------------------------------------

    @classmethod
    def polynomial(cls, coefficients, constants=None, spec=None):
        """``f = sum_k a_k(x,t) y^k`` for ``k = 1..2m+1``; ``a_k`` are fields or numbers."""
        coefs = [c if isinstance(c, Field) else Field.constant(c) for c in coefficients]
        if len(coefs) % 2 == 0:
            raise ConfigError("polynomial degree must be odd (2m+1)", "f.coefficients")
        return cls("polynomial", {"coefficients": coefs}, constants, spec)

    @classmethod
    def schloegl(cls, xi1, xi2, constants=None):
        """``f = y (y - xi1)(y - xi2)``."""
        spec = {"family": "schloegl", "roots": [xi1, xi2]}
        return cls.polynomial([xi1 * xi2, -(xi1 + xi2), 1.0], constants, spec)

    @classmethod
    def exponential(cls, eta, constants=None, spec=None):
        """``f = eta(x,t) (exp(y) - 1)``."""
        eta = eta if isinstance(eta, Field) else Field.constant(eta)
        return cls("exponential", {"eta": eta}, constants, spec)

    @classmethod
    def cubic_sine(cls, eta, amplitude=1e3, constants=None, spec=None):
        """``f = eta(x,t) (y^3 + amplitude sin(y))``."""
        eta = eta if isinstance(eta, Field) else Field.constant(eta)
        return cls("cubic_sine", {"eta": eta, "amplitude": float(amplitude)}, constants, spec)

    @classmethod
    def custom(cls, value, derivative, constants, spec=None):
        """``value(points, t, y)`` and ``derivative(points, t, y)``; constants are mandatory."""
        if constants is None:
            raise ConfigError("custom nonlinearities must supply M_f, delta and the envelope", "f.constants")
        return cls("custom", {"value": value, "derivative": derivative}, constants, spec)

    # evaluation -------------------------------------------------------

    @property
    def degree(self):
        return len(self.params["coefficients"]) if self.family == "polynomial" else None

    def poly_coefficients(self, points, t):
        """Rows ``c_0..c_D`` of ``f = sum c_j y^j`` at the points, or ``None``."""
        if self.family != "polynomial":
            return None
        coefs = self.params["coefficients"]
        n = len(points)
        out = np.zeros((len(coefs) + 1, n))
        for k, c in enumerate(coefs, start=1):
            out[k] = c.evaluate(points, t)
        return out

    @property
    def time_dependent(self):
        if self.family == "polynomial":
            return any(c.kind != "constant" for c in self.params["coefficients"])
        if self.family in ("exponential", "cubic_sine"):
            return not self.params["eta"].is_constant
        return True

    def _eval(self, points, t, y, deriv):
        y = np.asarray(y, dtype=float)
        fam = self.family
        if fam == "polynomial":
            c = self.poly_coefficients(points, t)
            if deriv:
                acc = np.zeros_like(y)
                for j in range(c.shape[0] - 1, 0, -1):
                    acc = acc * y + j * c[j]
                return acc
            acc = np.zeros_like(y)
            for j in range(c.shape[0] - 1, -1, -1):
                acc = acc * y + c[j]
            return acc
        if fam == "exponential":
            eta = self.params["eta"].evaluate(points, t)
            with np.errstate(over="ignore"):
                return eta * np.exp(y) if deriv else eta * np.expm1(y)
        if fam == "cubic_sine":
            eta = self.params["eta"].evaluate(points, t)
            amp = self.params["amplitude"]
            if deriv:
                return eta * (3 * y**2 + amp * np.cos(y))
            return eta * (y**3 + amp * np.sin(y))
        fn = self.params["derivative" if deriv else "value"]
        return np.broadcast_to(np.asarray(fn(points, t, y), dtype=float), y.shape)

    def value(self, points, t, y):
        return self._eval(points, t, y, False)

    def derivative(self, points, t, y):
        return self._eval(points, t, y, True)

    # constants --------------------------------------------------------

    def coefficient_bounds(self, points=None, times=None):
        """``(K, delta0)``: sup norm of the coefficients and the lower bound of the leading one."""
        if self.family == "polynomial":
            coefs = self.params["coefficients"]
            fields = coefs
            lead = coefs[-1]
        elif self.family in ("exponential", "cubic_sine"):
            fields = [self.params["eta"]]
            lead = self.params["eta"]
        else:
            raise UnsupportedFamilyError("custom nonlinearities have no built-in constants")
        if all(c.is_constant for c in fields):
            return max(abs(c.data) for c in fields), lead.data
        if points is None or times is None:
            raise ValueError("non-constant coefficients need sample points and times")
        return max(c.sup_abs(points, times) for c in fields), lead.inf(points, times)

    def resolved_constants(self, points=None, times=None):
        """User-supplied constants, or the built-in family formulas."""
        if self.constants is not None:
            return self.constants
        return paper_constants(self, points, times)

    def to_json(self):
        if self.spec is None:
            raise TypeError("nonlinearity was not built from JSON and cannot be serialized")
        return self.spec

    @classmethod
    def from_json(cls, obj, extent):
        fam = obj.get("family")
        consts = obj.get("constants")
        user_consts = None
        if consts is not None:
            env = consts.get("envelope")
            if env is None:
                raise ConfigError("constants need an 'envelope' expression in s", "f.constants.envelope")
            try:
                env_expr = compile_expression(env, ("s",))
            except ExpressionError as exc:
                raise ConfigError(str(exc), "f.constants.envelope") from None
            user_consts = NonlinearityConstants(
                M_f=float(consts["M_f"]),
                delta=float(consts["delta"]),
                m_f=None if consts.get("m_f") is None else float(consts["m_f"]),
                envelope=lambda y, _e=env_expr: _e(s=y),
                envelope_label=env,
            )
        m_f = obj.get("m_f")
        if fam == "schloegl":
            xi1, xi2 = map(float, obj["roots"])
            nl = cls.schloegl(xi1, xi2)
            nl.spec = obj
        elif fam == "polynomial":
            coefs = [Field.from_json(c, extent, f"f.coefficients[{i}]") for i, c in enumerate(obj["coefficients"])]
            nl = cls.polynomial(coefs, spec=obj)
        elif fam == "exponential":
            nl = cls.exponential(Field.from_json(obj.get("eta", 1.0), extent, "f.eta"), spec=obj)
        elif fam == "cubic_sine":
            nl = cls.cubic_sine(
                Field.from_json(obj.get("eta", 1.0), extent, "f.eta"), obj.get("amplitude", 1e3), spec=obj
            )
        elif fam == "custom":
            if user_consts is None:
                raise ConfigError("custom nonlinearities must supply constants", "f.constants")
            try:
                v = compile_expression(obj["value"], ("x", "y", "t", "s"))
                d = compile_expression(obj["derivative"], ("x", "y", "t", "s"))
            except ExpressionError as exc:
                raise ConfigError(str(exc), "f") from None
            except KeyError as exc:
                raise ConfigError(f"missing {exc.args[0]!r}", "f") from None

            def _bind(expr):
                def fn(points, t, y):
                    pts = np.atleast_2d(points)
                    yy = pts[:, 1] if pts.shape[1] > 1 else 0.0
                    return expr(x=pts[:, 0], y=yy, t=t, s=y)

                return fn

            return cls.custom(_bind(v), _bind(d), user_consts, spec=obj)
        else:
            raise ConfigError(f"unknown nonlinearity family {fam!r}", "f.family")
        if user_consts is not None:
            nl.constants = user_consts
        elif m_f is not None:
            base = paper_constants(nl)
            nl.constants = NonlinearityConstants(base.M_f, base.delta, base.envelope, float(m_f), base.envelope_label)
        return nl

    def __repr__(self):
        return f"Nonlinearity({self.family})"


def paper_constants(f: Nonlinearity, points=None, times=None) -> NonlinearityConstants:
    """Growth constants of the three built-in families.

    Polynomial of degree ``2m+1`` with ``K = max ||a_k||_inf`` and leading
    coefficient ``>= delta0``: ``M_f = max(1, 4 m K / delta0)``,
    ``delta = delta0 / (2 (2m+1) K)``, ``fhat = (2m+1) K y^(2m+1)``.
    Exponential ``eta (e^y - 1)``: ``M_f = 0``, ``delta = delta0/||eta||``,
    ``fhat = ||eta|| (e^y - 1)``.  Cubic-sine ``eta (y^3 + 1e3 sin y)``:
    ``M_f = 10 sqrt(10/3)``, ``delta = delta0 / (4 ||eta||)``,
    ``fhat = 2 ||eta|| y^3``.
    """
    if f.family == "custom":
        raise UnsupportedFamilyError("constants of custom nonlinearities must be user-supplied")
    K, d0 = f.coefficient_bounds(points, times)
    if not d0 > 0:
        raise ConfigError(f"leading coefficient must be bounded below by a positive delta0 (got {d0})", "f")
    if f.family == "polynomial":
        p = f.degree
        m = (p - 1) // 2
        M_f = max(1.0, 4.0 * m * K / d0)
        delta = d0 / (2.0 * p * K)
        return NonlinearityConstants(
            M_f, delta, lambda y, _c=p * K, _p=p: _c * np.asarray(y, dtype=float) ** _p, None, f"{p * K:g}*s^{p}"
        )
    if f.family == "exponential":
        return NonlinearityConstants(
            0.0, d0 / K, lambda y, _K=K: _K * np.expm1(np.asarray(y, dtype=float)), None, f"{K:g}*(exp(s)-1)"
        )
    amp = f.params["amplitude"]
    if amp != 1e3:
        warnings.warn("cubic-sine constants are derived for amplitude 1e3; M_f is rescaled", stacklevel=2)
    # 3 y^2 >= amp is where the derivative of y^3 + amp sin y turns nonnegative
    M_f = 10.0 * math.sqrt(10.0 / 3.0) if amp == 1e3 else math.sqrt(amp / 3.0)
    return NonlinearityConstants(
        M_f, d0 / (4.0 * K), lambda y, _K=K: 2.0 * _K * np.asarray(y, dtype=float) ** 3, None, f"{2 * K:g}*s^3"
    )


def polynomial_m_f(f: Nonlinearity):
    """Largest ``m`` with ``f' >= 0`` on ``(-m, m)`` for a constant-coefficient polynomial.

    Returns ``None`` when ``f'(0) <= 0``.
    """
    if f.family != "polynomial" or f.time_dependent:
        raise UnsupportedFamilyError("needs a polynomial with constant coefficients")
    c = np.array([co.data for co in f.params["coefficients"]])
    d = c * np.arange(1, len(c) + 1)  # coefficients of f' in ascending powers
    if not d[0] > 0:
        return None
    roots = np.roots(d[::-1])
    real = roots[np.abs(roots.imag) < 1e-12].real
    return float(np.min(np.abs(real))) if real.size else math.inf


# --------------------------------------------------------------------------
# assumption checking


@dataclass(frozen=True)
class SampleBox:
    """Where the pointwise hypotheses on ``f`` are sampled."""

    y_min: float
    y_max: float
    n_y: int = 64
    points: np.ndarray = field(default_factory=lambda: np.array([[0.5]]))
    times: np.ndarray = field(default_factory=lambda: np.array([0.0]))

    @classmethod
    def for_domain(cls, domain: Domain, y_range, t_max=1.0, n=64):
        lo, hi = y_range
        times = np.linspace(0.0, t_max, n)
        return cls(float(lo), float(hi), n, domain.sample_points(n), times)

    def y_grid(self, extra=()):
        ys = np.linspace(self.y_min, self.y_max, self.n_y)
        return np.unique(np.concatenate([ys, [0.0], [e for e in extra if self.y_min <= e <= self.y_max]]))


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    witness: Optional[tuple] = None
    detail: str = ""

    def to_json(self):
        return {"name": self.name, "passed": self.passed, "witness": self.witness, "detail": self.detail}


@dataclass
class AssumptionReport:
    checks: list
    M_f: float
    delta: float
    m_f: Optional[float]
    C_M_f: float

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self):
        return {
            "passed": self.passed,
            "constants": {"M_f": self.M_f, "delta": self.delta, "m_f": self.m_f, "C_M_f": self.C_M_f},
            "checks": [c.to_json() for c in self.checks],
        }


def _witness(points, t, ys, mask):
    i, j = np.unravel_index(int(np.argmax(mask)), mask.shape)
    return (points[i].tolist(), float(t), float(ys[j]))


def check_assumptions(f: Nonlinearity, sample: SampleBox, rtol=1e-12) -> AssumptionReport:
    """Check the structural hypotheses on ``f`` on a sample grid.

    Reports f(x,t,0)=0, the asymptotic envelope/sign/monotonicity
    conditions for ``|y| >= M_f``, local boundedness of the derivative, the
    global lower derivative bound ``-C_{M_f}``, and monotonicity on
    ``|y| < m_f`` when ``m_f`` is set.
    """
    consts = f.resolved_constants(sample.points, sample.times)
    M_f, delta, m_f = consts.M_f, consts.delta, consts.m_f
    if M_f > 0 and (sample.y_min > -2 * M_f or sample.y_max < 2 * M_f):
        raise ValueError(f"sample box must cover [-2 M_f, 2 M_f] = [{-2 * M_f}, {2 * M_f}]")
    ys = sample.y_grid(extra=(-M_f, M_f))
    pts = np.asarray(sample.points, dtype=float)
    npt = len(pts)
    far = np.abs(ys) >= M_f
    near = np.abs(ys) <= M_f
    env = np.asarray(consts.envelope(ys), dtype=float)
    h = 1e-6 * np.maximum(1.0, np.abs(ys))
    env_d = (np.asarray(consts.envelope(ys + h)) - np.asarray(consts.envelope(ys - h))) / (2 * h)

    fail = {k: None for k in ("f0", "lower", "upper", "sign", "fprime_far", "env_mono", "lower_bound", "mf")}
    P = np.repeat(pts, len(ys), axis=0)
    Y = np.tile(ys, npt)

    def evaluate(t):
        v = f.value(P, t, Y).reshape(npt, len(ys))
        d = f.derivative(P, t, Y).reshape(npt, len(ys))
        for arr, what in ((v, "value"), (d, "derivative")):
            bad = ~np.isfinite(arr)
            if bad.any():
                x, tt, yy = _witness(pts, t, ys, bad)
                raise NonlinearityEvaluationError(x, tt, yy, what)
        return v, d

    # first pass fixes C_{M_f}; the lower derivative bound needs it
    C = 0.0
    for t in sample.times:
        _, d = evaluate(t)
        if near.any():
            C = max(C, float(np.max(np.abs(d[:, near]))))
    tol = rtol * max(1.0, C)

    zero_col = ys == 0.0
    for t in sample.times:
        v, d = evaluate(t)
        bad = np.zeros_like(v, dtype=bool)
        bad[:, zero_col] = np.abs(v[:, zero_col]) > rtol
        if fail["f0"] is None and bad.any():
            fail["f0"] = _witness(pts, t, ys, bad)
        if far.any():
            av = np.abs(v)
            ae = np.abs(env)[None, :]
            slack = rtol * np.maximum(ae, av) + 1e-300
            lo = far[None, :] & (delta * ae > av + slack)
            hi = far[None, :] & (av > ae + slack)
            sg = far[None, :] & ((np.sign(v) != np.sign(ys)[None, :]) | (np.sign(env) != np.sign(ys))[None, :])
            m1 = far[None, :] & (d < -tol)
            for key, m in (("lower", lo), ("upper", hi), ("sign", sg), ("fprime_far", m1)):
                if fail[key] is None and m.any():
                    fail[key] = _witness(pts, t, ys, m)
        m2 = d < -C - tol
        if fail["lower_bound"] is None and m2.any():
            fail["lower_bound"] = _witness(pts, t, ys, m2)
        if m_f is not None:
            m3 = (np.abs(ys) < m_f)[None, :] & (d < -tol)
            if fail["mf"] is None and m3.any():
                fail["mf"] = _witness(pts, t, ys, m3)
    if far.any():
        env_bad = far & (env_d < -rtol * np.maximum(1.0, np.abs(env_d)))
        if env_bad.any():
            fail["env_mono"] = (None, None, float(ys[np.argmax(env_bad)]))

    checks = [
        AssumptionCheck("f(x,t,0)=0", fail["f0"] is None, fail["f0"]),
        AssumptionCheck(
            "growth envelope",
            all(fail[k] is None for k in ("lower", "upper", "sign", "fprime_far", "env_mono")),
            next((fail[k] for k in ("lower", "upper", "sign", "fprime_far", "env_mono") if fail[k] is not None), None),
            "; ".join(
                name
                for key, name in (
                    ("lower", "lower envelope bound violated"),
                    ("upper", "upper envelope bound violated"),
                    ("sign", "sign condition violated"),
                    ("fprime_far", "df/dy < 0 for |y| >= M_f"),
                    ("env_mono", "envelope not monotone"),
                )
                if fail[key] is not None
            ),
        ),
        AssumptionCheck("local derivative bound", math.isfinite(C), None, f"C_M_f = {C:.6g}"),
        AssumptionCheck("derivative lower bound", fail["lower_bound"] is None, fail["lower_bound"]),
    ]
    if m_f is not None:
        checks.append(AssumptionCheck("monotone near zero", fail["mf"] is None, fail["mf"], f"m_f = {m_f:.6g}"))
    return AssumptionReport(checks, M_f, delta, m_f, C)


# --------------------------------------------------------------------------
# problem


@dataclass(frozen=True)
class ProblemSpec:
    """All data of the control problem."""

    domain: Domain
    a: Field
    g: Field
    y0: Field
    yd: Field
    f: Nonlinearity
    kappa: float
    omega: Omega
    constraints: object
    name: str = "problem"

    def __post_init__(self):
        if not (self.kappa > 0 and math.isfinite(self.kappa)):
            raise ConfigError("kappa must be positive", "kappa")
        if not isinstance(self.constraints, (Ball, Box)):
            raise ConfigError("constraints must be a Ball or a Box", "constraints")

    @classmethod
    def from_json(cls, obj):
        try:
            dom = Domain(tuple(obj["domain"]["extent"]))
            ext = dom.extent
            a = Field.from_json(obj.get("a", 1.0), ext, "a")
            g = Field.from_json(obj.get("g", 0.0), ext, "g", support=obj.get("g_support"))
            y0 = Field.from_json(obj.get("y0", 0.0), ext, "y0")
            yd = Field.from_json(obj.get("yd", 0.0), ext, "yd", support=obj.get("yd_support"))
            f = Nonlinearity.from_json(obj["f"], ext)
            om = obj["omega"]
            omega = Omega(box=om.get("box"), cells=om.get("cells"))
            cons = constraint_from_json(obj["constraints"])
            return cls(dom, a, g, y0, yd, f, float(obj["kappa"]), omega, cons, obj.get("name", "problem"))
        except KeyError as exc:
            raise ConfigError(f"missing required entry {exc.args[0]!r}") from None

    def to_json(self):
        out = {
            "name": self.name,
            "domain": {"extent": list(self.domain.extent)},
            "a": self.a.to_json(),
            "g": self.g.to_json(),
            "y0": self.y0.to_json(),
            "yd": self.yd.to_json(),
            "f": self.f.to_json(),
            "kappa": self.kappa,
            "omega": self.omega.to_json(),
            "constraints": self.constraints.to_json(),
        }
        if self.g.support is not None:
            out["g_support"] = self.g.support
        if self.yd.support is not None:
            out["yd_support"] = self.yd.support
        return out
