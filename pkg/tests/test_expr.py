import numpy as np
import pytest

from sparsectl.expr import ExpressionError, compile_expression


def test_arithmetic_and_functions():
    e = compile_expression("2*x^2 - sin(pi*y) + exp(t)/4")
    x, y, t = 0.3, 0.25, 1.0
    assert e(x=x, y=y, t=t) == pytest.approx(2 * x**2 - np.sin(np.pi * y) + np.exp(t) / 4, rel=1e-15)


def test_vectorized():
    e = compile_expression("cos(x)*t")
    x = np.linspace(0, 1, 5)
    np.testing.assert_allclose(e(x=x, y=0.0, t=2.0), 2 * np.cos(x))


def test_unary_minus_and_power_precedence():
    assert compile_expression("-x^2")(x=3.0, y=0, t=0) == -9.0


@pytest.mark.parametrize("src", ["__import__('os')", "x.real", "log(x)", "z + 1", "[x]", "x if t else y", "lambda: 1"])
def test_rejects_outside_grammar(src):
    with pytest.raises(ExpressionError):
        compile_expression(src)


def test_syntax_error():
    with pytest.raises(ExpressionError):
        compile_expression("x +* 2")
