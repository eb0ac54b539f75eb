"""Small arithmetic expression language for problem data.

Expressions use ``+ - * / ^``, parentheses, numeric constants, ``pi``,
the functions ``sin``, ``cos``, ``exp`` and a fixed set of variable names.
They are parsed once into a tree and evaluated with numpy broadcasting.

>>> f = compile_expression("1 + x^2 * exp(-t)", ("x", "t"))
>>> float(f(x=2.0, t=0.0))
5.0
"""
from __future__ import annotations

import ast

import numpy as np

FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
CONSTANTS = {"pi": np.pi}


class ExpressionError(ValueError):
    """Raised for expressions outside the supported grammar."""


_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class Expression:
    """A parsed expression; call it with keyword arrays for its variables."""

    def __init__(self, source: str, variables):
        self.source = source
        self.variables = tuple(variables)
        text = source.replace("^", "**")
        try:
            tree = ast.parse(text, mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {source!r}: {exc.msg}") from None
        self._check(tree.body)
        self._tree = tree.body
        self.used = sorted({n.id for n in ast.walk(tree) if isinstance(n, ast.Name)} - set(FUNCTIONS) - set(CONSTANTS))

    def _check(self, node):
        if isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ExpressionError(f"operator {type(node.op).__name__} not allowed in {self.source!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise ExpressionError(f"unary operator not allowed in {self.source!r}")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
                raise ExpressionError(f"unknown function in {self.source!r}")
            if len(node.args) != 1 or node.keywords:
                raise ExpressionError(f"functions take exactly one argument in {self.source!r}")
            self._check(node.args[0])
        elif isinstance(node, ast.Name):
            if node.id not in self.variables and node.id not in CONSTANTS:
                raise ExpressionError(f"unknown name {node.id!r} in {self.source!r}; allowed: {self.variables}")
        elif isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ExpressionError(f"bad constant {node.value!r} in {self.source!r}")
        else:
            raise ExpressionError(f"unsupported syntax {type(node).__name__} in {self.source!r}")

    def _eval(self, node, env):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            val = self._eval(node.operand, env)
            return -val if isinstance(node.op, ast.USub) else val
        if isinstance(node, ast.Call):
            return FUNCTIONS[node.func.id](self._eval(node.args[0], env))
        if isinstance(node, ast.Name):
            if node.id in CONSTANTS:
                return CONSTANTS[node.id]
            return env[node.id]
        return float(node.value)

    def __call__(self, **env):
        missing = [v for v in self.used if v not in env]
        if missing:
            raise ExpressionError(f"missing variables {missing} for {self.source!r}")
        with np.errstate(all="ignore"):
            return np.asarray(self._eval(self._tree, env), dtype=float)

    def __repr__(self):
        return f"Expression({self.source!r})"


def compile_expression(source: str, variables=("x", "y", "t")) -> Expression:
    return Expression(source, variables)
