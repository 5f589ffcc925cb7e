"""Small closed-form expression grammar for config-supplied fields.

Grammar: numbers, + - * / ^ (power), parentheses, the functions sin, cos,
exp, tanh, the constant pi and the variables x1, x2, x3, s, t, zeta.
Parsing is delegated to sympy after a whitelist check of every token, so
the same object can be differentiated symbolically and evaluated with numpy.
"""

from __future__ import annotations

import re
from typing import Iterable

import numpy as np
import sympy
from sympy.parsing.sympy_parser import convert_xor, parse_expr, standard_transformations

VARIABLES = ("x1", "x2", "x3", "s", "t", "zeta")
SYMBOLS = {name: sympy.Symbol(name, real=True) for name in VARIABLES}
FUNCTIONS = {"sin": sympy.sin, "cos": sympy.cos, "exp": sympy.exp, "tanh": sympy.tanh}
CONSTANTS = {"pi": sympy.pi}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


class ExpressionError(ValueError):
    pass


def _check_tokens(text: str) -> None:
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExpressionError(f"unexpected character {text[pos:pos + 1]!r} in expression {text!r}")
        name = m.group("name")
        if name is not None and name not in SYMBOLS and name not in FUNCTIONS and name not in CONSTANTS:
            raise ExpressionError(f"unknown name {name!r} in expression {text!r}")
        pos = m.end()


class Expression:
    """A parsed scalar expression, callable with keyword coordinates.

    Missing coordinates default to zero; the result is broadcast to the
    common shape of the arguments.
    """

    def __init__(self, source: str | sympy.Expr, allowed: Iterable[str] = VARIABLES):
        allowed = tuple(allowed)
        if isinstance(source, str):
            if not source.strip():
                raise ExpressionError("empty expression")
            _check_tokens(source)
            local = {**SYMBOLS, **FUNCTIONS, **CONSTANTS}
            try:
                expr = parse_expr(
                    source,
                    local_dict=local,
                    global_dict={"Integer": sympy.Integer, "Float": sympy.Float, "Rational": sympy.Rational},
                    transformations=standard_transformations + (convert_xor,),
                    evaluate=True,
                )
            except Exception as exc:  # sympy raises a zoo of types on bad syntax
                raise ExpressionError(f"cannot parse expression {source!r}: {exc}") from exc
            self.text = source.strip()
        else:
            expr = sympy.sympify(source)
            self.text = str(expr)
        bad = {str(sym) for sym in expr.free_symbols} - set(allowed)
        if bad:
            raise ExpressionError(f"variables {sorted(bad)} not allowed here (allowed: {', '.join(allowed)})")
        self.expr = expr
        self._fn = sympy.lambdify([SYMBOLS[v] for v in VARIABLES], expr, modules="numpy")

    def __repr__(self) -> str:
        return f"Expression({self.text!r})"

    def __call__(self, **coords) -> np.ndarray:
        unknown = set(coords) - set(VARIABLES)
        if unknown:
            raise TypeError(f"unknown coordinates {sorted(unknown)}")
        args = [np.asarray(coords.get(v, 0.0), dtype=float) for v in VARIABLES]
        shape = np.broadcast_shapes(*(a.shape for a in args))
        with np.errstate(all="ignore"):
            val = self._fn(*args)
        return np.broadcast_to(np.asarray(val, dtype=float), shape).copy()

    def diff(self, var: str, order: int = 1) -> "Expression":
        return Expression(sympy.diff(self.expr, SYMBOLS[var], order))

    def subs(self, **values) -> "Expression":
        return Expression(self.expr.subs({SYMBOLS[k]: v for k, v in values.items()}))

    @property
    def is_zero(self) -> bool:
        return bool(sympy.simplify(self.expr) == 0)


def parse(text: str, allowed: Iterable[str] = VARIABLES) -> Expression:
    return Expression(text, allowed)


def parse_vector(text: str, n: int, allowed: Iterable[str] = VARIABLES) -> tuple[Expression, ...]:
    """Comma-separated components; a single '0' means the zero vector."""
    parts = [p for p in text.split(",")]
    if len(parts) == 1 and parts[0].strip() == "0":
        parts = ["0"] * n
    if len(parts) != n:
        raise ExpressionError(f"expected {n} comma-separated components, got {len(parts)} in {text!r}")
    return tuple(Expression(p, allowed) for p in parts)
