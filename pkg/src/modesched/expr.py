"""A small expression language for time-varying matrix entries.

Grammar: numeric literals, the variable ``t`` (seconds), binary ``+ - * /``,
unary minus, parentheses, and the functions ``sin``, ``cos``, ``exp``.
Expressions are parsed once into an immutable tree that evaluates with plain
floats or numpy arrays and round-trips through its textual form.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass

import numpy as np

from .errors import ExprError

_FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}

_BINOPS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/"}

# precedence levels used when printing with minimal parentheses
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "atom": 4}


@dataclass(frozen=True)
class _Num:
    value: float


@dataclass(frozen=True)
class _Var:
    pass


@dataclass(frozen=True)
class _Neg:
    operand: object


@dataclass(frozen=True)
class _BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class _Call:
    name: str
    arg: object


def _convert(node, text: str):
    if isinstance(node, ast.Expression):
        return _convert(node.body, text)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExprError(
                f"unsupported literal {node.value!r}", offset=node.col_offset
            )
        return _Num(float(node.value))
    if isinstance(node, ast.Name):
        if node.id != "t":
            if node.id in _FUNCTIONS:
                raise ExprError(
                    f"function {node.id!r} used without arguments",
                    offset=node.col_offset,
                )
            raise ExprError(
                f"unknown variable {node.id!r} (only 't' is allowed)",
                offset=node.col_offset,
            )
        return _Var()
    if isinstance(node, ast.UnaryOp):
        if isinstance(node.op, ast.USub):
            return _Neg(_convert(node.operand, text))
        if isinstance(node.op, ast.UAdd):
            return _convert(node.operand, text)
        raise ExprError("unsupported unary operator", offset=node.col_offset)
    if isinstance(node, ast.BinOp):
        opname = _BINOPS.get(type(node.op))
        if opname is None:
            raise ExprError("unsupported operator", offset=node.col_offset)
        return _BinOp(opname, _convert(node.left, text), _convert(node.right, text))
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name):
            raise ExprError("only named function calls allowed", offset=node.col_offset)
        name = node.func.id
        if name not in _FUNCTIONS:
            raise ExprError(f"unknown function {name!r}", offset=node.func.col_offset)
        if len(node.args) != 1 or node.keywords:
            raise ExprError(
                f"{name}() takes exactly one positional argument",
                offset=node.col_offset,
            )
        return _Call(name, _convert(node.args[0], text))
    raise ExprError(
        f"unsupported syntax ({type(node).__name__})",
        offset=getattr(node, "col_offset", None),
    )


def _print(node, parent_prec: int = 0) -> str:
    if isinstance(node, _Num):
        v = node.value
        out = repr(int(v)) if float(v).is_integer() and abs(v) < 1e16 else repr(v)
        if v < 0 and parent_prec > _PREC["+"]:
            return f"({out})"
        return out
    if isinstance(node, _Var):
        return "t"
    if isinstance(node, _Call):
        return f"{node.name}({_print(node.arg)})"
    if isinstance(node, _Neg):
        inner = _print(node.operand, _PREC["neg"])
        out = f"-{inner}"
        return f"({out})" if parent_prec > _PREC["+"] else out
    if isinstance(node, _BinOp):
        prec = _PREC[node.op]
        left = _print(node.left, prec)
        # - and / are left-associative: the right operand needs parens at
        # equal precedence
        right = _print(node.right, prec + (1 if node.op in ("-", "/") else 0))
        out = f"{left}{node.op}{right}"
        return f"({out})" if parent_prec > prec else out
    raise TypeError(f"unexpected node {node!r}")


def _eval(node, t):
    if isinstance(node, _Num):
        return node.value
    if isinstance(node, _Var):
        return t
    if isinstance(node, _Neg):
        return -_eval(node.operand, t)
    if isinstance(node, _Call):
        return _FUNCTIONS[node.name](_eval(node.arg, t))
    if isinstance(node, _BinOp):
        a = _eval(node.left, t)
        b = _eval(node.right, t)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        return np.divide(a, b)
    raise TypeError(f"unexpected node {node!r}")


def _is_constant(node) -> bool:
    if isinstance(node, _Num):
        return True
    if isinstance(node, _Var):
        return False
    if isinstance(node, _Neg):
        return _is_constant(node.operand)
    if isinstance(node, _Call):
        return _is_constant(node.arg)
    if isinstance(node, _BinOp):
        return _is_constant(node.left) and _is_constant(node.right)
    raise TypeError(f"unexpected node {node!r}")


@dataclass(frozen=True)
class TimeExpr:
    """An immutable, side-effect-free expression of the time variable t."""

    root: object

    def __call__(self, t):
        """Evaluate at a scalar t or elementwise over an array of times."""
        tt = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = np.asarray(_eval(self.root, tt), dtype=float)
        if tt.ndim == 0:
            return float(out)
        if out.shape != tt.shape:
            out = np.full(tt.shape, out)
        return out

    def __str__(self) -> str:
        return _print(self.root)

    @property
    def is_constant(self) -> bool:
        """True when the expression does not reference t."""
        return _is_constant(self.root)


def parse_time_expr(text: str) -> TimeExpr:
    """Parse ``text`` into a TimeExpr.

    Raises ExprError with a byte offset for malformed input or an unknown
    function name.
    """
    if not isinstance(text, str):
        raise ExprError(f"expected a string, got {type(text).__name__}")
    if not text.strip():
        raise ExprError("empty expression", offset=0)
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as e:
        raise ExprError(
            f"syntax error at offset {e.offset}: {e.msg}", offset=e.offset
        ) from None
    return TimeExpr(_convert(tree, text))


def const_expr(value: float) -> TimeExpr:
    """TimeExpr wrapping a numeric constant."""
    v = float(value)
    return TimeExpr(_Neg(_Num(-v)) if v < 0 else _Num(v))
