"""Expression mini-language for potentials and initial data.

Grammar: numbers, ``x1 .. xd``, ``t``, ``pi``, binary ``+ - * / ^`` (``**``
also accepted), unary minus, and calls to ``exp``, ``sin``, ``cos``, ``abs``.
Parsing walks Python's ``ast`` with a whitelist, so nothing is evaluated.
"""

import ast

import numpy as np
import sympy as sp

from .errors import ExpressionError

_FUNCS = {"exp": sp.exp, "sin": sp.sin, "cos": sp.cos, "abs": sp.Abs}
_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a**b,
}


def symbols(dim):
    xs = sp.symbols(" ".join(f"x{i + 1}" for i in range(dim)), real=True)
    if dim == 1:
        xs = (xs,)
    return tuple(xs), sp.Symbol("t", real=True)


def parse(text: str, dim: int):
    """Parse ``text`` into a sympy expression over ``x1..x{dim}`` and ``t``."""
    xs, t = symbols(dim)
    names = {str(s): s for s in xs}
    names["t"] = t
    names["pi"] = sp.pi
    try:
        tree = ast.parse(text.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse expression {text!r}: {exc.msg}") from None

    def walk(node):
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return sp.Float(node.value) if isinstance(node.value, float) else sp.Integer(node.value)
        if isinstance(node, ast.Name):
            if node.id not in names:
                raise ExpressionError(f"unknown symbol {node.id!r} in {text!r}")
            return names[node.id]
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](walk(node.left), walk(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = walk(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS:
            if len(node.args) != 1 or node.keywords:
                raise ExpressionError(f"{node.func.id} takes exactly one argument")
            return _FUNCS[node.func.id](walk(node.args[0]))
        raise ExpressionError(f"unsupported construct {ast.dump(node)[:40]} in {text!r}")

    return walk(tree)


def lambdify_xt(expr, dim):
    """Vectorised numpy callable ``g(x, t)`` with ``x`` of shape ``(..., dim)``."""
    xs, t = symbols(dim)
    fn = sp.lambdify((*xs, t), expr, modules="numpy")

    def g(x, tt=0.0):
        x = np.asarray(x, dtype=float)
        args = [x[..., i] for i in range(dim)]
        out = fn(*args, tt)
        return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast_shapes(x.shape[:-1], np.shape(tt))).copy()

    return g
