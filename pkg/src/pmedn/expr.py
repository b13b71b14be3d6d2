"""Small arithmetic expression language for coefficient and boundary data.

Supported: numbers, ``+ - * / ^`` (``**`` is accepted as a synonym for ``^``),
unary minus, parentheses, the functions ``sin cos exp sqrt``, the constants
``pi`` and ``e``, and the variables ``x1 x2 x3`` (plus ``t`` where the caller
allows it).  Expressions are compiled once and evaluated on numpy arrays.
"""

import ast
import math

import numpy as np

FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt}
CONSTANTS = {"pi": math.pi, "e": math.e}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class ExpressionError(ValueError):
    pass


class Expression:
    """A parsed expression.  Call with keyword arrays, e.g. ``expr(x1=x)``."""

    def __init__(self, text, variables=("x1", "x2", "x3")):
        self.text = str(text)
        self.variables = tuple(variables)
        try:
            # ``^`` is power; Python would parse it as xor with the wrong precedence.
            tree = ast.parse(self.text.strip().replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {self.text!r}: {exc.msg}") from None
        self._check(tree.body)
        self._tree = tree.body

    def _check(self, node):
        if isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ExpressionError(f"operator not allowed in {self.text!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise ExpressionError(f"operator not allowed in {self.text!r}")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
                raise ExpressionError(f"unknown function in {self.text!r}")
            if len(node.args) != 1 or node.keywords:
                raise ExpressionError(f"functions take one argument in {self.text!r}")
            self._check(node.args[0])
        elif isinstance(node, ast.Name):
            if node.id not in CONSTANTS and node.id not in self.variables:
                raise ExpressionError(f"unknown name {node.id!r} in {self.text!r}")
        elif isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ExpressionError(f"bad literal in {self.text!r}")
        else:
            raise ExpressionError(f"unsupported syntax in {self.text!r}")

    def _eval(self, node, env):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            val = self._eval(node.operand, env)
            return -val if isinstance(node.op, ast.USub) else val
        if isinstance(node, ast.Call):
            return FUNCTIONS[node.func.id](self._eval(node.args[0], env))
        if isinstance(node, ast.Name):
            if node.id in env:
                return env[node.id]
            if node.id in CONSTANTS:
                return CONSTANTS[node.id]
            raise ExpressionError(f"variable {node.id!r} not supplied")
        return float(node.value)

    def __call__(self, shape=None, **env):
        env = {k: np.asarray(v, dtype=float) for k, v in env.items()}
        with np.errstate(all="ignore"):
            out = self._eval(self._tree, env)
        out = np.asarray(out, dtype=float)
        if shape is not None:
            out = np.broadcast_to(out, shape).copy()
        return out

    def __repr__(self):
        return f"Expression({self.text!r})"


def evaluate(text, coords, t=None):
    """Evaluate ``text`` at points ``coords`` (shape ``(npts, d)``)."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    names = ("x1", "x2", "x3", "t")
    expr = Expression(text, variables=names)
    env = {f"x{a + 1}": coords[:, a] for a in range(coords.shape[1])}
    if t is not None:
        env["t"] = t
    return expr(shape=(coords.shape[0],), **env)
