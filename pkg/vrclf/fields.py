from functools import reduce
from typing import Callable, Dict, List, Optional, Sequence, Union
import logging

import numpy as np
import sympy as sp

from vrclf.errors import DomainError, NonFiniteError, SchemaError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

Tree = Union[float, int, str, list]

KINK_TOL = 1e-6
FD_STEP = 1e-6

_VMIN = sp.Function("vmin")
_VMAX = sp.Function("vmax")

# Heaviside(0) = 1/2 matches the subgradient midpoint of abs/min/max
LAMBDIFY_MODULES = [
    {
        "Heaviside": lambda x, h0=0.5: np.heaviside(x, 0.5),
        "vmin": lambda *args: reduce(np.minimum, args),
        "vmax": lambda *args: reduce(np.maximum, args),
    },
    "numpy",
]


def compile_expr(args: Sequence[sp.Symbol], expr: sp.Expr) -> Callable:
    """lambdify with elementwise min/max so scalars and arrays mix freely"""
    expr = sp.sympify(expr).replace(lambda e: isinstance(e, sp.Min), lambda e: _VMIN(*e.args))
    expr = expr.replace(lambda e: isinstance(e, sp.Max), lambda e: _VMAX(*e.args))
    return sp.lambdify(list(args), expr, modules=LAMBDIFY_MODULES)


_NARY = {
    "+": lambda args: sp.Add(*args),
    "*": lambda args: sp.Mul(*args),
    "min": lambda args: sp.Min(*args),
    "max": lambda args: sp.Max(*args),
}
_UNARY = {
    "exp": sp.exp,
    "ln": sp.log,
    "log": sp.log,
    "abs": sp.Abs,
}


def parse_tree(tree: Tree, symbols: Dict[str, sp.Symbol]) -> sp.Expr:
    """
    Prefix-notation expression -> sympy.

    A number is a constant, a string names a variable and a list is
    [op, arg, ...] with op in const, var, +, -, *, /, pow, exp, ln, abs,
    min, max.
    """
    if isinstance(tree, bool):
        raise SchemaError(f"boolean {tree!r} is not an expression")
    if isinstance(tree, (int, float)):
        return sp.Integer(tree) if isinstance(tree, int) else sp.Float(tree)
    if isinstance(tree, str):
        if tree not in symbols:
            raise SchemaError(f"unknown variable '{tree}'")
        return symbols[tree]
    if not isinstance(tree, list) or not tree or not isinstance(tree[0], str):
        raise SchemaError(f"malformed expression node {tree!r}")

    op, raw = tree[0], tree[1:]
    if op == "const":
        if len(raw) != 1 or not isinstance(raw[0], (int, float)):
            raise SchemaError(f"'const' takes one number, got {raw!r}")
        return parse_tree(raw[0], symbols)
    if op == "var":
        if len(raw) != 1 or not isinstance(raw[0], str):
            raise SchemaError(f"'var' takes one name, got {raw!r}")
        return parse_tree(raw[0], symbols)

    args = [parse_tree(arg, symbols) for arg in raw]
    if op in _NARY:
        if not args:
            raise SchemaError(f"'{op}' needs at least one argument")
        return _NARY[op](args)
    if op in _UNARY:
        if len(args) != 1:
            raise SchemaError(f"'{op}' takes one argument, got {len(args)}")
        return _UNARY[op](args[0])
    if op == "-":
        if len(args) == 1:
            return -args[0]
        if len(args) == 2:
            return args[0] - args[1]
        raise SchemaError(f"'-' takes one or two arguments, got {len(args)}")
    if op == "/":
        if len(args) != 2:
            raise SchemaError(f"'/' takes two arguments, got {len(args)}")
        return args[0] / args[1]
    if op in ("pow", "^"):
        if len(args) != 2:
            raise SchemaError(f"'pow' takes two arguments, got {len(args)}")
        return args[0] ** args[1]
    raise SchemaError(f"unknown operator '{op}'")


def to_tree(expr: sp.Expr) -> Tree:
    """sympy -> prefix notation, inverse of `parse_tree` up to simplification"""
    if expr.is_Symbol:
        return expr.name
    if expr.is_Integer:
        return int(expr)
    if expr.is_Number:
        return float(expr)
    if expr is sp.E:
        return ["exp", 1]
    if isinstance(expr, sp.Add):
        return ["+"] + [to_tree(arg) for arg in expr.args]
    if isinstance(expr, sp.Mul):
        return ["*"] + [to_tree(arg) for arg in expr.args]
    if isinstance(expr, sp.Pow):
        return ["pow", to_tree(expr.base), to_tree(expr.exp)]
    if isinstance(expr, sp.exp):
        return ["exp", to_tree(expr.args[0])]
    if isinstance(expr, sp.log):
        return ["ln", to_tree(expr.args[0])]
    if isinstance(expr, sp.Abs):
        return ["abs", to_tree(expr.args[0])]
    if isinstance(expr, sp.Min):
        return ["min"] + [to_tree(arg) for arg in expr.args]
    if isinstance(expr, sp.Max):
        return ["max"] + [to_tree(arg) for arg in expr.args]
    raise SchemaError(f"cannot serialize expression node {type(expr).__name__}")


def make_symbols(names: Sequence[str]) -> List[sp.Symbol]:
    return [sp.Symbol(name, real=True) for name in names]


def _broadcast(value, shape) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), shape)


class ScalarField:
    """
    Differentiable scalar function of the state x (and optionally a
    disturbance d), backed by a sympy expression with an exact gradient.

    `value` and `gradient` accept one point of shape (n,) or a batch of
    shape (N, n).
    """

    def __init__(self, expr: sp.Expr, state_vars: Sequence[str],
                 disturbance_vars: Sequence[str] = (), name: str = "",
                 gradient_mode: str = "symbolic", fd_step: float = FD_STEP):
        if gradient_mode not in ("symbolic", "central"):
            raise DomainError(f"gradient mode must be 'symbolic' or 'central', got {gradient_mode!r}")
        self.name = name
        self.state_vars = list(state_vars)
        self.disturbance_vars = list(disturbance_vars)
        self.gradient_mode = gradient_mode
        self.fd_step = fd_step

        self.x_symbols = make_symbols(self.state_vars)
        self.d_symbols = make_symbols(self.disturbance_vars)
        # rebind any plain symbols to the real ones
        lookup = {s.name: s for s in self.x_symbols + self.d_symbols}
        self.expr = sp.sympify(expr).subs({s: lookup[s.name] for s in sp.sympify(expr).free_symbols
                                           if s.name in lookup})
        unknown = {s.name for s in self.expr.free_symbols} - set(lookup)
        if unknown:
            raise SchemaError(f"field {name or '?'} references unknown variables {sorted(unknown)}")

        args = self.x_symbols + self.d_symbols
        self.grad_exprs = [sp.diff(self.expr, s) for s in self.x_symbols]
        self.d_grad_exprs = [sp.diff(self.expr, s) for s in self.d_symbols]
        self._value_fn = compile_expr(args, self.expr)
        self._grad_fns = [compile_expr(args, e) for e in self.grad_exprs]
        self._kink_exprs = self._collect_kinks()
        self._kink_fns = [compile_expr(args, e) for e in self._kink_exprs]

    # ------------------------------------------------------------------
    # constructors
    # ------------------------------------------------------------------

    @classmethod
    def parse(cls, tree: Tree, state_vars: Sequence[str], disturbance_vars: Sequence[str] = (),
              name: str = "") -> "ScalarField":
        symbols = {s.name: s for s in make_symbols(list(state_vars) + list(disturbance_vars))}
        return cls(parse_tree(tree, symbols), state_vars, disturbance_vars, name)

    @classmethod
    def constant(cls, value: float, state_vars: Sequence[str], name: str = "") -> "ScalarField":
        return cls(sp.Float(value), state_vars, name=name)

    @classmethod
    def quadratic(cls, index: int, state_vars: Sequence[str], name: str = "") -> "ScalarField":
        """x_index^2 / 2"""
        x = make_symbols(state_vars)
        return cls(x[index] ** 2 / 2, state_vars, name=name or f"V{index + 1}")

    def to_tree(self) -> Tree:
        return to_tree(self.expr)

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.state_vars)

    @property
    def is_constant(self) -> bool:
        return not self.expr.free_symbols

    def _columns(self, x: np.ndarray, d: Optional[np.ndarray]) -> List[np.ndarray]:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise DomainError(f"field {self.name or '?'} expects {self.n} state components, got {x.shape[-1]}")
        cols = [x[..., i] for i in range(self.n)]
        if self.d_symbols:
            if d is None:
                raise DomainError(f"field {self.name or '?'} needs a disturbance value")
            d = np.asarray(d, dtype=float)
            cols += [np.broadcast_to(d[..., i], x.shape[:-1]) for i in range(len(self.d_symbols))]
        return cols

    def value(self, x, d=None) -> Union[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        with np.errstate(all="ignore"):
            result = _broadcast(self._value_fn(*self._columns(x, d)), x.shape[:-1])
        if not np.all(np.isfinite(result)):
            raise NonFiniteError(f"field {self.name or '?'} is not finite at the requested point")
        return float(result) if x.ndim == 1 else np.array(result)

    __call__ = value

    def gradient(self, x, d=None) -> np.ndarray:
        """State gradient, shape (n,) or (N, n)"""
        if self.gradient_mode == "central":
            return self.central_gradient(x, d)
        x = np.asarray(x, dtype=float)
        cols = self._columns(x, d)
        with np.errstate(all="ignore"):
            parts = [_broadcast(fn(*cols), x.shape[:-1]) for fn in self._grad_fns]
        result = np.stack(parts, axis=-1) if parts else np.zeros(x.shape)
        if not np.all(np.isfinite(result)):
            raise NonFiniteError(f"gradient of {self.name or '?'} is not finite at the requested point")
        return result

    def central_gradient(self, x, d=None, step: Optional[float] = None) -> np.ndarray:
        """Central differences with h_i = step * max(1, |x_i|)"""
        x = np.asarray(x, dtype=float)
        step = self.fd_step if step is None else step
        h = step * np.maximum(1.0, np.abs(x))
        parts = []
        for i in range(self.n):
            e = np.zeros(self.n)
            e[i] = 1.0
            hi = h[..., i:i + 1]
            forward = np.asarray(self.value(x + hi * e, d))
            backward = np.asarray(self.value(x - hi * e, d))
            parts.append((forward - backward) / (2.0 * h[..., i]))
        return np.stack(parts, axis=-1)

    # ------------------------------------------------------------------
    # structure
    # ------------------------------------------------------------------

    def _collect_kinks(self) -> List[sp.Expr]:
        kinks = []
        for node in sp.preorder_traversal(self.expr):
            if isinstance(node, sp.Abs):
                kinks.append(node.args[0])
            elif isinstance(node, (sp.Min, sp.Max)):
                args = list(node.args)
                for a in range(len(args)):
                    for b in range(a + 1, len(args)):
                        kinks.append(args[a] - args[b])
        return kinks

    def near_kink(self, x, d=None, tol: float = KINK_TOL) -> Union[bool, np.ndarray]:
        """True where some abs/min/max argument is within `tol` of its switch"""
        x = np.asarray(x, dtype=float)
        near = np.zeros(x.shape[:-1], dtype=bool)
        if self._kink_fns:
            cols = self._columns(x, d)
            for fn in self._kink_fns:
                near |= np.abs(_broadcast(fn(*cols), x.shape[:-1])) < tol
        return bool(near) if x.ndim == 1 else near

    def is_affine_in(self, symbols: Sequence[sp.Symbol]) -> bool:
        for a in symbols:
            for b in symbols:
                if sp.simplify(sp.diff(self.expr, a, b)) != 0:
                    return False
        return True

    def subs(self, mapping: Dict[str, float], name: Optional[str] = None) -> "ScalarField":
        lookup = {s.name: s for s in self.x_symbols + self.d_symbols}
        expr = self.expr.subs({lookup[k]: v for k, v in mapping.items() if k in lookup})
        return ScalarField(expr, self.state_vars, self.disturbance_vars, name or self.name, self.gradient_mode)

    def __repr__(self) -> str:
        return f"ScalarField({self.name or ''}: {self.expr})"


class Univariate:
    """
    Scalar function of one variable (delta, K, rho, Q, ...), given either as
    a prefix tree in the variable 's', a sympy expression in `s`, or a plain
    callable. Evaluates elementwise on arrays.
    """
    symbol = sp.Symbol("s", real=True)

    def __init__(self, source: Union[Tree, sp.Expr, Callable], name: str = ""):
        self.name = name
        self.expr: Optional[sp.Expr] = None
        if callable(source) and not isinstance(source, sp.Basic):
            self._fn = source
        else:
            if isinstance(source, sp.Basic):
                expr = source.subs({s: self.symbol for s in source.free_symbols if s.name == "s"})
            else:
                expr = parse_tree(source, {"s": self.symbol})
            unknown = {s.name for s in expr.free_symbols} - {"s"}
            if unknown:
                raise SchemaError(f"function {name or '?'} may only use 's', found {sorted(unknown)}")
            self.expr = expr
            self._fn = compile_expr([self.symbol], expr)

    def __call__(self, s):
        values = np.asarray(s, dtype=float)
        with np.errstate(all="ignore"):
            try:
                result = self._fn(values)
            except (TypeError, ValueError):
                result = np.vectorize(self._fn, otypes=[float])(values)
        result = _broadcast(result, values.shape)
        return float(result) if values.ndim == 0 else np.array(result)

    def to_tree(self) -> Tree:
        if self.expr is None:
            raise SchemaError(f"function {self.name or '?'} was given as a callable and has no tree")
        return to_tree(self.expr)

    def __repr__(self) -> str:
        return f"Univariate({self.name or ''}: {self.expr if self.expr is not None else self._fn})"


def as_univariate(source, name: str = "") -> Callable:
    """Pass MonotoneFn and Univariate through, wrap everything else"""
    if isinstance(source, Univariate):
        return source
    if callable(source) and hasattr(source, "class_tag"):
        return source
    return Univariate(source, name)
