from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import sympy

_t = sympy.Symbol("t", real=True)
_parity_points = (0.1, 0.3, 0.5, 0.7, 0.9)

Kernel = Callable[[np.ndarray], np.ndarray]


@dataclass(kw_only=True)
class WarpModel:
    """Warping function f of the product metric dt² + f(λt)² g_{S^n}."""

    selection: str
    expression: sympy.Expr
    n: int
    f0: float
    fpp0: float
    _f: Kernel = field(repr=False)
    _df: Kernel = field(repr=False)
    _d2f: Kernel = field(repr=False)

    def f_lambda(self, t: np.ndarray, lam: float) -> np.ndarray:
        return self._f(lam * np.asarray(t, dtype=float))

    def df_lambda(self, t: np.ndarray, lam: float) -> np.ndarray:
        return lam * self._df(lam * np.asarray(t, dtype=float))

    def d2f_lambda(self, t: np.ndarray, lam: float) -> np.ndarray:
        return lam**2 * self._d2f(lam * np.asarray(t, dtype=float))


def warp_model(selection: str, n: int) -> WarpModel:
    """Build a warp from "cos", "gaussian", "sech", "quadratic:<c>" or "expr:<sympy expression in t>"."""
    if n < 1:
        raise InvalidWarpError(selection, f"sphere dimension n={n} must be positive")
    match selection.split(":", 1):
        case ["cos"]:
            expression = sympy.cos(_t)
        case ["gaussian"]:
            expression = sympy.exp(-(_t**2) / 2)
        case ["sech"]:
            expression = 1 / sympy.cosh(_t)
        case ["quadratic", c]:
            try:
                coefficient = sympy.Rational(c)
            except (TypeError, ValueError, sympy.SympifyError) as e:
                raise InvalidWarpError(selection, "quadratic coefficient is not a number") from e
            expression = 1 - coefficient * _t**2 / 2
        case ["expr", text]:
            try:
                expression = sympy.sympify(text, locals={"t": _t})
            except (sympy.SympifyError, SyntaxError, TypeError) as e:
                raise InvalidWarpError(selection, f"cannot parse expression: {e}") from e
        case _:
            raise InvalidWarpError(selection, "unknown warp selection")
    return _build(selection, expression, n)


def _build(selection: str, expression: sympy.Expr, n: int) -> WarpModel:
    if not expression.free_symbols <= {_t}:
        raise InvalidWarpError(selection, "expression may depend on t only")
    first = sympy.diff(expression, _t)
    second = sympy.diff(first, _t)
    f0 = float(expression.subs(_t, 0))
    fp0 = float(first.subs(_t, 0))
    fpp0 = float(second.subs(_t, 0))
    if not f0 > 0.0:
        raise InvalidWarpError(selection, f"f(0)={f0} is not positive")
    if sympy.simplify(expression - expression.subs(_t, -_t)) != 0:
        raise InvalidWarpError(selection, "f is not even")
    f = _kernel(expression)
    points = np.array(_parity_points)
    if abs(fp0) > 1e-12 or np.max(np.abs(f(points) - f(-points))) > 1e-12:
        raise InvalidWarpError(selection, "f is not even")
    if not fpp0 < 0.0:
        raise InvalidWarpError(selection, f"f''(0)={fpp0} is not negative")
    return WarpModel(
        selection=selection,
        expression=expression,
        n=n,
        f0=f0,
        fpp0=fpp0,
        _f=f,
        _df=_kernel(first),
        _d2f=_kernel(second),
    )


def _kernel(expression: sympy.Expr) -> Kernel:
    function = sympy.lambdify(_t, expression, modules="numpy")

    def evaluate(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(function(x), dtype=float), x.shape).copy()

    return evaluate


class Error(Exception):
    pass


class InvalidWarpError(Error):
    def __init__(self, selection: str, description: str) -> None:
        super().__init__(f"invalid warp {repr(selection)}: {description}")
