"""Forward-mode automatic differentiation on dual numbers.

A :class:`Dual` carries a value and a fixed-length vector of partial
derivatives.  Seeding one unit partial per perturbation coordinate and
pushing duals through an error function yields the Jacobian of that
function at the seed point, which is how factors get their Jacobians
without hand-derived formulas.
"""

from __future__ import annotations

import math

import numpy as np

_DIV_FLOOR = 1e-300


class DomainError(ArithmeticError):
    """Math function evaluated outside its domain (e.g. sqrt of a negative)."""


class DivByZero(ZeroDivisionError):
    """Division with a denominator too close to zero."""


class Dual:
    """Scalar value plus its partial derivatives w.r.t. the seed coordinates."""

    __slots__ = ("value", "partials")

    def __init__(self, value, partials):
        self.value = float(value)
        self.partials = np.asarray(partials, dtype=float)

    @staticmethod
    def constant(value, n):
        return Dual(value, np.zeros(n))

    def __repr__(self):
        return f"Dual({self.value}, {self.partials})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value, self.partials + other.partials)
        return Dual(self.value + other, self.partials)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value - other.value, self.partials - other.partials)
        return Dual(self.value - other, self.partials)

    def __rsub__(self, other):
        return Dual(other - self.value, -self.partials)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.value * other.value,
                self.value * other.partials + other.value * self.partials,
            )
        return Dual(self.value * other, self.partials * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            d = other.value
            if abs(d) <= _DIV_FLOOR:
                raise DivByZero("dual division by (near) zero")
            return Dual(
                self.value / d,
                (self.partials * d - self.value * other.partials) / (d * d),
            )
        if abs(other) <= _DIV_FLOOR:
            raise DivByZero("dual division by (near) zero")
        return Dual(self.value / other, self.partials / other)

    def __rtruediv__(self, other):
        d = self.value
        if abs(d) <= _DIV_FLOOR:
            raise DivByZero("dual division by (near) zero")
        return Dual(other / d, -other * self.partials / (d * d))

    def __neg__(self):
        return Dual(-self.value, -self.partials)

    def __pos__(self):
        return self

    def __abs__(self):
        return absolute(self)

    # comparisons act on values only, so validity predicates work on duals

    def __lt__(self, other):
        return self.value < _val(other)

    def __le__(self, other):
        return self.value <= _val(other)

    def __gt__(self, other):
        return self.value > _val(other)

    def __ge__(self, other):
        return self.value >= _val(other)

    def __float__(self):
        return self.value


def _val(x):
    return x.value if isinstance(x, Dual) else x


# -- math functions over float-or-Dual scalars ------------------------------


def sin(x):
    if isinstance(x, Dual):
        return Dual(math.sin(x.value), math.cos(x.value) * x.partials)
    return math.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(math.cos(x.value), -math.sin(x.value) * x.partials)
    return math.cos(x)


def sqrt(x):
    if isinstance(x, Dual):
        if x.value < 0.0:
            raise DomainError("sqrt of negative value")
        if x.value <= _DIV_FLOOR:
            raise DivByZero("sqrt derivative at (near) zero")
        r = math.sqrt(x.value)
        return Dual(r, x.partials / (2.0 * r))
    if x < 0.0:
        raise DomainError("sqrt of negative value")
    return math.sqrt(x)


def atan2(y, x):
    if isinstance(y, Dual) or isinstance(x, Dual):
        yv, xv = _val(y), _val(x)
        denom = xv * xv + yv * yv
        if denom <= _DIV_FLOOR:
            raise DivByZero("atan2 derivative at (near) origin")
        yp = y.partials if isinstance(y, Dual) else 0.0
        xp = x.partials if isinstance(x, Dual) else 0.0
        return Dual(math.atan2(yv, xv), (xv * yp - yv * xp) / denom)
    return math.atan2(y, x)


def absolute(x):
    if isinstance(x, Dual):
        if x.value < 0.0:
            return Dual(-x.value, -x.partials)
        return Dual(x.value, x.partials.copy())
    return abs(x)


def hypot2(x, y):
    """sqrt(x^2 + y^2), dual-aware."""
    return sqrt(x * x + y * y)


def seed(x0):
    """Turn a base perturbation vector into duals with unit partials."""
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    out = np.empty(n, dtype=object)
    for i in range(n):
        p = np.zeros(n)
        p[i] = 1.0
        out[i] = Dual(x0[i], p)
    return out


def jacobian_of(f, x0):
    """Jacobian of a vector function at the base point ``x0``.

    ``f`` must accept a length-n object array of :class:`Dual` scalars and
    return a sequence of Dual (or plain float, for constant components)
    entries.  Partials are seeded one unit per coordinate, so the result is
    df/dx evaluated at ``x0``.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    y = f(seed(x0))
    rows = []
    for yi in y:
        if isinstance(yi, Dual):
            if yi.partials.size != n:
                raise ValueError(
                    f"partial vector length {yi.partials.size} != seed dim {n}"
                )
            rows.append(yi.partials)
        else:
            rows.append(np.zeros(n))
    return np.array(rows, dtype=float)
