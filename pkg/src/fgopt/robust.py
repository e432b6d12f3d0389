"""Robust kernels and the IRLS reweighting coefficient.

Each kernel is a sub-quadratic cost rho(u) over the L1 Omega-norm of a
residual, u = sqrt(chi2).  During optimization a factor's information
matrix is rescaled by

    gamma(u) = (1/u) * d rho / d u

which turns the robust problem into iteratively reweighted least squares.
The plain quadratic cost rho(u) = u^2 / 2 gives gamma = 1 identically.

The saturated kernel clamps the *reweighted* squared error to c^2, i.e.
gamma = c^2 / u^2 past the threshold; the rho reported for it grows
logarithmically past c so that gamma * u = d rho / d u stays exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

KERNEL_KINDS = ("quadratic", "huber", "cauchy", "geman_mcclure", "saturated")


@dataclass(frozen=True)
class Kernel:
    kind: str = "quadratic"
    c: float = math.inf

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not self.c > 0.0:
            raise ValueError("kernel threshold must be positive")


QUADRATIC = Kernel("quadratic")


def robustify(kernel: Kernel, chi2: float):
    """Return (gamma, rho) for a factor with squared error ``chi2``.

    gamma rescales the information matrix; rho is the robust cost value.
    u = 0 is handled by the small-u limit, gamma -> 1 for every kernel.
    """
    if chi2 < 0.0:
        raise ValueError("chi2 must be non-negative")
    u = math.sqrt(chi2)
    c = kernel.c
    kind = kernel.kind

    if kind == "quadratic":
        return 1.0, 0.5 * chi2

    if kind == "huber":
        if u <= c:
            return 1.0, 0.5 * chi2
        return c / u, c * (u - 0.5 * c)

    if kind == "cauchy":
        w = 1.0 + chi2 / (c * c)
        return 1.0 / w, 0.5 * c * c * math.log(w)

    if kind == "geman_mcclure":
        w = 1.0 + chi2 / (c * c)
        return 1.0 / (w * w), 0.5 * chi2 / w

    if kind == "saturated":
        if u <= c:
            return 1.0, 0.5 * chi2
        return (c * c) / chi2, 0.5 * c * c * (1.0 + 2.0 * math.log(u / c))

    raise AssertionError(kind)


@dataclass
class RobustifierPolicy:
    """Maps factor type tags to kernels; unregistered types fall back to quadratic.

    A kernel attached directly to a factor always wins over the policy.
    """

    rules: dict

    def __init__(self, rules=None):
        self.rules = dict(rules or {})

    def kernel_for(self, factor) -> Kernel:
        if getattr(factor, "kernel", None) is not None:
            return factor.kernel
        return self.rules.get(factor.type_tag, QUADRATIC)


def parse_kernel_spec(spec: str):
    """Parse ``kind:threshold`` or ``kind:threshold:factor-type``.

    Returns (Kernel, factor_type_or_None).
    """
    parts = spec.split(":")
    if len(parts) not in (2, 3):
        raise ValueError(f"kernel spec must be kind:threshold[:factor-type], got {spec!r}")
    kind = parts[0].strip().lower().replace("-", "_")
    try:
        c = float(parts[1])
    except ValueError as exc:
        raise ValueError(f"bad kernel threshold in {spec!r}") from exc
    factor_type = parts[2].strip() if len(parts) == 3 else None
    return Kernel(kind, c), factor_type


def format_kernel_spec(kernel: Kernel, factor_type=None) -> str:
    base = f"{kernel.kind}:{kernel.c!r}"
    return f"{base}:{factor_type}" if factor_type else base
