import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgopt import robust
from fgopt.robust import Kernel, RobustifierPolicy, format_kernel_spec, parse_kernel_spec, robustify

ALL_KINDS = ["huber", "cauchy", "geman_mcclure", "saturated"]


def rho_of(kernel, u):
    return robustify(kernel, u * u)[1]


def test_quadratic_gamma_is_one():
    for chi2 in (0.0, 0.5, 4.0, 1e6):
        gamma, rho = robustify(robust.QUADRATIC, chi2)
        assert gamma == 1.0
        assert rho == 0.5 * chi2


def test_huber_hand_value():
    # c=1, chi2=4 -> u=2: rho = c(u - c/2) = 1.5, gamma = c/u = 0.5
    gamma, rho = robustify(Kernel("huber", 1.0), 4.0)
    assert abs(gamma - 0.5) < 1e-15
    assert abs(rho - 1.5) < 1e-15


def test_cauchy_small_u_limit():
    gamma, rho = robustify(Kernel("cauchy", 1.0), 0.0)
    assert gamma == 1.0
    assert rho == 0.0


def test_gamma_at_zero_is_one_for_all_kernels():
    for kind in ALL_KINDS:
        gamma, rho = robustify(Kernel(kind, 2.0), 0.0)
        assert gamma == 1.0
        assert rho == 0.0


@pytest.mark.parametrize("kind", ALL_KINDS)
@pytest.mark.parametrize("c", [0.5, 1.0, 3.0])
def test_gradient_identity_gamma_u_equals_drho_du(kind, c):
    # gamma(u) * u == d rho / d u, checked by central finite differences
    kernel = Kernel(kind, c)
    h = 1e-6
    for u in np.linspace(0.01, 10 * c, 157):
        gamma, _ = robustify(kernel, u * u)
        drho = (rho_of(kernel, u + h) - rho_of(kernel, u - h)) / (2 * h)
        assert abs(gamma * u - drho) < 1e-8, (kind, c, u)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_gamma_non_increasing_and_positive(kind):
    kernel = Kernel(kind, 1.0)
    us = np.linspace(1e-6, 10.0, 500)
    gammas = [robustify(kernel, u * u)[0] for u in us]
    assert all(g > 0 for g in gammas)
    assert all(a >= b - 1e-12 for a, b in zip(gammas, gammas[1:]))


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_gamma_continuous_at_threshold(kind):
    kernel = Kernel(kind, 1.0)
    below = robustify(kernel, (1.0 - 1e-9) ** 2)[0]
    above = robustify(kernel, (1.0 + 1e-9) ** 2)[0]
    assert abs(below - above) < 1e-6


@pytest.mark.parametrize("kind", ALL_KINDS + ["quadratic"])
def test_rho_monotone_and_zero_at_zero(kind):
    kernel = Kernel(kind, 1.0)
    assert rho_of(kernel, 0.0) == 0.0
    us = np.linspace(0.0, 8.0, 200)
    rhos = [rho_of(kernel, u) for u in us]
    assert all(b >= a - 1e-12 for a, b in zip(rhos, rhos[1:]))


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(ALL_KINDS), st.floats(0.1, 5.0), st.floats(0.0, 100.0))
def test_robustify_outputs_finite(kind, c, chi2):
    gamma, rho = robustify(Kernel(kind, c), chi2)
    assert math.isfinite(gamma) and math.isfinite(rho)
    assert gamma > 0
    assert rho >= 0


def test_negative_chi2_rejected():
    with pytest.raises(ValueError):
        robustify(robust.QUADRATIC, -1.0)


def test_kernel_validation():
    with pytest.raises(ValueError):
        Kernel("huber", 0.0)
    with pytest.raises(ValueError):
        Kernel("nope", 1.0)


# -- policy ------------------------------------------------------------------


class _FakeFactor:
    def __init__(self, tag, kernel=None):
        self.type_tag = tag
        self.kernel = kernel


def test_policy_defaults_to_quadratic():
    policy = RobustifierPolicy({"pgo3": Kernel("huber", 1.0)})
    assert policy.kernel_for(_FakeFactor("pgo3")).kind == "huber"
    assert policy.kernel_for(_FakeFactor("icp")).kind == "quadratic"


def test_factor_kernel_overrides_policy():
    policy = RobustifierPolicy({"pgo3": Kernel("huber", 1.0)})
    mine = Kernel("cauchy", 2.0)
    assert policy.kernel_for(_FakeFactor("pgo3", mine)) is mine


# -- spec strings ---------------------------------------------------------------


def test_parse_kernel_spec():
    k, ftype = parse_kernel_spec("huber:1.0")
    assert k == Kernel("huber", 1.0) and ftype is None
    k, ftype = parse_kernel_spec("cauchy:0.5:pgo3")
    assert k == Kernel("cauchy", 0.5) and ftype == "pgo3"
    k, _ = parse_kernel_spec("geman-mcclure:2")
    assert k.kind == "geman_mcclure"


def test_parse_kernel_spec_errors():
    with pytest.raises(ValueError):
        parse_kernel_spec("huber")
    with pytest.raises(ValueError):
        parse_kernel_spec("huber:x")


def test_format_roundtrip():
    k = Kernel("huber", 1.5)
    spec = format_kernel_spec(k, "icp")
    back, ftype = parse_kernel_spec(spec)
    assert back == k and ftype == "icp"
