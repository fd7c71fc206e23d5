from fractions import Fraction
from math import factorial

import numpy as np
import pytest

from nondivfem.quadrature import (
    interval_rule,
    monomial_integral,
    precise_interval_rule,
    precise_triangle_rule,
    triangle_rule,
)


def exact_triangle(a, b):
    return Fraction(factorial(a) * factorial(b), factorial(a + b + 2))


@pytest.mark.parametrize("degree", range(0, 15))
def test_triangle_rule_exact_on_monomials(degree):
    rule = triangle_rule(degree)
    x, y = rule.points.T
    assert np.all(rule.weights > 0)
    assert np.all(x >= 0) and np.all(y >= 0) and np.all(x + y <= 1)
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            assert rule.weights @ (x**a * y**b) == pytest.approx(float(exact_triangle(a, b)), rel=1e-13, abs=1e-16)


@pytest.mark.parametrize("degree", range(0, 15))
def test_interval_rule_exact(degree):
    rule = interval_rule(degree)
    t = rule.points[:, 0]
    for a in range(degree + 1):
        assert rule.weights @ t**a == pytest.approx(1 / (a + 1), rel=1e-14)


@pytest.mark.parametrize("degree", [4, 8, 12])
def test_precise_rules_beat_double(degree):
    rule = precise_triangle_rule(degree)
    assert rule.points.dtype == np.longdouble
    x, y = rule.points.T
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            ex = exact_triangle(a, b)
            exact_ld = np.longdouble(ex.numerator) / np.longdouble(ex.denominator)
            got = np.sum(rule.weights * x**a * y**b)
            assert abs(got - exact_ld) <= 64 * np.finfo(np.longdouble).eps * exact_ld
    iv = precise_interval_rule(degree)
    assert abs(np.sum(iv.weights) - 1) <= 16 * np.finfo(np.longdouble).eps


def test_triangle_rule_not_exact_above_degree():
    # a degree-6 rule must miss some degree-8 monomial; guards against
    # silently returning an overly rich rule for every degree
    rule = triangle_rule(2)
    x, y = rule.points.T
    errs = [abs(rule.weights @ (x**a * y**(8 - a)) - float(exact_triangle(a, 8 - a))) for a in range(9)]
    assert max(errs) > 1e-8


def test_monomial_integral_and_validation():
    assert monomial_integral(0, 0) == 0.5
    assert monomial_integral(2, 3) == pytest.approx(float(exact_triangle(2, 3)))
    with pytest.raises(ValueError):
        triangle_rule(-1)
