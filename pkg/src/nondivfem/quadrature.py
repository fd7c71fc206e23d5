"""Quadrature rules on the reference triangle and the unit interval.

Triangle rules are collapsed (Duffy) products of Gauss-Jacobi and
Gauss-Legendre points. They have positive weights and exactness of any
requested degree, which is what the lifting and assembly code relies on.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (nq, dim) reference coordinates
    weights: np.ndarray  # (nq,)
    degree: int


def _n_points(degree: int) -> int:
    return max(1, (degree + 2) // 2)


@lru_cache(maxsize=None)
def interval_rule(degree: int) -> QuadratureRule:
    """Gauss-Legendre rule on [0, 1] exact for polynomials of ``degree``."""
    m = _n_points(degree)
    t, w = np.polynomial.legendre.leggauss(m)
    pts = 0.5 * (t + 1.0)
    return QuadratureRule(pts[:, None], 0.5 * w, degree)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Rule on the triangle (0,0), (1,0), (0,1); weights sum to 1/2."""
    if degree < 0:
        raise ValueError("quadrature degree must be non-negative")
    m = _n_points(degree)
    # weight (1 - t) on [-1, 1] absorbs the collapse Jacobian
    tj, wj = roots_jacobi(m, 1.0, 0.0)
    u = 0.5 * (tj + 1.0)
    wu = 0.25 * wj
    tl, wl = np.polynomial.legendre.leggauss(m)
    v = 0.5 * (tl + 1.0)
    wv = 0.5 * wl
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = np.column_stack([uu.ravel(), (vv * (1.0 - uu)).ravel()])
    wts = np.outer(wu, wv).ravel()
    return QuadratureRule(pts, wts, degree)


def _legendre_ld(m: int):
    """Gauss-Legendre nodes/weights on [-1, 1] polished by Newton steps in
    extended precision."""
    x0, _ = np.polynomial.legendre.leggauss(m)
    x = x0.astype(np.longdouble)
    for _ in range(3):
        p_prev, p = np.ones_like(x), x.copy()
        for k in range(1, m):
            p_prev, p = p, ((2 * k + 1) * x * p - k * p_prev) / (k + 1)
        dp = m * (x * p - p_prev) / (x * x - 1)
        x = x - p / dp
    p_prev, p = np.ones_like(x), x.copy()
    for k in range(1, m):
        p_prev, p = p, ((2 * k + 1) * x * p - k * p_prev) / (k + 1)
    dp = m * (x * p - p_prev) / (x * x - 1)
    w = 2 / ((1 - x * x) * dp * dp)
    return x, w


@lru_cache(maxsize=None)
def precise_interval_rule(degree: int) -> QuadratureRule:
    """Extended-precision Gauss-Legendre rule on [0, 1]."""
    x, w = _legendre_ld(_n_points(degree))
    return QuadratureRule(((x + 1) / 2)[:, None], w / 2, degree)


@lru_cache(maxsize=None)
def precise_triangle_rule(degree: int) -> QuadratureRule:
    """Extended-precision collapsed Gauss-Legendre rule on the reference
    triangle; one extra point in the collapsed direction absorbs the
    (1 - u) Jacobian."""
    gu = precise_interval_rule(degree + 1)
    gv = precise_interval_rule(degree)
    u, wu = gu.points[:, 0], gu.weights
    v, wv = gv.points[:, 0], gv.weights
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = np.column_stack([uu.ravel(), (vv * (1 - uu)).ravel()])
    wts = (np.outer(wu * (1 - u), wv)).ravel()
    return QuadratureRule(pts, wts, degree)


def monomial_integral(a: int, b: int) -> float:
    """Exact integral of x^a y^b over the reference triangle: a! b! / (a+b+2)!."""
    from math import factorial

    return factorial(a) * factorial(b) / factorial(a + b + 2)
