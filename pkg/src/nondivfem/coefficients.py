"""Problem data, gamma weights and Cordes-type feasibility checks.

A control carries (A, b, c, f); a control set is a finite list of them.
All checks are sampling based: fields are evaluated at given points
(normally the quadrature points of a mesh) and conditions are tested there.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expressions import Node, parse

CONDITIONS = ("pde-general", "fem-general", "pde-special", "fem-special")
DIM = 2


class CoefficientError(ValueError):
    pass


# -- fields ------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientField:
    """Scalar, vector (2,) or matrix (2, 2) valued coefficient.

    kind is one of "constant", "piecewise" (one value per mesh cell) or
    "expression" (parsed trees in x and y, one per component).
    """

    kind: str
    payload: object
    shape: tuple = ()
    smoothness: int | None = None  # polynomial-degree hint for quadrature

    @classmethod
    def constant(cls, value) -> "CoefficientField":
        v = np.asarray(value, dtype=float)
        return cls("constant", v, v.shape, 0)

    @classmethod
    def piecewise(cls, table) -> "CoefficientField":
        t = np.asarray(table, dtype=float)
        return cls("piecewise", t, t.shape[1:], 0)

    @classmethod
    def expression(cls, exprs, shape=()) -> "CoefficientField":
        """exprs: a string/Node, or a flat sequence of them in row-major order."""
        items = [exprs] if isinstance(exprs, (str, Node)) else list(exprs)
        size = int(np.prod(shape)) if shape else 1
        if len(items) != size:
            raise CoefficientError(f"expected {size} expression(s) for shape {shape}, got {len(items)}")
        nodes = tuple(parse(e) if isinstance(e, str) else e for e in items)
        consts = [n.constant_value() for n in nodes]
        if all(v is not None for v in consts):
            vals = np.array(consts).reshape(shape)
            return cls.constant(vals)
        return cls("expression", nodes, tuple(shape), None)

    @classmethod
    def callable(cls, func: Callable, shape=()) -> "CoefficientField":
        """func(x, y) -> array of shape x.shape + shape."""
        return cls("callable", func, tuple(shape), None)

    def evaluate(self, x, y, cells=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        base = np.broadcast_shapes(x.shape, y.shape)
        if self.kind == "constant":
            return np.broadcast_to(self.payload, base + self.shape).copy()
        if self.kind == "piecewise":
            if cells is None:
                raise CoefficientError("piecewise-constant field needs cell indices")
            cells = np.broadcast_to(np.asarray(cells), base)
            if cells.size and (cells.min() < 0 or cells.max() >= len(self.payload)):
                raise CoefficientError("cell index outside the piecewise table")
            return self.payload[cells]
        if self.kind == "callable":
            out = np.asarray(self.payload(x, y), dtype=float)
            return np.broadcast_to(out, base + self.shape).copy()
        with np.errstate(all="ignore"):
            comps = [n(x, y) for n in self.payload]
        out = np.stack(comps, axis=-1).reshape(base + self.shape)
        bad = ~np.isfinite(out)
        if bad.any():
            idx = np.argwhere(bad.reshape(base + (-1,)).any(axis=-1))[0]
            raise CoefficientError(
                f"coefficient evaluation failed (non-finite value) at point "
                f"({x[tuple(idx)] if x.shape else float(x)!r}, {y[tuple(idx)] if y.shape else float(y)!r})"
            )
        return out

    def is_zero(self) -> bool:
        return self.kind == "constant" and not np.any(self.payload)

    def scaled(self, t: float) -> "CoefficientField":
        if self.kind == "expression":
            from .expressions import Num, mul

            return CoefficientField("expression", tuple(mul(Num(float(t)), n) for n in self.payload), self.shape)
        if self.kind == "callable":
            f = self.payload
            return CoefficientField.callable(lambda x, y: t * np.asarray(f(x, y)), self.shape)
        return CoefficientField(self.kind, t * self.payload, self.shape, self.smoothness)


def _as_field(value, shape) -> CoefficientField:
    if isinstance(value, CoefficientField):
        if value.shape != shape:
            raise CoefficientError(f"field has shape {value.shape}, expected {shape}")
        return value
    if isinstance(value, (str, Node)):
        return CoefficientField.expression(value, shape)
    if callable(value):
        return CoefficientField.callable(value, shape)
    arr = np.asarray(value, dtype=object)
    if arr.dtype == object and any(isinstance(v, (str, Node)) for v in arr.ravel()):
        return CoefficientField.expression(list(arr.ravel()), shape)
    return CoefficientField.constant(np.asarray(value, dtype=float).reshape(shape))


@dataclass(frozen=True)
class Control:
    label: str
    A: CoefficientField
    b: CoefficientField
    c: CoefficientField
    f: CoefficientField
    params: dict = field(default_factory=dict)

    @classmethod
    def make(cls, label, A, b=(0.0, 0.0), c=0.0, f=0.0, **params) -> "Control":
        return cls(str(label), _as_field(A, (2, 2)), _as_field(b, (2,)), _as_field(c, ()), _as_field(f, ()), params)

    def with_rhs(self, f) -> "Control":
        return Control(self.label, self.A, self.b, self.c, _as_field(f, ()), self.params)

    def scaled(self, t: float) -> "Control":
        return Control(self.label, self.A.scaled(t), self.b.scaled(t), self.c.scaled(t), self.f.scaled(t), self.params)


@dataclass
class ControlValues:
    """Controls evaluated at sample points; leading axis indexes controls."""

    A: np.ndarray  # (m, *pts, 2, 2)
    b: np.ndarray  # (m, *pts, 2)
    c: np.ndarray  # (m, *pts)
    f: np.ndarray  # (m, *pts)


class ControlSet:
    def __init__(self, controls: Sequence[Control]):
        controls = list(controls)
        if not controls:
            raise CoefficientError("control set is empty")
        labels = [c.label for c in controls]
        if len(set(labels)) != len(labels):
            raise CoefficientError("control labels must be unique")
        self.controls = controls

    def __len__(self):
        return len(self.controls)

    def __iter__(self):
        return iter(self.controls)

    def __getitem__(self, i):
        return self.controls[i]

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.controls]

    def permuted(self, perm) -> "ControlSet":
        return ControlSet([self.controls[i] for i in perm])

    def evaluate(self, x, y, cells=None) -> ControlValues:
        parts = {k: [] for k in "Abcf"}
        for ctl in self.controls:
            for k in "Abcf":
                parts[k].append(getattr(ctl, k).evaluate(x, y, cells))
        return ControlValues(*(np.stack(parts[k]) for k in "Abcf"))

    def drift_free(self, values: ControlValues | None = None) -> bool:
        """True when every b and c vanishes (at the samples, if given)."""
        if values is None:
            return all(c.b.is_zero() and c.c.is_zero() for c in self.controls)
        return not (np.any(values.b) or np.any(values.c))

    def validate(self, x, y, cells=None, nu: float | None = None) -> float:
        """Check symmetry, ellipticity and c <= 0 at the samples; return the
        smallest eigenvalue of A seen (the empirical ellipticity constant)."""
        vals = self.evaluate(x, y, cells)
        return validate_values(vals, np.asarray(x), np.asarray(y), self.labels, nu)


def validate_values(vals: ControlValues, x, y, labels, nu=None) -> float:
    A = vals.A
    asym = np.abs(A[..., 0, 1] - A[..., 1, 0])
    scale = 1.0 + np.abs(A).max(axis=(-1, -2))
    pts = np.broadcast_to(x, A.shape[1:-2]), np.broadcast_to(y, A.shape[1:-2])

    def where(mask):
        k, *idx = np.argwhere(mask)[0]
        return labels[k], float(pts[0][tuple(idx)]), float(pts[1][tuple(idx)])

    bad = asym > 1e-12 * scale
    if bad.any():
        lab, px, py = where(bad)
        raise CoefficientError(f"A of control {lab!r} is not symmetric at ({px!r}, {py!r})")
    sym = 0.5 * (A + np.swapaxes(A, -1, -2))
    lam_min = np.linalg.eigvalsh(sym)[..., 0]
    floor = 0.0 if nu is None else nu
    bad = ~(lam_min > floor) if nu is None else lam_min < floor
    if bad.any():
        lab, px, py = where(bad)
        raise CoefficientError(f"A of control {lab!r} is not uniformly elliptic at ({px!r}, {py!r})")
    bad = vals.c > 0
    if bad.any():
        lab, px, py = where(bad)
        raise CoefficientError(f"c of control {lab!r} is positive at ({px!r}, {py!r})")
    return float(lam_min.min())


# -- gamma weights ------------------------------------------------------------

def _trace_and_norm2(A):
    A = np.asarray(A, dtype=float)
    return A[..., 0, 0] + A[..., 1, 1], np.einsum("...ij,...ij->...", A, A)


def _guard_zero(norm2, points):
    if np.any(norm2 == 0):
        msg = "division by zero: |A| = 0"
        if points is not None:
            idx = np.argwhere(np.asarray(norm2) == 0)[0]
            msg += f" at point {tuple(np.asarray(points)[tuple(idx)].tolist())}"
        raise ZeroDivisionError(msg)


def gamma(A, points=None) -> np.ndarray:
    """Tr(A) / |A|^2 with the Frobenius norm; vectorized over leading axes."""
    tr, n2 = _trace_and_norm2(A)
    _guard_zero(n2, points)
    return tr / n2


def gamma_alpha(A, points=None) -> np.ndarray:
    """Per-control weight; same formula as ``gamma`` (squared denominator)."""
    return gamma(A, points)


def gamma_lambda_alpha(A, b, c, lam: float, points=None) -> np.ndarray:
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam!r}")
    tr, n2 = _trace_and_norm2(A)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    denom = n2 + np.einsum("...i,...i->...", b, b) / (2 * lam) + (c / lam) ** 2
    _guard_zero(denom, points)
    return (tr + np.abs(c) / lam) / denom


# -- Cordes conditions --------------------------------------------------------

def cordes_lhs(condition: str, A, b, c, lam: float | None):
    """Pointwise left-hand side of the condition and a feasibility mask.

    The mask is False where the fem-general denominator is not positive.
    """
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    tr, n2 = _trace_and_norm2(A)
    b = np.asarray(b, dtype=float)
    c = np.abs(np.asarray(c, dtype=float))
    if condition.endswith("special"):
        return n2 / tr**2, np.ones(np.shape(tr), dtype=bool)
    if lam is None or not lam > 0:
        raise ValueError(f"condition {condition!r} needs lambda > 0, got {lam!r}")
    b2 = np.einsum("...i,...i->...", b, b)
    if condition == "pde-general":
        return (n2 + b2 / (2 * lam) + (c / lam) ** 2) / (tr + c / lam) ** 2, np.ones(np.shape(tr), dtype=bool)
    denom = 1 + 2 * c / (lam * tr) - ((c / lam) ** 2 + b2 / (2 * lam)) / n2
    ok = denom > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        lhs = np.where(ok, (n2 / tr**2) / np.where(ok, denom, 1.0), np.inf)
    return lhs, ok


def max_feasible_epsilon(condition: str, lhs: float) -> float:
    """Largest eps with lhs <= 1/(d + eps) (general) or 1/(d - 1 + eps) (special)."""
    if not np.isfinite(lhs) or lhs <= 0:
        return -math.inf
    shift = DIM - 1 if condition.endswith("special") else DIM
    return 1.0 / lhs - shift


@dataclass
class CordesReport:
    condition: str
    lam: float | None
    lhs_max: float
    max_epsilon: float
    worst_point: list
    worst_control: str
    n_points: int
    n_controls: int
    n_infeasible: int
    infeasible_points: list  # first few (control, x, y) with non-positive denominator

    def feasible(self, eps: float, tol: float = 1e-12) -> bool:
        if self.n_infeasible:
            return False
        shift = DIM - 1 if self.condition.endswith("special") else DIM
        return self.lhs_max <= 1.0 / (shift + eps) + tol

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("lhs_max", "max_epsilon"):
            if not math.isfinite(d[k]):
                d[k] = None  # JSON has no infinities
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_float)


def _json_float(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(type(v))


def _flat_points(points):
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("no sample points")
    return pts


def check_cordes(condition: str, controls: ControlSet, lam: float | None, points, cells=None,
                 values: ControlValues | None = None, max_listed: int = 20) -> CordesReport:
    """Evaluate a Cordes-type condition at every (control, sample point)."""
    pts = _flat_points(points)
    if values is None:
        cl = None if cells is None else np.asarray(cells).reshape(-1)
        values = controls.evaluate(pts[:, 0], pts[:, 1], cl)
    if condition.endswith("special") and not controls.drift_free(values):
        raise ValueError(f"condition {condition!r} applies only when b = 0 and c = 0 for every control")
    lhs, ok = cordes_lhs(condition, values.A, values.b, values.c, lam)
    bad = np.argwhere(~ok)
    k, q = np.unravel_index(int(np.argmax(lhs)), lhs.shape)
    worst = float(lhs[k, q])
    return CordesReport(
        condition=condition,
        lam=None if lam is None else float(lam),
        lhs_max=worst,
        max_epsilon=max_feasible_epsilon(condition, worst) if len(bad) == 0 else -math.inf,
        worst_point=[float(pts[q, 0]), float(pts[q, 1])],
        worst_control=controls.labels[k],
        n_points=len(pts),
        n_controls=len(controls),
        n_infeasible=len(bad),
        infeasible_points=[[controls.labels[i], float(pts[j, 0]), float(pts[j, 1])] for i, j in bad[:max_listed]],
    )


def search_lambda(condition: str, controls: ControlSet, lam_range, points, cells=None,
                  n_grid: int = 64, rel_width: float = 1e-6):
    """Maximize the feasible epsilon over lambda in [lo, hi].

    Coarse logarithmic grid followed by golden-section refinement in log(lambda)
    around the best grid point. Returns (lambda*, epsilon*).
    """
    lo, hi = (float(v) for v in lam_range)
    if not 0 < lo < hi:
        raise ValueError(f"lambda range must satisfy 0 < lo < hi, got [{lo!r}, {hi!r}]")
    pts = _flat_points(points)
    cl = None if cells is None else np.asarray(cells).reshape(-1)
    values = controls.evaluate(pts[:, 0], pts[:, 1], cl)

    def eps(log_lam):
        lhs, ok = cordes_lhs(condition, values.A, values.b, values.c, math.exp(log_lam))
        if not ok.all():
            return -math.inf
        return max_feasible_epsilon(condition, float(lhs.max()))

    grid = np.linspace(math.log(lo), math.log(hi), n_grid)
    scores = [eps(g) for g in grid]
    i = int(np.argmax(scores))
    best_x, best_e = float(grid[i]), scores[i]
    if math.isfinite(best_e):
        a, b = float(grid[max(i - 1, 0)]), float(grid[min(i + 1, n_grid - 1)])
        invphi = (math.sqrt(5) - 1) / 2
        c, d = b - invphi * (b - a), a + invphi * (b - a)
        fc, fd = eps(c), eps(d)
        # width in log space approximates relative width in lambda
        while b - a > rel_width:
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - invphi * (b - a)
                fc = eps(c)
            else:
                a, c, fc = c, d, fd
                d = a + invphi * (b - a)
                fd = eps(d)
        for xx, ee in ((c, fc), (d, fd)):
            if ee > best_e:
                best_x, best_e = xx, ee
    return math.exp(best_x), best_e


# -- example family -----------------------------------------------------------

def example1_matrix(theta: float, rotation: float = 0.0) -> np.ndarray:
    """A = sigma sigma^T / 2 with sigma = R(rotation) [[1, sin t], [0, cos t]].

    Tr A = 1 and |A|^2 = (1 + sin^2 t) / 2 for every rotation.
    """
    s, co = math.sin(theta), math.cos(theta)
    cr, sr = math.cos(rotation), math.sin(rotation)
    R = np.array([[cr, -sr], [sr, cr]])
    sigma = R @ np.array([[1.0, s], [0.0, co]])
    return 0.5 * sigma @ sigma.T


def example1_thetas(count: int, beta: float) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be positive")
    return np.linspace(0.0, beta, count) if count > 1 else np.array([0.0])


def example1_controls(count: int, beta: float, c0: float, f=0.0) -> ControlSet:
    """Finite theta family A = sigma sigma^T / 2: equispaced theta in [0, beta], b = 0, c = -c0."""
    if not c0 > 0:
        raise ValueError("c0 must be positive")
    return ControlSet(
        [
            Control.make(f"theta{k}", example1_matrix(t), (0.0, 0.0), -c0, f, theta=float(t))
            for k, t in enumerate(example1_thetas(count, beta))
        ]
    )


def example1_closed_form_lhs(theta: float, c0: float, lam: float) -> float:
    """Closed form of the fem-general left-hand side for the theta family."""
    s2 = math.sin(theta) ** 2
    t = c0 / lam
    return 0.5 * (1 + s2) / (1 + 2 * t - 2 / (1 + s2) * t**2)


def default_sample_points(ctx_points: np.ndarray, grid: int = 0, domain_tag: str = "unit-square"):
    """Quadrature points (any shape ending in 2) plus an optional uniform grid."""
    pts = [np.asarray(ctx_points, dtype=float).reshape(-1, 2)]
    if grid:
        g = (np.arange(grid) + 0.5) / grid
        X, Y = np.meshgrid(g, g, indexing="ij")
        G = np.column_stack([X.ravel(), Y.ravel()])
        if domain_tag == "l-shape":
            G = G[~((G[:, 0] > 0.5) & (G[:, 1] > 0.5))]
        pts.append(G)
    return np.vstack(pts)
