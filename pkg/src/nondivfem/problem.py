"""Problem files (INI syntax) and the bundled examples.

Sections::

    [problem]          name, kind = linear | hjb
    [domain]           tag = unit-square | l-shape, n = coarsest subdivisions
    [discretization]   degree, levels, p
    [exact]            u = <expression>          (optional manufactured solution)
    [control NAME]     A = const a11 a12 a21 a22 | e11; e12; e21; e22
                       b = const b1 b2 | e1; e2      c = <expr>
                       f = <expr> | auto             f_offset = <expr>
    [family]           type = example1, count, beta, c0, theta_min, rhs = manufactured | zero
    [cordes]           condition, lambda, lambda_range = lo hi, grid
    [solver]           lambda = <value> | search, lambda_range, tol, max_iter, method

``f = auto`` derives f = A:D^2u + b.grad u + c u from the exact solution.
Numeric values accept constant expressions such as ``pi/12`` or ``8/7``.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .coefficients import (
    CONDITIONS,
    CoefficientField,
    Control,
    ControlSet,
    example1_matrix,
    example1_thetas,
)
from .expressions import ExpressionError, parse
from .mesh import Mesh, build_structured
from .norms import ExactSolution

BUNDLED = (
    "poisson-square",
    "continuous-A-square",
    "discontinuous-A-cordes",
    "hjb-example1",
    "hjb-dominance",
    "cordes-example1-pi3",
)


class ProblemError(ValueError):
    pass


def _number(text: str, what: str) -> float:
    try:
        node = parse(text)
    except ExpressionError as exc:
        raise ProblemError(f"{what}: {exc}") from exc
    value = node.constant_value()
    if value is None or not math.isfinite(value):
        raise ProblemError(f"{what}: expected a finite constant, got {text!r}")
    return value


def _int(text: str, what: str) -> int:
    v = _number(text, what)
    if v != int(v):
        raise ProblemError(f"{what}: expected an integer, got {text!r}")
    return int(v)


def _field(text: str, shape: tuple, what: str) -> CoefficientField:
    text = text.strip()
    size = int(np.prod(shape)) if shape else 1
    try:
        if text.startswith("const"):
            vals = [_number(t, what) for t in text.split()[1:]]
            if len(vals) != size:
                raise ProblemError(f"{what}: 'const' needs {size} value(s), got {len(vals)}")
            return CoefficientField.constant(np.array(vals).reshape(shape))
        parts = [p.strip() for p in text.split(";")] if size > 1 else [text]
        if len(parts) != size:
            raise ProblemError(f"{what}: expected {size} ';'-separated expressions, got {len(parts)}")
        return CoefficientField.expression(parts, shape)
    except ExpressionError as exc:
        raise ProblemError(f"{what}: {exc}") from exc


@dataclass
class Problem:
    name: str
    kind: str
    domain: str
    n0: int
    degree: int
    levels: int
    p: float
    controls: ControlSet
    exact: ExactSolution | None
    cordes: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    source: str = ""

    def mesh(self, level: int = 0) -> Mesh:
        return build_structured(self.domain, self.n0 * 2**level)

    @property
    def control(self) -> Control:
        if len(self.controls) != 1:
            raise ProblemError(f"problem {self.name!r} has {len(self.controls)} controls; a linear solve needs one")
        return self.controls[0]


def _manufactured_rhs(ctl: Control, exact: ExactSolution, extra=None) -> CoefficientField:
    """f = A:D^2u + b.grad u + c u (+ extra(x, y))."""
    A, b, c = ctl.A, ctl.b, ctl.c
    if "piecewise" in (A.kind, b.kind, c.kind):
        raise ProblemError("f = auto is not available for piecewise-constant coefficients")

    def f(x, y):
        H = exact.hess(x, y)
        g = exact.grad(x, y)
        val = (
            np.einsum("...ij,ij...->...", A.evaluate(x, y), H)
            + np.einsum("...i,i...->...", b.evaluate(x, y), g)
            + c.evaluate(x, y) * exact.u(x, y)
        )
        return val if extra is None else val + extra(x, y)

    return CoefficientField.callable(f)


def _example1_family(sec, exact: ExactSolution | None) -> list[Control]:
    count = _int(sec.get("count", "8"), "family.count")
    beta = _number(sec.get("beta", "pi/12"), "family.beta")
    theta_min = _number(sec.get("theta_min", "0"), "family.theta_min")
    c0 = _number(sec.get("c0", "1"), "family.c0")
    rhs = sec.get("rhs", "manufactured" if exact is not None else "zero")
    if not c0 > 0:
        raise ProblemError("family.c0 must be positive")
    if not 0 <= theta_min <= beta <= math.pi / 3 + 1e-15:
        raise ProblemError("family angles must satisfy 0 <= theta_min <= beta <= pi/3")
    thetas = theta_min + example1_thetas(count, beta - theta_min)
    controls = []
    for k, th in enumerate(thetas):
        ctl = Control.make(f"theta{k}", example1_matrix(th), (0.0, 0.0), -c0, 0.0, theta=float(th))
        if rhs == "manufactured":
            if exact is None:
                raise ProblemError("family.rhs = manufactured needs an [exact] section")
            # s >= 0 with s = 0 for the control closest to vartheta(x, y)
            def shift(x, y, th=th):
                vt = beta * (x + y) / 2
                return (th - vt) ** 2 - np.min([(t - vt) ** 2 for t in thetas], axis=0)

            ctl = ctl.with_rhs(_manufactured_rhs(ctl, exact, shift))
        elif rhs != "zero":
            ctl = ctl.with_rhs(_field(rhs, (), "family.rhs"))
        controls.append(ctl)
    return controls


def parse_problem(text: str, name: str = "problem") -> Problem:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str  # keys are case sensitive (A vs a)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ProblemError(f"cannot parse problem file: {exc}") from exc

    prob = cp["problem"] if cp.has_section("problem") else {}
    kind = prob.get("kind", "linear")
    if kind not in ("linear", "hjb"):
        raise ProblemError(f"problem.kind must be linear or hjb, got {kind!r}")
    dom = cp["domain"] if cp.has_section("domain") else {}
    disc = cp["discretization"] if cp.has_section("discretization") else {}
    exact = None
    if cp.has_section("exact") and "u" in cp["exact"]:
        try:
            exact = ExactSolution.from_expression(cp["exact"]["u"])
        except ExpressionError as exc:
            raise ProblemError(f"exact.u: {exc}") from exc

    controls: list[Control] = []
    for sec_name in cp.sections():
        if not sec_name.startswith("control"):
            continue
        label = sec_name[len("control"):].strip() or f"c{len(controls)}"
        sec = cp[sec_name]
        if "A" not in sec:
            raise ProblemError(f"[{sec_name}] needs A")
        ctl = Control(
            label,
            _field(sec["A"], (2, 2), f"{label}.A"),
            _field(sec.get("b", "const 0 0"), (2,), f"{label}.b"),
            _field(sec.get("c", "0"), (), f"{label}.c"),
            CoefficientField.constant(0.0),
        )
        ftext = sec.get("f", "0").strip()
        if ftext == "auto":
            if exact is None:
                raise ProblemError(f"{label}.f = auto needs an [exact] section")
            offset = sec.get("f_offset")
            extra = None
            if offset is not None:
                off = _field(offset, (), f"{label}.f_offset")
                extra = lambda x, y, off=off: off.evaluate(x, y)  # noqa: E731
            ctl = ctl.with_rhs(_manufactured_rhs(ctl, exact, extra))
        else:
            ctl = ctl.with_rhs(_field(ftext, (), f"{label}.f"))
        controls.append(ctl)
    if cp.has_section("family"):
        fam = cp["family"]
        if fam.get("type", "example1") != "example1":
            raise ProblemError(f"unknown family type {fam.get('type')!r}")
        controls += _example1_family(fam, exact)
    if not controls:
        raise ProblemError("no controls defined")

    cordes = {}
    if cp.has_section("cordes"):
        sec = cp["cordes"]
        cond = sec.get("condition", "fem-general")
        if cond not in CONDITIONS:
            raise ProblemError(f"cordes.condition must be one of {CONDITIONS}, got {cond!r}")
        cordes["condition"] = cond
        if "lambda" in sec:
            cordes["lambda"] = _number(sec["lambda"], "cordes.lambda")
        if "lambda_range" in sec:
            cordes["lambda_range"] = [_number(t, "cordes.lambda_range") for t in sec["lambda_range"].split()]
        cordes["grid"] = _int(sec.get("grid", "0"), "cordes.grid")
    solver = {}
    if cp.has_section("solver"):
        sec = cp["solver"]
        lam = sec.get("lambda", "search").strip()
        solver["lambda"] = "search" if lam == "search" else _number(lam, "solver.lambda")
        solver["lambda_range"] = [_number(t, "solver.lambda_range") for t in sec.get("lambda_range", "0.01 100").split()]
        solver["tol"] = _number(sec.get("tol", "1e-8"), "solver.tol")
        solver["max_iter"] = _int(sec.get("max_iter", "500"), "solver.max_iter")
        solver["method"] = sec.get("method", "fixed-point")
        solver["condition"] = sec.get("condition", "fem-general")

    try:
        problem = Problem(
            name=prob.get("name", name),
            kind=kind,
            domain=dom.get("tag", "unit-square"),
            n0=_int(dom.get("n", "4"), "domain.n"),
            degree=_int(disc.get("degree", "2"), "discretization.degree"),
            levels=_int(disc.get("levels", "1"), "discretization.levels"),
            p=_number(disc.get("p", "2"), "discretization.p"),
            controls=ControlSet(controls),
            exact=exact,
            cordes=cordes,
            solver=solver,
            source=text,
        )
    except ValueError as exc:
        raise ProblemError(str(exc)) from exc
    validate_overrides(problem)
    return problem


def validate_overrides(problem: Problem) -> None:
    if problem.domain not in ("unit-square", "l-shape"):
        raise ProblemError(f"domain.tag must be unit-square or l-shape, got {problem.domain!r}")
    if problem.n0 < 1 or (problem.domain == "l-shape" and problem.n0 % 2):
        raise ProblemError("domain.n must be positive (and even on the l-shape)")
    if not 2 <= problem.degree <= 4:
        raise ProblemError("discretization.degree must lie in 2..4")
    if problem.levels < 1:
        raise ProblemError("discretization.levels must be at least 1")
    if not problem.p > 1:
        raise ProblemError("discretization.p must exceed 1")


def load_problem(path_or_name) -> Problem:
    """Read a problem file, or a bundled problem by name."""
    name = str(path_or_name)
    if name in BUNDLED:
        text = resources.files("nondivfem.problems").joinpath(f"{name}.ini").read_text()
        return parse_problem(text, name)
    path = Path(name)
    if not path.exists():
        raise ProblemError(f"problem file {name!r} not found (bundled: {', '.join(BUNDLED)})")
    return parse_problem(path.read_text(), path.stem)
