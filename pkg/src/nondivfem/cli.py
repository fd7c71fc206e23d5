"""Command-line interface.

    nondivfem check-cordes --problem hjb-example1
    nondivfem solve-linear --problem continuous-A-square --levels 2 --out run/
    nondivfem solve-hjb    --problem hjb-example1 --out run/
    nondivfem convergence  --problem poisson-square --levels 3 --out run/
    nondivfem verify

Reports go to --out (default: current directory). Payload files
(report.json, table.csv, iteration_log.csv) depend only on the inputs and
the seed; wall-clock data is kept apart in metadata.json.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

COMMANDS = ("check-cordes", "solve-linear", "solve-hjb", "convergence", "verify")
THREADS_ENV = "NONDIVFEM_THREADS"


# -- output helpers ----------------------------------------------------------

def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        return "null"  # strict JSON has no NaN or infinities
    s = f"{v:.17g}"
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with every float written to 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{pad}{dumps(v, indent, _level + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist(), indent, _level)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


class CliError(Exception):
    def __init__(self, kind: str, message: str, **details):
        super().__init__(message)
        self.kind = kind
        self.details = details


# -- commands ------------------------------------------------------------------

def _context(problem, level: int, degree: int):
    from .assembly import FemContext

    return FemContext(problem.mesh(level), degree)


def _lambda_for(problem, ctx, args, section: dict):
    """Pinned lambda (flag or file) or the result of the feasibility search."""
    from .coefficients import search_lambda

    if args.lam is not None:
        return float(args.lam), None
    lam = section.get("lambda", "search")
    if lam != "search":
        return float(lam), None
    lo, hi = section.get("lambda_range", [0.01, 100.0])
    cond = section.get("condition", "fem-general")
    lam, eps = search_lambda(cond, problem.controls, (lo, hi), ctx.points, ctx.cells)
    return lam, {"condition": cond, "lambda": lam, "max_epsilon": eps, "lambda_range": [lo, hi]}


def cmd_check_cordes(problem, args) -> dict:
    from .coefficients import check_cordes, default_sample_points, search_lambda

    ctx = _context(problem, args.levels - 1, args.degree)
    section = dict(problem.cordes)
    cond = section.get("condition", "fem-general" if not problem.controls.drift_free() else "fem-special")
    grid = section.get("grid", 0)
    pts = default_sample_points(ctx.points, grid, problem.domain)
    if grid and any(c.A.kind == "piecewise" for c in problem.controls):
        raise CliError("invalid-input", "grid sampling is unavailable for piecewise-constant coefficients")
    cells_arg = None if grid else ctx.cells
    search = None
    lam = args.lam if args.lam is not None else section.get("lambda")
    if cond.endswith("general") and lam is None:
        lo, hi = section.get("lambda_range", [0.01, 100.0])
        lam, eps = search_lambda(cond, problem.controls, (lo, hi), pts, cells_arg)
        search = {"lambda": lam, "max_epsilon": eps, "lambda_range": [lo, hi]}
    rep = check_cordes(cond, problem.controls, lam, pts, cells_arg)
    out = {"command": "check-cordes", "problem": problem.name, "report": rep.to_dict()}
    if search is not None:
        out["lambda_search"] = search
    return out


def cmd_solve_linear(problem, args) -> dict:
    from .assembly import solve_linear_nondiv

    ctx = _context(problem, args.levels - 1, args.degree)
    rep = solve_linear_nondiv(ctx, problem.control, problem.exact, args.p)
    if args.vtk:
        rep.solution.write_vtk(Path(args.out) / "solution.vtk")
    if not rep.residual_ok:
        raise CliError("residual-too-large", "linear solve residual exceeds 1e-9 * ||F||_inf", **rep.to_dict())
    return {"command": "solve-linear", "problem": problem.name, "report": rep.to_dict(),
            "_timings": rep.timings}


def cmd_solve_hjb(problem, args) -> dict:
    from .hjb import cell_majority_control, iteration_log_csv, solve_hjb

    ctx = _context(problem, args.levels - 1, args.degree)
    section = dict(problem.solver)
    lam, search = _lambda_for(problem, ctx, args, section)
    tol = args.tol if args.tol is not None else section.get("tol", 1e-8)
    rep = solve_hjb(ctx, problem.controls, lam, tol, section.get("max_iter", 500),
                    section.get("method", "fixed-point"), problem.exact)
    out = Path(args.out)
    _write(out, "iteration_log.csv", iteration_log_csv(rep.state, problem.controls.labels))
    majority = cell_majority_control(ctx, rep.state.argmax, len(problem.controls))
    lines = ["cell,control"] + [f"{k},{problem.controls.labels[a]}" for k, a in enumerate(majority)]
    _write(out, "active_controls.csv", "\n".join(lines) + "\n")
    if args.vtk:
        rep.solution.write_vtk(out / "solution.vtk")
    payload = {"command": "solve-hjb", "problem": problem.name, "report": rep.to_dict(), "_timings": rep.timings}
    if search is not None:
        payload["lambda_search"] = search
    return payload


def cmd_convergence(problem, args) -> dict:
    from .assembly import solve_linear_nondiv
    from .hjb import solve_hjb
    from .norms import convergence_table, error_report, table_csv

    if problem.exact is None:
        raise CliError("invalid-input", f"problem {problem.name!r} has no [exact] solution for a convergence study")
    if args.levels < 2:
        raise CliError("invalid-input", "a convergence study needs --levels >= 2")
    reports = []
    lam = None
    for level in range(args.levels):
        ctx = _context(problem, level, args.degree)
        if problem.kind == "linear":
            uh = solve_linear_nondiv(ctx, problem.control).solution
        else:
            if lam is None:
                lam, _ = _lambda_for(problem, ctx, args, dict(problem.solver))
            tol = args.tol if args.tol is not None else problem.solver.get("tol", 1e-8)
            uh = solve_hjb(ctx, problem.controls, lam, tol, problem.solver.get("max_iter", 500)).solution
        reports.append(error_report(ctx, uh, problem.exact, args.p, level, proxies=True))
    rows = convergence_table(reports)
    _write(Path(args.out), "table.csv", table_csv(rows))
    return {"command": "convergence", "problem": problem.name, "rows": rows,
            "levels": [r.to_dict() for r in reports]}


def cmd_verify(args) -> dict:
    from .verify import run_suite

    checks = run_suite(seed=args.seed)
    return {"command": "verify", "seed": args.seed, "checks": checks,
            "passed": all(c["passed"] for c in checks)}


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nondivfem", description="Discrete-Hessian FEM for non-divergence and HJB problems")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--problem", help="problem file or bundled problem name")
    ap.add_argument("--levels", type=int, help="refinement levels (solves use the finest)")
    ap.add_argument("--degree", type=int, help="polynomial degree r >= 2")
    ap.add_argument("--p", type=float, help="Sobolev exponent of the error norms")
    ap.add_argument("--lambda", dest="lam", type=float, help="pin lambda instead of searching")
    ap.add_argument("--tol", type=float, help="HJB stopping tolerance")
    ap.add_argument("--out", default=".", help="output directory")
    ap.add_argument("--seed", type=int, default=42, help="seed for randomized checks")
    ap.add_argument("--vtk", action="store_true", help="also write solution.vtk")
    return ap


def _apply_overrides(problem, args):
    from .problem import validate_overrides

    if args.degree is not None:
        problem.degree = args.degree
    if args.levels is not None:
        problem.levels = args.levels
    if args.p is not None:
        problem.p = args.p
    validate_overrides(problem)
    if args.lam is not None and not args.lam > 0:
        raise CliError("invalid-input", f"--lambda must be positive, got {args.lam!r}")
    if args.tol is not None and not args.tol > 0:
        raise CliError("invalid-input", f"--tol must be positive, got {args.tol!r}")
    args.degree, args.levels, args.p = problem.degree, problem.levels, problem.p


def run(args) -> int:
    from .assembly import SingularSystemError
    from .coefficients import CoefficientError
    from .expressions import ExpressionError
    from .problem import ProblemError, load_problem

    out = Path(args.out)
    started = time.time()
    t0 = time.perf_counter()
    try:
        if args.command == "verify":
            payload = cmd_verify(args)
        else:
            if not args.problem:
                raise CliError("invalid-input", f"{args.command} needs --problem")
            problem = load_problem(args.problem)
            _apply_overrides(problem, args)
            out.mkdir(parents=True, exist_ok=True)
            handler = {
                "check-cordes": cmd_check_cordes,
                "solve-linear": cmd_solve_linear,
                "solve-hjb": cmd_solve_hjb,
                "convergence": cmd_convergence,
            }[args.command]
            payload = handler(problem, args)
    except (ProblemError, ExpressionError, CoefficientError) as exc:
        return _fail(out, args, "invalid-input", str(exc), _offset(exc))
    except SingularSystemError as exc:
        return _fail(out, args, "singular-system", str(exc), None, exc.diagnostics)
    except CliError as exc:
        return _fail(out, args, exc.kind, str(exc), None, exc.details)
    except (ValueError, ZeroDivisionError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(out, args, "numerical-failure", str(exc))
    timings = payload.pop("_timings", {})
    _write(out, "report.json", dumps(payload) + "\n")
    _write_metadata(out, args, started, time.perf_counter() - t0, timings)
    print(f"{args.command}: wrote {out / 'report.json'}")
    if args.command == "verify" and not payload["passed"]:
        for c in payload["checks"]:
            if not c["passed"]:
                print(f"FAILED {c['name']}: {c['detail']}", file=sys.stderr)
        return 1
    return 0


def _offset(exc):
    """Byte offset of a parse error, also when wrapped by a problem-file error."""
    while exc is not None:
        if getattr(exc, "offset", None) is not None:
            return exc.offset
        exc = exc.__cause__
    return None


def _write_metadata(out: Path, args, started: float, elapsed: float, timings: dict):
    meta = {
        "command": args.command,
        "started_unix": started,
        "elapsed_s": elapsed,
        "timings": timings,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    _write(out, "metadata.json", dumps(meta) + "\n")


def _fail(out: Path, args, kind: str, message: str, offset=None, details=None) -> int:
    record = {"error": kind, "message": message, "command": args.command}
    if offset is not None:
        record["byte_offset"] = offset
    if details:
        record["details"] = details
    text = dumps(record)
    print(text, file=sys.stderr)
    try:
        _write(out, "error.json", text + "\n")
    except OSError:
        pass
    return 2


def main(argv=None) -> int:
    threads = os.environ.get(THREADS_ENV)
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        args.levels = args.levels or 1
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
