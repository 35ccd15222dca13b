"""Problem files, command-line front end and report formatting.

Problem file format (line oriented, ``#`` starts a comment)::

    MATPOLY n d
    DEG 0
    <n rows of n reals>
    ...
    DEG d
    <n rows of n reals>
    STRUCTURE degree|support|entry-degree|<mask file>   (optional)
    RANKDROP r                                          (optional)
    KERNEL r                                            (optional)
    DEG k
    <n rows of r reals>
    ...
    OPTION <name> <value>                               (optional, repeatable)

Every ``DEG`` block of the matrix must appear exactly once.  Kernel blocks
may be listed for any subset of powers; missing powers are zero and each
entry's degree bound is its highest nonzero printed power.  A mask file
path is resolved relative to the problem file.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .embedding import distance_lower_bound, minimal_embed, r_embed
from .kkt import KKTProblem, grad_lagrangian, residual
from .polycore import MatrixPolynomial, PolyVector, apply, frobenius_norm
from .rankfact import coordinate_descent, separation_check
from .solver import (SolveReport, SolverError, Tolerances, init_lambda,
                     solve)
from .structure import (NORMALIZATIONS, NormalizationSpec,
                        PerturbationStructure, read_mask_file,
                        structure_degree_preserving,
                        structure_entry_degree_preserving,
                        structure_support_preserving)

__all__ = [
    "ProblemFile",
    "ProblemFileError",
    "parse_problem",
    "write_problem",
    "fixture_path",
    "format_json",
    "format_text",
    "run",
    "main",
]

EXIT_OK = 0
EXIT_FAILED = 2
EXIT_USAGE = 64

STRUCTURE_KINDS = {
    "degree": structure_degree_preserving,
    "support": structure_support_preserving,
    "entry-degree": structure_entry_degree_preserving,
}
OPTIONS = ("normalize", "kernel-degree", "kernel-support", "damped",
           "max-iter", "tol-step", "tol-feas")

log = logging.getLogger("polyrank")


class ProblemFileError(ValueError):
    """Malformed problem file; the message carries ``path:line``."""


@dataclass(frozen=True, eq=False)
class ProblemFile:
    A: MatrixPolynomial
    r: int = 1
    structure: PerturbationStructure | None = None
    structure_ref: str | None = None
    kernel: tuple | None = None
    options: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.A.n

    @property
    def d(self) -> int:
        return self.A.d


# ---------------------------------------------------------------- parsing

def _lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _number(tok: str, where: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ProblemFileError(f"{where}: syntax error, expected a real number, got "
                               f"{tok!r}") from None
    if not math.isfinite(v):
        raise ProblemFileError(f"{where}: syntax error, non-finite value {tok!r}")
    return v


def _integer(tok: str, where: str, low: int = 0) -> int:
    try:
        v = int(tok)
    except ValueError:
        raise ProblemFileError(f"{where}: syntax error, expected an integer, got "
                               f"{tok!r}") from None
    if v < low:
        raise ProblemFileError(f"{where}: value {v} must be at least {low}")
    return v


def _read_block(lines, pos, rows, cols, where):
    """``rows`` numeric rows of ``cols`` entries starting at ``pos``."""
    out = np.zeros((rows, cols))
    for i in range(rows):
        if pos + i >= len(lines):
            raise ProblemFileError(f"{where}: block ends after {i} of "
                                   f"{rows} rows")
        lineno, tok = lines[pos + i]
        if not _is_numeric(tok[0]):
            raise ProblemFileError(f"{where.rsplit(':', 1)[0]}:{lineno}: "
                                   f"block ends after {i} of {rows} rows")
        if len(tok) != cols:
            raise ProblemFileError(
                f"{where.rsplit(':', 1)[0]}:{lineno}: dimension mismatch, "
                f"expected {cols} values, got {len(tok)}")
        out[i] = [_number(t, f"{where.rsplit(':', 1)[0]}:{lineno}")
                  for t in tok]
    return out, pos + rows


def _is_numeric(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _structure_from(ref: str, A: MatrixPolynomial, base: Path | None):
    if ref in STRUCTURE_KINDS:
        return STRUCTURE_KINDS[ref](A)
    if ref.startswith("mask:"):
        ref = ref[5:]
    path = Path(ref)
    if base is not None and not path.is_absolute():
        path = base / path
    if not path.exists():
        raise ProblemFileError(f"structure mask {str(path)!r} not found")
    return read_mask_file(path, A)


def parse_problem_text(text: str, name: str = "<string>",
                       base: Path | None = None) -> ProblemFile:
    """Parse problem-file ``text``; see the module docstring."""
    lines = list(_lines(text))
    if not lines:
        raise ProblemFileError(f"{name}:1: syntax error, empty problem file")
    lineno, tok = lines[0]
    if tok[0].upper() != "MATPOLY" or len(tok) != 3:
        raise ProblemFileError(f"{name}:{lineno}: syntax error, expected "
                               f"'MATPOLY n d'")
    n = _integer(tok[1], f"{name}:{lineno}", 1)
    d = _integer(tok[2], f"{name}:{lineno}", 0)
    coeffs: dict[int, np.ndarray] = {}
    kernel: dict[int, np.ndarray] = {}
    r = None
    kernel_cols = None
    structure_ref = None
    options: dict = {}
    section = "matrix"
    pos = 1
    while pos < len(lines):
        lineno, tok = lines[pos]
        where = f"{name}:{lineno}"
        key = tok[0].upper()
        pos += 1
        if key == "DEG":
            if len(tok) != 2:
                raise ProblemFileError(f"{where}: syntax error, expected "
                                       f"'DEG k'")
            k = _integer(tok[1], where)
            if section == "matrix":
                if k > d:
                    raise ProblemFileError(f"{where}: degree mismatch, DEG "
                                           f"{k} exceeds declared degree {d}")
                if k in coeffs:
                    raise ProblemFileError(f"{where}: duplicate DEG {k}")
                coeffs[k], pos = _read_block(lines, pos, n, n, where)
            elif kernel_cols is None:
                raise ProblemFileError(f"{where}: syntax error, DEG block "
                                       f"after the matrix section")
            else:
                if k in kernel:
                    raise ProblemFileError(f"{where}: duplicate kernel DEG "
                                           f"{k}")
                kernel[k], pos = _read_block(lines, pos, n, kernel_cols,
                                             where)
        elif key == "KERNEL":
            if len(tok) != 2 or kernel_cols is not None:
                raise ProblemFileError(f"{where}: syntax error, expected a "
                                       f"single 'KERNEL r' line")
            kernel_cols = _integer(tok[1], where, 1)
            section = "kernel"
        elif key == "STRUCTURE":
            if len(tok) != 2:
                raise ProblemFileError(f"{where}: syntax error, expected "
                                       f"'STRUCTURE <kind or file>'")
            structure_ref = tok[1]
            section = "tail"
        elif key == "RANKDROP":
            if len(tok) != 2:
                raise ProblemFileError(f"{where}: syntax error, expected "
                                       f"'RANKDROP r'")
            r = _integer(tok[1], where, 1)
            section = "tail"
        elif key == "OPTION":
            if len(tok) != 3 or tok[1] not in OPTIONS:
                raise ProblemFileError(
                    f"{where}: syntax error, expected 'OPTION <name> "
                    f"<value>' with name in {', '.join(OPTIONS)}")
            options[tok[1]] = tok[2]
            section = "tail"
        else:
            raise ProblemFileError(f"{where}: syntax error, unexpected "
                                   f"{tok[0]!r}")
    missing = sorted(set(range(d + 1)) - set(coeffs))
    if missing:
        raise ProblemFileError(f"{name}: degree mismatch, missing DEG "
                               f"block(s) {missing}")
    A = MatrixPolynomial(np.stack([coeffs[k] for k in range(d + 1)]))
    if kernel_cols is not None:
        if r is not None and r != kernel_cols:
            raise ProblemFileError(f"{name}: RANKDROP {r} disagrees with "
                                   f"KERNEL {kernel_cols}")
        if not kernel:
            raise ProblemFileError(f"{name}: KERNEL block has no DEG "
                                   f"blocks")
        r = kernel_cols
    r = 1 if r is None else r
    if r >= n:
        raise ProblemFileError(f"{name}: rank drop {r} must be below "
                               f"n = {n}")
    vectors = None
    if kernel:
        top = max(kernel)
        stack = np.zeros((top + 1, n, r))
        for k, blk in kernel.items():
            stack[k] = blk
        vectors = []
        for c in range(r):
            ents = []
            for i in range(n):
                nz = np.flatnonzero(stack[:, i, c])
                ents.append(stack[:nz[-1] + 1, i, c] if nz.size
                            else np.zeros(0))
            vectors.append(PolyVector(tuple(ents)))
        vectors = tuple(vectors)
    structure = None
    if structure_ref is not None:
        try:
            structure = _structure_from(structure_ref, A, base)
        except ProblemFileError:
            raise
        except ValueError as exc:
            raise ProblemFileError(str(exc)) from None
    return ProblemFile(A, r, structure, structure_ref, vectors, options)


def parse_problem(path) -> ProblemFile:
    """Read and validate a problem file.

    Raises
    ------
    ProblemFileError
        With ``path:line`` for syntax errors, dimension mismatches and
        degree mismatches.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ProblemFileError(f"{path}: {exc.strerror}") from None
    return parse_problem_text(text, str(path), path.parent)


def _fmt(v: float) -> str:
    return repr(float(v))


def problem_text(problem: ProblemFile) -> str:
    """Serialize so that :func:`parse_problem_text` restores it exactly."""
    A = problem.A
    out = [f"MATPOLY {A.n} {A.d}"]
    for k in range(A.d + 1):
        out.append(f"DEG {k}")
        out.extend(" ".join(_fmt(v) for v in row) for row in A.coeffs[k])
    if problem.structure_ref is not None:
        out.append(f"STRUCTURE {problem.structure_ref}")
    if problem.kernel is not None:
        top = max(max(b.deg_bounds) for b in problem.kernel)
        out.append(f"KERNEL {len(problem.kernel)}")
        for k in range(top + 1):
            out.append(f"DEG {k}")
            for i in range(A.n):
                out.append(" ".join(
                    _fmt(b.entries[i][k] if k < b.entries[i].size else 0.0)
                    for b in problem.kernel))
    else:
        out.append(f"RANKDROP {problem.r}")
    for key, val in problem.options.items():
        out.append(f"OPTION {key} {val}")
    return "\n".join(out) + "\n"


def write_problem(path, problem: ProblemFile) -> None:
    Path(path).write_text(problem_text(problem))


def fixture_path(name: str) -> Path:
    """Path of a bundled problem file such as ``example_2_10.mp``."""
    path = Path(str(resources.files("polyrank") / "data" / name))
    if not path.exists():
        raise FileNotFoundError(f"no bundled fixture {name!r}")
    return path


def _resolve(ref: str) -> Path:
    path = Path(ref)
    if path.exists():
        return path
    try:
        return fixture_path(ref)
    except FileNotFoundError:
        return path


# ---------------------------------------------------------------- reports

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


class _Float17(float):
    def __repr__(self):
        if not math.isfinite(self):
            return "null"
        text = format(float(self), ".17g")
        return text if any(c in text for c in ".en") else text + ".0"


def _wrap(obj):
    if isinstance(obj, dict):
        return {k: _wrap(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_wrap(v) for v in obj]
    if isinstance(obj, float):
        return _Float17(obj)
    return obj


class _Encoder(json.JSONEncoder):
    def iterencode(self, o, _one_shot=False):
        # the C encoder ignores float subclasses, so force the Python path
        return json.encoder._make_iterencode(
            {}, self.default, json.encoder.py_encode_basestring_ascii,
            self.indent, repr, self.key_separator, self.item_separator,
            self.sort_keys, self.skipkeys, _one_shot)(o, 0)


def format_json(report: dict) -> str:
    """JSON text with every float printed to 17 significant digits."""
    return json.dumps(_wrap(_plain(report)), cls=_Encoder, indent=2)


def _g6(v) -> str:
    if v is None:
        return "n/a"
    v = float(v)
    return format(v, ".6g") if math.isfinite(v) else str(v)


def _poly_text(c) -> str:
    terms = []
    for k, v in enumerate(np.asarray(c, dtype=float)):
        if v == 0:
            continue
        terms.append(_g6(v) + ("" if k == 0 else "*t" if k == 1
                               else f"*t^{k}"))
    return " + ".join(terms).replace("+ -", "- ") if terms else "0"


def format_text(report: dict) -> str:
    """Human-readable report; numbers use 6 significant digits."""
    out = []
    kind = report.get("command", "solve")
    if "converged" in report:
        status = ("converged" if report["converged"]
                  else f"FAILED: {report['failure']}")
        out.append(f"status: {status}")
    for key in ("distance", "lowerBound", "iterations",
                "firstOrderResidual", "feasibility", "normalizationResidual",
                "phi", "rho", "quadratic"):
        if key in report:
            v = report[key]
            out.append(f"{key}: {v if isinstance(v, (bool, int)) else _g6(v)}")
    so = report.get("secondOrder")
    if so:
        out.append(f"secondOrder: {so['status']} (min eigenvalue "
                   f"{_g6(so['min_eigenvalue'])}, J rank "
                   f"{so['jacobian_rank']}/{so['jacobian_rows']}, "
                   f"sigma_min(J) {_g6(so['jacobian_sigma_min'])})")
    if "structure" in report and report["structure"]:
        s = report["structure"]
        out.append(f"structure: {s.get('name', 'custom')}, {s['free']} free "
                   f"coefficients")
    if "kernelDegrees" in report:
        out.append(f"kernelDegrees: {report['kernelDegrees']}")
    if report.get("deltaA") is not None:
        dA = np.asarray(report["deltaA"], dtype=float)
        out.append("deltaA:")
        for i in range(dA.shape[1]):
            out.append("  " + " | ".join(_poly_text(dA[:, i, j])
                                         for j in range(dA.shape[2])))
    for c, b in enumerate(report.get("kernel") or []):
        out.append(f"kernel[{c}]:")
        out.extend("  " + _poly_text(e) for e in b)
    if "starts" in report:
        out.append(f"starts: {report['starts']}, distinct solutions: "
                   f"{report['separation']['classes']}, separation "
                   f"{'ok' if report['separation']['passed'] else 'VIOLATED'}")
    for note in report.get("notes", []):
        out.append(f"note: {note}")
    if kind == "bound":
        out = [f"lowerBound: {_g6(report['lowerBound'])}",
               f"sigmaMin: {_g6(report['sigmaMin'])}",
               f"mu: {report['mu']}"]
    return "\n".join(out)


# ---------------------------------------------------------------- commands

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="polyrank",
                description="Nearest rank-deficient matrix polynomials.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, solver=True):
        sp.add_argument("problem", help="problem file or bundled fixture "
                                        "name")
        sp.add_argument("--json", action="store_true",
                        help="machine-readable report")
        sp.add_argument("--structure", default=None,
                        help="degree | support | entry-degree | "
                             "mask:<file>")
        sp.add_argument("--rank-drop", type=int, default=None,
                        dest="rank_drop")
        if solver:
            sp.add_argument("--normalize", choices=NORMALIZATIONS,
                            default=None)
            sp.add_argument("--init", default="svd",
                            help="svd | file:<problem file with KERNEL>")
            sp.add_argument("--tol-step", type=float, default=None)
            sp.add_argument("--tol-feas", type=float, default=None)
            sp.add_argument("--max-iter", type=int, default=None)
            sp.add_argument("--kernel-degree", default=None,
                            help="uniform bound, comma-separated per-entry "
                                 "bounds, or 'full'")
            sp.add_argument("--damped", action="store_true", default=None)

    sp = sub.add_parser("solve", help="locally nearest singular "
                                      "perturbation")
    common(sp)
    sp.add_argument("--seed", type=int, default=None,
                    help="multi-start with random kernels from this seed")
    sp.add_argument("--starts", type=int, default=8,
                    help="number of random starts with --seed")
    sp = sub.add_parser("bound", help="unstructured distance lower bound")
    sp.add_argument("problem")
    sp.add_argument("--json", action="store_true")
    sp = sub.add_parser("check", help="residuals of a given perturbation "
                                      "and kernel")
    common(sp, solver=False)
    sp.add_argument("--solution", required=True,
                    help="problem-format file holding dA and a KERNEL block")
    sp.add_argument("--normalize", choices=NORMALIZATIONS, default="column")
    sp = sub.add_parser("rankfact", help="coordinate-descent "
                                         "initialization")
    common(sp)
    sp.add_argument("--iters", type=int, default=200)
    sp.add_argument("--no-polish", action="store_true",
                    help="skip the Newton refinement")
    return p


def _setup_logging():
    level = os.environ.get("POLYRANK_LOG", "quiet").strip().lower()
    levels = {"quiet": logging.WARNING, "info": logging.INFO,
              "trace": logging.DEBUG}
    if level not in levels:
        raise _UsageError(f"POLYRANK_LOG must be one of {sorted(levels)}, "
                          f"got {level!r}")
    if not log.handlers:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("polyrank %(levelname)s: "
                                         "%(message)s"))
        log.addHandler(h)
    log.setLevel(levels[level])
    log.propagate = False


def _options(args, prob: ProblemFile) -> dict:
    opt = dict(prob.options)

    def pick(name, attr, conv):
        v = getattr(args, attr, None)
        if v is None:
            v = opt.get(name)
        return None if v is None else conv(v)

    def boolean(v):
        if isinstance(v, bool):
            return v
        if str(v).lower() in ("1", "true", "yes", "on"):
            return True
        if str(v).lower() in ("0", "false", "no", "off"):
            return False
        raise _UsageError(f"bad boolean option {v!r}")

    def degrees(v):
        v = str(v)
        if v == "full":
            return "full"
        parts = v.split(",")
        try:
            vals = [int(p) for p in parts]
        except ValueError:
            raise _UsageError(f"bad kernel degree {v!r}") from None
        return vals[0] if len(vals) == 1 else tuple(vals)

    return {
        "normalize": pick("normalize", "normalize", str) or "pivot",
        "kernel_degrees": pick("kernel-degree", "kernel_degree", degrees),
        "damped": bool(pick("damped", "damped", boolean)),
        "max_iter": pick("max-iter", "max_iter", int),
        "tol_step": pick("tol-step", "tol_step", float),
        "tol_feas": pick("tol-feas", "tol_feas", float),
    }


def _structure(args, prob: ProblemFile):
    ref = getattr(args, "structure", None)
    if ref is None:
        S = prob.structure or structure_degree_preserving(prob.A)
        return S, prob.structure_ref or "degree"
    if ref not in STRUCTURE_KINDS and not ref.startswith("mask:"):
        raise _UsageError(f"--structure must be degree, support, "
                          f"entry-degree or mask:<file>, got {ref!r}")
    return _structure_from(ref, prob.A, None), ref


def _solve_report(R: SolveReport, sname: str) -> dict:
    d = R.as_dict()
    d["structure"]["name"] = sname
    d["command"] = "solve"
    return d


def _cmd_solve(args, prob: ProblemFile):
    o = _options(args, prob)
    S, sname = _structure(args, prob)
    r = args.rank_drop or prob.r
    tol = replace(Tolerances(), **{k: o[k] for k in ("max_iter", "tol_step",
                                                      "tol_feas")
                                   if o[k] is not None})
    init = "svd"
    kd = o["kernel_degrees"]
    support = False
    if args.init.startswith("file:"):
        kp = parse_problem(args.init[5:])
        if kp.kernel is None:
            raise ProblemFileError(f"{args.init[5:]}: no KERNEL block")
        init, r = list(kp.kernel), len(kp.kernel)
        support = kp.options.get("kernel-support", "false") == "true"
    elif args.init != "svd":
        raise _UsageError(f"--init must be svd or file:<path>, got "
                          f"{args.init!r}")
    elif prob.kernel is not None:
        init, r = list(prob.kernel), len(prob.kernel)
        support = prob.options.get("kernel-support", "false") == "true"
    if r >= prob.n:
        raise _UsageError(f"rank drop {r} must be below n = {prob.n}")
    kw = dict(structure=S, normalization=o["normalize"], tolerances=tol,
              kernel_degrees=kd, damped=o["damped"], kernel_support=support)
    log.info("solving n=%d d=%d r=%d structure=%s", prob.n, prob.d, r, sname)
    R = solve(prob.A, r, init=init, **kw)
    _trace(R)
    report = _solve_report(R, sname)
    if args.seed is not None:
        report.update(_multistart(prob, r, kw, R, args.seed, args.starts))
        best = report.pop("_best")
        if best is not R:
            R = best
            report.update({k: v for k, v in _solve_report(R, sname).items()
                           if k not in ("starts", "separation")})
    return report, R.converged


def _multistart(prob, r, kw, R0, seed, starts):
    rng = np.random.default_rng(seed)
    bounds = R0.kernel_degrees
    kw = {**kw, "kernel_degrees": bounds if r > 1 else bounds[0],
          "damped": True}
    inits = [[PolyVector(tuple(rng.standard_normal(k + 1) if k >= 0
                               else np.zeros(0) for k in bd))
              for bd in bounds] for _ in range(starts)]

    def one(init):
        try:
            return solve(prob.A, r, init=init, **kw)
        except (SolverError, ValueError) as exc:
            log.info("start failed: %s", exc)
            return None

    with ThreadPoolExecutor() as pool:
        runs = list(pool.map(one, inits))
    good = [R for R in [R0] + runs if R is not None and R.converged]
    for k, R in enumerate(runs):
        log.info("start %d: %s", k, "failed" if R is None else
                 f"distance {R.distance:.6g} converged {R.converged}")
    best = min(good, key=lambda R: R.distance) if good else R0
    sep = separation_check([R.deltaA for R in good], r_embed(prob.A),
                           same_tol=1e-6)
    return {"starts": starts + 1, "_best": best,
            "separation": {"classes": len(set(sep.classes)),
                           "threshold": sep.threshold,
                           "passed": sep.passed,
                           "distances": sorted({round(R.distance, 12)
                                                for R in good})}}


def _trace(R: SolveReport):
    # per-iteration lines come from the solver's own logger at trace level
    log.info("%s after %d iterations, distance %.6g",
             "converged" if R.converged else "failed", R.iterations,
             R.distance)


def _cmd_bound(args, prob: ProblemFile):
    E = r_embed(prob.A)
    s = float(np.linalg.svd(E.matrix, compute_uv=False)[-1])
    return {"command": "bound", "lowerBound": distance_lower_bound(prob.A),
            "sigmaMin": s, "mu": E.mu}, True


def _cmd_check(args, prob: ProblemFile):
    sol = parse_problem(args.solution)
    if sol.n != prob.n:
        raise ProblemFileError(f"{args.solution}: dimension mismatch, "
                               f"n = {sol.n} but the problem has "
                               f"n = {prob.n}")
    if sol.kernel is None:
        raise ProblemFileError(f"{args.solution}: no KERNEL block")
    if sol.d > prob.d:
        raise ProblemFileError(f"{args.solution}: degree mismatch, dA has "
                               f"degree {sol.d} > {prob.d}")
    S, sname = _structure(args, prob)
    dcoef = np.zeros(prob.A.coeffs.shape)
    dcoef[:sol.d + 1] = sol.A.coeffs
    dA = MatrixPolynomial(dcoef)
    total = MatrixPolynomial(prob.A.coeffs + dcoef)
    kernels = list(sol.kernel)
    res = [apply(total, b) for b in kernels]
    feas = float(np.sqrt(sum(frobenius_norm(v) ** 2 for v in res)))
    bounds = [b.deg_bounds for b in kernels]
    layouts = [minimal_embed(prob.A, bd, S) for bd in bounds]
    pivots = tuple(
        tuple(int(v) for v in lay.kernel_coords[int(np.argmax(np.abs(
            lay.from_polyvector(b, strict=False))))])
        for lay, b in zip(layouts, kernels))
    norm = NormalizationSpec(args.normalize, pivots)
    if args.normalize == "monic":
        norm = NormalizationSpec("monic", tuple(
            (e, lay.kernel_degrees[e]) for (e, _), lay in zip(pivots,
                                                              layouts)))
    problem = KKTProblem(prob.A, S, layouts, norm)
    x = np.concatenate([S.from_perturbation(dA)] + [
        lay.from_polyvector(b, strict=False)
        for lay, b in zip(layouts, kernels)])
    nres = residual(x, problem).normalization
    lam, _ = init_lambda(x, problem, warn=None)
    g = grad_lagrangian(x, lam, problem)
    conforms = S.conforms(dA, atol=0.0)
    report = {
        "command": "check",
        "distance": frobenius_norm(dA),
        "lowerBound": distance_lower_bound(prob.A),
        "feasibility": feas,
        "normalizationResidual": float(np.max(np.abs(nres)))
        if nres.size else 0.0,
        "firstOrderResidual": float(np.max(np.abs(g[:problem.n_x]))),
        "conforms": bool(conforms),
        "structure": {**S.describe(), "name": sname},
        "kernelDegrees": [list(b) for b in bounds],
        "normalization": {"kind": norm.kind,
                          "pivots": [list(p) for p in norm.pivots]},
    }
    return report, bool(conforms)


def _cmd_rankfact(args, prob: ProblemFile):
    o = _options(args, prob)
    S, sname = _structure(args, prob)
    E = r_embed(prob.A)
    rf = coordinate_descent(E, S, iters=args.iters)
    report = {"command": "rankfact", "phi": rf.objective[-1],
              "rho": rf.rho, "sweeps": len(rf.objective) - 1,
              "cdDistance": frobenius_norm(rf.deltaA),
              "lowerBound": distance_lower_bound(prob.A)}
    ok = True
    if not args.no_polish:
        r = args.rank_drop or prob.r
        R = solve(prob.A, r, S, normalization=o["normalize"],
                  kernel_degrees=o["kernel_degrees"], damped=o["damped"],
                  dA_init=rf.deltaA)
        _trace(R)
        report.update(_solve_report(R, sname))
        report["command"] = "rankfact"
        ok = R.converged
    else:
        report["deltaA"] = rf.deltaA.coeffs.tolist()
        report["distance"] = report["cdDistance"]
    return report, ok


COMMANDS = {"solve": _cmd_solve, "bound": _cmd_bound, "check": _cmd_check,
            "rankfact": _cmd_rankfact}


def run(argv=None, stdout=None, stderr=None) -> tuple[int, dict | None]:
    """Execute one command line; returns ``(exit code, report)``.

    Exit codes: 0 success, 2 solver failure (the report is still printed),
    64 usage or input error.
    """
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    try:
        _setup_logging()
        args = _build_parser().parse_args(argv)
        prob = parse_problem(_resolve(args.problem))
        report, ok = COMMANDS[args.command](args, prob)
    except _UsageError as exc:
        print(str(exc), file=stderr)
        return EXIT_USAGE, None
    except ProblemFileError as exc:
        print(f"polyrank: {exc}", file=stderr)
        return EXIT_USAGE, None
    except (SolverError, ValueError) as exc:
        print(f"polyrank: {exc}", file=stderr)
        return EXIT_FAILED, None
    text = format_json(report) if args.json else format_text(report)
    print(text, file=stdout)
    return (EXIT_OK if ok else EXIT_FAILED), report


def main(argv=None) -> int:
    code, _ = run(argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
