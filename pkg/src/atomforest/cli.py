"""Command-line entry point.

Subcommands: build, solve, train, bench, expand-fit, kb inspect.
Every subcommand honors --seed; exit codes are 0 success / expected,
1 usage error, 2 data error, 3 expectation mismatch.
"""

from __future__ import annotations

import argparse
import ast as pyast
import csv
import json
import sys
from fractions import Fraction

import numpy as np

from . import expr as ex
from . import forest as fo
from . import library as lb
from . import search as sr
from . import tasks as tk
from .expr import Grid

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_MISMATCH = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# friendly infix targets ("cos(x)", "exp(x)*sin(x)", "x**2 + 1/x")

_FUNCS = {"sin": ex.sin, "cos": ex.cos, "exp": ex.exp, "ln": ex.ln,
          "log": ex.ln, "arctan": ex.arctan, "arcsin": ex.arcsin,
          "reciprocal": ex.reciprocal}


def parse_target(text: str) -> ex.Expr:
    """Accept either the canonical prefix form or simple infix notation
    over x (or x0, x1, ...)."""
    try:
        return ex.parse(text)
    except Exception:
        pass
    try:
        node = pyast.parse(text, mode="eval").body
        return _from_ast(node)
    except (SyntaxError, ValueError) as err:
        raise DataError(f"cannot parse target expression {text!r}: {err}")


def _from_ast(node):
    if isinstance(node, pyast.Constant):
        return ex.const(float(node.value))
    if isinstance(node, pyast.Name):
        if node.id == "x":
            return ex.var(0)
        if node.id.startswith("x") and node.id[1:].isdigit():
            return ex.var(int(node.id[1:]))
        raise ValueError(f"unknown name {node.id!r}")
    if isinstance(node, pyast.UnaryOp) and isinstance(node.op, pyast.USub):
        return ex.neg(_from_ast(node.operand))
    if isinstance(node, pyast.BinOp):
        a, b = _from_ast(node.left), _from_ast(node.right)
        if isinstance(node.op, pyast.Add):
            return ex.add(a, b)
        if isinstance(node.op, pyast.Sub):
            return ex.add(a, ex.neg(b))
        if isinstance(node.op, pyast.Mult):
            return ex.mul(a, b)
        if isinstance(node.op, pyast.Div):
            return ex.mul(a, ex.reciprocal(b))
        if isinstance(node.op, pyast.Pow):
            if not isinstance(node.right, pyast.Constant):
                raise ValueError("exponent must be a constant")
            return ex.power(a, Fraction(node.right.value).limit_denominator(12))
        raise ValueError("unsupported operator")
    if isinstance(node, pyast.Call) and isinstance(node.func, pyast.Name):
        fn = _FUNCS.get(node.func.id)
        if fn is None:
            raise ValueError(f"unknown function {node.func.id!r}")
        return fn(*[_from_ast(a) for a in node.args])
    raise ValueError("unsupported syntax")


def _read_csv_xy(path):
    """Two-column CSV (x, y) with optional header."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}")
    if not rows:
        raise DataError(f"{path} is empty")
    try:
        float(rows[0][0])
    except (ValueError, IndexError):
        rows = rows[1:]
    try:
        data = np.array([[float(v) for v in r] for r in rows])
    except ValueError as err:
        raise DataError(f"malformed CSV {path}: {err}")
    if data.ndim != 2 or data.shape[1] < 2:
        raise DataError(f"{path}: need at least two columns")
    return data[:, 0], data[:, 1]


def _grid_from_args(args):
    return Grid.uniform(args.grid_lo, args.grid_hi, args.grid_n)


def _build_config(args):
    kw = {"d_max": args.depth}
    if getattr(args, "max_atoms", None):
        kw["max_atoms"] = args.max_atoms
    return lb.BuildConfig(**kw)


def _write_json(path, payload):
    if path:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_build(args):
    lib = lb.build_library(_grid_from_args(args), _build_config(args))
    if len(lib.atoms) <= 1:
        raise DataError("empty library: all candidates filtered")
    for name in sorted(lib.layer_stats):
        s = lib.layer_stats[name]
        print(f"{name}: admitted {s['admitted']} rejected {s['rejected']}")
    print(f"total atoms: {len(lib.atoms)}")
    if args.kb:
        try:
            lb.save_kb(lib, args.kb)
        except OSError as err:
            raise DataError(f"cannot write KB {args.kb}: {err}")
        print(f"wrote {args.kb}")
    _write_json(args.json, {"layers": lib.layer_stats,
                            "total": len(lib.atoms)})
    return EXIT_OK


def _load_or_build(args):
    if args.kb and not args.build:
        try:
            return lb.load_kb(args.kb)
        except (OSError, lb.KBError) as err:
            raise DataError(f"cannot load KB {args.kb}: {err}")
    return lb.build_library(_grid_from_args(args), _build_config(args))


def cmd_solve(args):
    lib = _load_or_build(args)
    if args.target_expr:
        target = parse_target(args.target_expr)
        y = ex.evaluate(target, lib.grid.points)
    else:
        xs, ys = _read_csv_xy(args.target)
        if xs.shape[0] != lib.grid.n or not np.allclose(xs, lib.grid.points):
            raise DataError("CSV x column must match the library grid")
        target, y = None, ys
    if not np.all(np.isfinite(y)):
        raise DataError("target is non-finite on the grid")
    cache = sr.precompute(lib, y)
    results = sr.search(cache, k_max=args.kmax, limit=args.top)
    rows = []
    for K in sorted(results):
        for res in results[K][:args.top]:
            if target is not None and res.mse < sr.VERIFY_MSE:
                # data-only targets provide no independent truth off the
                # training grid, so they stay at their search status
                res = sr.verify(res, lib, target_expr=target)
            rows.append(res)
            print(f"K={K} mse={res.mse:.3e} status={res.status}")
            print(f"  F  = {ex.to_infix(res.antiderivative)} + C")
            print(f"  F' = {ex.to_infix(res.derivative_expr)}")
    if args.grow_kb:
        grown = 0
        for res in rows:
            if res.status == sr.VERIFIED and res.k > 1:
                ok, _ = lib.fold_in(res.antiderivative)
                grown += int(ok)
        if args.kb:
            lb.save_kb(lib, args.kb)
        print(f"grew KB by {grown} atoms (total {len(lib.atoms)})")
    _write_json(args.json, {"results": [
        {"k": r.k, "mse": r.mse, "status": r.status,
         "F": ex.canonical_string(r.antiderivative)} for r in rows]})
    return EXIT_OK


def cmd_train(args):
    try:
        template = fo.parse_template(args.template)
    except fo.TemplateError as err:
        raise UsageError(f"bad template: {err}")
    if args.target_expr:
        target = parse_target(args.target_expr)
        grid = _grid_from_args(args)
        x, y = grid.points, ex.evaluate(target, grid.points)
    else:
        x, y = _read_csv_xy(args.target)
    cfg = fo.TrainConfig(steps=args.steps, lr=args.lr,
                         restarts=args.restarts, seed=args.seed)
    report = fo.train(template, x, y, cfg)
    if report.forest is None:
        print(report.format())
        raise DataError("all restarts diverged")
    F, Fp = fo.to_expr(report.forest)
    print(f"best snapped mse {report.mse:.3e} (restart {report.best_restart})")
    print(f"F  = {ex.to_infix(F)} + C")
    print(f"F' = {ex.to_infix(Fp)}")
    print(report.format())
    _write_json(args.json, {"mse": report.mse,
                            "restart": report.best_restart,
                            "F": ex.canonical_string(F)})
    return EXIT_OK


def cmd_bench(args):
    try:
        suite = tk.load_suite(args.suite)
    except (OSError, ValueError, KeyError) as err:
        raise DataError(f"cannot load suite: {err}")
    outcomes, summary = tk.run_feynman(suite, d_max=args.dmax,
                                       k_max=args.kmax, seed=args.seed)
    for o in outcomes:
        print(f"{o.name:22s} {o.status:5s} K={o.best_k} "
              f"relmse={o.relmse:.3e} {o.error}")
    c = summary["counts"]
    print(f"pass {c['pass']}  close {c['close']}  fail {c['fail']}  "
          f"({summary['wall_time']:.1f}s)")
    _write_json(args.json, {
        "counts": c,
        "rows": [{"name": o.name, "status": o.status, "k": o.best_k,
                  "relmse": o.relmse} for o in outcomes]})
    if summary["mismatches"]:
        print("expectation mismatches:", ", ".join(summary["mismatches"]))
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_expand_fit(args):
    try:
        with open(args.data, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as err:
        raise DataError(f"cannot read {args.data}: {err}")
    if not rows or len(rows) < 2:
        raise DataError("CSV needs a header row and data")
    header = rows[0]
    if args.target_col not in header:
        raise DataError(f"target column {args.target_col!r} not in header")
    ti = header.index(args.target_col)
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as err:
        raise DataError(f"malformed CSV: {err}")
    y = data[:, ti]
    X = np.delete(data, ti, axis=1)
    if args.task == "regression":
        scores, expf = tk.regression_cv(X, y, d_max=args.depth,
                                        folds=args.folds, seed=args.seed,
                                        cross=args.cross)
        print("held-out R2 per fold:",
              " ".join(f"{s:.4f}" for s in scores))
        print(f"mean R2 {np.mean(scores):.4f}  "
              f"({expf.raw.shape[1]} expanded columns)")
        _write_json(args.json, {"r2": scores})
    else:
        expf = tk.expand_features(X, d_max=args.depth, cross=args.cross)
        rep = tk.fit_logistic(expf.raw, y, penalty=args.penalty,
                              strength=args.strength, folds=args.folds,
                              seed=args.seed, provenance=expf.provenance)
        print("cv accuracies:", " ".join(f"{a:.4f}"
                                         for a in rep.cv_accuracies))
        print(f"mean accuracy {rep.accuracy:.4f}")
        for cs, wgt, dcs in rep.attribution[:args.top]:
            print(f"  {wgt:+.4f} * {cs}   d/dx = {dcs}")
        _write_json(args.json, {"accuracy": rep.accuracy,
                                "cv": rep.cv_accuracies})
    return EXIT_OK


def cmd_kb_inspect(args):
    try:
        lib = lb.load_kb(args.kb)
    except (OSError, lb.KBError) as err:
        raise DataError(f"cannot load KB {args.kb}: {err}")
    by_layer = {}
    for a in lib.atoms:
        by_layer[a.layer] = by_layer.get(a.layer, 0) + 1
    print(f"atoms: {len(lib.atoms)}  grid: ({lib.grid.lo}, {lib.grid.hi}] "
          f"n={lib.grid.n}")
    for layer in sorted(by_layer):
        print(f"layer {layer}: {by_layer[layer]}")
    if getattr(lib, "load_errors", None):
        print(f"load errors: {len(lib.load_errors)}")
    if args.show:
        for a in lib.atoms[:args.show]:
            print(f"  [{a.layer}] {ex.to_infix(a.f)}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_grid_flags(p):
    p.add_argument("--grid-lo", type=float, default=0.1)
    p.add_argument("--grid-hi", type=float, default=3.0)
    p.add_argument("--grid-n", type=int, default=256)


def make_parser():
    p = _Parser(prog="atomforest")
    p.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build")
    _add_grid_flags(b)
    b.add_argument("--depth", type=int, default=1)
    b.add_argument("--max-atoms", type=int, default=None)
    b.add_argument("--kb", default=None)
    b.add_argument("--json", default=None)

    s = sub.add_parser("solve")
    _add_grid_flags(s)
    s.add_argument("--target-expr", default=None)
    s.add_argument("--target", default=None, help="CSV with x,y columns")
    s.add_argument("--kb", default=None)
    s.add_argument("--build", action="store_true",
                   help="build even when --kb is given")
    s.add_argument("--depth", type=int, default=2)
    s.add_argument("--kmax", type=int, default=2)
    s.add_argument("--top", type=int, default=3)
    s.add_argument("--grow-kb", action="store_true")
    s.add_argument("--json", default=None)

    t = sub.add_parser("train")
    _add_grid_flags(t)
    t.add_argument("--template", required=True)
    t.add_argument("--target-expr", default=None)
    t.add_argument("--target", default=None)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--restarts", type=int, default=16)
    t.add_argument("--json", default=None)

    be = sub.add_parser("bench")
    be.add_argument("--suite", default=None)
    be.add_argument("--dmax", type=int, default=2)
    be.add_argument("--kmax", type=int, default=4)
    be.add_argument("--json", default=None)

    e = sub.add_parser("expand-fit")
    e.add_argument("--data", required=True)
    e.add_argument("--target-col", required=True)
    e.add_argument("--task", choices=["regression", "classification"],
                   default="regression")
    e.add_argument("--depth", type=int, default=1)
    e.add_argument("--cross", action="store_true")
    e.add_argument("--penalty", choices=["l1", "l2"], default="l2")
    e.add_argument("--strength", type=float, default=1.0)
    e.add_argument("--folds", type=int, default=5)
    e.add_argument("--top", type=int, default=10)
    e.add_argument("--json", default=None)

    kb = sub.add_parser("kb")
    kbsub = kb.add_subparsers(dest="kb_command", required=True)
    ki = kbsub.add_parser("inspect")
    ki.add_argument("--kb", required=True)
    ki.add_argument("--show", type=int, default=0)

    return p


_DISPATCH = {"build": cmd_build, "solve": cmd_solve, "train": cmd_train,
             "bench": cmd_bench, "expand-fit": cmd_expand_fit}


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "solve" and not (args.target_expr or args.target):
            raise UsageError("solve needs --target-expr or --target")
        if args.command == "train" and not (args.target_expr or args.target):
            raise UsageError("train needs --target-expr or --target")
        if args.command == "kb":
            return cmd_kb_inspect(args)
        return _DISPATCH[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
