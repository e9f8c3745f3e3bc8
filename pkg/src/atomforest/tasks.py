"""Benchmark and application harness.

Two consumers of the atom machinery live here: a Feynman-style
representability suite (can a physics formula be written as a sparse linear
combination of library atoms evaluated on its variables?) and tabular
feature expansion with sparse linear / logistic fitting.

The suite treats each sampled data row as one constraint. The feature
dictionary for an n-variable equation is the union of every single-variable
library atom applied to each variable, pairwise products of a small core set
across variables, and triples of pure powers. Columns and targets are
centered so the intercept never spends one of the K slots.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy import optimize

from . import expr as ex
from . import library as lb
from . import search as sr
from .expr import Expr, Grid

PASS = "pass"
CLOSE = "close"
FAIL = "fail"

EXACT_TOL = 1e-15   # relMSE for machine-precision recovery
CLOSE_TOL = 0.01

SUITE_VERSION = 1


def relmse(predictions, truth) -> float:
    """Mean squared error normalized by the mean squared truth."""
    predictions = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predictions.shape != truth.shape:
        raise ValueError("length mismatch")
    denom = float(np.mean(truth * truth))
    if denom == 0.0:
        raise ValueError("truth is identically zero")
    return float(np.mean((predictions - truth) ** 2)) / denom


@dataclass
class EquationSpec:
    name: str
    nvars: int
    expression: str          # prefix form over v:0 ... v:{n-1}
    ranges: list             # [(lo, hi)] per variable
    expected: str = ""       # pass / close / fail, optional
    category: str = ""

    def expr(self) -> Expr:
        return ex.parse(self.expression)


@dataclass
class BenchOutcome:
    name: str
    status: str
    best_k: int
    relmse: float
    formula: str
    error: str = ""


def load_suite(path=None):
    """Read a suite file (the shipped 20-equation suite by default)."""
    if path is None:
        text = resources.files(__package__).joinpath(
            "data/feynman20.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    doc = json.loads(text)
    if doc.get("version") != SUITE_VERSION:
        raise ValueError(f"unsupported suite version {doc.get('version')!r}")
    return [EquationSpec(name=e["name"], nvars=e["nvars"],
                         expression=e["expression"],
                         ranges=[tuple(r) for r in e["ranges"]],
                         expected=e.get("expected", ""),
                         category=e.get("category", ""))
            for e in doc["equations"]]


# ---------------------------------------------------------------------------
# multi-variable feature dictionaries

_LIB_CACHE = {}


def _single_var_library(lo, hi, d_max):
    key = (round(lo, 9), round(hi, 9), d_max)
    if key not in _LIB_CACHE:
        grid = Grid.uniform(lo, hi, 64)
        _LIB_CACHE[key] = lb.build_library(grid, lb.BuildConfig(d_max=d_max))
    return _LIB_CACHE[key]


# the cross-variable core: cheap shapes whose products cover the paper's
# separable multi-variable forms
def _core_exprs(j):
    x = ex.var(j)
    from fractions import Fraction as Fr
    out = [x, ex.power(x, Fr(2)), ex.power(x, Fr(3)),
           ex.power(x, Fr(-1)), ex.power(x, Fr(-2)),
           ex.power(x, Fr(1, 2)),
           ex.sin(x), ex.cos(x), ex.exp(x), ex.exp(ex.neg(x))]
    return out

_POWER_EXPONENTS = (-2, -1, 1, 2)


def _equation_features(spec: EquationSpec, X, lib_depth: int):
    """Feature expressions + value columns for one equation's variables."""
    n = spec.nvars
    feats = []
    for j in range(n):
        lo, hi = spec.ranges[j]
        lib = _single_var_library(lo, hi, min(lib_depth, 1) if n > 1
                                  else lib_depth)
        for i in lib.searchable_indices():
            f = ex.relabel(lib.atoms[i].f, j) if j else lib.atoms[i].f
            feats.append(f)
    if n >= 2:
        cores = [_core_exprs(j) for j in range(n)]
        for a in range(n):
            for b in range(a + 1, n):
                for fa in cores[a]:
                    for fb in cores[b]:
                        feats.append(ex.mul(fa, fb))
        from fractions import Fraction as Fr
        for a in range(n):
            for b in range(a + 1, n):
                for c in range(b + 1, n):
                    for pa in _POWER_EXPONENTS:
                        for pb in _POWER_EXPONENTS:
                            for pc in _POWER_EXPONENTS:
                                feats.append(ex.mul(
                                    ex.power(ex.var(a), Fr(pa)),
                                    ex.power(ex.var(b), Fr(pb)),
                                    ex.power(ex.var(c), Fr(pc))))
    cols, kept = [], []
    seen = set()
    for f in feats:
        cs = ex.canonical_string(f)
        if cs in seen:
            continue
        seen.add(cs)
        v = ex.evaluate(f, X)
        if not np.all(np.isfinite(v)) or np.abs(v).max() > 1e100:
            continue
        if float(np.std(v)) < 1e-12:
            continue
        cols.append(v)
        kept.append(f)
    return kept, np.stack(cols, axis=1)


def _sample_rows(spec: EquationSpec, rows, rng):
    X = np.empty((rows, spec.nvars))
    for j, (lo, hi) in enumerate(spec.ranges):
        X[:, j] = rng.uniform(lo, hi, size=rows)
    return X


def _best_fit(feats, V, y, k_max):
    """Search centered columns K = 1, 2, ... and stop at the first K that
    is exact (relative to the target's scale); return the best result, the
    recovered intercept, and the chosen feature expressions."""
    mu = V.mean(axis=0)
    Vc = V - mu
    ymean = float(y.mean())
    cache = sr.GramCache.from_matrix(Vc, y - ymean)
    exact = 1e-16 * (cache.y_norm_sq / cache.N + 1e-300)
    best, best_k = None, 0
    for K in range(1, k_max + 1):
        if K == 1:
            rs = sr.scan_k1(cache, limit=20)
        elif K == 2:
            rs = sr.scan_k2(cache, limit=200)
        else:
            rs = sr.beam(cache, K, limit=20)
        for r in rs:
            if best is None or r.mse < best.mse - 1e-18:
                best, best_k = r, K
        if best is not None and best.mse < exact:
            break  # smaller K already exact; keep it
    if best is None:
        return None, 0.0, [], 0
    cols = list(best.indices)
    intercept = ymean - float(np.dot(best.coefficients, mu[cols]))
    return best, intercept, [feats[i] for i in cols], best_k


def run_feynman(suite, d_max: int = 2, k_max: int = 4, seed: int = 0,
                rows: int = 400):
    """Run the representability harness over a suite of equations."""
    if not suite:
        raise ValueError("empty suite")
    outcomes = []
    t0 = time.time()
    for spec in sorted(suite, key=lambda s: s.name):
        try:
            outcomes.append(_run_equation(spec, d_max, k_max, seed, rows))
        except Exception as err:  # equation-level isolation
            outcomes.append(BenchOutcome(name=spec.name, status=FAIL,
                                         best_k=0, relmse=np.inf,
                                         formula="", error=str(err)))
    counts = {s: sum(1 for o in outcomes if o.status == s)
              for s in (PASS, CLOSE, FAIL)}
    summary = {"counts": counts, "wall_time": time.time() - t0,
               "mismatches": [o.name for o, s in zip(outcomes, suite_expected(suite))
                              if s and o.status != s]}
    return outcomes, summary


def suite_expected(suite):
    return [s.expected for s in sorted(suite, key=lambda s: s.name)]


def _run_equation(spec, d_max, k_max, seed, rows):
    rng = np.random.default_rng([seed, hash(spec.name) & 0xFFFF])
    X = _sample_rows(spec, rows, rng)
    Xh = _sample_rows(spec, rows // 2, rng)
    target = spec.expr()
    y = ex.evaluate(target, X)
    yh = ex.evaluate(target, Xh)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(yh))):
        raise ValueError(f"{spec.name}: target non-finite on sampled rows")
    feats, V = _equation_features(spec, X, d_max)
    fit = _best_fit(feats, V, y, k_max)
    if fit[0] is None:
        return BenchOutcome(name=spec.name, status=FAIL, best_k=0,
                            relmse=np.inf, formula="")
    best, intercept, chosen, best_k = fit
    terms = [ex.mul(ex.const(c), f)
             for c, f in zip(best.coefficients, chosen)]
    formula = ex.add(*terms, ex.const(intercept))
    pred = ex.evaluate(formula, X)
    pred_h = ex.evaluate(formula, Xh)
    train_r = relmse(pred, y)
    hold_r = relmse(pred_h, yh)
    if train_r < EXACT_TOL and hold_r < EXACT_TOL:
        status = PASS
    elif hold_r < CLOSE_TOL:
        status = CLOSE
    else:
        status = FAIL
    return BenchOutcome(name=spec.name, status=status, best_k=best_k,
                        relmse=hold_r, formula=ex.to_infix(formula))


# ---------------------------------------------------------------------------
# tabular feature expansion


@dataclass
class ExpandedFeatures:
    matrix: np.ndarray       # standardized columns
    raw: np.ndarray          # unstandardized columns (for leakage-free CV)
    provenance: list         # (variable index, atom canonical string)
    means: np.ndarray
    stds: np.ndarray
    notes: list = field(default_factory=list)


def expand_features(X, d_max: int = 1, cross: bool = False) -> ExpandedFeatures:
    """Evaluate every applicable library atom on each input column.

    Atoms whose values are non-finite on a column (domain violations such
    as ln of negatives) are filtered for that column; constant columns are
    dropped with a note. With cross=True, pairwise raw-variable products
    are appended."""
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite entries")
    n = X.shape[1]
    cols, prov, notes = [], [], []
    for j in range(n):
        col = X[:, j]
        lo, hi = float(col.min()), float(col.max())
        if hi <= lo:
            notes.append(f"variable {j}: constant input column, skipped")
            continue
        lib = _single_var_library(lo - 1e-9, hi, d_max)
        for i in lib.searchable_indices():
            atom = lib.atoms[i]
            v = ex.evaluate(atom.f, col)
            if not np.all(np.isfinite(v)):
                continue
            if float(np.std(v)) < 1e-12:
                notes.append(f"variable {j}: "
                             f"{ex.canonical_string(atom.f)} constant, dropped")
                continue
            cols.append(v)
            prov.append((j, ex.canonical_string(atom.f)))
    if cross:
        for a in range(n):
            for b in range(a + 1, n):
                v = X[:, a] * X[:, b]
                if float(np.std(v)) >= 1e-12:
                    cols.append(v)
                    prov.append((a, f"mul(v:{a}, v:{b})"))
    raw = np.stack(cols, axis=1)
    means = raw.mean(axis=0)
    stds = raw.std(axis=0)
    stds[stds == 0] = 1.0
    return ExpandedFeatures(matrix=(raw - means) / stds, raw=raw,
                            provenance=prov, means=means, stds=stds,
                            notes=notes)


def _standardize(train, *others):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return tuple((a - mu) / sd for a in (train,) + others)


# ---------------------------------------------------------------------------
# sparse linear fitting (coordinate descent lasso)


@dataclass
class LassoReport:
    coef: np.ndarray
    intercept: float
    lam: float
    objective_history: list
    converged: bool
    duality_gap: float
    selected: list = field(default_factory=list)


def _lasso_cd(X, y, lam, max_sweeps=1000, tol=1e-7, w0=None):
    """Coordinate descent for (1/2N)||y - Xw - b||^2 + lam*||w||_1.
    Assumes roughly standardized columns. Warm-startable via w0; after each
    full sweep, cheap sweeps run over the active set only."""
    n, p = X.shape
    Xf = np.asfortranarray(X)
    w = np.zeros(p) if w0 is None else w0.copy()
    b = float(y.mean())
    r = y - b - (Xf @ w if w0 is not None and np.any(w) else 0.0)
    col_sq = np.einsum("ij,ij->j", Xf, Xf) / n
    history = []
    converged = False

    def sweep_over(idx):
        max_move = 0.0
        for j in idx:
            if col_sq[j] == 0.0:
                continue
            rho = w[j] * col_sq[j] + float(Xf[:, j] @ r) / n
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            if new != w[j]:
                r[:] -= (new - w[j]) * Xf[:, j]
                max_move = max(max_move, abs(new - w[j]))
                w[j] = new
        return max_move

    all_idx = np.arange(p)
    sweeps = 0
    while sweeps < max_sweeps:
        move = sweep_over(all_idx)
        sweeps += 1
        nb = float(np.mean(r + b))
        r += b - nb
        b = nb
        obj = float(r @ r) / (2 * n) + lam * float(np.abs(w).sum())
        history.append(obj)
        if move < tol:
            converged = True
            break
        active = np.flatnonzero(w)
        while sweeps < max_sweeps and active.size:
            move = sweep_over(active)
            sweeps += 1
            obj = float(r @ r) / (2 * n) + lam * float(np.abs(w).sum())
            history.append(obj)
            if move < tol:
                break
    # lasso duality gap at the final iterate
    theta = r / n
    scale = float(np.max(np.abs(X.T @ theta))) if p else 0.0
    if scale > lam:
        theta = theta * (lam / scale)
    primal = history[-1] if history else float(r @ r) / (2 * n)
    dual = float(theta @ (y - b)) - n / 2 * float(theta @ theta)
    gap = primal - dual
    return w, b, history, converged, float(gap)


def fit_sparse_linear(features, y, lam=None, folds: int = 5, seed: int = 0,
                      provenance=None, max_sweeps: int = 1000) -> LassoReport:
    """l1 regression by coordinate descent; lam picked by k-fold CV over a
    log-spaced ladder when not given."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam is None:
        lam_max = float(np.max(np.abs(X.T @ (y - y.mean())))) / len(y)
        ladder = np.geomspace(lam_max, lam_max * 1e-4, 30)
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(y))
        fold_id = np.empty(len(y), dtype=int)
        fold_id[order] = np.arange(len(y)) % folds
        cv_err = np.zeros(len(ladder))
        for f in range(folds):
            tr, va = fold_id != f, fold_id == f
            w = None  # warm start down the ladder
            for i, lv in enumerate(ladder):
                w, b, *_ = _lasso_cd(X[tr], y[tr], lv,
                                     max_sweeps=max_sweeps // 4, w0=w)
                res = y[va] - X[va] @ w - b
                cv_err[i] += float(res @ res)
        lam = float(ladder[int(np.argmin(cv_err))])
    w, b, history, converged, gap = _lasso_cd(X, y, lam,
                                              max_sweeps=max_sweeps)
    if not converged:
        warnings.warn(f"lasso did not converge; duality gap {gap:.3e}")
    selected = []
    if provenance is not None:
        selected = [(provenance[j], float(w[j]))
                    for j in np.flatnonzero(np.abs(w) > 1e-10)]
    return LassoReport(coef=w, intercept=b, lam=lam,
                       objective_history=history, converged=converged,
                       duality_gap=gap, selected=selected)


def r2_score(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    ss = float(np.sum((y_true - y_pred) ** 2))
    tot = float(np.sum((y_true - y_true.mean()) ** 2))
    return 1.0 - ss / tot


# ---------------------------------------------------------------------------
# logistic fitting


@dataclass
class LogisticReport:
    coef: np.ndarray
    intercept: float
    cv_accuracies: list
    accuracy: float
    attribution: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def stratified_kfold(labels, folds: int, seed: int = 0):
    """Deterministic stratified fold assignment: shuffle within each class,
    deal round-robin."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    fold = np.empty(len(labels), dtype=int)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        fold[idx] = np.arange(len(idx)) % folds
    return fold


def _logistic_l2(X, y, strength):
    n, p = X.shape

    def objective(wb):
        w, b = wb[:p], wb[p]
        z = X @ w + b
        # stable logistic loss: log(1 + exp(-s z)) with s = 2y - 1
        s = 2.0 * y - 1.0
        m = -s * z
        loss = np.sum(np.logaddexp(0.0, m)) / n
        loss += float(w @ w) / (2 * strength * n)
        prob = 1.0 / (1.0 + np.exp(-z))
        gz = (prob - y) / n
        gw = X.T @ gz + w / (strength * n)
        gb = float(np.sum(gz))
        return loss, np.concatenate([gw, [gb]])

    res = optimize.minimize(objective, np.zeros(p + 1), jac=True,
                            method="L-BFGS-B",
                            options={"maxiter": 500, "ftol": 1e-12})
    return res.x[:p], float(res.x[p])


def _logistic_l1(X, y, strength, iters=600):
    """Proximal gradient (ISTA with fixed step) for l1 logistic."""
    n, p = X.shape
    lam = 1.0 / (strength * n)
    L = float(np.linalg.norm(X, 2)) ** 2 / (4 * n) + 1e-12
    step = 1.0 / L
    w = np.zeros(p)
    b = 0.0
    for _ in range(iters):
        z = X @ w + b
        prob = 1.0 / (1.0 + np.exp(-z))
        gz = (prob - y) / n
        gw = X.T @ gz
        w = w - step * gw
        w = np.sign(w) * np.maximum(np.abs(w) - step * lam, 0.0)
        b -= step * float(np.sum(gz)) * 4.0
    return w, b


def fit_logistic(features, labels, penalty: str = "l2",
                 strength: float = 1.0, folds: int = 5, seed: int = 0,
                 provenance=None) -> LogisticReport:
    """Regularised logistic regression with stratified k-fold accuracy."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if set(np.unique(y)) - {0.0, 1.0}:
        raise ValueError("labels must be binary 0/1")
    if len(np.unique(y)) < 2:
        raise ValueError("degenerate task: all labels identical")
    if folds < 2:
        raise ValueError("folds must be >= 2")
    solver = _logistic_l2 if penalty == "l2" else _logistic_l1
    fold = stratified_kfold(y, folds, seed)
    accs, notes = [], []
    for f in range(folds):
        tr, va = fold != f, fold == f
        if len(np.unique(y[tr])) < 2 or va.sum() == 0:
            notes.append(f"fold {f}: single class, skipped")
            continue
        Xtr, Xva = _standardize(X[tr], X[va])
        w, b = solver(Xtr, y[tr], strength)
        pred = (Xva @ w + b) > 0
        accs.append(float(np.mean(pred == (y[va] > 0.5))))
    Xs, = _standardize(X)
    w, b = solver(Xs, y, strength)
    attribution = []
    if provenance is not None:
        for j in np.flatnonzero(np.abs(w) > 1e-6):
            var, cs = provenance[j]
            try:
                dcs = ex.canonical_string(
                    ex.differentiate(ex.parse(cs), var))
            except Exception:
                dcs = ""
            attribution.append((cs, float(w[j]), dcs))
    return LogisticReport(coef=w, intercept=b, cv_accuracies=accs,
                          accuracy=float(np.mean(accs)) if accs else np.nan,
                          attribution=attribution, warnings=notes)


# ---------------------------------------------------------------------------
# cross-validated harnesses (leakage-free: scalers fit on training folds)


def regression_cv(X, y, d_max: int = 1, folds: int = 5, seed: int = 0,
                  cross: bool = False):
    """Held-out R^2 per fold for atom expansion + l1 fit."""
    exp = expand_features(X, d_max=d_max, cross=cross)
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    fold = np.empty(len(y), dtype=int)
    fold[order] = np.arange(len(y)) % folds
    scores = []
    for f in range(folds):
        tr, va = fold != f, fold == f
        Xtr, Xva = _standardize(exp.raw[tr], exp.raw[va])
        rep = fit_sparse_linear(Xtr, y[tr], folds=min(folds, 3),
                                seed=seed, provenance=exp.provenance)
        pred = Xva @ rep.coef + rep.intercept
        scores.append(r2_score(y[va], pred))
    return scores, exp


def classification_gap(X, y, d_max: int = 1, folds: int = 5, seed: int = 0,
                       penalty: str = "l2", strength: float = 1.0):
    """CV accuracy of atom-expanded logistic vs the raw-feature baseline."""
    exp = expand_features(X, d_max=d_max)
    atom = fit_logistic(exp.raw, y, penalty=penalty, strength=strength,
                        folds=folds, seed=seed, provenance=exp.provenance)
    raw = fit_logistic(X, y, penalty=penalty, strength=strength,
                       folds=folds, seed=seed)
    return atom, raw


# ---------------------------------------------------------------------------
# documented synthetic generators


def synth_regression(n: int = 600, noise: float = 0.05, seed: int = 0):
    """y = 3 e^{-x0} + 2 sin x1 + x2^2 / 2 with mild Gaussian noise."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.1, 3.0, size=(n, 3))
    y = 3 * np.exp(-X[:, 0]) + 2 * np.sin(X[:, 1]) + X[:, 2] ** 2 / 2
    y = y + noise * rng.normal(size=n)
    return X, y


def synth_hill(n: int = 800, seed: int = 0, flip: float = 0.03):
    """Binary task whose boundary is a Hill curve with substrate
    inhibition (rises then falls, so no linear boundary fits): label 1 iff
    x1 < x0^4 / (1 + x0^4 + (x0/2)^8), with a small label-flip rate."""
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.1, 4.0, size=n)
    x1 = rng.uniform(0.0, 1.0, size=n)
    hill = x0 ** 4 / (1.0 + x0 ** 4 + (x0 / 2.0) ** 8)
    y = (x1 < hill).astype(float)
    flips = rng.uniform(size=n) < flip
    y[flips] = 1.0 - y[flips]
    return np.stack([x0, x1], axis=1), y
