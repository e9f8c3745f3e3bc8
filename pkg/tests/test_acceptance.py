"""End-to-end acceptance checks. Each test prints one pass/fail line."""

import itertools
import time

import numpy as np

from atomforest import expr as ex
from atomforest import forest as fo
from atomforest import library as lb
from atomforest import search as sr
from atomforest import tasks as tk
from atomforest.expr import DEFAULT_GRID


def _report(capsys, num, desc, ok, detail=""):
    with capsys.disabled():
        tag = "PASS" if ok else "FAIL"
        suffix = f" ({detail})" if detail else ""
        print(f"[{tag}] criterion {num}: {desc}{suffix}")


def test_criterion_1_atom_derivative_correctness(capsys, lib_depth2):
    t0 = time.time()
    h = 1e-5
    pts = lib_depth2.grid.points[1:-1]
    worst = 0.0
    for a in lib_depth2.atoms:
        d = ex.evaluate(a.fprime, pts)
        fd = (ex.evaluate(a.f, pts + h) - ex.evaluate(a.f, pts - h)) / (2 * h)
        rel = np.max(np.abs(d - fd) / (1.0 + np.abs(fd)))
        worst = max(worst, float(rel))
    dt = time.time() - t0
    ok = worst < 1e-5 and dt < 60
    _report(capsys, 1, "library derivatives match finite differences", ok,
            f"max rel err {worst:.2e}, {len(lib_depth2.atoms)} atoms, "
            f"{dt:.1f}s")
    assert worst < 1e-5
    assert dt < 60


def test_criterion_2_simultaneous_recovery(capsys, lib_depth2):
    t0 = time.time()
    x = ex.var(0)
    from fractions import Fraction
    targets = [
        ("cos(x)", ex.cos(x)),
        ("exp(x)", ex.exp(x)),
        ("2*x", ex.mul(ex.const(2.0), x)),
        ("1/x", ex.power(x, Fraction(-1))),
        ("exp(x)*sin(x) + exp(x)*cos(x)",
         ex.add(ex.mul(ex.exp(x), ex.sin(x)), ex.mul(ex.exp(x), ex.cos(x)))),
    ]
    details = []
    ok = True
    for name, target in targets:
        y = ex.evaluate(target, lib_depth2.grid.points)
        cache = sr.precompute(lib_depth2, y)
        results = sr.search(cache, k_max=2, limit=5)
        best = min((r for rs in results.values() for r in rs),
                   key=lambda r: r.mse)
        if best.antiderivative is None:
            F, Fp = sr.reconstruct(best, lib_depth2)
        else:
            F, Fp = best.antiderivative, best.derivative_expr
        verified = sr.verify(best, lib_depth2, target_expr=target)
        ident = ex.canonical_string(ex.differentiate(F)) == \
            ex.canonical_string(Fp)
        good = (best.mse < 1e-15 and verified.status == sr.VERIFIED
                and ident)
        ok = ok and good
        details.append(f"{name}: K={best.k} mse={best.mse:.1e}")
        assert best.mse < 1e-15, name
        assert verified.status == sr.VERIFIED, name
        assert ident, name
    dt = time.time() - t0
    ok = ok and dt < 120
    _report(capsys, 2, "five targets recovered and verified at K<=2", ok,
            "; ".join(details) + f"; {dt:.1f}s")
    assert dt < 120


def _oracle_k1(D, y):
    best = None
    for k in range(D.shape[1]):
        g = float(D[:, k] @ D[:, k])
        if g <= sr.GKK_EPS:
            continue
        c = float(D[:, k] @ y) / g
        if abs(c) > sr.COEF_CAP:
            continue
        mse = float(np.mean((c * D[:, k] - y) ** 2))
        if best is None or mse < best[0]:
            best = (mse, (k,), np.array([c]))
    return best


def _oracle_k(D, y, K):
    best = None
    for cols in itertools.combinations(range(D.shape[1]), K):
        A = D[:, cols]
        if abs(np.linalg.det(A.T @ A)) <= sr.DET_EPS:
            continue
        c, *_ = np.linalg.lstsq(A, y, rcond=None)
        if np.max(np.abs(c)) > sr.COEF_CAP:
            continue
        mse = float(np.mean((A @ c - y) ** 2))
        if best is None or mse < best[0]:
            best = (mse, cols, c)
    return best


def test_criterion_3_search_oracle_equivalence(capsys, lib_depth1):
    rng = np.random.default_rng(2024)
    ok = True
    for trial in range(5):
        idx = rng.choice(lib_depth1.searchable_indices(), size=50,
                         replace=False)
        D = np.stack([lib_depth1.atoms[i].dvalues for i in idx], axis=1)
        for t in range(5):
            picks = rng.choice(50, size=2, replace=False)
            coefs = rng.uniform(-2, 2, size=2) / \
                np.linalg.norm(D[:, picks], axis=0)
            y = D[:, picks] @ coefs + 0.05 * rng.normal(size=D.shape[0])
            cache = sr.GramCache.from_matrix(D, y, col_to_atom=idx)
            r1 = sr.scan_k1(cache, limit=1)[0]
            o1 = _oracle_k1(D, y)
            k1 = int(np.where(idx == r1.indices[0])[0][0])
            ok &= (k1,) == o1[1]
            ok &= abs(r1.coefficients[0] - o1[2][0]) <= \
                1e-9 * max(1.0, abs(o1[2][0]))
            r2 = sr.scan_k2(cache, limit=1)[0]
            o2 = _oracle_k(D, y, 2)
            cols2 = tuple(sorted(int(np.where(idx == i)[0][0])
                                 for i in r2.indices))
            ok &= cols2 == o2[1]
            ok &= bool(np.allclose(np.sort(r2.coefficients),
                                   np.sort(o2[2]), rtol=1e-9, atol=1e-12))
    # beam with beam_seed >= M matches exhaustive K=3
    idx = rng.choice(lib_depth1.searchable_indices(), size=30, replace=False)
    D = np.stack([lib_depth1.atoms[i].dvalues for i in idx], axis=1)
    picks = rng.choice(30, size=3, replace=False)
    y = D[:, picks] @ (rng.uniform(-2, 2, size=3) /
                       np.linalg.norm(D[:, picks], axis=0))
    y = y + 0.02 * rng.normal(size=D.shape[0])
    cache = sr.GramCache.from_matrix(D, y, col_to_atom=idx)
    r3 = sr.beam(cache, 3, beam_seed=900, beam_keep=900, limit=1)[0]
    o3 = _oracle_k(D, y, 3)
    cols3 = tuple(sorted(int(np.where(idx == i)[0][0]) for i in r3.indices))
    ok &= cols3 == tuple(sorted(o3[1]))
    _report(capsys, 3, "scan and beam match brute-force least squares", ok,
            "25 scan targets + exhaustive K=3")
    assert ok


def test_criterion_4_equation_suite(capsys):
    t0 = time.time()
    suite = tk.load_suite()
    outcomes, summary = tk.run_feynman(suite, d_max=2, k_max=4, seed=0)
    expected = {s.name: s.expected for s in suite}
    ok = True
    for o in outcomes:
        want = expected[o.name]
        ok &= o.status == want
        if want == "pass":
            ok &= o.best_k <= 2 and o.relmse < 1e-15
        elif want == "close":
            ok &= o.relmse < 0.01
    dt = time.time() - t0
    c = summary["counts"]
    ok = ok and not summary["mismatches"] and dt < 900
    _report(capsys, 4, "20-equation suite matches expectations", ok,
            f"pass {c['pass']} close {c['close']} fail {c['fail']}, "
            f"exact at K<=2, {dt:.0f}s")
    assert not summary["mismatches"], summary["mismatches"]
    for o in outcomes:
        if expected[o.name] == "pass":
            assert o.best_k <= 2 and o.relmse < 1e-15, o
        elif expected[o.name] == "close":
            assert o.relmse < 0.01, o
    assert dt < 900


def test_criterion_5_gradient_mode_recovery(capsys):
    t0 = time.time()
    x = DEFAULT_GRID.points
    xv = ex.var(0)
    rep1 = fo.train("eml(d=1)", x, np.exp(x), fo.TrainConfig(seed=0))
    F1, _ = fo.to_expr(rep1.forest)
    ok1 = rep1.mse < 1e-10 and \
        ex.canonical_string(F1) == ex.canonical_string(ex.exp(xv))

    target2 = ex.add(ex.exp(xv), ex.mul(xv, ex.cos(xv)), ex.sin(xv))
    y2 = ex.evaluate(target2, x)
    rep2 = fo.train("eml(d=1) + mult(leaf, sol(d=1))", x, y2,
                    fo.TrainConfig(seed=0))
    F2, Fp2 = fo.to_expr(rep2.forest)
    # e^x + x sin x up to an additive constant <=> derivatives agree exactly
    ok2 = rep2.mse < 1e-10 and \
        ex.canonical_string(Fp2) == ex.canonical_string(target2)
    dt = time.time() - t0
    ok = ok1 and ok2 and dt < 300
    _report(capsys, 5, "gradient mode recovers e^x and e^x + x sin x", ok,
            f"mse {rep1.mse:.1e} / {rep2.mse:.1e}, {dt:.1f}s")
    assert ok1, ex.to_infix(F1)
    assert ok2, ex.to_infix(F2)
    assert dt < 300


def test_criterion_6_gradient_oracle(capsys):
    templates = ["leaf", "eml(d=1)", "sol(d=1)", "eml(d=2)", "sol(d=2)",
                 "mult(leaf, sol(d=1))", "eml(d=1) + mult(leaf, sol(d=1))"]
    x = DEFAULT_GRID.points
    h = 1e-6
    worst = 0.0
    for k in range(50):
        f = fo._init_forest(fo.parse_template(templates[k % len(templates)]),
                            np.random.default_rng(100 + k))
        rng = np.random.default_rng(200 + k)
        y = rng.normal(size=x.shape)
        cfg = fo.TrainConfig(loss="squared" if k % 2 == 0 else "log1p")
        tau = float(rng.uniform(0.2, 1.0))
        _, g = fo.gradient(f, x, y, cfg, tau=tau)
        p0 = f.get_params()
        fd = np.zeros_like(p0)
        for i in range(len(p0)):
            p = p0.copy()
            p[i] += h
            f.set_params(p)
            up = fo.loss(f, x, y, cfg, tau=tau)
            p[i] -= 2 * h
            f.set_params(p)
            dn = fo.loss(f, x, y, cfg, tau=tau)
            fd[i] = (up - dn) / (2 * h)
        f.set_params(p0)
        rel = float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)))
        worst = max(worst, rel)
    ok = worst < 1e-4
    _report(capsys, 6, "analytic gradients match finite differences", ok,
            f"50 forests, max rel err {worst:.2e}")
    assert ok


def test_criterion_7_knowledge_base_growth(capsys, tmp_path):
    lib = lb.build_library(DEFAULT_GRID, lb.BuildConfig(d_max=1))
    xv = ex.var(0)
    novel = ex.mul(ex.exp(xv), ex.sin(xv), ex.add(xv, ex.const(2.0)))
    accepted, reason = lib.fold_in(novel)
    assert accepted, reason
    p = tmp_path / "kb.json"
    lb.save_kb(lib, p)
    lib2 = lb.load_kb(p)
    folded = lib2.atoms[-1]
    y = ex.evaluate(folded.fprime, lib2.grid.points)
    cache = sr.precompute(lib2, y)
    best = sr.scan_k1(cache, limit=1)[0]
    hit = best.indices[0] == len(lib2.atoms) - 1
    exact = best.mse < 1e-16 * float(np.mean(y * y))
    coef = abs(best.coefficients[0] - 1.0) < 1e-12
    ok = hit and exact and coef
    _report(capsys, 7, "folded-in pair is recovered at K=1 after reload", ok,
            f"mse {best.mse:.1e}")
    assert ok


def test_criterion_8_determinism_and_dedup(capsys, tmp_path, lib_depth1):
    cfg = lb.BuildConfig(d_max=1)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    lb.save_kb(lb.build_library(DEFAULT_GRID, cfg), p1)
    lb.save_kb(lb.build_library(DEFAULT_GRID, cfg), p2)
    identical = p1.read_bytes() == p2.read_bytes()
    a = lib_depth1.atoms[lib_depth1.searchable_indices()[7]]
    clone = lb.AtomPair(f=ex.mul(ex.const(2.5), a.f),
                        fprime=ex.mul(ex.const(2.5), a.fprime),
                        values=2.5 * a.values, dvalues=2.5 * a.dvalues,
                        layer=4, depth=1, origin="test")
    accepted, reason = lib_depth1.admit(clone)
    rejected = (not accepted) and reason == "correlated"
    ok = identical and rejected
    _report(capsys, 8, "byte-identical rebuilds; scalar multiples rejected",
            ok)
    assert identical
    assert rejected


def test_criterion_9_tabular_properties(capsys):
    X, y = tk.synth_regression(seed=0)
    scores, _ = tk.regression_cv(X, y, d_max=1, folds=5, seed=0)
    reg_ok = all(s >= 0.99 for s in scores)

    Xc, yc = tk.synth_hill(seed=0)
    atom, raw = tk.classification_gap(Xc, yc, d_max=1, folds=5, seed=0)
    gap = (atom.accuracy - raw.accuracy) * 100
    cls_ok = gap >= 2.0
    ok = reg_ok and cls_ok
    _report(capsys, 9, "R^2 >= 0.99 all folds; atom expansion beats raw "
            "logistic", ok,
            f"min R2 {min(scores):.4f}, gap {gap:+.1f} pts")
    assert reg_ok, scores
    assert cls_ok, gap
