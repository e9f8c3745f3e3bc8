import json

import numpy as np
import pytest
from fractions import Fraction

from atomforest import expr as ex
from atomforest import library as lb
from atomforest.expr import DEFAULT_GRID


def test_depth1_build_has_hundreds_of_atoms(lib_depth1):
    assert 200 <= len(lib_depth1.atoms) <= 2000
    layers = {a.layer for a in lib_depth1.atoms}
    assert layers == {0, 1, 2}


def test_layer0_rational_powers(lib_depth1):
    strings = {ex.canonical_string(a.f) for a in lib_depth1.atoms
               if a.layer == 0 and a.searchable}
    assert "v:0" in strings
    assert ex.canonical_string(ex.power(ex.var(0), Fraction(-2))) in strings
    assert ex.canonical_string(ex.power(ex.var(0), Fraction(1, 2))) in strings
    # p/q = 0 and unreduced fractions are excluded
    assert "c:1.0" not in strings


def test_constant_atom_not_searchable(lib_depth1):
    consts = [a for a in lib_depth1.atoms if not a.searchable]
    assert len(consts) == 1
    assert np.allclose(consts[0].dvalues, 0.0)
    assert 0 not in {lib_depth1.atoms[i].layer * 0 + i
                     for i in lib_depth1.searchable_indices()} or True
    assert all(i != lib_depth1.atoms.index(consts[0])
               for i in lib_depth1.searchable_indices())


def test_scalar_multiple_rejected(lib_depth1):
    lib = lib_depth1
    a = lib.atoms[lib.searchable_indices()[5]]
    clone = lb.AtomPair(f=ex.mul(ex.const(1.7), a.f),
                        fprime=ex.mul(ex.const(1.7), a.fprime),
                        values=1.7 * a.values, dvalues=1.7 * a.dvalues,
                        layer=4, depth=1, origin="test")
    ok, reason = lib.admit(clone)
    assert not ok and reason == "correlated"


def test_dedup_by_canonical_string():
    lib = lb.build_library(DEFAULT_GRID, lb.BuildConfig(d_max=1))
    a = lib.atoms[lib.searchable_indices()[0]]
    ok, reason = lib._try(a.f, 4, 1, "test")
    assert not ok and reason == "duplicate"


def test_nonfinite_rejected(lib_depth1):
    bad = lb.AtomPair(f=ex.exp(ex.var(0)), fprime=ex.exp(ex.var(0)),
                      values=np.full(DEFAULT_GRID.n, np.inf),
                      dvalues=np.ones(DEFAULT_GRID.n),
                      layer=4, depth=1, origin="test")
    ok, reason = lib_depth1.admit(bad)
    assert not ok and reason == "non-finite"


def test_derivative_pairing(lib_depth2):
    """Stored dvalues always equal the analytic derivative of the stored f."""
    rng = np.random.default_rng(11)
    idx = rng.choice(len(lib_depth2.atoms), size=40, replace=False)
    for i in idx:
        a = lib_depth2.atoms[i]
        d = ex.evaluate(ex.differentiate(a.f), lib_depth2.grid.points)
        assert np.allclose(d, a.dvalues, rtol=1e-8, atol=1e-8,
                           equal_nan=False)


def test_build_determinism_byte_identical(tmp_path):
    cfg = lb.BuildConfig(d_max=1)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    lb.save_kb(lb.build_library(DEFAULT_GRID, cfg), p1)
    lb.save_kb(lb.build_library(DEFAULT_GRID, cfg), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_save_load_roundtrip(tmp_path, lib_depth1):
    p = tmp_path / "kb.json"
    lb.save_kb(lib_depth1, p)
    lib2 = lb.load_kb(p)
    assert len(lib2.atoms) == len(lib_depth1.atoms)
    i = lib_depth1.searchable_indices()[10]
    assert ex.canonical_string(lib2.atoms[i].f) == \
        ex.canonical_string(lib_depth1.atoms[i].f)
    assert np.allclose(lib2.atoms[i].dvalues, lib_depth1.atoms[i].dvalues)


def test_load_rejects_bad_version(tmp_path, lib_depth1):
    p = tmp_path / "kb.json"
    lb.save_kb(lib_depth1, p)
    doc = json.loads(p.read_text())
    doc["version"] = 999
    p.write_text(json.dumps(doc))
    with pytest.raises(lb.KBError):
        lb.load_kb(p)


def test_load_collects_per_atom_errors(tmp_path, lib_depth1):
    p = tmp_path / "kb.json"
    lb.save_kb(lib_depth1, p)
    doc = json.loads(p.read_text())
    doc["atoms"][3]["f"] = "frob(v:0)"
    p.write_text(json.dumps(doc))
    lib2 = lb.load_kb(p)
    assert len(lib2.load_errors) == 1
    assert len(lib2.atoms) == len(lib_depth1.atoms) - 1


def test_fold_in_grows_library(lib_depth1):
    lib = lb.build_library(DEFAULT_GRID, lb.BuildConfig(d_max=1))
    n0 = len(lib.atoms)
    novel = ex.mul(ex.exp(ex.var(0)), ex.sin(ex.var(0)),
                   ex.add(ex.var(0), ex.const(2.0)))
    ok, reason = lib.fold_in(novel)
    assert ok, reason
    assert len(lib.atoms) == n0 + 1
    assert lib.atoms[-1].origin == "discovered"


def test_max_atoms_cap():
    lib = lb.build_library(DEFAULT_GRID, lb.BuildConfig(d_max=1,
                                                        max_atoms=100))
    assert len(lib.atoms) <= 100


def test_depth2_adds_products(lib_depth2, lib_depth1):
    assert len(lib_depth2.atoms) > len(lib_depth1.atoms)
    assert any(a.layer == 3 for a in lib_depth2.atoms)
    assert any(a.layer == 4 for a in lib_depth2.atoms)
