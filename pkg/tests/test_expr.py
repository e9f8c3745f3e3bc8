import numpy as np
import pytest
from fractions import Fraction

from atomforest import expr as ex


x = ex.var(0)


def test_const_folding_and_identities():
    assert ex.add(x, ex.const(0.0)) is not None
    assert ex.canonical_string(ex.add(x, ex.const(0.0))) == "v:0"
    assert ex.canonical_string(ex.mul(x, ex.const(1.0))) == "v:0"
    assert ex.canonical_string(ex.mul(x, ex.const(0.0))) == "c:0.0"
    assert ex.canonical_string(ex.power(x, Fraction(0))) == "c:1.0"
    assert ex.canonical_string(ex.power(x, Fraction(1))) == "v:0"


def test_add_commutes_and_collects():
    a = ex.add(ex.sin(x), ex.exp(x))
    b = ex.add(ex.exp(x), ex.sin(x))
    assert ex.canonical_string(a) == ex.canonical_string(b)
    two = ex.add(ex.sin(x), ex.sin(x))
    assert ex.canonical_string(two) == ex.canonical_string(
        ex.mul(ex.const(2.0), ex.sin(x)))


def test_mul_distributes_constants_and_sums():
    c = ex.const(3.0)
    s = ex.add(ex.exp(x), ex.sin(x))
    lhs = ex.mul(c, s)
    rhs = ex.add(ex.mul(c, ex.exp(x)), ex.mul(c, ex.sin(x)))
    assert ex.canonical_string(lhs) == ex.canonical_string(rhs)


def test_parse_roundtrip():
    exprs = [
        ex.eml(ex.add(ex.mul(ex.const(2.0), x), ex.const(1.0)), x),
        ex.sol(x, ex.neg(x)),
        ex.power(x, Fraction(-3, 2)),
        ex.mul(ex.exp(x), ex.sin(x), ex.add(x, ex.const(1.0))),
        ex.arctan(ex.power(x, Fraction(2))),
    ]
    for e in exprs:
        cs = ex.canonical_string(e)
        assert ex.canonical_string(ex.parse(cs)) == cs


def test_parse_unknown_op_named():
    with pytest.raises(Exception) as err:
        ex.parse("frob(v:0)")
    assert "frob" in str(err.value)


def test_evaluate_matrix_input():
    e = ex.add(ex.power(ex.var(0), Fraction(2)), ex.sin(ex.var(1)))
    X = np.array([[1.0, 0.0], [2.0, np.pi / 2]])
    out = ex.evaluate(e, X)
    assert np.allclose(out, [1.0, 5.0])


def test_differentiate_finite_difference_oracle():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0.2, 2.8, size=64)
    h = 1e-6
    cases = [
        ex.eml(x, ex.add(x, ex.const(1.0))),
        ex.sol(ex.mul(ex.const(2.0), x), x),
        ex.power(ex.add(ex.power(x, Fraction(2)), ex.const(1.0)),
                 Fraction(-1)),
        ex.arctan(x),
        ex.arcsin(ex.mul(ex.const(0.3), x)),
        ex.mul(ex.exp(x), ex.sin(x)),
        ex.ln(ex.add(ex.power(x, Fraction(2)), ex.const(1.0))),
    ]
    for e in cases:
        d = ex.evaluate(ex.differentiate(e), pts)
        fd = (ex.evaluate(e, pts + h) - ex.evaluate(e, pts - h)) / (2 * h)
        assert np.max(np.abs(d - fd) / (1 + np.abs(fd))) < 1e-7


def test_product_rule_roundtrip():
    e1 = ex.mul(ex.sol(ex.neg(x), ex.neg(x)), ex.exp(x))
    e2 = ex.mul(ex.sol(x, x), ex.exp(x))
    for a, b in [(ex.sin(x), ex.exp(x)), (e1, e2),
                 (ex.power(x, Fraction(3)), ex.ln(x))]:
        p = ex.mul(a, b)
        rt = ex.add(ex.mul(ex.differentiate(a), b),
                    ex.mul(a, ex.differentiate(b)))
        assert ex.canonical_string(ex.differentiate(p)) == \
            ex.canonical_string(rt)


def test_differentiate_linear():
    a, b = ex.exp(x), ex.sin(x)
    combo = ex.add(ex.mul(ex.const(2.5), a), ex.mul(ex.const(-1.5), b))
    lhs = ex.differentiate(combo)
    rhs = ex.add(ex.mul(ex.const(2.5), ex.differentiate(a)),
                 ex.mul(ex.const(-1.5), ex.differentiate(b)))
    assert ex.canonical_string(lhs) == ex.canonical_string(rhs)


def test_eml_sol_definitions():
    pts = np.linspace(0.5, 2.5, 17)
    u = ex.mul(ex.const(2.0), x)
    assert np.allclose(ex.evaluate(ex.eml(u, x), pts),
                       np.exp(2 * pts) - np.log(pts))
    assert np.allclose(ex.evaluate(ex.sol(x, ex.const(1.0)), pts),
                       np.sin(pts) - np.cos(1.0))
    # d/dx sol(x, 1) = cos x
    d = ex.evaluate(ex.differentiate(ex.sol(x, ex.ONE)), pts)
    assert np.allclose(d, np.cos(pts))


def test_rational_power_negative_base():
    pts = np.array([-8.0, 8.0])
    cube_root = ex.power(x, Fraction(1, 3))
    assert np.allclose(ex.evaluate(cube_root, pts), [-2.0, 2.0])
    sq = ex.evaluate(ex.power(x, Fraction(1, 2)), pts)
    assert np.isnan(sq[0]) and np.isclose(sq[1], np.sqrt(8))


def test_grid_holdout_disjoint():
    g = ex.DEFAULT_GRID
    h = g.holdout()
    assert h.n == 256
    assert h.lo > g.lo and h.hi < g.hi
    assert not np.intersect1d(np.round(g.points, 12),
                              np.round(h.points, 12)).size
