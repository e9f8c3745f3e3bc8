"""Symbolic expression trees with analytic differentiation.

Supported node kinds: real constants, variables (by index), n-ary add and
mul, rational powers, and the unary functions exp, ln, sin, cos, arctan,
arcsin. Construction goes through the module-level constructors, which
canonicalize on the way in: nested add/mul are flattened and sorted,
constants are folded, identity elements dropped, like terms collected, and
rational exponents reduced. Two structurally equal expressions therefore
have byte-identical canonical strings, which is what the library's
deduplication relies on.

Evaluation is pure numpy; non-finite results (log of a negative number,
poles, even roots of negatives) propagate as NaN/inf and are never raised.
Differentiation is exact, built from the product rule, chain rule, power
rule, and linearity, and returns a canonicalized tree.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

CONST = "const"
VAR = "var"
ADD = "add"
MUL = "mul"
POW = "pow"
UNARY_OPS = ("exp", "ln", "sin", "cos", "arctan", "arcsin")

_KIND_RANK = {CONST: 0, VAR: 1, POW: 2, MUL: 3, ADD: 4}
_KIND_RANK.update({op: 5 + i for i, op in enumerate(UNARY_OPS)})


class ExprError(ValueError):
    """Raised for structurally invalid expressions or parse failures."""


@dataclass(frozen=True)
class Expr:
    """Immutable expression node. Build via the module constructors."""

    kind: str
    value: float = 0.0                 # payload for const
    index: int = 0                     # payload for var
    children: tuple = ()               # payload for add/mul/pow/unary
    exponent: Fraction = Fraction(1)   # payload for pow

    def __post_init__(self):
        # trees are hashed constantly (caches, dedup); precompute once
        object.__setattr__(self, "_hash", hash(
            (self.kind, self.value, self.index, self.children, self.exponent)))

    def __str__(self):
        return to_infix(self)

    def __repr__(self):
        return f"Expr<{canonical_string(self)}>"


Expr.__hash__ = lambda self: self._hash

ZERO = Expr(CONST, value=0.0)
ONE = Expr(CONST, value=1.0)


# ---------------------------------------------------------------------------
# Constructors (canonicalizing)
# ---------------------------------------------------------------------------

def const(c) -> Expr:
    c = float(c)
    if c == 0.0:
        c = 0.0  # normalize -0.0
    return Expr(CONST, value=c)


def var(j: int = 0) -> Expr:
    if j < 0:
        raise ExprError(f"variable index must be >= 0, got {j}")
    return Expr(VAR, index=int(j))


def _sort_key(e: Expr):
    return (_KIND_RANK[e.kind], canonical_string(e))


def _coeff_core(term: Expr):
    """Split a term into (constant coefficient, remaining factor)."""
    if term.kind == CONST:
        return term.value, ONE
    if term.kind == MUL and term.children[0].kind == CONST:
        rest = term.children[1:]
        core = rest[0] if len(rest) == 1 else Expr(MUL, children=rest)
        return term.children[0].value, core
    return 1.0, term


def add(*terms) -> Expr:
    flat = []
    for t in terms:
        if t.kind == ADD:
            flat.extend(t.children)
        else:
            flat.append(t)
    # collect like terms by their non-constant core
    const_sum = 0.0
    coeffs = {}
    order = []
    for t in flat:
        c, core = _coeff_core(t)
        if core is ONE or core.kind == CONST:
            const_sum += c * core.value if core.kind == CONST else c
            continue
        if core not in coeffs:
            coeffs[core] = 0.0
            order.append(core)
        coeffs[core] += c
    out = []
    for core in sorted(order, key=_sort_key):
        c = coeffs[core]
        if c == 0.0:
            continue
        out.append(core if c == 1.0 else mul(const(c), core))
    if const_sum != 0.0:
        out.append(const(const_sum))
    if not out:
        return ZERO
    if len(out) == 1:
        return out[0]
    return Expr(ADD, children=tuple(out))


def mul(*factors) -> Expr:
    flat = []
    for f in factors:
        if f.kind == MUL:
            flat.extend(f.children)
        else:
            flat.append(f)
    coeff = 1.0
    rest = []
    for f in flat:
        if f.kind == CONST:
            coeff *= f.value
        else:
            rest.append(f)
    if coeff == 0.0:
        return ZERO
    rest.sort(key=_sort_key)
    if not rest:
        return const(coeff)
    # distribute over sums: the canonical form of a product is an expanded
    # sum of products, which makes differentiation linear at the
    # canonical-string level (product-rule identities hold verbatim)
    for i, f in enumerate(rest):
        if f.kind == ADD:
            others = rest[:i] + rest[i + 1:]
            return add(*(mul(const(coeff), t, *others) for t in f.children))
    if coeff != 1.0:
        return Expr(MUL, children=(const(coeff), *rest))
    return rest[0] if len(rest) == 1 else Expr(MUL, children=tuple(rest))


def power(base: Expr, exponent) -> Expr:
    r = Fraction(exponent)
    if r == 0:
        return ONE
    if r == 1:
        return base
    if base.kind == CONST:
        v = _real_pow(np.float64(base.value), r)
        if np.isfinite(v):
            return const(float(v))
    return Expr(POW, children=(base,), exponent=r)


def _unary(op: str, child: Expr) -> Expr:
    if child.kind == CONST:
        with np.errstate(all="ignore"):
            v = _UNARY_FN[op](np.float64(child.value))
        if np.isfinite(v):
            return const(float(v))
    return Expr(op, children=(child,))


def exp(u: Expr) -> Expr:
    return _unary("exp", u)


def ln(u: Expr) -> Expr:
    return _unary("ln", u)


def sin(u: Expr) -> Expr:
    return _unary("sin", u)


def cos(u: Expr) -> Expr:
    return _unary("cos", u)


def arctan(u: Expr) -> Expr:
    return _unary("arctan", u)


def arcsin(u: Expr) -> Expr:
    return _unary("arcsin", u)


def reciprocal(u: Expr) -> Expr:
    return power(u, -1)


def neg(u: Expr) -> Expr:
    return mul(const(-1), u)


def sub(a: Expr, b: Expr) -> Expr:
    return add(a, neg(b))


def eml(u: Expr, v: Expr) -> Expr:
    """EML primitive e^u - ln(v); derivative e^u u' - v'/v."""
    return add(exp(u), neg(ln(v)))


def sol(u: Expr, v: Expr) -> Expr:
    """SOL primitive sin(u) - cos(v); derivative cos(u) u' + sin(v) v'."""
    return add(sin(u), neg(cos(v)))


# ---------------------------------------------------------------------------
# Canonical string and parsing
# ---------------------------------------------------------------------------

def _fmt_rational(r: Fraction) -> str:
    return str(r.numerator) if r.denominator == 1 else f"{r.numerator}/{r.denominator}"


@lru_cache(maxsize=None)
def canonical_string(e: Expr) -> str:
    """Deterministic prefix serialization; equal trees give equal strings."""
    if e.kind == CONST:
        return f"c:{e.value!r}"
    if e.kind == VAR:
        return f"v:{e.index}"
    if e.kind == POW:
        return f"pow({canonical_string(e.children[0])}, {_fmt_rational(e.exponent)})"
    inner = ", ".join(canonical_string(c) for c in e.children)
    return f"{e.kind}({inner})"


def parse(text: str) -> Expr:
    """Parse the canonical prefix format back into an Expr (lossless)."""
    pos = 0
    n = len(text)

    def skip_ws():
        nonlocal pos
        while pos < n and text[pos].isspace():
            pos += 1

    def fail(msg):
        raise ExprError(f"parse error at position {pos}: {msg}")

    def read_until(stop_chars):
        nonlocal pos
        start = pos
        while pos < n and text[pos] not in stop_chars:
            pos += 1
        return text[start:pos].strip()

    def expect(ch):
        nonlocal pos
        skip_ws()
        if pos >= n or text[pos] != ch:
            fail(f"expected {ch!r}")
        pos += 1

    def parse_expr() -> Expr:
        nonlocal pos
        skip_ws()
        head = read_until("(),")
        if head.startswith("c:"):
            try:
                return const(float(head[2:]))
            except ValueError:
                fail(f"bad constant {head!r}")
        if head.startswith("v:"):
            try:
                return var(int(head[2:]))
            except ValueError:
                fail(f"bad variable {head!r}")
        if pos >= n or text[pos] != "(":
            fail(f"expected '(' after {head!r}")
        pos += 1
        if head == "pow":
            base = parse_expr()
            expect(",")
            skip_ws()
            rat = read_until("),")
            try:
                r = Fraction(rat)
            except (ValueError, ZeroDivisionError):
                fail(f"bad rational exponent {rat!r}")
            expect(")")
            return power(base, r)
        args = [parse_expr()]
        skip_ws()
        while pos < n and text[pos] == ",":
            pos += 1
            args.append(parse_expr())
            skip_ws()
        expect(")")
        if head == "add":
            return add(*args)
        if head == "mul":
            return mul(*args)
        if head == "reciprocal" and len(args) == 1:
            return reciprocal(args[0])
        if head in UNARY_OPS and len(args) == 1:
            return _unary(head, args[0])
        fail(f"unknown op tag {head!r}")

    e = parse_expr()
    skip_ws()
    if pos != n:
        fail("trailing input")
    return e


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

_UNARY_FN = {
    "exp": np.exp,
    "ln": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "arctan": np.arctan,
    "arcsin": np.arcsin,
}


def _real_pow(v, r: Fraction):
    """Real-valued v**(p/q). Odd q takes the real root of negative bases;
    even q on negative bases is NaN."""
    if r.denominator == 1 and r.numerator >= 0:
        return v ** r.numerator
    f = float(r)
    if r.denominator % 2 == 1:
        return np.sign(v) ** (r.numerator % 2) * np.abs(v) ** f
    return np.where(np.asarray(v) < 0, np.nan, np.abs(v) ** f) if np.ndim(v) else (
        np.nan if v < 0 else abs(v) ** f)


def evaluate(e: Expr, x) -> np.ndarray:
    """Evaluate on a grid. `x` is (N,) for one variable or (N, nvars);
    non-finite values propagate, nothing raises."""
    x = np.asarray(x, dtype=np.float64)
    cache = {}

    def col(j):
        if x.ndim == 1:
            if j != 0:
                raise ExprError(f"variable index {j} on a 1-D grid")
            return x
        return x[:, j]

    def rec(node: Expr) -> np.ndarray:
        got = cache.get(node)
        if got is not None:
            return got
        k = node.kind
        if k == CONST:
            out = np.full(x.shape[0], node.value)
        elif k == VAR:
            out = col(node.index)
        elif k == ADD:
            out = rec(node.children[0]).copy()
            for c in node.children[1:]:
                out += rec(c)
        elif k == MUL:
            out = rec(node.children[0]).copy()
            for c in node.children[1:]:
                out *= rec(c)
        elif k == POW:
            out = _real_pow(rec(node.children[0]), node.exponent)
        elif k in _UNARY_FN:
            out = _UNARY_FN[k](rec(node.children[0]))
        else:
            raise ExprError(f"unsupported node kind {k!r}")
        cache[node] = out
        return out

    with np.errstate(all="ignore"):
        return np.asarray(rec(e), dtype=np.float64)


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def differentiate(e: Expr, j: int = 0) -> Expr:
    """Exact analytic derivative with respect to variable j, canonicalized."""
    k = e.kind
    if k == CONST:
        return ZERO
    if k == VAR:
        return ONE if e.index == j else ZERO
    if k == ADD:
        return add(*(differentiate(c, j) for c in e.children))
    if k == MUL:
        terms = []
        for i, ci in enumerate(e.children):
            rest = e.children[:i] + e.children[i + 1:]
            terms.append(mul(differentiate(ci, j), *rest))
        return add(*terms)
    if k == POW:
        base = e.children[0]
        r = e.exponent
        return mul(const(float(r)), power(base, r - 1), differentiate(base, j))
    if k in _UNARY_FN:
        u = e.children[0]
        du = differentiate(u, j)
        if k == "exp":
            return mul(exp(u), du)
        if k == "ln":
            return mul(du, power(u, -1))
        if k == "sin":
            return mul(cos(u), du)
        if k == "cos":
            return mul(const(-1), sin(u), du)
        if k == "arctan":
            return mul(du, power(add(ONE, power(u, 2)), -1))
        if k == "arcsin":
            return mul(du, power(sub(ONE, power(u, 2)), Fraction(-1, 2)))
    raise ExprError(f"unsupported node kind {k!r}")


# ---------------------------------------------------------------------------
# Display
# ---------------------------------------------------------------------------

def _fmt_const(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return f"{v:.10g}"


def to_infix(e: Expr) -> str:
    """Human-readable infix rendering (for reports; not parsed back)."""
    k = e.kind
    if k == CONST:
        return _fmt_const(e.value)
    if k == VAR:
        return f"x{e.index}"
    if k == ADD:
        parts = []
        for i, c in enumerate(e.children):
            s = to_infix(c)
            if i and s.startswith("-"):
                parts.append(f"- {s[1:]}")
            elif i:
                parts.append(f"+ {s}")
            else:
                parts.append(s)
        return " ".join(parts)
    if k == MUL:
        parts = []
        for c in e.children:
            s = to_infix(c)
            if c.kind == ADD:
                s = f"({s})"
            parts.append(s)
        return "*".join(parts)
    if k == POW:
        base = to_infix(e.children[0])
        if e.children[0].kind != VAR:
            base = f"({base})"
        return f"{base}^({_fmt_rational(e.exponent)})"
    return f"{k}({to_infix(e.children[0])})"


def relabel(e: Expr, j: int) -> Expr:
    """Replace every variable in a single-variable expression by var(j)."""
    k = e.kind
    if k == CONST:
        return e
    if k == VAR:
        return var(j)
    if k == POW:
        return power(relabel(e.children[0], j), e.exponent)
    if k == ADD:
        return add(*(relabel(c, j) for c in e.children))
    if k == MUL:
        return mul(*(relabel(c, j) for c in e.children))
    return _unary(k, relabel(e.children[0], j))


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Strictly increasing finite sample points with domain bounds."""

    points: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 1 or pts.size < 2:
            raise ExprError("grid needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ExprError("grid points must be finite")
        if not np.all(np.diff(pts) > 0):
            raise ExprError("grid points must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.size

    @classmethod
    def uniform(cls, lo: float, hi: float, n: int = 256) -> "Grid":
        """n uniform points on the half-open interval (lo, hi]."""
        if not hi > lo:
            raise ExprError("grid requires hi > lo")
        pts = lo + (hi - lo) * np.arange(1, n + 1) / n
        return cls(points=pts, lo=float(lo), hi=float(hi))

    def holdout(self, n: int = 256, inset: float = 0.05) -> "Grid":
        """Independent verification grid: domain shrunk inward by `inset`
        on each side, re-sampled with a different uniform offset."""
        span = self.hi - self.lo
        lo2 = self.lo + inset * span
        hi2 = self.hi - inset * span
        step = (hi2 - lo2) / n
        pts = lo2 + step * (np.arange(n) + 0.37)
        return Grid(points=pts, lo=lo2, hi=hi2)


DEFAULT_GRID = Grid.uniform(0.1, 3.0, 256)
