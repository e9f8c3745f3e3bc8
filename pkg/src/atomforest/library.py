"""Self-constructing, layered atom library over a data grid.

An atom is a function-derivative pair (f, f') together with both sampled
on the grid. The library builds itself in layers:

  layer 0  rational powers x^(p/q)
  layer 1  depth-1 EML / SOL trees over integer linear inner functions
  layer 2  exp / -ln / sin / cos / 1/g / arctan / arcsin of integer
           quadratics
  layer 3  pairwise products (product-rule expansion), EML x SOL
           cross-family products first
  layer 4  unary nestings of earlier atoms plus x-products; one round at
           depth budget 2, a second round at depth budget 3

Candidates that are non-finite anywhere on the grid are discarded, and a
candidate is rejected if its values correlate above the dedup threshold
with any already-admitted atom. The resulting atom order is deterministic
for a fixed config and grid. The library persists as a versioned JSON
knowledge base; grid values are never stored, they are recomputed and
revalidated on load.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from fractions import Fraction

import numpy as np

from . import expr as ex
from .expr import Expr, Grid, canonical_string, differentiate, evaluate

log = logging.getLogger(__name__)

KB_VERSION = 1

ORIGINS = ("seed", "eml", "sol", "product", "nesting", "discovered")


class KBError(ValueError):
    """Raised for knowledge-base files that cannot be loaded at all."""


@dataclass
class AtomPair:
    f: Expr
    fprime: Expr
    values: np.ndarray
    dvalues: np.ndarray
    layer: int
    depth: int
    origin: str
    searchable: bool = True


@dataclass
class BuildConfig:
    p_range: tuple = (-4, 15)
    q_range: tuple = (1, 4)
    slope_range: tuple = (-3, 3)
    offset_range: tuple = (-3, 3)
    quad_range: tuple = (-2, 2)
    d_max: int = 2
    max_atoms: int = 50_000
    # candidates tried per product/nesting round; keeps deep builds in the
    # paper's "thousands to tens of thousands" regime instead of exploding
    layer3_budget: int = 2500
    layer4_budget: int = 3000
    corr_threshold: float = 0.999

    def __post_init__(self):
        if self.d_max < 1 or self.d_max > 3:
            raise ValueError("d_max must be 1, 2 or 3")
        for name in ("p_range", "q_range", "slope_range", "offset_range", "quad_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} is empty")


@dataclass
class AtomLibrary:
    grid: Grid
    config: BuildConfig = field(default_factory=BuildConfig)
    atoms: list = field(default_factory=list)
    layer_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self._canon = set(canonical_string(a.f) for a in self.atoms)
        self._cap = 0
        self._norm = np.empty((0, self.grid.n))
        self._nrows = 0
        for a in self.atoms:
            self._push_norm(a.values)

    # -- dedup bookkeeping -------------------------------------------------

    def _normalize(self, values):
        v = values - values.mean()
        nrm = np.linalg.norm(v)
        if nrm < 1e-12:
            return None
        return v / nrm

    def _push_norm(self, values):
        v = self._normalize(values)
        if v is None:
            return
        if self._nrows == self._norm.shape[0]:
            grown = np.empty((max(256, 2 * self._norm.shape[0]), self.grid.n))
            grown[: self._nrows] = self._norm[: self._nrows]
            self._norm = grown
        self._norm[self._nrows] = v
        self._nrows += 1

    def max_correlation(self, values) -> float:
        """Max |Pearson corr| of `values` against all admitted atoms."""
        v = self._normalize(values)
        if v is None:
            return 0.0
        if self._nrows == 0:
            return 0.0
        return float(np.max(np.abs(self._norm[: self._nrows] @ v)))

    # -- admission ---------------------------------------------------------

    def admit(self, candidate: AtomPair):
        """Admit a candidate atom. Returns (accepted, reason)."""
        if len(self.atoms) >= self.config.max_atoms:
            return False, "capacity"
        if not np.all(np.isfinite(candidate.values)) or \
                np.max(np.abs(candidate.values)) > 1e150:
            return False, "non-finite"
        cs = canonical_string(candidate.f)
        if cs in self._canon:
            return False, "duplicate"
        if candidate.searchable:
            v = self._normalize(candidate.values)
            if v is None:
                return False, "constant"
            if self.max_correlation(candidate.values) > self.config.corr_threshold:
                return False, "correlated"
        if not np.all(np.isfinite(candidate.dvalues)):
            return False, "non-finite-derivative"
        if candidate.searchable and not self._fd_consistent(candidate):
            return False, "fd-inconsistent"
        self.atoms.append(candidate)
        self._canon.add(cs)
        self._push_norm(candidate.values)
        return True, "ok"

    def _fd_consistent(self, candidate: AtomPair, h: float = 1e-5,
                       tol: float = 1e-6) -> bool:
        """The stored derivative must be resolvable numerically on the
        working grid: a central difference at step h has to agree at every
        interior point. This rejects aliased candidates (e.g. trig of a
        large power) whose oscillation the grid cannot sample and whose
        derivative values are therefore numerically meaningless."""
        pts = self.grid.points[1:-1]
        fd = (evaluate(candidate.f, pts + h) -
              evaluate(candidate.f, pts - h)) / (2.0 * h)
        if not np.all(np.isfinite(fd)):
            return False
        err = np.abs(candidate.dvalues[1:-1] - fd) / (1.0 + np.abs(fd))
        return float(np.max(err)) < tol

    def _try(self, f: Expr, layer: int, depth: int, origin: str,
             values=None, dvalues=None, searchable=True):
        """Evaluate, differentiate and admit an expression; cheap checks
        (finiteness, duplicate, correlation) run before the symbolic
        derivative is built. `dvalues` may be supplied by a numeric
        product/chain rule to skip re-evaluating the derivative tree."""
        if len(self.atoms) >= self.config.max_atoms:
            return False, "capacity"
        if values is None:
            values = evaluate(f, self.grid.points)
        if not np.all(np.isfinite(values)) or np.max(np.abs(values)) > 1e150:
            return False, "non-finite"
        cs = canonical_string(f)
        if cs in self._canon:
            return False, "duplicate"
        if searchable and self.max_correlation(values) > self.config.corr_threshold:
            return False, "correlated"
        fprime = differentiate(f)
        if dvalues is None:
            dvalues = evaluate(fprime, self.grid.points)
        return self.admit(AtomPair(f, fprime, values, dvalues,
                                   layer, depth, origin, searchable))

    # -- queries -----------------------------------------------------------

    def searchable_indices(self):
        return [i for i, a in enumerate(self.atoms) if a.searchable]

    def __len__(self):
        return len(self.atoms)

    def fold_in(self, f: Expr):
        """Add a discovered function (and its derivative) to the library."""
        return self._try(f, layer=4, depth=1, origin="discovered")


# ---------------------------------------------------------------------------
# Layer construction
# ---------------------------------------------------------------------------

def _irange(rng):
    return range(rng[0], rng[1] + 1)


def build_layer0(lib: AtomLibrary):
    """Rational powers x^(p/q); p/q = 0 excluded, reduced fractions only."""
    cfg = lib.config
    x = ex.var(0)
    stats = _LayerStats()
    for q in _irange(cfg.q_range):
        for p in _irange(cfg.p_range):
            if p == 0:
                continue
            r = Fraction(p, q)
            if r.numerator != p or r.denominator != q:
                continue  # non-reduced duplicate
            stats.count(lib._try(ex.power(x, r), 0, 1, "seed"))
    return stats


def _linear(a, b):
    return ex.add(ex.mul(ex.const(a), ex.var(0)), ex.const(b))


def build_layer1(lib: AtomLibrary):
    """Depth-1 EML and SOL trees over integer linear inner functions.
    Zero-slope branches are allowed (degenerate single-family atoms), but
    not both at once."""
    cfg = lib.config
    stats = _LayerStats()
    slopes = list(_irange(cfg.slope_range))
    offsets = list(_irange(cfg.offset_range))
    combos = [(a1, b1, a2, b2)
              for a1 in slopes for b1 in offsets
              for a2 in slopes for b2 in offsets
              if not (a1 == 0 and a2 == 0)]
    # simplest inner functions first, so pure-family atoms like e^x and
    # sin x get low indices (later layers prioritize low-index products)
    combos.sort(key=lambda t: (sum(abs(v) for v in t), t))
    for a1, b1, a2, b2 in combos:
        l1 = _linear(a1, b1)
        l2 = _linear(a2, b2)
        stats.count(lib._try(ex.eml(l1, l2), 1, 1, "eml"))
        stats.count(lib._try(ex.sol(l1, l2), 1, 1, "sol"))
    return stats


_LAYER2_OPS = (
    lambda g: ex.exp(g),
    lambda g: ex.neg(ex.ln(g)),
    lambda g: ex.sin(g),
    lambda g: ex.cos(g),
    lambda g: ex.reciprocal(g),
    lambda g: ex.arctan(g),
    lambda g: ex.arcsin(g),
)


def build_layer2(lib: AtomLibrary):
    """Compositions with integer quadratic arguments g = qx^2 + ax + c."""
    cfg = lib.config
    stats = _LayerStats()
    x = ex.var(0)
    quads = [(q, a, c)
             for q in _irange(cfg.quad_range) if q != 0
             for a in _irange(cfg.quad_range)
             for c in _irange(cfg.quad_range)]
    quads.sort(key=lambda t: (sum(abs(v) for v in t), t))
    for q, a, c in quads:
        g = ex.add(ex.mul(ex.const(q), ex.power(x, 2)),
                   ex.mul(ex.const(a), x), ex.const(c))
        for op in _LAYER2_OPS:
            stats.count(lib._try(op(g), 2, 1, "nesting"))
    return stats


def _prefilter(lib: AtomLibrary, values_block: np.ndarray) -> np.ndarray:
    """Boolean keep-mask for a block of candidate value rows: finite and
    not already correlated with the current library. Conservative; the
    final sequential admit re-checks against atoms admitted meanwhile."""
    with np.errstate(all="ignore"):
        keep = np.all(np.isfinite(values_block), axis=1)
        keep &= np.all(np.abs(values_block) < 1e150, axis=1)  # norm overflow guard
    if lib._nrows and keep.any():
        v = values_block[keep] - values_block[keep].mean(axis=1, keepdims=True)
        nrm = np.linalg.norm(v, axis=1)
        ok = nrm >= 1e-12
        corr = np.zeros(v.shape[0])
        if ok.any():
            corr[ok] = np.max(
                np.abs(v[ok] / nrm[ok, None] @ lib._norm[: lib._nrows].T), axis=1)
        sub = ok & (corr <= lib.config.corr_threshold)
        keep[np.flatnonzero(keep)] = sub
    return keep


def build_layer3(lib: AtomLibrary, candidate_budget: int | None = None):
    """Pairwise products of earlier atoms, product-rule derivatives.
    Cross-family EML x SOL products take priority in the candidate order;
    x-times-atom products arise from pairs involving the identity atom."""
    stats = _LayerStats()
    base = [(i, a) for i, a in enumerate(lib.atoms) if a.searchable]
    cross, rest = [], []
    for ii, (i, ai) in enumerate(base):
        for j, aj in base[ii:]:
            if {ai.origin, aj.origin} == {"eml", "sol"}:
                cross.append((i, j))
            else:
                rest.append((i, j))
    # low-index (simple) factors first within each priority group
    key = lambda p: (p[1], p[0])
    pairs = sorted(cross, key=key) + sorted(rest, key=key)
    if candidate_budget is None:
        candidate_budget = lib.config.layer3_budget
    pairs = pairs[:candidate_budget]
    _admit_pairs(lib, pairs, stats, layer=3)
    return stats


def _admit_pairs(lib: AtomLibrary, pairs, stats, layer, block=4096):
    if not pairs:
        return
    all_values = np.stack([a.values for a in lib.atoms])
    all_dvalues = np.stack([a.dvalues for a in lib.atoms])
    pair_arr = np.asarray(pairs)
    for start in range(0, len(pairs), block):
        chunk = pairs[start:start + block]
        idx = pair_arr[start:start + block]
        vals = all_values[idx[:, 0]] * all_values[idx[:, 1]]
        keep = _prefilter(lib, vals)
        stats.rejected += int((~keep).sum())
        for k in np.flatnonzero(keep):
            i, j = chunk[k]
            f = ex.mul(lib.atoms[i].f, lib.atoms[j].f)
            dvals = (all_dvalues[i] * all_values[j]
                     + all_values[i] * all_dvalues[j])
            stats.count(lib._try(f, layer, max(lib.atoms[i].depth,
                                               lib.atoms[j].depth), "product",
                                 values=vals[k], dvalues=dvals))
            if len(lib.atoms) >= lib.config.max_atoms:
                return


_NEST_OPS = (
    # name, value map, chain-rule derivative map (v, dv), symbolic map
    ("exp", np.exp, lambda v, dv: np.exp(v) * dv, ex.exp),
    ("sin", np.sin, lambda v, dv: np.cos(v) * dv, ex.sin),
    ("cos", np.cos, lambda v, dv: -np.sin(v) * dv, ex.cos),
    ("negln", lambda v: -np.log(v), lambda v, dv: -dv / v,
     lambda e: ex.neg(ex.ln(e))),
    ("recip", lambda v: 1.0 / v, lambda v, dv: -dv / (v * v), ex.reciprocal),
    ("arctan", np.arctan, lambda v, dv: dv / (1.0 + v * v), ex.arctan),
)


def build_layer4(lib: AtomLibrary, depth: int, candidate_budget: int | None = None):
    """One nesting round: unary compositions of every prior atom, then
    x-products of the newly admitted atoms. `depth` tags the round
    (2 for the first, 3 for the second)."""
    stats = _LayerStats()
    if candidate_budget is None:
        candidate_budget = lib.config.layer4_budget
    prior = [(i, a) for i, a in enumerate(lib.atoms) if a.searchable]
    first_new = len(lib.atoms)
    tried = 0
    with np.errstate(all="ignore"):
        for _, a in prior:
            for _, num_fn, dnum_fn, sym_fn in _NEST_OPS:
                if tried >= candidate_budget:
                    break
                tried += 1
                vals = num_fn(a.values)
                if not np.all(np.isfinite(vals)):
                    stats.rejected += 1
                    continue
                if lib.max_correlation(vals) > lib.config.corr_threshold:
                    stats.rejected += 1
                    continue
                stats.count(lib._try(sym_fn(a.f), 4, depth, "nesting",
                                     values=vals,
                                     dvalues=dnum_fn(a.values, a.dvalues)))
                if len(lib.atoms) >= lib.config.max_atoms:
                    return stats
    # multiply the new atoms by x
    x_idx = None
    for i, a in enumerate(lib.atoms):
        if a.f == ex.var(0):
            x_idx = i
            break
    if x_idx is not None:
        pairs = [(x_idx, j) for j in range(first_new, len(lib.atoms))]
        _admit_pairs(lib, pairs, stats, layer=4)
    return stats


class _LayerStats:
    def __init__(self):
        self.admitted = 0
        self.rejected = 0

    def count(self, result):
        ok, _ = result
        if ok:
            self.admitted += 1
        else:
            self.rejected += 1

    def as_dict(self):
        return {"admitted": self.admitted, "rejected": self.rejected}


def build_library(grid: Grid | None = None, config: BuildConfig | None = None) -> AtomLibrary:
    """Run the full layered construction at config.d_max."""
    grid = grid or ex.DEFAULT_GRID
    config = config or BuildConfig()
    lib = AtomLibrary(grid=grid, config=config)
    # the constant atom: kept for completeness, never searched (its
    # derivative is zero, it only carries the integration constant)
    lib.admit(AtomPair(ex.ONE, ex.ZERO,
                       np.ones(grid.n), np.zeros(grid.n),
                       layer=0, depth=0, origin="seed", searchable=False))
    lib.layer_stats["layer0"] = build_layer0(lib).as_dict()
    lib.layer_stats["layer1"] = build_layer1(lib).as_dict()
    lib.layer_stats["layer2"] = build_layer2(lib).as_dict()
    # products and nestings kick in at depth budget 2; a depth-1 build
    # stays in the hundreds of atoms
    if config.d_max >= 2:
        lib.layer_stats["layer3"] = build_layer3(lib).as_dict()
        lib.layer_stats["layer4a"] = build_layer4(lib, depth=2).as_dict()
    if config.d_max >= 3:
        lib.layer_stats["layer4b"] = build_layer4(lib, depth=3).as_dict()
    return lib


# ---------------------------------------------------------------------------
# Knowledge-base persistence
# ---------------------------------------------------------------------------

def save_kb(lib: AtomLibrary, path):
    doc = {
        "version": KB_VERSION,
        "build_config": asdict(lib.config),
        "grid": {"lo": lib.grid.lo, "hi": lib.grid.hi, "n": lib.grid.n},
        "atoms": [
            {
                "f": canonical_string(a.f),
                "fprime": canonical_string(a.fprime),
                "layer": a.layer,
                "depth": a.depth,
                "origin": a.origin,
                "searchable": a.searchable,
            }
            for a in lib.atoms
        ],
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def load_kb(path, grid: Grid | None = None) -> AtomLibrary:
    """Load a knowledge base; expressions are re-parsed and grid values
    recomputed. Atoms that fail to parse or are non-finite on the target
    grid are dropped and reported in `lib.load_errors`."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise KBError(f"not a KB file: {err}") from err
    if doc.get("version") != KB_VERSION:
        raise KBError(f"unsupported KB version {doc.get('version')!r}")
    cfg_dict = dict(doc.get("build_config", {}))
    for key in ("p_range", "q_range", "slope_range", "offset_range", "quad_range"):
        if key in cfg_dict:
            cfg_dict[key] = tuple(cfg_dict[key])
    config = BuildConfig(**cfg_dict)
    if grid is None:
        g = doc.get("grid", {})
        grid = Grid.uniform(g.get("lo", 0.1), g.get("hi", 3.0), g.get("n", 256))
    lib = AtomLibrary(grid=grid, config=config)
    errors = []
    for pos, rec in enumerate(doc.get("atoms", [])):
        try:
            f = ex.parse(rec["f"])
        except (ex.ExprError, KeyError) as err:
            errors.append(f"atom {pos}: {err}")
            continue
        searchable = bool(rec.get("searchable", True))
        if not searchable and f == ex.ONE:
            lib.admit(AtomPair(ex.ONE, ex.ZERO, np.ones(grid.n),
                               np.zeros(grid.n), rec.get("layer", 0),
                               rec.get("depth", 0), rec.get("origin", "seed"),
                               searchable=False))
            continue
        ok, reason = lib._try(f, rec.get("layer", 0), rec.get("depth", 1),
                              rec.get("origin", "seed"), searchable=searchable)
        if not ok:
            errors.append(f"atom {pos} ({rec['f']}): dropped ({reason})")
            log.warning("load_kb: dropped atom %d: %s", pos, reason)
    lib.load_errors = errors
    return lib
