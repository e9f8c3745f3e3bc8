"""Gradient mode: enhanced forests trained by derivative matching.

A forest is a sum F = sum_t c_t * T_t of parameterised trees. Leaves are
softmax mixtures over the basis {1, x}; internal nodes are EML / SOL
primitives or multiplicative nodes M = (A + b_A)(B + b_B). One bottom-up
pass computes value and derivative at every node, so the loss
mean |F'(x_i) - y_i|^2 never touches a numeric differencer. Gradients are
exact: a reverse pass propagates sensitivities through both the value and
the derivative channel of every node.

After training, leaves snap to their nearest one-hot choice and the now
discrete structure gets an exact linear refit of its output coefficients
(and, for multiplicative roots, child offsets), followed by rounding of
constants to a small catalog when that does not hurt the fit.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import expr as ex
from .expr import Expr, Grid

LEAF = "leaf"
EML = "eml"
SOL = "sol"
MULT = "mult"

SNAP_STOP = 1e-10
CLIP_NORM = 5.0


class TemplateError(ValueError):
    pass


class Node:
    """One forest node. Leaves hold two selection logits; multiplicative
    nodes hold two trainable child offsets; EML/SOL nodes are pure
    structure."""

    __slots__ = ("kind", "left", "right", "theta", "bias", "hard",
                 "_V", "_D", "_w")

    def __init__(self, kind, left=None, right=None):
        self.kind = kind
        self.left = left
        self.right = right
        self.theta = np.zeros(2) if kind == LEAF else None
        self.bias = np.zeros(2) if kind == MULT else None
        self.hard = None  # set to 0 (constant 1) or 1 (x) by snapping
        self._V = self._D = self._w = None

    def walk(self):
        if self.left is not None:
            yield from self.left.walk()
        if self.right is not None:
            yield from self.right.walk()
        yield self


def leaf():
    return Node(LEAF)


def master_formula(kind: str, depth: int) -> Node:
    """Full binary tree of `kind` primitives with 2^depth leaves."""
    if kind not in (EML, SOL):
        raise TemplateError(f"unknown primitive {kind!r}")
    if depth < 1:
        raise TemplateError("master formula depth must be >= 1")
    if depth == 1:
        return Node(kind, leaf(), leaf())
    return Node(kind, master_formula(kind, depth - 1),
                master_formula(kind, depth - 1))


def mult(a: Node, b: Node) -> Node:
    return Node(MULT, a, b)


def tree_depth(node: Node) -> int:
    if node.kind == LEAF:
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


class Forest:
    """Sum of trees with per-tree output coefficients."""

    def __init__(self, trees, coefficients=None):
        self.trees = list(trees)
        if coefficients is None:
            coefficients = np.ones(len(self.trees))
        self.coefficients = np.asarray(coefficients, dtype=np.float64)

    @property
    def k(self):
        return len(self.trees)

    def copy(self) -> "Forest":
        return copy.deepcopy(self)

    def is_snapped(self) -> bool:
        return all(n.hard is not None for t in self.trees
                   for n in t.walk() if n.kind == LEAF)

    # --- flat parameter vector (leaf logits, mult offsets, coefficients) ---

    def _param_slots(self):
        slots = []
        for t in self.trees:
            for n in t.walk():
                if n.kind == LEAF and n.hard is None:
                    slots.append(("theta", n))
                elif n.kind == MULT:
                    slots.append(("bias", n))
        return slots

    def get_params(self) -> np.ndarray:
        parts = [getattr(n, what) for what, n in self._param_slots()]
        parts.append(self.coefficients)
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_params(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0
        for what, n in self._param_slots():
            setattr(n, what, vec[pos:pos + 2].copy())
            pos += 2
        self.coefficients = vec[pos:pos + self.k].copy()

    def forward(self, x, tau: float):
        """Values and derivatives of the forest on the sample points x."""
        x = np.asarray(x, dtype=np.float64)
        V = np.zeros_like(x)
        D = np.zeros_like(x)
        for c, t in zip(self.coefficients, self.trees):
            tv, td = _node_forward(t, x, tau)
            V += c * tv
            D += c * td
        return V, D


def _leaf_weights(node: Node, tau: float):
    if node.hard is not None:
        w = np.zeros(2)
        w[node.hard] = 1.0
        return w
    z = node.theta / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _node_forward(node: Node, x, tau: float):
    """Bottom-up value/derivative pass; caches per-node arrays for the
    reverse pass."""
    if node.kind == LEAF:
        w = _leaf_weights(node, tau)
        node._w = w
        node._V = w[0] + w[1] * x
        node._D = np.full_like(x, w[1])
        return node._V, node._D
    uv, ud = _node_forward(node.left, x, tau)
    vv, vd = _node_forward(node.right, x, tau)
    with np.errstate(all="ignore"):
        if node.kind == EML:
            V = np.exp(uv) - np.log(vv)
            D = np.exp(uv) * ud - vd / vv
        elif node.kind == SOL:
            V = np.sin(uv) - np.cos(vv)
            D = np.cos(uv) * ud + np.sin(vv) * vd
        elif node.kind == MULT:
            a = uv + node.bias[0]
            b = vv + node.bias[1]
            V = a * b
            D = ud * b + a * vd
        else:
            raise ValueError(f"unknown node kind {node.kind!r}")
    node._V, node._D = V, D
    return V, D


def _node_backward(node: Node, gV, gD, x, tau: float, out: dict):
    """Reverse pass. gV / gD are dLoss/dValue and dLoss/dDerivative arrays
    arriving at this node; parameter gradients accumulate into `out`
    keyed by node identity."""
    if node.kind == LEAF:
        if node.hard is not None:
            return
        w = node._w
        gw0 = np.sum(gV)
        gw1 = np.sum(gV * x) + np.sum(gD)
        # softmax jacobian at temperature tau
        g0 = (w[0] * (1 - w[0]) * gw0 - w[0] * w[1] * gw1) / tau
        g1 = (w[1] * (1 - w[1]) * gw1 - w[0] * w[1] * gw0) / tau
        out[id(node)] = out.get(id(node), np.zeros(2)) + np.array([g0, g1])
        return
    uv, ud = node.left._V, node.left._D
    vv, vd = node.right._V, node.right._D
    with np.errstate(all="ignore"):
        if node.kind == EML:
            e = np.exp(uv)
            gVu = gV * e + gD * e * ud
            gDu = gD * e
            gVv = -gV / vv + gD * vd / (vv * vv)
            gDv = -gD / vv
        elif node.kind == SOL:
            gVu = gV * np.cos(uv) - gD * np.sin(uv) * ud
            gDu = gD * np.cos(uv)
            gVv = gV * np.sin(vv) + gD * np.cos(vv) * vd
            gDv = gD * np.sin(vv)
        else:  # MULT
            a = uv + node.bias[0]
            b = vv + node.bias[1]
            gVu = gV * b + gD * vd
            gDu = gD * b
            gVv = gV * a + gD * ud
            gDv = gD * a
            gb = np.array([np.sum(gV * b + gD * vd),
                           np.sum(gV * a + gD * ud)])
            out[id(node)] = out.get(id(node), np.zeros(2)) + gb
    _node_backward(node.left, gVu, gDu, x, tau, out)
    _node_backward(node.right, gVv, gDv, x, tau, out)


# ---------------------------------------------------------------------------
# loss / gradient


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 0.01
    restarts: int = 16
    clip: float = CLIP_NORM
    loss: str = "auto"           # squared | log1p | auto (log1p iff depth >= 3)
    stop: float = SNAP_STOP
    seed: int = 0
    tau_hi: float = 1.0
    tau_lo: float = 0.1
    anneal_frac: float = 0.8

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


def tau_schedule(step: int, cfg: TrainConfig) -> float:
    frac = min(step / (cfg.anneal_frac * cfg.steps), 1.0)
    return cfg.tau_hi - (cfg.tau_hi - cfg.tau_lo) * frac


def _loss_kind(forest: Forest, cfg: TrainConfig) -> str:
    if cfg.loss != "auto":
        return cfg.loss
    d = max((tree_depth(t) for t in forest.trees), default=0)
    return "log1p" if d >= 3 else "squared"


def loss(forest: Forest, x, y, cfg: TrainConfig, tau: float = None) -> float:
    if tau is None:
        tau = cfg.tau_lo
    _, D = forest.forward(x, tau)
    r = D - np.asarray(y)
    if _loss_kind(forest, cfg) == "log1p":
        return float(np.mean(np.log1p(r * r)))
    return float(np.mean(r * r))


def gradient(forest: Forest, x, y, cfg: TrainConfig, tau: float = None):
    """Loss and its exact gradient with respect to the flat parameter
    vector (leaf logits, mult offsets, output coefficients)."""
    if tau is None:
        tau = cfg.tau_lo
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    tv, td = [], []
    for t in forest.trees:
        v, d = _node_forward(t, x, tau)
        tv.append(v)
        td.append(d)
    Fd = sum(c * d for c, d in zip(forest.coefficients, td)) \
        if forest.k else np.zeros_like(x)
    r = Fd - y
    if _loss_kind(forest, cfg) == "log1p":
        L = float(np.mean(np.log1p(r * r)))
        gFd = 2.0 * r / ((1.0 + r * r) * n)
    else:
        L = float(np.mean(r * r))
        gFd = 2.0 * r / n
    node_grads = {}
    coef_grads = np.zeros(forest.k)
    zero = np.zeros_like(x)
    for i, (c, t) in enumerate(zip(forest.coefficients, forest.trees)):
        coef_grads[i] = float(np.sum(gFd * td[i]))
        _node_backward(t, zero, c * gFd, x, tau, node_grads)
    parts = [node_grads.get(id(n), np.zeros(2))
             for _, n in forest._param_slots()]
    parts.append(coef_grads)
    g = np.concatenate(parts) if parts else np.zeros(0)
    return L, g


# ---------------------------------------------------------------------------
# snapping and refit


def snap(forest: Forest) -> Forest:
    """Replace every leaf's softmax weights by the nearest one-hot and
    prune trees that became constants (all leaves chose 1)."""
    out = forest.copy()
    for t in out.trees:
        for n in t.walk():
            if n.kind == LEAF and n.hard is None:
                n.hard = int(np.argmax(n.theta))
    keep = [i for i, t in enumerate(out.trees)
            if any(n.hard == 1 for n in t.walk() if n.kind == LEAF)]
    out.trees = [out.trees[i] for i in keep]
    out.coefficients = out.coefficients[keep]
    return out


# constants a snapped model is allowed to round to: small rationals plus
# the offsets the primitives naturally produce
_CATALOG = [0.0, math.e, -math.e, math.cos(1.0), -math.cos(1.0),
            math.sin(1.0), -math.sin(1.0)]
ROUND_TOL = 1e-6


def _round_const(v: float) -> float:
    for c in _CATALOG:
        if abs(v - c) < ROUND_TOL:
            return c
    fr = Fraction(v).limit_denominator(12)
    if abs(v - float(fr)) < ROUND_TOL:
        return float(fr)
    return v


def refit(forest: Forest, x, y) -> Forest:
    """Exact least-squares refit of a snapped forest's linear degrees of
    freedom: all output coefficients, plus the child offsets of trees whose
    root is multiplicative (their derivative is linear in c, c*b_B, c*b_A).
    Constants are then rounded to the catalog when the fit does not
    suffer."""
    out = forest.copy()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not out.trees:
        return out
    cols, spans = [], []
    for t in out.trees:
        if t.kind == MULT:
            av, ad = _node_forward(t.left, x, 1.0)
            bv, bd = _node_forward(t.right, x, 1.0)
            cols += [ad * bv + av * bd, ad, bd]
            spans.append(3)
        else:
            _, d = _node_forward(t, x, 1.0)
            cols.append(d)
            spans.append(1)
    A = np.stack(cols, axis=1)
    w, *_ = np.linalg.lstsq(A, y, rcond=None)
    pos = 0
    for i, (t, s) in enumerate(zip(out.trees, spans)):
        if s == 3:
            c, cbB, cbA = w[pos:pos + 3]
            out.coefficients[i] = c
            if abs(c) > 1e-9:
                t.bias = np.array([cbA / c, cbB / c])
        else:
            out.coefficients[i] = w[pos]
        pos += s
    base = _snapped_mse(out, x, y)
    rounded = out.copy()
    rounded.coefficients = np.array([_round_const(c)
                                     for c in rounded.coefficients])
    for t in rounded.trees:
        for n in t.walk():
            if n.kind == MULT:
                n.bias = np.array([_round_const(n.bias[0]),
                                   _round_const(n.bias[1])])
    return rounded if _snapped_mse(rounded, x, y) <= max(base, 1e-30) \
        else out


def _snapped_mse(forest: Forest, x, y) -> float:
    _, D = forest.forward(x, 0.1)
    r = D - y
    m = float(np.mean(r * r))
    return m if np.isfinite(m) else np.inf


# ---------------------------------------------------------------------------
# symbolic extraction


def _node_expr(node: Node) -> Expr:
    if node.kind == LEAF:
        if node.hard is None:
            raise ValueError("to_expr requires a snapped forest")
        return ex.ONE if node.hard == 0 else ex.var(0)
    a = _node_expr(node.left)
    b = _node_expr(node.right)
    if node.kind == EML:
        return ex.eml(a, b)
    if node.kind == SOL:
        return ex.sol(a, b)
    return ex.mul(ex.add(a, ex.const(node.bias[0])),
                  ex.add(b, ex.const(node.bias[1])))


def to_expr(forest: Forest):
    """Symbolic (F, F') of a snapped forest; F' is the canonical
    derivative of F."""
    terms = [ex.mul(ex.const(c), _node_expr(t))
             for c, t in zip(forest.coefficients, forest.trees)]
    F = ex.add(*terms) if terms else ex.ZERO
    return F, ex.differentiate(F)


# ---------------------------------------------------------------------------
# template grammar:  term (+ term)* ;  term = leaf | eml(d=N) | sol(d=N)
#                    | mult(term, term)


def parse_template(text: str) -> Forest:
    s = text.strip()
    if s.startswith("forest"):
        head, _, rest = s.partition("=")
        if head.strip() != "forest":
            raise TemplateError(f"bad template header {head.strip()!r}")
        s = rest.strip()
    trees, pos = [], 0

    def skip_ws(p):
        while p < len(s) and s[p].isspace():
            p += 1
        return p

    def parse_term(p):
        p = skip_ws(p)
        m = p
        while m < len(s) and (s[m].isalnum() or s[m] == "_"):
            m += 1
        word = s[p:m]
        if word == "leaf":
            return leaf(), m
        if word in (EML, SOL):
            m = skip_ws(m)
            if m >= len(s) or s[m] != "(":
                raise TemplateError(f"expected '(' after {word!r}")
            m = skip_ws(m + 1)
            if not s[m:].startswith("d"):
                raise TemplateError(f"expected 'd=' inside {word!r}")
            m = skip_ws(m + 1)
            if m >= len(s) or s[m] != "=":
                raise TemplateError(f"expected '=' inside {word!r}")
            m = skip_ws(m + 1)
            q = m
            while q < len(s) and s[q].isdigit():
                q += 1
            if q == m:
                raise TemplateError(f"expected depth integer inside {word!r}")
            d = int(s[m:q])
            q = skip_ws(q)
            if q >= len(s) or s[q] != ")":
                raise TemplateError(f"expected ')' closing {word!r}")
            return master_formula(word, d), q + 1
        if word == "mult":
            m = skip_ws(m)
            if m >= len(s) or s[m] != "(":
                raise TemplateError("expected '(' after 'mult'")
            a, m = parse_term(m + 1)
            m = skip_ws(m)
            if m >= len(s) or s[m] != ",":
                raise TemplateError("expected ',' inside 'mult'")
            b, m = parse_term(m + 1)
            m = skip_ws(m)
            if m >= len(s) or s[m] != ")":
                raise TemplateError("expected ')' closing 'mult'")
            return mult(a, b), m + 1
        raise TemplateError(f"unknown template token {word or s[p:p+8]!r}")

    while True:
        t, pos = parse_term(pos)
        trees.append(t)
        pos = skip_ws(pos)
        if pos >= len(s):
            break
        if s[pos] != "+":
            raise TemplateError(f"unexpected character {s[pos]!r} "
                                f"at position {pos}")
        pos += 1
    return Forest(trees)


# ---------------------------------------------------------------------------
# training


@dataclass
class RestartReport:
    index: int
    final_loss: float
    snapped_mse: float
    diverged: bool
    lr_used: float
    curve: list = field(default_factory=list)  # (step, loss) samples


@dataclass
class TrainReport:
    forest: Forest | None      # best snapped forest
    mse: float                 # its training MSE
    best_restart: int
    restarts: list             # RestartReport per restart

    def format(self) -> str:
        lines = [f"best restart {self.best_restart}  "
                 f"snapped mse {self.mse:.6e}"]
        for r in self.restarts:
            tag = "diverged" if r.diverged else f"{r.snapped_mse:.6e}"
            lines.append(f"restart {r.index:2d}  loss {r.final_loss:.6e}  "
                         f"snapped {tag}  lr {r.lr_used:g}")
            lines.append("  step loss")
            for step, lv in r.curve:
                lines.append(f"  {step:6d} {lv:.6e}")
        return "\n".join(lines)


def _init_forest(template: Forest, rng) -> Forest:
    f = template.copy()
    for t in f.trees:
        for n in t.walk():
            if n.kind == LEAF and n.hard is None:
                n.theta = rng.uniform(-1.0, 1.0, size=2)
            elif n.kind == MULT:
                n.bias = rng.uniform(-0.5, 0.5, size=2)
    f.coefficients = rng.uniform(0.5, 1.5, size=f.k)
    return f


def train(template, x, y, cfg: TrainConfig = None) -> TrainReport:
    """Multi-restart derivative-matching training. Each restart runs
    adaptive-moment updates with the annealed temperature, snapping and
    refitting at every 10% checkpoint; training stops as soon as any
    restart's snapped MSE beats cfg.stop."""
    if isinstance(template, str):
        template = parse_template(template)
    cfg = cfg or TrainConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    checkpoint = max(1, cfg.steps // 10)
    reports = []
    best = (np.inf, -1, None)  # (mse, restart, snapped forest)
    for ri in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, ri])
        f = _init_forest(template, rng)
        params = f.get_params()
        m = np.zeros_like(params)
        v = np.zeros_like(params)
        lr = cfg.lr
        halvings = 0
        diverged = False
        curve = []
        restart_best = np.inf
        L = np.inf
        for step in range(cfg.steps):
            tau = tau_schedule(step, cfg)
            f.set_params(params)
            L, g = gradient(f, x, y, cfg, tau=tau)
            if not (np.isfinite(L) and np.all(np.isfinite(g))):
                # reject the step that got us here and cool down
                halvings += 1
                if halvings > 5:
                    diverged = True
                    break
                lr *= 0.5
                params = prev_params if step > 0 else f.get_params()
                continue
            if step % max(1, cfg.steps // 20) == 0:
                curve.append((step, L))
            gn = float(np.linalg.norm(g))
            if gn > cfg.clip:
                g = g * (cfg.clip / gn)
            prev_params = params.copy()
            t = step + 1
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            params = params - lr * mh / (np.sqrt(vh) + 1e-8)
            if (step + 1) % checkpoint == 0 or step + 1 == cfg.steps:
                f.set_params(params)
                snapped = refit(snap(f), x, y)
                smse = _snapped_mse(snapped, x, y)
                if smse < restart_best:
                    restart_best = smse
                    if smse < best[0]:
                        best = (smse, ri, snapped)
                if smse < cfg.stop:
                    break
        curve.append((min(step, cfg.steps - 1), L if np.isfinite(L) else np.inf))
        reports.append(RestartReport(index=ri, final_loss=L,
                                     snapped_mse=restart_best,
                                     diverged=diverged, lr_used=lr,
                                     curve=curve))
        if best[0] < cfg.stop:
            break
    if best[2] is None:
        return TrainReport(forest=None, mse=np.inf, best_restart=-1,
                           restarts=reports)
    return TrainReport(forest=best[2], mse=best[0], best_restart=best[1],
                       restarts=reports)
