"""Sparse combination search over a materialized atom library.

The target y is matched against linear combinations of atom derivatives:
y ~ sum_k c_k * phi'_{i_k}. Everything runs off a one-time Gram
precomputation (D, G = D^T D, d = D^T y): K=1 is a vectorised scalar
regression, K=2 solves every pair by broadcast Cramer's rule, K>=3 extends
the best K-1 subsets by beam search with small batched dense solves.

Gram-form MSEs cancel catastrophically near exact fits, so the MSE of
every materialized result is recomputed from the actual residual before
ranking and thresholding. Near-exact results (MSE < 1e-15) are then
checked on an independent grid before being declared verified.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import expr as ex
from .expr import Expr, Grid, evaluate

VERIFY_MSE = 1e-15
DET_EPS = 1e-30
GKK_EPS = 1e-12
COEF_CAP = 20.0

UNVERIFIED = "unverified"
VERIFIED = "verified"
REFUTED = "refuted"


@dataclass
class GramCache:
    """Precomputed structures shared by every candidate subset."""

    D: np.ndarray            # N x M feature matrix (atom derivative values)
    G: np.ndarray            # M x M Gram matrix
    d: np.ndarray            # M-vector target projection
    y: np.ndarray
    y_norm_sq: float
    col_to_atom: np.ndarray  # library index per column
    library: object = None   # AtomLibrary when built via precompute()

    @property
    def N(self):
        return self.D.shape[0]

    @property
    def M(self):
        return self.D.shape[1]

    @classmethod
    def from_matrix(cls, D, y, col_to_atom=None, library=None) -> "GramCache":
        D = np.asarray(D, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if D.shape[0] != y.shape[0]:
            raise ValueError(f"dimension mismatch: D has {D.shape[0]} rows, "
                             f"y has {y.shape[0]}")
        if col_to_atom is None:
            col_to_atom = np.arange(D.shape[1])
        return cls(D=D, G=D.T @ D, d=D.T @ y, y=y,
                   y_norm_sq=float(y @ y),
                   col_to_atom=np.asarray(col_to_atom), library=library)


def precompute(lib, y) -> GramCache:
    """Assemble the derivative matrix from the library's searchable atoms
    and compute the Gram structures in one dense pass."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != lib.grid.n:
        raise ValueError(f"target length {y.shape[0]} != grid size {lib.grid.n}")
    if not np.all(np.isfinite(y)):
        raise ValueError("target contains non-finite values")
    idx = lib.searchable_indices()
    D = np.stack([lib.atoms[i].dvalues for i in idx], axis=1) if idx else \
        np.empty((lib.grid.n, 0))
    return GramCache.from_matrix(D, y, col_to_atom=np.asarray(idx), library=lib)


@dataclass
class SearchResult:
    indices: tuple           # library atom indices, sorted
    coefficients: np.ndarray
    mse: float               # residual-recomputed train MSE
    status: str = UNVERIFIED
    antiderivative: Expr | None = None
    derivative_expr: Expr | None = None

    @property
    def k(self):
        return len(self.indices)


def _direct_mse(cache: GramCache, cols, coefs) -> float:
    r = cache.D[:, list(cols)] @ np.asarray(coefs) - cache.y
    return float(np.mean(r * r))


def _materialize(cache: GramCache, cols, coefs) -> SearchResult:
    cols = list(cols)
    atom_idx = cache.col_to_atom[cols]
    order = np.argsort(atom_idx)
    atom_idx = atom_idx[order]
    coefs = np.asarray(coefs)[order]
    mse = _direct_mse(cache, [cols[i] for i in order], coefs)
    res = SearchResult(indices=tuple(int(i) for i in atom_idx),
                       coefficients=coefs, mse=mse)
    if cache.library is not None:
        res.antiderivative, res.derivative_expr = reconstruct(res, cache.library)
    return res


def _rank(results):
    results.sort(key=lambda r: (r.mse, r.indices))
    return results


def scan_k1(cache: GramCache, limit: int = 200):
    """Best single atoms: c_k = d_k / G_kk, ranked by MSE ascending."""
    gkk = np.diag(cache.G)
    with np.errstate(all="ignore"):
        c = cache.d / gkk
        mse = cache.y_norm_sq / cache.N - cache.d ** 2 / (cache.N * gkk)
    ok = (gkk > GKK_EPS) & np.isfinite(mse) & (np.abs(c) <= COEF_CAP)
    cand = np.flatnonzero(ok)
    if cand.size == 0:
        return []
    order = cand[np.lexsort((cand, mse[cand]))][:limit]
    return _rank([_materialize(cache, [k], [c[k]]) for k in order])


def scan_k2(cache: GramCache, limit: int = 200, block: int = 512):
    """Best atom pairs via Cramer's rule as broadcast matrix operations,
    processed in row blocks to bound memory at block x M. The 2x2 systems
    are solved in column-normalized space (unit-norm derivative columns)
    so ill-conditioned pairs of wildly scaled atoms cannot produce
    spuriously low Gram-form MSEs."""
    G, d, N, M = cache.G, cache.d, cache.N, cache.M
    gii = np.diag(G)
    with np.errstate(all="ignore"):
        nrm = np.sqrt(gii)
        dh = d / nrm
    usable = gii > GKK_EPS
    best = []  # (mse, flat_position) kept as a growing top list
    for start in range(0, M, block):
        stop = min(start + block, M)
        nb = nrm[start:stop, None]
        db = dh[start:stop, None]
        with np.errstate(all="ignore"):
            rho = G[start:stop] / (nb * nrm[None, :])
            det = 1.0 - rho * rho
            ci_h = (db - dh[None, :] * rho) / det
            cj_h = (dh[None, :] - db * rho) / det
            mse = (cache.y_norm_sq - ci_h * db - cj_h * dh[None, :]) / N
            ci = ci_h / nb
            cj = cj_h / nrm[None, :]
        ok = (np.abs(det) > DET_EPS) & np.isfinite(mse)
        ok &= (np.abs(ci) <= COEF_CAP) & (np.abs(cj) <= COEF_CAP)
        ok &= usable[start:stop, None] & usable[None, :]
        # keep only i < j
        cols = np.arange(M)[None, :]
        rows = np.arange(start, stop)[:, None]
        ok &= cols > rows
        flat = np.flatnonzero(ok.ravel())
        if flat.size == 0:
            continue
        scores = mse.ravel()[flat]
        if flat.size > limit:
            part = np.argpartition(scores, limit - 1)[:limit]
            flat, scores = flat[part], scores[part]
        local = np.unravel_index(flat, mse.shape)
        for li, lj, s in zip(*local, scores):
            best.append((float(s), (start + int(li), int(lj)),
                         (float(ci[li, lj]), float(cj[li, lj]))))
        best.sort(key=lambda t: (t[0], t[1]))
        best = best[:limit]
    return _rank([_materialize(cache, pair, coefs)
                  for _, pair, coefs in best])


def beam(cache: GramCache, K: int, beam_seed: int = 200, beam_keep: int = 500,
         limit: int = 200):
    """Beam search for K >= 3: extend each of the top beam_seed subsets at
    K-1 by every atom, keep the global top beam_keep per level."""
    if K < 3:
        raise ValueError("beam requires K >= 3")
    atom_to_col = {int(a): c for c, a in enumerate(cache.col_to_atom)}
    frontier = [(r.mse, tuple(atom_to_col[i] for i in r.indices))
                for r in scan_k2(cache, limit=beam_seed)]
    level_coefs = {}
    for level in range(3, K + 1):
        seen = set()
        cand = []
        for _, cols in frontier[:beam_seed]:
            exts = _extend_all(cache, cols)
            for cols2, coefs, mse in exts:
                if cols2 in seen:
                    continue
                seen.add(cols2)
                cand.append((mse, cols2, coefs))
        cand.sort(key=lambda t: (t[0], t[1]))
        cand = cand[:beam_keep]
        frontier = [(mse, cols) for mse, cols, _ in cand]
        level_coefs = {cols: coefs for _, cols, coefs in cand}
        if not frontier:
            return []
    out = [_materialize(cache, cols, level_coefs[cols])
           for _, cols in frontier[:limit]]
    return _rank(out)


def _extend_all(cache: GramCache, cols):
    """Add every library atom to the subset `cols`; solve all the resulting
    Gram systems in one batched pass. Returns (sorted cols, coefs, gram mse)
    for every extension that passes the filters."""
    G, d, N = cache.G, cache.d, cache.N
    M = cache.M
    k = len(cols)
    base = list(cols)
    with np.errstate(all="ignore"):
        nrm = np.sqrt(np.diag(G))
    nrm = np.where(nrm > 0, nrm, 1.0)
    nb = nrm[base]
    # normalized Gram systems: unit diagonal keeps the batched solves
    # well scaled regardless of raw atom magnitudes
    A = np.empty((M, k + 1, k + 1))
    A[:, :k, :k] = G[np.ix_(base, base)] / np.outer(nb, nb)
    cross = (G[base, :] / (nb[:, None] * nrm[None, :])).T
    A[:, :k, k] = cross
    A[:, k, :k] = cross
    A[:, k, k] = 1.0
    b = np.empty((M, k + 1))
    b[:, :k] = d[base] / nb
    b[:, k] = d / nrm
    with np.errstate(all="ignore"):
        dets = np.linalg.det(A)
    good = np.isfinite(dets) & (np.abs(dets) > DET_EPS)
    good &= np.diag(G) > GKK_EPS
    good[base] = False
    idx = np.flatnonzero(good)
    if idx.size == 0:
        return []
    try:
        coefs = np.linalg.solve(A[idx], b[idx][..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = []
        for m in idx:
            try:
                c = np.linalg.solve(A[m], b[m])
            except np.linalg.LinAlgError:
                continue
            out.append((m, c))
        idx = np.array([m for m, _ in out], dtype=int)
        if idx.size == 0:
            return []
        coefs = np.stack([c for _, c in out])
    mse = (cache.y_norm_sq - np.sum(coefs * b[idx], axis=1)) / N
    # undo the column normalization to recover raw-column coefficients
    coefs = coefs.copy()
    coefs[:, :k] /= nb[None, :]
    coefs[:, k] /= nrm[idx]
    ok = np.all(np.abs(coefs) <= COEF_CAP, axis=1) & np.isfinite(mse)
    results = []
    for m, c, e in zip(idx[ok], coefs[ok], mse[ok]):
        ext = base + [int(m)]
        order = np.argsort(ext)
        results.append((tuple(np.asarray(ext)[order]), c[order], float(e)))
    return results


def search(cache: GramCache, k_max: int = 2, beam_seed: int = 200,
           beam_keep: int = 500, limit: int = 50):
    """Run K = 1 .. k_max and return {K: ranked results}."""
    out = {1: scan_k1(cache, limit=limit)}
    if k_max >= 2:
        out[2] = scan_k2(cache, limit=max(limit, beam_seed))
    for K in range(3, k_max + 1):
        out[K] = beam(cache, K, beam_seed=beam_seed, beam_keep=beam_keep,
                      limit=limit)
    return out


def reconstruct(result: SearchResult, lib):
    """Assemble F = sum c_k phi_{i_k} and F' = sum c_k phi'_{i_k}."""
    terms_f, terms_d = [], []
    for i, c in zip(result.indices, result.coefficients):
        if i < 0 or i >= len(lib.atoms):
            raise IndexError(f"atom index {i} out of range")
        atom = lib.atoms[i]
        terms_f.append(ex.mul(ex.const(c), atom.f))
        terms_d.append(ex.mul(ex.const(c), atom.fprime))
    return ex.add(*terms_f) if terms_f else ex.ZERO, \
        ex.add(*terms_d) if terms_d else ex.ZERO


def verify(result: SearchResult, lib, holdout: Grid | None = None,
           target_expr: Expr | None = None, holdout_y=None) -> SearchResult:
    """Check a near-exact result on an independent grid. The target is
    either an analytic expression (evaluated on the holdout grid) or
    explicit holdout data."""
    if result.mse >= VERIFY_MSE:
        raise ValueError(f"verify() requires train MSE < {VERIFY_MSE}, "
                         f"got {result.mse}")
    if holdout is None:
        holdout = lib.grid.holdout()
    if target_expr is not None:
        y = evaluate(target_expr, holdout.points)
    elif holdout_y is not None:
        y = np.asarray(holdout_y, dtype=np.float64)
    else:
        raise ValueError("verify needs target_expr or holdout_y")
    deriv = result.derivative_expr
    if deriv is None:
        _, deriv = reconstruct(result, lib)
    pred = evaluate(deriv, holdout.points)
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(y))):
        return replace(result, status=REFUTED)
    mse = float(np.mean((pred - y) ** 2))
    return replace(result, status=VERIFIED if mse < VERIFY_MSE else REFUTED)
