"""atomforest: self-expanding atom libraries for simultaneous symbolic
recovery of a function and its antiderivative from data."""

from .expr import (Expr, Grid, DEFAULT_GRID, const, var, add, mul, neg,
                   power, reciprocal, exp, ln, sin, cos, arctan, arcsin,
                   eml, sol, canonical_string, parse, evaluate,
                   differentiate, to_infix, relabel)
from .library import (AtomPair, AtomLibrary, BuildConfig, build_library,
                      save_kb, load_kb, KBError)
# note: the K=1..K_max driver lives at atomforest.search.search; the bare
# name `search` stays bound to the submodule
from .search import (GramCache, SearchResult, precompute, scan_k1, scan_k2,
                     beam, reconstruct, verify,
                     VERIFIED, REFUTED, UNVERIFIED)
from . import search  # noqa: F401  (rebind after the star of names above)
from .forest import (Forest, Node, TrainConfig, TrainReport, leaf,
                     master_formula, mult, parse_template, train, snap,
                     refit, to_expr, loss, gradient, tau_schedule,
                     TemplateError)
from .tasks import (EquationSpec, BenchOutcome, load_suite, run_feynman,
                    relmse, expand_features, fit_sparse_linear,
                    fit_logistic, regression_cv, classification_gap,
                    stratified_kfold, r2_score, synth_regression,
                    synth_hill)

__version__ = "0.1.0"
