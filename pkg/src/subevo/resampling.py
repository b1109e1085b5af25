"""Monte Carlo experiments with subsamples drawn without replacement.

Each replication derives its own random streams from ``(seed, rep)``, so
results do not depend on the number of worker threads (``SUBEVO_THREADS``).

Robust mode compares estimators through ``b - beta*``; logistic mode
through ``P b`` with ``P`` the projection orthogonal to ``beta*``.
"""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import sample_dataset
from .errors import DomainError, NumericalError, SeparationError
from .estimation import eta_sigma2_hat, fit_mestimator, gamma_hat, sigma2_hat
from .quadrature import DEFAULT_SPEC
from .state_evolution import RegimeParams, solve_eta, solve_system


def worker_count():
    """Thread cap from ``SUBEVO_THREADS``; defaults to the CPU count."""
    raw = os.environ.get("SUBEVO_THREADS", "").strip()
    if raw:
        try:
            k = int(raw)
        except ValueError:
            raise DomainError(f"SUBEVO_THREADS must be a positive integer, got {raw!r}")
        if k < 1:
            raise DomainError("SUBEVO_THREADS must be a positive integer")
        return k
    return os.cpu_count() or 1


def subset_size(n, q):
    """``floor(q n)``, guarded against ``q n`` landing a hair below an integer."""
    if not 0 < q <= 1:
        raise DomainError("q must lie in (0, 1]")
    return int(math.floor(q * n + 1e-9))


def rep_streams(seed, rep, k=3):
    """``k`` independent generators for replication ``rep``."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(rep,))
    return [np.random.default_rng(c) for c in ss.spawn(k)]


@dataclass(frozen=True)
class SubsampleDraw:
    subsets: tuple
    overlap_sizes: np.ndarray


def draw_subsets(n, q, M, seed):
    """``M`` iid uniform subsets of size ``floor(q n)``, each returned sorted.

    ``seed`` may be an int, ``SeedSequence`` or ``Generator``.
    """
    k = subset_size(n, q)
    if k < 1:
        raise DomainError("floor(q n) must be at least 1")
    if M < 1:
        raise DomainError("M must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if k == n:
        subsets = tuple(np.arange(n) for _ in range(M))
    else:
        subsets = tuple(np.sort(rng.permutation(n)[:k]) for _ in range(M))
    mask = np.zeros((M, n), dtype=np.int64)
    for m, s in enumerate(subsets):
        mask[m, s] = 1
    return SubsampleDraw(subsets, mask @ mask.T)


def _frame(model, p):
    """(center, projection or None, direction or None) for the bilinear forms."""
    beta = model.beta_for(p)
    if model.mode == "robust":
        return beta, None, None
    w = model.direction(p)
    return np.zeros(p), w, w


def _project(v, w):
    return v if w is None else v - (w @ v) * w


@dataclass
class PairFitRecord:
    rep: int
    status: str
    corr: float = np.nan
    inner: float = np.nan
    est_eta_sigma2: float = np.nan
    est_sigma2: tuple = (np.nan, np.nan)
    overlap: int = 0
    sq_norms: tuple = (np.nan, np.nan)
    mean_psi2: tuple = (np.nan, np.nan)
    gamma_hats: tuple = (np.nan, np.nan)
    alignments: tuple = (np.nan, np.nan)
    message: str = ""


@dataclass
class BaggingRecord:
    rep: int
    status: str
    M: int = 0
    bagged_risk: float = np.nan
    decomposition: float = np.nan
    single_risks: tuple = ()
    per_pair_inners: tuple = ()
    message: str = ""


@dataclass
class Summary:
    reps: int
    ok: int
    failed: int
    mean: dict = field(default_factory=dict)
    se: dict = field(default_factory=dict)


def summarize(records, fields):
    good = [r for r in records if r.status == "ok"]
    out = Summary(len(records), len(good), len(records) - len(good))
    for name in fields:
        vals = np.array([getattr(r, name) for r in good], dtype=float)
        if vals.ndim > 1:
            vals = vals.mean(axis=1)
        if vals.size:
            out.mean[name] = float(vals.mean())
            out.se[name] = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else np.nan
        else:
            out.mean[name] = out.se[name] = np.nan
    return out


def _run(task, reps):
    workers = min(worker_count(), max(1, reps))
    if workers == 1:
        return [task(r) for r in range(reps)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task, range(reps)))


def _pair_rep(model, loss, n, p, q, seed, rep):
    data_rng, sub_rng, _ = rep_streams(seed, rep)
    X, y = sample_dataset(model, n, p, data_rng)
    draw = draw_subsets(n, q, 2, sub_rng)
    center, _, w = _frame(model, p)
    try:
        fa = fit_mestimator(X, y, draw.subsets[0], loss)
        same = np.array_equal(draw.subsets[0], draw.subsets[1])
        fb = fa if same else fit_mestimator(X, y, draw.subsets[1], loss)
        ga = gamma_hat(X, y, fa, loss)
        gb = ga if same else gamma_hat(X, y, fb, loss)
    except SeparationError as exc:
        return PairFitRecord(rep, "separation", message=str(exc))
    except NumericalError as exc:
        return PairFitRecord(rep, "numerical", message=str(exc))
    da = _project(fa.beta_hat - center, w)
    db = _project(fb.beta_hat - center, w)
    inner = float(da @ db)
    na, nb = float(da @ da), float(db @ db)
    corr = inner / np.sqrt(na * nb)
    align = ((float(w @ fa.beta_hat), float(w @ fb.beta_hat)) if w is not None
             else (0.0, 0.0))
    psi2 = tuple(float(np.sum(f.psi ** 2)) / f.subset.size for f in (fa, fb))
    return PairFitRecord(
        rep, "ok", corr=corr, inner=inner,
        est_eta_sigma2=eta_sigma2_hat(fa, ga, fb, gb, p),
        est_sigma2=(sigma2_hat(fa, ga, p), sigma2_hat(fb, gb, p)),
        overlap=int(draw.overlap_sizes[0, 1]), sq_norms=(na, nb), mean_psi2=psi2,
        gamma_hats=(ga.value, gb.value), alignments=align)


PAIR_FIELDS = ("corr", "inner", "est_eta_sigma2", "est_sigma2", "sq_norms", "mean_psi2",
               "gamma_hats", "alignments", "overlap")


def run_pair_experiment(model, loss, n, p, q, reps, seed):
    """Fit two estimators on independent subsets, ``reps`` times.

    Returns ``(records, summary)``; failed replications are kept with their
    status and excluded from the summary means.
    """
    if subset_size(n, q) <= p:
        raise DomainError("floor(q n) must exceed p")
    records = _run(lambda r: _pair_rep(model, loss, n, p, q, seed, r), reps)
    return records, summarize(records, PAIR_FIELDS)


def _bagging_rep(model, loss, n, p, q, M, seed, rep):
    data_rng, sub_rng, _ = rep_streams(seed, rep)
    X, y = sample_dataset(model, n, p, data_rng)
    draw = draw_subsets(n, q, M, sub_rng)
    beta = model.beta_for(p)
    fits = {}
    try:
        for s in draw.subsets:
            key = s.tobytes()
            if key not in fits:
                fits[key] = fit_mestimator(X, y, s, loss).beta_hat
    except SeparationError as exc:
        return BaggingRecord(rep, "separation", M, message=str(exc))
    except NumericalError as exc:
        return BaggingRecord(rep, "numerical", M, message=str(exc))
    D = np.stack([fits[s.tobytes()] for s in draw.subsets]) - beta
    gram = D @ D.T
    bar = D.mean(axis=0)
    risk = float(bar @ bar)
    iu = np.triu_indices(M, 1)
    decomposition = float((np.trace(gram) + 2.0 * gram[iu].sum()) / M ** 2)
    return BaggingRecord(rep, "ok", M, risk, decomposition, tuple(np.diag(gram)),
                         tuple(gram[iu]))


def run_bagging_experiment(model, loss, n, p, q, M, reps, seed):
    """Risk ``|b_bar - beta*|^2`` of the average of ``M`` subsample fits.

    In logistic mode this equals ``|P b_bar|^2 + (w^T b_bar - nu)^2``.
    Each record also carries the expansion of the square into single-fit
    and cross terms.
    """
    if subset_size(n, q) <= p:
        raise DomainError("floor(q n) must exceed p")
    records = _run(lambda r: _bagging_rep(model, loss, n, p, q, M, seed, r), reps)
    return records, summarize(records, ("bagged_risk", "decomposition"))


@dataclass
class DiagnosticReport:
    overlap: int
    eta: float
    sigma: float
    gamma: float
    a: float
    ks_first: float
    ks_second: float
    ks_between: float
    corr_empirical: float
    corr_reference: float
    corr_gap: float
    empirical: np.ndarray = field(repr=False)
    reference: np.ndarray = field(repr=False)


def bivariate_prox_diagnostic(model, loss, n, p, q, seed, ref_draws=20, quad=DEFAULT_SPEC):
    """Compare fitted values on the overlap with the prox reference law.

    For ``i`` in both subsets the pair ``(x_i^T b, x_i^T b~)`` (centred at
    ``x_i^T beta*`` in robust mode) is compared with
    ``(prox(a U_i + sigma G_i), prox(a U_i + sigma G~_i))`` where
    ``corr(G, G~) = eta`` and ``(y_i, U_i)`` are the observed ones;
    ``ref_draws`` reference pairs are drawn per overlap point.
    """
    params = RegimeParams(n / p, q, model, loss, quad)
    state = solve_system(params)
    eta = solve_eta(params, state).eta
    data_rng, sub_rng, ref_rng = rep_streams(seed, 0)
    X, y = sample_dataset(model, n, p, data_rng)
    draw = draw_subsets(n, q, 2, sub_rng)
    fa = fit_mestimator(X, y, draw.subsets[0], loss)
    same = np.array_equal(draw.subsets[0], draw.subsets[1])
    fb = fa if same else fit_mestimator(X, y, draw.subsets[1], loss)
    both = np.intersect1d(draw.subsets[0], draw.subsets[1])
    Xo = X[both]
    beta = model.beta_for(p)
    if model.mode == "robust":
        shift = Xo @ beta
        resp = y[both] - shift
        u = np.zeros(both.size)
    else:
        shift = np.zeros(both.size)
        resp = y[both]
        w = model.direction(p)
        u = Xo @ w if w is not None else np.zeros(both.size)
    emp = np.column_stack([Xo @ fa.beta_hat - shift, Xo @ fb.beta_hat - shift])
    g = ref_rng.standard_normal((both.size, ref_draws))
    z = ref_rng.standard_normal((both.size, ref_draws))
    gt = eta * g + np.sqrt(max(0.0, 1.0 - eta * eta)) * z
    yy = np.repeat(resp[:, None], ref_draws, axis=1)
    base = (state.a * u)[:, None]
    ref = np.column_stack([loss.prox(yy, state.gamma, base + state.sigma * g).ravel(),
                           loss.prox(yy, state.gamma, base + state.sigma * gt).ravel()])
    ks = [stats.ks_2samp(emp[:, j], ref[:, j]).statistic for j in (0, 1)]
    ks_between = stats.ks_2samp(emp[:, 0], emp[:, 1]).statistic
    ce = float(np.corrcoef(emp.T)[0, 1]) if not same else 1.0
    cr = float(np.corrcoef(ref.T)[0, 1])
    return DiagnosticReport(int(both.size), eta, state.sigma, state.gamma, state.a,
                            float(ks[0]), float(ks[1]), float(ks_between), ce, cr,
                            abs(ce - cr), emp, ref)
