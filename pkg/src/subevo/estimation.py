"""Subsample M-estimation and the data-driven estimates of gamma, sigma^2
and eta * sigma^2.

For a subset ``I`` the estimator minimises ``sum_{i in I} l_{y_i}(x_i^T b)``.
With ``psi_i = -l'_{y_i}(x_i^T b)`` on ``I`` (zero elsewhere) and

    gamma_hat(I) = p / [sum_i l''_i - l''_i^2 x_i^T H^{-1} x_i],
    H = sum_{l in I} x_l l''_l x_l^T,

the plug-in estimates are ``gamma_hat^2 |psi|^2 / p`` for ``sigma^2`` and
``gamma_hat(I) gamma_hat(I~) psi^T psi~ / p`` for ``eta sigma^2``.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.linalg import blas

from .errors import DomainError, NumericalError, SeparationError, SingularCurvatureError

ARMIJO_C = 1e-4
BACKTRACK = 0.5
MAX_NEWTON = 200
GRAD_TOL = 1e-8
KKT_TOL = 1e-7
DIVERGED_NORM = 1e6


@dataclass
class FitResult:
    """Result of :func:`fit_mestimator`.

    ``psi`` has length n and vanishes outside ``subset``.
    """

    beta_hat: np.ndarray
    psi: np.ndarray
    grad_norm: float
    newton_iters: int
    subset: np.ndarray
    objective_trace: tuple = field(default=(), repr=False)


@dataclass(frozen=True)
class GammaHat:
    value: float
    subset: np.ndarray = field(repr=False)


def as_subset(I, n):
    """Validate an index set; ``None`` means all of ``range(n)``."""
    if I is None:
        return np.arange(n)
    idx = np.asarray(I)
    if idx.dtype == bool:
        if idx.shape != (n,):
            raise DomainError("boolean subset mask must have length n")
        return np.flatnonzero(idx)
    idx = idx.astype(np.intp, copy=False).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DomainError("subset indices out of range")
    if np.unique(idx).size != idx.size:
        raise DomainError("subset indices must be distinct")
    return idx


def _objective(loss, y, u):
    return float(np.sum(loss.value(y, u)))


def _weighted_gram(XI, h):
    """Lower triangle of ``X_I^T diag(h) X_I`` for ``h >= 0``; rows with h = 0 are skipped."""
    nz = h > 0
    A = np.asfortranarray(XI[nz] * np.sqrt(h[nz])[:, None])
    if A.shape[0] == 0:
        return np.zeros((XI.shape[1], XI.shape[1]))
    return blas.dsyrk(1.0, A, trans=1, lower=1)


def _factor(H, jitter=0.0):
    """Cholesky factor of H, or None if H is not numerically positive definite."""
    p = H.shape[0]
    try:
        c, low = linalg.cho_factor(H + jitter * np.eye(p) if jitter else H,
                                   lower=True, check_finite=False)
    except linalg.LinAlgError:
        return None
    d = np.abs(np.diag(c))
    if d.min() <= 1e-7 * d.max():
        return None
    return c, low


def _mm_curvature(loss, y, u):
    """Weights of a quadratic majoriser: rho'(r)/r (robust) or 1/4 (logistic)."""
    if not loss.is_robust:
        return np.full(u.shape, 0.25)
    r = y - u
    small = np.abs(r) < 1e-8
    w = np.empty_like(r)
    w[~small] = -loss.d1(y[~small], u[~small]) / r[~small]
    w[small] = loss.d2(y[small], u[small])
    return w


def _separated(loss, y, u):
    # every point strictly on its own side: scaling b up lowers the loss forever
    return (not loss.is_robust) and bool(np.all((2.0 * y - 1.0) * u > 0))


def _armijo(loss, XI, yI, b, f, step, slope):
    t = 1.0
    while t >= 1e-12:
        b_new = b - t * step
        u_new = XI @ b_new
        f_new = _objective(loss, yI, u_new)
        if f_new <= f - ARMIJO_C * t * slope:
            return b_new, u_new, f_new
        t *= BACKTRACK
    return None


def fit_mestimator(X, y, I, loss, beta0=None, tol=GRAD_TOL, max_iter=MAX_NEWTON):
    """Newton's method with Armijo backtracking on the subsample objective.

    When the Hessian is numerically singular (too few points in the
    curved region of a robust loss) or the Newton step fails the line
    search, a majorise-minimise (IRLS) step is taken instead.

    Parameters
    ----------
    X : ndarray, shape (n, p)
    y : ndarray, shape (n,)
    I : index array, boolean mask or None (all rows)
    loss : LossModel
    beta0 : ndarray, optional
        Starting point; defaults to least squares (robust) or zero (logistic).

    Returns
    -------
    FitResult

    Raises
    ------
    DomainError
        If ``|I| <= p``.
    SeparationError
        If the iterates diverge or the data are separated by an iterate
        (the logistic MLE does not exist).
    NumericalError
        If no descent step can be found before the gradient is small.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    idx = as_subset(I, n)
    m = idx.size
    if m <= p:
        raise DomainError(f"subset size {m} must exceed p = {p}")
    XI, yI = X[idx], y[idx]
    if beta0 is not None:
        b = np.array(beta0, dtype=float)
    elif loss.is_robust:
        b = np.linalg.lstsq(XI, yI, rcond=None)[0]
    else:
        b = np.zeros(p)
    u = XI @ b
    f = _objective(loss, yI, u)
    trace = [f]
    gtol = tol * np.sqrt(m)
    it = 0
    while True:
        grad = XI.T @ loss.d1(yI, u)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= gtol:
            break
        if it >= max_iter:
            raise NumericalError(f"Newton did not converge in {max_iter} iterations "
                                 f"(gradient norm {gnorm:.3g})")
        it += 1
        accepted = None
        factor = _factor(_weighted_gram(XI, loss.d2(yI, u)))
        if factor is not None:
            step = linalg.cho_solve(factor, grad, check_finite=False)
            accepted = _armijo(loss, XI, yI, b, f, step, float(grad @ step))
            if accepted is None:
                # decrease below rounding in f: judge the full step by the gradient
                u_full = XI @ (b - step)
                if np.linalg.norm(XI.T @ loss.d1(yI, u_full)) <= 0.5 * gnorm:
                    accepted = (b - step, u_full, _objective(loss, yI, u_full))
        if accepted is None:
            W = _weighted_gram(XI, _mm_curvature(loss, yI, u))
            factor = _factor(W) or _factor(W, 1e-10 * float(np.trace(W)) / p)
            if factor is None:
                raise NumericalError("curvature matrix could not be factorised")
            step = linalg.cho_solve(factor, grad, check_finite=False)
            accepted = _armijo(loss, XI, yI, b, f, step, float(grad @ step))
        if accepted is None:
            if gnorm <= KKT_TOL * np.sqrt(m):
                break
            raise NumericalError("line search stalled")
        b, u, f = accepted
        trace.append(f)
        if not np.all(np.isfinite(b)) or np.linalg.norm(b) > DIVERGED_NORM:
            raise SeparationError("estimate diverged; the minimiser does not exist")
    if _separated(loss, yI, u):
        raise SeparationError("subsample is linearly separated; the MLE does not exist")
    psi = np.zeros(n)
    psi[idx] = -loss.d1(yI, u)
    return FitResult(b, psi, gnorm, it, idx, tuple(trace))


def gamma_hat_from_curvature(XI, curv):
    """``p / [sum curv_i - sum curv_i^2 x_i^T H^{-1} x_i]`` with ``H = X_I^T diag(curv) X_I``.

    One Cholesky factorisation and a triangular solve give all leverages.
    """
    XI = np.atleast_2d(np.asarray(XI, dtype=float))
    curv = np.asarray(curv, dtype=float)
    p = XI.shape[1]
    if np.any(curv < 0):
        raise SingularCurvatureError("curvatures must be nonnegative")
    H = _weighted_gram(XI, curv)
    try:
        L = linalg.cholesky(H, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularCurvatureError("curvature matrix is not positive definite") from exc
    V = linalg.solve_triangular(L, XI.T, lower=True, check_finite=False)
    lev = np.einsum("ij,ij->j", V, V)
    denom = float(np.sum(curv) - np.sum(curv * curv * lev))
    if not (np.isfinite(denom) and denom > 0):
        raise SingularCurvatureError(f"gamma_hat denominator is {denom:.3g}")
    return p / denom


def gamma_hat(X, y, fit, loss):
    """Estimate the effective regularisation from one fitted subsample."""
    idx = fit.subset
    XI = np.asarray(X, dtype=float)[idx]
    curv = loss.d2(np.asarray(y, dtype=float)[idx], XI @ fit.beta_hat)
    return GammaHat(gamma_hat_from_curvature(XI, curv), idx)


def sigma2_hat(fit, gh, p):
    return gh.value ** 2 * float(np.sum(fit.psi * fit.psi)) / p


def eta_sigma2_hat(fit_a, gh_a, fit_b, gh_b, p):
    """``gamma_hat_a gamma_hat_b psi_a^T psi_b / p``; the sum runs over the overlap."""
    return gh_a.value * gh_b.value * float(np.sum(fit_a.psi * fit_b.psi)) / p
