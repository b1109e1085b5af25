"""Deterministic asymptotics of subsampled M-estimators.

For a subsample of size ``q n`` with ``n / p = delta`` the estimator is
described by ``(a, sigma, gamma)``: ``sigma`` is the limiting error norm
(robust) or the norm of the error orthogonal to the signal (logistic),
``a`` the limiting alignment with the signal direction (0 in robust mode)
and ``gamma`` the effective regularisation of the proximal representation
``x_i^T b ~ prox_{gamma l_y}(a U + sigma G)``.

Two estimators fitted on independent subsamples have limiting correlation
``eta``, the unique fixed point in [0, q] of the q-Lipschitz map

    F(t) = q^2 delta / sigma^2 * E[r(a U + sigma G) r(a U + sigma G~)],

where ``r(x) = x - prox(x) = gamma l_y'(prox(x))`` and corr(G, G~) = t.
"""
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

from . import kernels
from .data import DataModel
from .errors import DomainError, NumericalError, RegimeError
from .losses import LossModel
from .quadrature import (DEFAULT_SPEC, GAUSS_BREAKS, HALF_WIDTH, QuadratureSpec, gauss_hermite_pruned,
                         gauss_legendre, marginal_atoms, piecewise_gaussian_rule)

SYSTEM_TOL = 1e-9
ETA_TOL = 1e-11
GAMMA_DIVERGED = 1e6
# beyond this |t| the shared factor is a steep step and needs split rules
SHARED_SMOOTH_T = 0.9


@dataclass(frozen=True)
class RegimeParams:
    delta: float
    q: float
    model: DataModel
    loss: LossModel
    quad: QuadratureSpec = DEFAULT_SPEC

    def __post_init__(self):
        if not self.delta > 0:
            raise DomainError("delta must be positive")
        if not 0 < self.q <= 1:
            raise DomainError("q must lie in (0, 1]")
        if self.model.mode == "robust":
            if not self.loss.is_robust:
                raise DomainError("robust mode needs a robust loss")
            if not self.q * self.delta > 1:
                raise DomainError("robust mode needs q * delta > 1")
        elif self.loss.is_robust:
            raise DomainError("logistic mode needs the logistic loss")

    @property
    def dq(self):
        return self.delta * self.q

    @property
    def has_alignment(self):
        """True when ``a`` is a free unknown (logistic with nonzero signal)."""
        return self.model.mode == "logistic" and self.model.signal_norm > 0


@dataclass(frozen=True)
class StateSolution:
    a: float
    sigma: float
    gamma: float
    residuals: tuple
    residual_norm: float
    iterations: int
    method: str = "newton"

    @property
    def sigma2(self):
        return self.sigma ** 2


@dataclass(frozen=True)
class EtaSolution:
    eta: float
    fixed_point_residual: float
    iterations: int
    trace: tuple = ()


@dataclass(frozen=True)
class RiskRow:
    q: float
    eta: float
    sigma2: float
    gamma: float
    a: float
    eta_sigma2: float
    status: str
    message: str = ""


class _Integrals:
    """Quadrature-backed expectations for one set of regime parameters."""

    def __init__(self, params):
        self.params = params
        self.loss = params.loss
        self.kp = params.loss.kernel_params
        self.y, self.u, self.w = marginal_atoms(params.model, params.quad)
        self.pair_atoms = self._fold()
        self.m = params.quad.piece_nodes
        self.gh_x, self.gh_w = gauss_hermite_pruned(params.quad.gh_nodes)
        self.ref_x, self.ref_w = gauss_legendre(self.m)

    def _fold(self):
        # symmetric noise and odd r: the pair integrand is even in eps
        if self.params.model.mode != "robust":
            return self.y, self.u, self.w
        pos = self.y > 0
        w = 2.0 * self.w[pos]
        zero = self.y == 0
        y = np.concatenate([self.y[pos], self.y[zero]])
        w = np.concatenate([w, self.w[zero]])
        return y, np.zeros_like(y), w

    def features(self, gamma):
        return np.asarray(self.loss.prox_features(gamma), dtype=float)

    def _gh_rows(self, K):
        return (np.broadcast_to(self.gh_x, (K, self.gh_x.size)),
                np.broadcast_to(self.gh_w, (K, self.gh_w.size)))

    def outer_rule(self, a, sigma, gamma):
        """Per-atom rule in G for ``x = a U + sigma G``."""
        feats = self.features(gamma)
        if feats.size == 0:
            return self._gh_rows(self.y.size)
        shift = (self.y - a * self.u)[:, None] - feats[None, :]
        return piecewise_gaussian_rule(shift / sigma, self.m)

    def shared_rule(self, y, u, a, sigma, gamma, t):
        """Per-atom rule for the factor shared by G and G~ (see pair_moment).

        The shared factor enters through a Gaussian average of r over the
        private factor, smooth on the scale sqrt((1 - |t|) / |t|); Gauss-Hermite
        suffices until that scale becomes small.
        """
        feats = self.features(gamma)
        if feats.size == 0 or abs(t) <= SHARED_SMOOTH_T:
            return self._gh_rows(y.size)
        at = abs(t)
        centre = ((y - a * u)[:, None] - feats[None, :]) / (sigma * np.sqrt(at))
        if t < 0:
            centre = np.concatenate([centre, -centre], axis=1)
        width = np.sqrt((1.0 - at) / at)
        offsets = width * np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
        breaks = (centre[:, :, None] + offsets).reshape(y.size, -1)
        return piecewise_gaussian_rule(breaks, self.m)

    def moments(self, a, sigma, gamma):
        """(E[r^2], E[U r], E[G prox] / sigma) over the atoms and G."""
        G, W = self.outer_rule(a, sigma, gamma)
        x = (a * self.u)[:, None] + sigma * G
        yy = np.broadcast_to(self.y[:, None], x.shape)
        p = kernels.prox(*self.kp, yy, gamma, x)
        r = x - p
        wt = self.w[:, None] * W
        return (float(np.sum(wt * r * r)), float(np.sum(wt * self.u[:, None] * r)),
                float(np.sum(wt * G * p)) / sigma)

    def pair(self, a, sigma, gamma, t, score_form):
        y, u, w = self.pair_atoms
        C, W = self.shared_rule(y, u, a, sigma, gamma, t)
        return kernels.pair_moment(
            *self.kp, gamma, score_form, y, a * u, w, sigma, t,
            C, W, self.gh_x, self.gh_w, self.ref_x, self.ref_w, self.features(gamma),
            GAUSS_BREAKS, HALF_WIDTH)


def system_residuals(params, a, sigma, gamma, integrals=None):
    """Raw residuals (LHS - RHS) of the state-evolution system.

    Robust: two equations (second moment, Stein/derivative equation).
    Logistic: three, with the orthogonality of the score to the signal
    coordinate, ``E[U r] = 0``, in the middle; when the signal is zero the
    alignment is pinned at 0 and that equation holds trivially.
    """
    integ = integrals or _Integrals(params)
    m2, m1, gp = integ.moments(a, sigma, gamma)
    dq = params.dq
    r_second = m2 - sigma ** 2 / dq
    r_stein = gp - (1.0 - 1.0 / dq)
    if params.has_alignment:
        return (r_second, m1, r_stein)
    return (r_second, r_stein)


class _System:
    """Residual map in unconstrained coordinates (a, log sigma, log gamma)."""

    def __init__(self, params):
        self.params = params
        self.integ = _Integrals(params)
        self.free_a = params.has_alignment

    def unpack(self, theta):
        if self.free_a:
            return theta[0], np.exp(theta[1]), np.exp(theta[2])
        return 0.0, np.exp(theta[0]), np.exp(theta[1])

    def pack(self, a, sigma, gamma):
        if self.free_a:
            return np.array([a, np.log(sigma), np.log(gamma)])
        return np.array([np.log(sigma), np.log(gamma)])

    def scaled(self, theta):
        a, sigma, gamma = self.unpack(theta)
        m2, m1, gp = self.integ.moments(a, sigma, gamma)
        dq = self.params.dq
        out = [m2 / sigma ** 2 - 1.0 / dq]
        if self.free_a:
            out.append(m1 / sigma)
        out.append(gp - (1.0 - 1.0 / dq))
        return np.array(out)

    def jacobian(self, theta, h=1e-6):
        n = theta.size
        J = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h * max(1.0, abs(theta[j])) if (self.free_a and j == 0) else h
            J[:, j] = (self.scaled(theta + e) - self.scaled(theta - e)) / (2 * e[j])
        return J


def _newton(system, theta, max_iter=100, tol=1e-13, max_step=1.0, stall_limit=50):
    """Damped Newton with step halving; returns (theta, iterations, converged)."""
    f = system.scaled(theta)
    fnorm = np.max(np.abs(f))
    stalled = 0
    for it in range(1, max_iter + 1):
        if fnorm <= tol:
            return theta, it - 1, True
        J = system.jacobian(theta)
        try:
            step = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -f, rcond=None)[0]
        big = np.max(np.abs(step))
        if big > max_step:
            step *= max_step / big
        lam = 1.0
        while True:
            cand = theta + lam * step
            try:
                fc = system.scaled(cand)
                cnorm = np.max(np.abs(fc))
            except NumericalError:
                cnorm = np.inf
            if cnorm < fnorm or lam < 1e-4:
                break
            lam *= 0.5
        if not cnorm < fnorm:
            return theta, it, False
        theta, f, fnorm = cand, fc, cnorm
        _, _, gamma = system.unpack(theta)
        if gamma > GAMMA_DIVERGED:
            raise RegimeError(f"gamma diverged ({gamma:.3g}); no solution in this regime")
        stalled = stalled + 1 if fnorm > 1e-6 else 0
        if stalled >= stall_limit:
            return theta, it, False
    return theta, max_iter, fnorm <= tol


def _expand_bracket(fun, lo, hi, grow=2.0, max_tries=60):
    flo, fhi = fun(lo), fun(hi)
    for _ in range(max_tries):
        if np.sign(flo) != np.sign(fhi):
            return lo, hi
        lo, hi = lo - grow, hi + grow
        flo, fhi = fun(lo), fun(hi)
    raise RegimeError("could not bracket a root")


def _nested_robust(system, theta0):
    """Fallback: gamma from the Stein equation for each sigma, then sigma by Brent."""
    dq = system.params.dq
    target = 1.0 - 1.0 / dq

    def gamma_of(log_sigma):
        sigma = np.exp(log_sigma)

        def g(log_gamma):
            return system.integ.moments(0.0, sigma, np.exp(log_gamma))[2] - target

        lo, hi = _expand_bracket(g, theta0[1] - 1.0, theta0[1] + 1.0)
        return optimize.brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)

    def h(log_sigma):
        lg = gamma_of(log_sigma)
        m2 = system.integ.moments(0.0, np.exp(log_sigma), np.exp(lg))[0]
        return m2 / np.exp(2 * log_sigma) - 1.0 / dq

    lo, hi = _expand_bracket(h, theta0[0] - 1.0, theta0[0] + 1.0)
    ls = optimize.brentq(h, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return np.array([ls, gamma_of(ls)])


def solve_system(params, init=None, tol=SYSTEM_TOL):
    """Solve for ``(a, sigma, gamma)``.

    ``init`` is an optional ``(a, sigma, gamma)`` starting point; the default
    is ``(nu / 2, 1, 1)``. Raises :class:`RegimeError` when the iterates
    diverge or stall, which in logistic mode means the MLE does not exist.
    """
    system = _System(params)
    if init is None:
        init = (params.model.signal_norm / 2.0 if system.free_a else 0.0, 1.0, 1.0)
    theta, iters, ok = _newton(system, system.pack(*init))
    method = "newton"
    if not ok and params.model.mode == "robust":
        theta = _nested_robust(system, system.pack(0.0, 1.0, 1.0))
        theta, more, ok = _newton(system, theta, max_iter=10)
        iters += more
        method = "nested"
    if not ok:
        raise RegimeError("state-evolution system did not converge")
    a, sigma, gamma = system.unpack(theta)
    res = system_residuals(params, a, sigma, gamma, system.integ)
    norm = float(np.max(np.abs(res)))
    if not norm <= tol:
        raise RegimeError(f"residual {norm:.3g} above tolerance {tol:g}")
    return StateSolution(float(a), float(sigma), float(gamma), tuple(map(float, res)),
                         norm, iters, method)


def eval_F(eta_trial, params, state, form=None, integrals=None):
    """Right-hand side of the correlation fixed-point equation at ``eta_trial``.

    ``form`` selects how the residual is evaluated: ``"residual"`` uses
    ``x - prox(x)`` and ``"score"`` uses ``gamma * l'(prox(x))``. They agree
    by the prox stationarity identity; the default is ``"residual"`` in
    robust mode and ``"score"`` in logistic mode.
    """
    if not -1.0 <= eta_trial <= 1.0:
        raise DomainError("eta_trial must lie in [-1, 1]")
    if form is None:
        form = "residual" if params.model.mode == "robust" else "score"
    if form not in ("residual", "score"):
        raise DomainError(f"unknown form {form!r}")
    integ = integrals or _Integrals(params)
    moment = integ.pair(state.a, state.sigma, state.gamma, float(eta_trial),
                        form == "score")
    return params.q ** 2 * params.delta / state.sigma ** 2 * moment


class FixedPointMap:
    """``F`` bound to one solved state; caches the quadrature setup."""

    def __init__(self, params, state, form=None):
        self.params, self.state, self.form = params, state, form
        self._integ = _Integrals(params)

    def __call__(self, t):
        return eval_F(t, self.params, self.state, self.form, self._integ)


def solve_eta(params, state, tol=ETA_TOL, max_iter=20000, eta0=None):
    """Fixed-point iteration ``eta <- F(eta)`` started from ``q / 2``."""
    q = params.q
    if q == 1.0:
        return EtaSolution(1.0, 0.0, 0, (1.0,))
    F = FixedPointMap(params, state)
    eta = q / 2.0 if eta0 is None else float(eta0)
    trace = [eta]
    for it in range(1, max_iter + 1):
        new = F(eta)
        trace.append(new)
        if abs(new - eta) <= tol:
            return EtaSolution(new, abs(new - eta), it, tuple(trace))
        eta = new
    raise NumericalError("fixed-point iteration for eta did not converge")


def risk_curve(params_base, q_grid):
    """One :class:`RiskRow` per ``q``; failures are recorded, not raised."""
    rows = []
    warm = None
    for q in q_grid:
        q = float(q)
        try:
            params = replace(params_base, q=q)
        except DomainError as exc:
            rows.append(RiskRow(q, *([np.nan] * 5), "invalid", str(exc)))
            continue
        try:
            try:
                state = solve_system(params, init=warm)
            except RegimeError:
                if warm is None:
                    raise
                state = solve_system(params)
            eta = solve_eta(params, state).eta
        except RegimeError as exc:
            rows.append(RiskRow(q, *([np.nan] * 5), "no_solution", str(exc)))
            warm = None
            continue
        warm = (state.a, state.sigma, state.gamma)
        rows.append(RiskRow(q, eta, state.sigma2, state.gamma, state.a,
                            eta * state.sigma2, "ok"))
    return rows


def bagged_risk_limit(eta, sigma2, M, bias2=0.0):
    """Limit of the squared error of an average of ``M`` subsampled fits.

    ``bias2`` adds the squared error along the signal direction, ``(a - nu)^2``
    in logistic mode.
    """
    if M < 1:
        raise DomainError("M must be at least 1")
    return bias2 + sigma2 / M + (1.0 - 1.0 / M) * sigma2 * eta


def affine_reference(q, delta):
    """The straight line through (1/delta, 0) and (1, 1)."""
    return (np.asarray(q, dtype=float) - 1.0 / delta) / (1.0 - 1.0 / delta)
