"""Deterministic Gaussian and noise expectations.

* ``expect_g``: Gauss-Hermite for ``G ~ N(0, 1)``.
* ``expect_gg``: tensor Gauss-Hermite for a correlated pair realised as
  ``G~ = t G + sqrt(1 - t^2) Z``.
* ``expect_marginal``: quantile-mapped Gauss-Legendre over the noise
  (robust) or Gauss-Hermite over ``U`` with the Bernoulli response summed
  out (logistic).

Integrands with kinks (Huber) or sharp bends (pseudo-Huber with large
gamma) get piecewise Gauss-Legendre rules split at those points and at a
fixed grid resolving the Gaussian weight; see ``piecewise_gaussian_rule``.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy import special

from .errors import DomainError

# N(0,1) mass beyond this is ~1.5e-23; piecewise rules live on [-L, L]
HALF_WIDTH = 10.0
U_CLIP = 1e-12
# fixed splits so that every piece sees a slowly varying Gaussian weight
GAUSS_BREAKS = np.array([-7.0, -5.0, -3.5, -2.0, -1.0, 0.0, 1.0, 2.0, 3.5, 5.0, 7.0])
GAUSS_BREAKS.setflags(write=False)


@dataclass(frozen=True)
class QuadratureSpec:
    gh_nodes: int = 80
    gl_nodes: int = 200

    def __post_init__(self):
        if self.gh_nodes < 20:
            raise DomainError("gh_nodes must be at least 20")
        if self.gl_nodes < 50:
            raise DomainError("gl_nodes must be at least 50")

    @property
    def piece_nodes(self):
        """Gauss-Legendre nodes per piece of a split Gaussian rule."""
        return self.gh_nodes // 6

    def doubled(self):
        return QuadratureSpec(2 * self.gh_nodes, 2 * self.gl_nodes)


DEFAULT_SPEC = QuadratureSpec()


def _frozen(*arrays):
    for a in arrays:
        a.setflags(write=False)
    return arrays


@lru_cache(maxsize=None)
def gauss_hermite(n):
    """Nodes and weights for E[f(G)], G ~ N(0, 1); weights sum to 1."""
    x, w = hermegauss(n)
    return _frozen(x, w / w.sum())


@lru_cache(maxsize=None)
def gauss_hermite_pruned(n, tol=1e-18):
    """Gauss-Hermite rule without the nodes whose weight is below ``tol``."""
    x, w = gauss_hermite(n)
    keep = w > tol
    return _frozen(x[keep].copy(), w[keep].copy())


@lru_cache(maxsize=None)
def gauss_legendre(n):
    """Reference Gauss-Legendre rule on [-1, 1]."""
    return _frozen(*leggauss(n))


def piecewise_gaussian_rule(breaks, m, half_width=HALF_WIDTH, fixed=GAUSS_BREAKS):
    """Per-row N(0, 1) rules split at ``breaks`` and at ``fixed``.

    ``breaks`` has shape (rows, nb); each row gets ``m`` Gauss-Legendre nodes
    on each piece of [-L, L] with the Gaussian density folded into the
    weights. Breakpoints outside [-L, L] are clipped, which leaves empty
    pieces with zero weight.
    """
    breaks = np.atleast_2d(np.asarray(breaks, dtype=float))
    rows = breaks.shape[0]
    if len(fixed):
        breaks = np.concatenate([breaks, np.broadcast_to(fixed, (rows, len(fixed)))], axis=1)
    ref_x, ref_w = gauss_legendre(m)
    b = np.sort(np.clip(breaks, -half_width, half_width), axis=1)
    edges = np.concatenate(
        [np.full((rows, 1), -half_width), b, np.full((rows, 1), half_width)], axis=1)
    lo, hi = edges[:, :-1], edges[:, 1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    nodes = mid[:, :, None] + half[:, :, None] * ref_x
    weights = half[:, :, None] * ref_w * np.exp(-0.5 * nodes * nodes) / np.sqrt(2 * np.pi)
    return nodes.reshape(rows, -1), weights.reshape(rows, -1)


@lru_cache(maxsize=None)
def _unit_interval_rule(n):
    # Gauss-Legendre on v in (0,1) pushed through the smoothstep u = v^2 (3 - 2v),
    # which flattens the endpoint behaviour of heavy-tailed quantile functions
    v, w = gauss_legendre(n)
    v = 0.5 * (v + 1.0)
    w = 0.5 * w
    u = v * v * (3.0 - 2.0 * v)
    wu = w * 6.0 * v * (1.0 - v)
    return _frozen(np.clip(u, U_CLIP, 1.0 - U_CLIP), wu)


def noise_rule(law, n):
    """Nodes and weights for E[f(eps)] with eps drawn from ``law``."""
    u, w = _unit_interval_rule(n)
    return law.quantile(u), w.copy()


def marginal_atoms(model, spec=DEFAULT_SPEC):
    """Discrete approximation of the law of the response (and ``U``).

    Returns ``(y, u, w)``: robust mode has ``y`` = noise nodes and ``u = 0``;
    logistic mode pairs every Gauss-Hermite ``U`` node with ``y in {0, 1}``
    weighted by ``P(y | U) = sigmoid(nu U)``.
    """
    if model.mode == "robust":
        e, w = noise_rule(model.noise, spec.gl_nodes)
        return e, np.zeros_like(e), w
    x, w = gauss_hermite_pruned(spec.gh_nodes)
    p1 = special.expit(model.signal_norm * x)
    y = np.concatenate([np.ones_like(x), np.zeros_like(x)])
    u = np.concatenate([x, x])
    return y, u, np.concatenate([w * p1, w * (1.0 - p1)])


def expect_g(f, spec=DEFAULT_SPEC, breakpoints=None):
    """E[f(G)] for G ~ N(0, 1); ``f`` must accept arrays.

    With ``breakpoints`` (points where f is not smooth) the split
    Gauss-Legendre rule is used instead of Gauss-Hermite.
    """
    if breakpoints is None or len(breakpoints) == 0:
        x, w = gauss_hermite(spec.gh_nodes)
    else:
        x, w = piecewise_gaussian_rule([list(breakpoints)], spec.piece_nodes)
        x, w = x[0], w[0]
    return float(np.dot(w, f(x)))


def expect_gg(f, t, spec=DEFAULT_SPEC):
    """E[f(G, G~)] with corr(G, G~) = t, using a tensor Gauss-Hermite rule."""
    if not -1.0 <= t <= 1.0:
        raise DomainError("correlation must lie in [-1, 1]")
    x, w = gauss_hermite(spec.gh_nodes)
    if abs(t) == 1.0:
        return float(np.dot(w, f(x, t * x)))
    s = np.sqrt(1.0 - t * t)
    g = x[:, None]
    gt = t * g + s * x[None, :]
    return float(np.sum(np.outer(w, w) * f(np.broadcast_to(g, gt.shape), gt)))


def expect_marginal(f, model, spec=DEFAULT_SPEC):
    """E over the response law: ``f(eps)`` (robust) or ``f(y, U)`` (logistic)."""
    y, u, w = marginal_atoms(model, spec)
    if model.mode == "robust":
        return float(np.dot(w, f(y)))
    return float(np.dot(w, f(y, u)))
