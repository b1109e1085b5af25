"""Pure numpy implementation of the hot kernels.

Mirrors ``_kernels.pyx`` function for function. Inputs are assumed already
validated and converted to contiguous float64 arrays by ``subevo.kernels``.
"""
import numpy as np

HUBER = 0
PSEUDO_HUBER = 1
LOGISTIC = 2

MAX_ITER = 100
TOL = 1e-12
# residuals below this multiple of their terms' size are rounding noise
ROUND = 4.0 * np.finfo(float).eps
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _sigmoid(u):
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _rho_d1(kind, amp, width, t):
    if kind == HUBER:
        return np.clip(t, -1.0, 1.0)
    v = t / width
    return amp * v / np.sqrt(1.0 + v * v)


def _rho_d2(kind, amp, width, t):
    if kind == HUBER:
        # right-continuous indicator of [-1, 1)
        return ((t >= -1.0) & (t < 1.0)).astype(float)
    v = t / width
    return (amp / width) * (1.0 + v * v) ** -1.5


def _rho_prox(kind, amp, width, gamma, z):
    """Proximal map of gamma * rho evaluated at z."""
    if kind == HUBER:
        c = 1.0 + gamma
        return np.where(np.abs(z) <= c, z / c, z - gamma * np.sign(z))
    # s + gamma * rho'(s) = z, with |rho'| <= amp bracketing the root
    lo = z - gamma * amp
    hi = z + gamma * amp
    s = z - gamma * _rho_d1(kind, amp, width, z)
    done = np.zeros(z.shape, dtype=bool)
    gprev = np.full(z.shape, np.inf)
    for _ in range(MAX_ITER):
        d1 = _rho_d1(kind, amp, width, s)
        g = s + gamma * d1 - z
        noise = np.abs(g) <= ROUND * (np.abs(s) + np.abs(z) + gamma * np.abs(d1))
        hi = np.where(g > 0, s, hi)
        lo = np.where(g <= 0, s, lo)
        step = g / (1.0 + gamma * _rho_d2(kind, amp, width, s))
        s_new = s - step
        # bisect when Newton leaves the bracket or stops contracting
        bad = (s_new <= lo) | (s_new >= hi) | (np.abs(g) > 0.5 * gprev)
        bad &= g != 0
        s_new = np.where(bad, 0.5 * (lo + hi), s_new)
        gprev = np.abs(g)
        s_new = np.where(done, s, s_new)
        # a short bisection step does not bound the error; the bracket does
        tol = TOL * np.maximum(1.0, np.abs(s))
        s_new = np.where(noise & ~done, s, s_new)
        done |= noise | (~bad & (np.abs(s_new - s) <= tol)) | (hi - lo <= tol)
        s = s_new
        if done.all():
            return s
    s[~done] = np.nan
    return s


def _logistic_prox(y, gamma, x):
    # p + gamma * (sigmoid(p) - y) = x, root in (x - gamma (1 - y), x + gamma y)
    lo = x - gamma * (1.0 - y)
    hi = x + gamma * y
    p = x - gamma * (_sigmoid(x) - y)
    done = np.zeros(x.shape, dtype=bool)
    gprev = np.full(x.shape, np.inf)
    for _ in range(MAX_ITER):
        sg = _sigmoid(p)
        g = p + gamma * (sg - y) - x
        noise = np.abs(g) <= ROUND * (np.abs(p) + np.abs(x) + gamma * np.abs(sg - y))
        hi = np.where(g > 0, p, hi)
        lo = np.where(g <= 0, p, lo)
        p_new = p - g / (1.0 + gamma * sg * (1.0 - sg))
        bad = (p_new <= lo) | (p_new >= hi) | (np.abs(g) > 0.5 * gprev)
        bad &= g != 0
        p_new = np.where(bad, 0.5 * (lo + hi), p_new)
        gprev = np.abs(g)
        p_new = np.where(done, p, p_new)
        tol = TOL * np.maximum(1.0, np.abs(p))
        p_new = np.where(noise & ~done, p, p_new)
        done |= noise | (~bad & (np.abs(p_new - p) <= tol)) | (hi - lo <= tol)
        p = p_new
        if done.all():
            return p
    p[~done] = np.nan
    return p


def prox(kind, amp, width, y, gamma, x):
    if kind == LOGISTIC:
        return _logistic_prox(y, gamma, x)
    return y - _rho_prox(kind, amp, width, gamma, y - x)


def loss_d1(kind, amp, width, y, u):
    if kind == LOGISTIC:
        return _sigmoid(u) - y
    return -_rho_d1(kind, amp, width, y - u)


def loss_d2(kind, amp, width, y, u):
    if kind == LOGISTIC:
        s = _sigmoid(u)
        return s * (1.0 - s)
    return _rho_d2(kind, amp, width, y - u)


def prox_d1(kind, amp, width, y, gamma, x):
    p = prox(kind, amp, width, y, gamma, x)
    return 1.0 / (1.0 + gamma * loss_d2(kind, amp, width, y, p))


def _resid(kind, amp, width, gamma, score_form, y, x):
    p = prox(kind, amp, width, y, gamma, x)
    if score_form:
        return gamma * loss_d1(kind, amp, width, y, p)
    return x - p


def _piecewise_nodes(breaks, ref_x, ref_w, half_width):
    """Gauss-Legendre nodes for N(0,1) split at ``breaks`` (rows x nb)."""
    rows = breaks.shape[0]
    b = np.sort(np.clip(breaks, -half_width, half_width), axis=1)
    edges = np.concatenate(
        [np.full((rows, 1), -half_width), b, np.full((rows, 1), half_width)], axis=1)
    lo, hi = edges[:, :-1], edges[:, 1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    nodes = mid[:, :, None] + half[:, :, None] * ref_x
    w = half[:, :, None] * ref_w * np.exp(-0.5 * nodes * nodes) * _INV_SQRT_2PI
    return nodes.reshape(rows, -1), w.reshape(rows, -1)


def _inner(kind, amp, width, gamma, score_form, y, v, tau, gnodes, gweights,
           ref_x, ref_w, feats, fixed, half_width):
    """E_D[r(v + tau D)] for every entry of ``v``."""
    yv = np.full(v.shape, y)
    if tau == 0.0:
        return _resid(kind, amp, width, gamma, score_form, yv, v)
    if feats.shape[0] == 0:
        x = v[:, None] + tau * gnodes[None, :]
        r = _resid(kind, amp, width, gamma, score_form, np.full(x.shape, y), x)
        return r @ gweights
    breaks = np.concatenate(
        [(y - feats[None, :] - v[:, None]) / tau, np.broadcast_to(fixed, (v.size, fixed.size))],
        axis=1)
    z, zw = _piecewise_nodes(breaks, ref_x, ref_w, half_width)
    x = v[:, None] + tau * z
    r = _resid(kind, amp, width, gamma, score_form, np.full(x.shape, y), x)
    return np.sum(r * zw, axis=1)


def pair_moment(kind, amp, width, gamma, score_form, y, c, wk, sigma, t,
                cnodes, cweights, gnodes, gweights, ref_x, ref_w, feats, fixed,
                half_width):
    at = abs(t)
    rt = sigma * np.sqrt(at)
    tau = sigma * np.sqrt(1.0 - at) if at < 1.0 else 0.0
    total = 0.0
    for k in range(y.shape[0]):
        keep = cweights[k] != 0.0
        cn = cnodes[k, keep]
        args = (kind, amp, width, gamma, score_form, y[k])
        rest = (tau, gnodes, gweights, ref_x, ref_w, feats, fixed, half_width)
        h1 = _inner(*args, c[k] + rt * cn, *rest)
        h2 = h1 if t >= 0 else _inner(*args, c[k] - rt * cn, *rest)
        total += wk[k] * np.dot(cweights[k, keep], h1 * h2)
    return float(total)
