# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: elementwise proximal maps and the fused
bivariate-Gaussian pair moment used by the correlation fixed point.

Semantics match ``_kernels_py`` exactly; non-converged prox evaluations
come back as NaN and are turned into exceptions by ``subevo.kernels``.
"""
import numpy as np
from libc.math cimport sqrt, exp, fabs, sinh, cosh, asinh, NAN, INFINITY

cdef enum:
    HUBER = 0
    PSEUDO_HUBER = 1
    LOGISTIC = 2
    MAX_ITER = 100

cdef double TOL = 1e-12
# residuals below this multiple of their terms' size are rounding noise
cdef double ROUND = 4.0 * 2.220446049250313e-16
cdef double INV_SQRT_2PI = 0.3989422804014327


cdef inline double _sigmoid(double u) nogil:
    cdef double e
    if u >= 0:
        return 1.0 / (1.0 + exp(-u))
    e = exp(u)
    return e / (1.0 + e)


cdef inline double _rho_d1(int kind, double amp, double width, double t) nogil:
    cdef double v
    if kind == HUBER:
        if t > 1.0:
            return 1.0
        if t < -1.0:
            return -1.0
        return t
    v = t / width
    return amp * v / sqrt(1.0 + v * v)


cdef inline double _rho_d2(int kind, double amp, double width, double t) nogil:
    cdef double v, d
    if kind == HUBER:
        return 1.0 if (t >= -1.0 and t < 1.0) else 0.0
    v = t / width
    d = 1.0 + v * v
    return (amp / width) / (d * sqrt(d))


cdef inline double _rho_prox(int kind, double amp, double width, double gamma,
                             double z, double s) nogil:
    # solve s + gamma rho'(s) = z starting from the guess s
    cdef double c, lo, hi, s_new, g, v, d, r, tol, gprev = INFINITY
    cdef int it
    cdef bint bisect
    if kind == HUBER:
        c = 1.0 + gamma
        if fabs(z) <= c:
            return z / c
        return z - gamma if z > 0 else z + gamma
    lo = z - gamma * amp
    hi = z + gamma * amp
    if not (lo < s < hi):
        s = z - gamma * _rho_d1(kind, amp, width, z)
    for it in range(MAX_ITER):
        # one sqrt per step: rho' = amp v / r, rho'' = amp / (width r^3)
        v = s / width
        d = 1.0 + v * v
        r = sqrt(d)
        g = s + gamma * amp * v / r - z
        if fabs(g) <= ROUND * (fabs(s) + fabs(z) + gamma * amp * fabs(v) / r):
            return s
        if g > 0:
            hi = s
        else:
            lo = s
        s_new = s - g / (1.0 + gamma * amp / (width * d * r))
        # bisect when Newton leaves the bracket or stops contracting
        bisect = ((s_new <= lo or s_new >= hi) or fabs(g) > 0.5 * gprev) and g != 0
        if bisect:
            s_new = 0.5 * (lo + hi)
        gprev = fabs(g)
        tol = TOL * (fabs(s) if fabs(s) > 1.0 else 1.0)
        # a short bisection step does not bound the error; the bracket does
        if (not bisect and fabs(s_new - s) <= tol) or hi - lo <= tol:
            return s_new
        s = s_new
    return NAN


cdef inline double _logistic_prox(double y, double gamma, double x, double p) nogil:
    # solve p + gamma (sigmoid(p) - y) = x starting from the guess p
    cdef double lo = x - gamma * (1.0 - y)
    cdef double hi = x + gamma * y
    cdef double p_new, g, sg, tol, gprev = INFINITY
    cdef int it
    cdef bint bisect
    if not (lo < p < hi):
        p = x - gamma * (_sigmoid(x) - y)
    for it in range(MAX_ITER):
        sg = _sigmoid(p)
        g = p + gamma * (sg - y) - x
        if fabs(g) <= ROUND * (fabs(p) + fabs(x) + gamma * fabs(sg - y)):
            return p
        if g > 0:
            hi = p
        else:
            lo = p
        p_new = p - g / (1.0 + gamma * sg * (1.0 - sg))
        bisect = ((p_new <= lo or p_new >= hi) or fabs(g) > 0.5 * gprev) and g != 0
        if bisect:
            p_new = 0.5 * (lo + hi)
        gprev = fabs(g)
        tol = TOL * (fabs(p) if fabs(p) > 1.0 else 1.0)
        # a short bisection step does not bound the error; the bracket does
        if (not bisect and fabs(p_new - p) <= tol) or hi - lo <= tol:
            return p_new
        p = p_new
    return NAN


cdef inline double _prox_from(int kind, double amp, double width, double y,
                              double gamma, double x, double guess) nogil:
    if kind == LOGISTIC:
        return _logistic_prox(y, gamma, x, guess)
    return y - _rho_prox(kind, amp, width, gamma, y - x, y - guess)


cdef inline double _prox(int kind, double amp, double width, double y,
                         double gamma, double x) nogil:
    return _prox_from(kind, amp, width, y, gamma, x, NAN)


cdef inline double _loss_d1(int kind, double amp, double width, double y,
                            double u) nogil:
    if kind == LOGISTIC:
        return _sigmoid(u) - y
    return -_rho_d1(kind, amp, width, y - u)


cdef inline double _loss_d2(int kind, double amp, double width, double y,
                            double u) nogil:
    cdef double s
    if kind == LOGISTIC:
        s = _sigmoid(u)
        return s * (1.0 - s)
    return _rho_d2(kind, amp, width, y - u)


cdef inline double _resid_of(int kind, double amp, double width, double gamma,
                             int score_form, double y, double x, double p) nogil:
    if score_form:
        return gamma * _loss_d1(kind, amp, width, y, p)
    return x - p


def prox(int kind, double amp, double width, const double[::1] y, double gamma,
         const double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _prox(kind, amp, width, y[i], gamma, x[i])
    return out


def loss_d1(int kind, double amp, double width, const double[::1] y, const double[::1] u):
    cdef Py_ssize_t i, n = u.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _loss_d1(kind, amp, width, y[i], u[i])
    return out


def loss_d2(int kind, double amp, double width, const double[::1] y, const double[::1] u):
    cdef Py_ssize_t i, n = u.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _loss_d2(kind, amp, width, y[i], u[i])
    return out


def prox_d1(int kind, double amp, double width, const double[::1] y, double gamma,
            const double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double p
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            p = _prox(kind, amp, width, y[i], gamma, x[i])
            o[i] = 1.0 / (1.0 + gamma * _loss_d2(kind, amp, width, y[i], p))
    return out


cdef inline double _rho_d3(double amp, double width, double t) nogil:
    # pseudo-Huber only
    cdef double v = t / width, d = 1.0 + v * v
    return -3.0 * amp * v / (width * width * d * d * sqrt(d))


# Residual tables: within one FixedPointMap gamma is fixed and the
# residual depends on one scalar (z = y - x for robust losses, x for each
# logistic label), so it is tabulated with two derivatives and read back by
# quintic Hermite interpolation. The grid is uniform in xi with
# arg = S sinh(xi): fine over the core holding the bends, coarse in the
# smooth tails. Huber keeps its closed form.
cdef double TABLE_STEP = 0.02
TABLE_CACHE_SIZE = 16
cdef double TABLE_SPAN_MAX = 2000.0
_table_cache = {}

cdef struct Tab:
    # uniform core on [lo, lo + (cn - 1) h]
    double lo
    double inv_h
    Py_ssize_t cn
    double *cdata  # cn rows of (f, h f', h^2 f'')
    # sinh-graded tails
    double S
    double xi0
    double inv_dxi
    Py_ssize_t n
    double *data   # n rows of (f, dxi f_xi, dxi^2 f_xixi)


cdef inline void _table_row(int kind, double amp, double width, double gamma,
                            int score_form, double y, double arg, double *guess,
                            double *out) nogil:
    cdef double s, q, sg, d1, d2, f
    if kind == LOGISTIC:
        s = _logistic_prox(y, gamma, arg, guess[0])
        guess[0] = s
        sg = _sigmoid(s)
        q = gamma * sg * (1.0 - sg)
        f = gamma * (sg - y) if score_form else arg - s
        d1 = q / (1.0 + q)
        d2 = gamma * sg * (1.0 - sg) * (1.0 - 2.0 * sg) / ((1.0 + q) * (1.0 + q) * (1.0 + q))
    else:
        s = _rho_prox(kind, amp, width, gamma, arg, guess[0])
        guess[0] = s
        q = gamma * _rho_d2(kind, amp, width, s)
        f = -gamma * _rho_d1(kind, amp, width, s) if score_form else s - arg
        d1 = -q / (1.0 + q)
        d2 = -gamma * _rho_d3(amp, width, s) / ((1.0 + q) * (1.0 + q) * (1.0 + q))
    out[0] = f
    out[1] = d1
    out[2] = d2


cdef inline double _quintic(const double *a, double t) nogil:
    cdef double t2 = t * t, t3 = t2 * t, t4 = t3 * t, t5 = t4 * t
    cdef const double *b = a + 3
    return (a[0] * (1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5)
            + a[1] * (t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5)
            + a[2] * (0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5)
            + b[2] * (0.5 * t3 - t4 + 0.5 * t5)
            + b[1] * (-4.0 * t3 + 7.0 * t4 - 3.0 * t5)
            + b[0] * (10.0 * t3 - 15.0 * t4 + 6.0 * t5))


cdef inline double _hermite5(Tab *tab, double arg) nogil:
    cdef double u = (arg - tab.lo) * tab.inv_h
    cdef Py_ssize_t i
    if u >= 0.0 and u < tab.cn - 1:
        i = <Py_ssize_t>u
        return _quintic(tab.cdata + 3 * i, u - i)
    u = (asinh(arg / tab.S) - tab.xi0) * tab.inv_dxi
    i = <Py_ssize_t>u
    if i < 0:
        i = 0
    elif i >= tab.n - 1:
        i = tab.n - 2
    return _quintic(tab.data + 3 * i, u - i)


def residual_table(int kind, double amp, double width, double gamma, int score_form,
                   double lo, double hi, double core, double span):
    """Tables covering [lo, hi]; one row block per label for logistic.

    The uniform part spans [-span, span]; the graded tails are fine over
    [-core, core] and coarsen beyond.

    Returns ``(core_lo, h, core_data, S, xi0, dxi, tail_data)``.
    """
    cdef double h0 = TABLE_STEP * (width if (kind == PSEUDO_HUBER and width < 1.0) else 1.0)
    cdef double S = core, dxi = h0 / (sqrt(2.0) * core), xi0, xi, arg, ch, sh, guess
    cdef double clo = -span
    cdef Py_ssize_t n, cn, i, r, rows = 2 if kind == LOGISTIC else 1
    cdef double row[3]
    xi0 = asinh(lo / S) - dxi
    n = <Py_ssize_t>((asinh(hi / S) - xi0) / dxi) + 3
    cn = <Py_ssize_t>(2.0 * span / h0) + 2
    data = np.empty((rows, n, 3))
    cdata = np.empty((rows, cn, 3))
    cdef double[:, :, ::1] d = data
    cdef double[:, :, ::1] cd = cdata
    with nogil:
        for r in range(rows):
            guess = NAN
            for i in range(n):
                xi = xi0 + i * dxi
                sh = sinh(xi)
                ch = cosh(xi)
                arg = S * sh
                _table_row(kind, amp, width, gamma, score_form, <double>r, arg, &guess, row)
                d[r, i, 0] = row[0]
                d[r, i, 1] = dxi * row[1] * S * ch
                d[r, i, 2] = dxi * dxi * (row[2] * S * S * ch * ch + row[1] * S * sh)
            guess = NAN
            for i in range(cn):
                _table_row(kind, amp, width, gamma, score_form, <double>r, clo + i * h0,
                           &guess, row)
                cd[r, i, 0] = row[0]
                cd[r, i, 1] = h0 * row[1]
                cd[r, i, 2] = h0 * h0 * row[2]
    return clo, h0, cdata, S, xi0, dxi, data


def _cached_table(int kind, double amp, double width, double gamma, int score_form,
                  double lo, double hi, double core, double span):
    key = (kind, amp, width, gamma, score_form, core, span)
    hit = _table_cache.get(key)
    if hit is not None and hit[0] <= lo and hi <= hit[1]:
        return hit[2]
    if hit is not None:
        lo, hi = min(lo, hit[0]), max(hi, hit[1])
    tab = residual_table(kind, amp, width, gamma, score_form, lo, hi, core, span)
    if len(_table_cache) >= TABLE_CACHE_SIZE and key not in _table_cache:
        _table_cache.pop(next(iter(_table_cache)))
    _table_cache[key] = (lo, hi, tab)
    return tab


cdef inline double _r_at(int kind, double amp, double width, double gamma,
                         int score_form, double y, double x, double *p, Tab *tab) nogil:
    cdef double arg
    if tab.n > 1:
        return _hermite5(tab, x if kind == LOGISTIC else y - x)
    p[0] = _prox_from(kind, amp, width, y, gamma, x, p[0])
    return _resid_of(kind, amp, width, gamma, score_form, y, x, p[0])


cdef double _inner(int kind, double amp, double width, double gamma,
                   int score_form, double y, double v, double tau,
                   const double[::1] gnodes, const double[::1] gweights,
                   const double[::1] ref_x, const double[::1] ref_w,
                   const double[::1] feats, const double[::1] fixed,
                   double half_width, double *edges, Tab *tab) nogil:
    """E_D[r(v + tau D)], D ~ N(0,1), split at the loss features and fixed points."""
    cdef Py_ssize_t j, a, b, nf = feats.shape[0], nx = fixed.shape[0]
    cdef Py_ssize_t ne = 0, m = ref_x.shape[0]
    cdef double acc = 0.0, x, p = NAN, tmp, lo, hi, half, mid, z
    if tau == 0.0:
        p = _prox(kind, amp, width, y, gamma, v)
        return _resid_of(kind, amp, width, gamma, score_form, y, v, p)
    if nf == 0:
        for j in range(gnodes.shape[0]):
            x = v + tau * gnodes[j]
            acc += gweights[j] * _r_at(kind, amp, width, gamma, score_form, y, x, &p, tab)
        return acc
    # sorted breakpoints in D, insertion sort into edges[1..]
    edges[0] = -half_width
    for a in range(nf + nx):
        if a < nf:
            tmp = (y - feats[a] - v) / tau
        else:
            tmp = fixed[a - nf]
        if tmp < -half_width:
            tmp = -half_width
        elif tmp > half_width:
            tmp = half_width
        b = ne + 1
        while b > 1 and edges[b - 1] > tmp:
            edges[b] = edges[b - 1]
            b -= 1
        edges[b] = tmp
        ne += 1
    edges[ne + 1] = half_width
    for a in range(ne + 1):
        lo = edges[a]
        hi = edges[a + 1]
        if hi <= lo:
            continue
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        for j in range(m):
            z = mid + half * ref_x[j]
            x = v + tau * z
            acc += (half * ref_w[j] * exp(-0.5 * z * z) * INV_SQRT_2PI
                    * _r_at(kind, amp, width, gamma, score_form, y, x, &p, tab))
    return acc


def pair_moment(int kind, double amp, double width, double gamma, int score_form,
                const double[::1] y, const double[::1] c, const double[::1] wk,
                double sigma, double t, const double[:, ::1] cnodes,
                const double[:, ::1] cweights, const double[::1] gnodes,
                const double[::1] gweights, const double[::1] ref_x,
                const double[::1] ref_w, const double[::1] feats,
                const double[::1] fixed, double half_width):
    """E[r(c + sigma G) r(c + sigma G~)] summed over weighted atoms (y, c).

    With corr(G, G~) = t write G = sqrt|t| C + sqrt(1-|t|) D and
    G~ = sign(t) sqrt|t| C + sqrt(1-|t|) D~; the D averages are done first.
    """
    cdef Py_ssize_t K = y.shape[0], Nc = cnodes.shape[1]
    cdef Py_ssize_t nb = feats.shape[0] + fixed.shape[0]
    cdef double at = fabs(t)
    cdef double rt = sigma * sqrt(at), tau = sigma * sqrt(1.0 - at) if at < 1.0 else 0.0
    cdef double total = 0.0, acc, w, h1, h2, reach, lo = INFINITY, hi = -INFINITY, cmax, cbig = 0.0
    cdef Py_ssize_t k, i
    cdef double *edges
    cdef double[::1] ebuf = np.empty(nb + 2)
    cdef Tab tab
    cdef double[:, :, ::1] tdata, tcore
    edges = &ebuf[0]
    # argument range reached by the atoms
    reach = tau * (half_width if nb > 0 else np.max(np.abs(gnodes)))
    for k in range(K):
        cmax = 0.0
        for i in range(Nc):
            if cweights[k, i] != 0.0 and fabs(cnodes[k, i]) > cmax:
                cmax = fabs(cnodes[k, i])
        w = (c[k] if kind == LOGISTIC else y[k] - c[k])
        if wk[k] > 1e-10 and fabs(c[k]) > cbig:
            cbig = fabs(c[k])
        lo = min(lo, w - rt * cmax - reach)
        hi = max(hi, w + rt * cmax + reach)
    tab.n = 0
    if kind != HUBER and hi > lo:
        core = 5.0 * (width if kind == PSEUDO_HUBER else 1.0)
        if feats.shape[0]:
            core += max(fabs(feats[0]), fabs(feats[feats.shape[0] - 1]))
        # uniform part covers the bulk of the Gaussian arguments
        span = min(max(core, 8.0 * sigma + cbig), TABLE_SPAN_MAX)
        clo, h0, cdata, S, xi0, dxi, data = _cached_table(
            kind, amp, width, gamma, score_form, lo, hi, core, span)
        tdata = data
        tcore = cdata
        tab.lo = clo
        tab.inv_h = 1.0 / h0
        tab.cn = cdata.shape[1]
        tab.S = S
        tab.xi0 = xi0
        tab.inv_dxi = 1.0 / dxi
        tab.n = data.shape[1]
    with nogil:
        for k in range(K):
            if tab.n > 1:
                tab.data = &tdata[<Py_ssize_t>y[k] if kind == LOGISTIC else 0, 0, 0]
                tab.cdata = &tcore[<Py_ssize_t>y[k] if kind == LOGISTIC else 0, 0, 0]
            acc = 0.0
            for i in range(Nc):
                w = cweights[k, i]
                if w == 0.0:
                    continue
                h1 = _inner(kind, amp, width, gamma, score_form, y[k],
                            c[k] + rt * cnodes[k, i], tau, gnodes, gweights,
                            ref_x, ref_w, feats, fixed, half_width, edges, &tab)
                if t >= 0:
                    h2 = h1
                else:
                    h2 = _inner(kind, amp, width, gamma, score_form, y[k],
                                c[k] - rt * cnodes[k, i], tau, gnodes, gweights,
                                ref_x, ref_w, feats, fixed, half_width, edges, &tab)
                acc += w * h1 * h2
            total += wk[k] * acc
    return total
