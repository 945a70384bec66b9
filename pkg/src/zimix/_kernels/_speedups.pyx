# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementation of the hot kernels.

Same node scheme and convergence rules as the NumPy reference in
``reference.py``; see that module for the math.  Kept in plain C loops so a
single (record, component) integral costs no Python overhead.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, fabs, floor, lgamma, log

cnp.import_array()

cdef double[15] GK_NODES
cdef double[15] GK_WEIGHTS
cdef double[15] GK_DIFF
GK_NODES = [
    -0.991455371120813, -0.949107912342759, -0.864864423359769,
    -0.741531185599394, -0.586087235467691, -0.405845151377397,
    -0.207784955007898, 0.0,
    0.207784955007898, 0.405845151377397, 0.586087235467691,
    0.741531185599394, 0.864864423359769, 0.949107912342759,
    0.991455371120813,
]
GK_WEIGHTS = [
    0.022935322010529, 0.063092092629979, 0.104790010322250,
    0.140653259715525, 0.169004726639267, 0.190350578064785,
    0.204432940075298, 0.209482141084728, 0.204432940075298,
    0.190350578064785, 0.169004726639267, 0.140653259715525,
    0.104790010322250, 0.063092092629979, 0.022935322010529,
]
GK_DIFF = [
    0.022935322010529, -0.066392873538891, 0.104790010322250,
    -0.139052131773752, 0.169004726639267, -0.191479472440334,
    0.204432940075298, -0.208477042588741, 0.204432940075298,
    -0.191479472440334, 0.169004726639267, -0.139052131773752,
    0.104790010322250, -0.066392873538891, 0.022935322010529,
]

cdef double TAIL_SDS = 10.0


cdef inline double _g(double u, double em, double r0, double sl, double rate2,
                      double i2d, double mu, double i2s) noexcept nogil:
    cdef double resid = r0 - sl * em
    cdef double du = u - mu
    return -resid * resid * i2d - rate2 * em - du * du * i2s


cdef inline void _panel_gk_base(double a, double b, double *em_base,
                                double r0, double sl, double rate2,
                                double i2d, double mu, double i2s,
                                double *out_scale, double *out_kron,
                                double *out_err) noexcept nogil:
    """GK15 on [a, b] with precomputed exp(half*node) factors.

    Peak-scaled: integral = out_kron * exp(out_scale).  exp(u) is factored
    as exp(center)*exp(half*node), one exp per node.
    """
    cdef double c = 0.5 * (a + b)
    cdef double half = 0.5 * (b - a)
    cdef double ec = exp(c)
    cdef double[15] gbuf
    cdef double gmax = -INFINITY
    cdef double u, val, pk, pd
    cdef int q
    for q in range(15):
        u = c + half * GK_NODES[q]
        val = _g(u, ec * em_base[q], r0, sl, rate2, i2d, mu, i2s)
        gbuf[q] = val
        if val > gmax:
            gmax = val
    out_scale[0] = gmax
    if gmax == -INFINITY:
        out_kron[0] = 0.0
        out_err[0] = 0.0
        return
    pk = 0.0
    pd = 0.0
    for q in range(15):
        val = exp(gbuf[q] - gmax)
        pk += GK_WEIGHTS[q] * val
        pd += GK_DIFF[q] * val
    out_kron[0] = half * pk
    out_err[0] = half * fabs(pd)


cdef inline void _panel_gk(double a, double b, double r0, double sl,
                           double rate2, double i2d, double mu, double i2s,
                           double *out_scale, double *out_kron,
                           double *out_err) noexcept nogil:
    cdef double half = 0.5 * (b - a)
    cdef double[15] em_base
    cdef int q
    for q in range(15):
        em_base[q] = exp(half * GK_NODES[q])
    _panel_gk_base(a, b, em_base, r0, sl, rate2, i2d, mu, i2s,
                   out_scale, out_kron, out_err)


def log_h_lognormal(resid0, slope, mu, double sigma, double resid_sd,
                    double rate, double log_bound, double tol,
                    int base_panels=16, int max_panels=200):
    """See ``reference.log_h_lognormal``; identical contract."""
    cdef cnp.ndarray[double, ndim=1] r0 = np.ascontiguousarray(resid0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] sl = np.ascontiguousarray(slope, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] mu_a = np.ascontiguousarray(mu, dtype=np.float64)
    cdef Py_ssize_t n = mu_a.shape[0]
    cdef Py_ssize_t k = mu_a.shape[1]

    cdef cnp.ndarray[double, ndim=2] log_h = np.full((n, k), -INFINITY)
    cdef cnp.ndarray[double, ndim=2] err = np.zeros((n, k))
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] conv = np.ones((n, k), dtype=np.uint8)

    cdef cnp.ndarray[double, ndim=1] p_left = np.empty(max_panels)
    cdef cnp.ndarray[double, ndim=1] p_right = np.empty(max_panels)
    cdef cnp.ndarray[double, ndim=1] p_scale = np.empty(max_panels)
    cdef cnp.ndarray[double, ndim=1] p_kron = np.empty(max_panels)
    cdef cnp.ndarray[double, ndim=1] p_err = np.empty(max_panels)

    cdef double i2d = 0.5 / (resid_sd * resid_sd)
    cdef double i2s = 0.5 / (sigma * sigma)
    cdef double rate2 = rate * rate

    cdef Py_ssize_t i, j
    cdef int p, q, n_panels, worst
    cdef double m_ik, lo, hi, width, mid, old_right
    cdef double s, total, errsum, w, contrib, best_contrib
    cdef double sc_l, kr_l, er_l, sc_r, kr_r, er_r
    cdef double[15] em_shared
    cdef bint ok

    with nogil:
        for i in range(n):
            for j in range(k):
                m_ik = mu_a[i, j]
                lo = m_ik - TAIL_SDS * sigma
                hi = log_bound if log_bound < m_ik + TAIL_SDS * sigma else m_ik + TAIL_SDS * sigma
                if hi <= lo:
                    continue
                width = (hi - lo) / base_panels
                for q in range(15):
                    em_shared[q] = exp(0.5 * width * GK_NODES[q])
                for p in range(base_panels):
                    p_left[p] = lo + p * width
                    p_right[p] = hi if p == base_panels - 1 else lo + (p + 1) * width
                    if p == base_panels - 1:
                        # last panel's width may differ after the hi clamp
                        _panel_gk(p_left[p], p_right[p], r0[i], sl[i], rate2,
                                  i2d, m_ik, i2s, &p_scale[p], &p_kron[p], &p_err[p])
                    else:
                        _panel_gk_base(p_left[p], p_right[p], em_shared, r0[i],
                                       sl[i], rate2, i2d, m_ik, i2s,
                                       &p_scale[p], &p_kron[p], &p_err[p])
                n_panels = base_panels
                while True:
                    s = -INFINITY
                    for p in range(n_panels):
                        if p_scale[p] > s:
                            s = p_scale[p]
                    if s == -INFINITY:
                        total = 0.0
                        errsum = 0.0
                        ok = True
                        break
                    total = 0.0
                    errsum = 0.0
                    worst = 0
                    best_contrib = -1.0
                    for p in range(n_panels):
                        w = exp(p_scale[p] - s)
                        total += p_kron[p] * w
                        contrib = p_err[p] * w
                        errsum += contrib
                        if contrib > best_contrib:
                            best_contrib = contrib
                            worst = p
                    ok = errsum <= tol
                    if ok or n_panels >= max_panels:
                        break
                    mid = 0.5 * (p_left[worst] + p_right[worst])
                    if not (p_left[worst] < mid < p_right[worst]):
                        break
                    _panel_gk(p_left[worst], mid, r0[i], sl[i], rate2, i2d,
                              m_ik, i2s, &sc_l, &kr_l, &er_l)
                    _panel_gk(mid, p_right[worst], r0[i], sl[i], rate2, i2d,
                              m_ik, i2s, &sc_r, &kr_r, &er_r)
                    # worst panel becomes its left half; right half appended
                    old_right = p_right[worst]
                    p_right[worst] = mid
                    p_scale[worst] = sc_l
                    p_kron[worst] = kr_l
                    p_err[worst] = er_l
                    p_left[n_panels] = mid
                    p_right[n_panels] = old_right
                    p_scale[n_panels] = sc_r
                    p_kron[n_panels] = kr_r
                    p_err[n_panels] = er_r
                    n_panels += 1
                if s > -INFINITY and total > 0.0:
                    log_h[i, j] = log(total) + s
                if s > -INFINITY:
                    err[i, j] = errsum * exp(s if s < 700.0 else 700.0)
                conv[i, j] = 1 if ok else 0

    return log_h, err, conv.view(np.bool_)


def log_false_zero_sum_poisson(resid0, slope, loc, double resid_sd,
                               double rate, double bound):
    """See ``reference.log_false_zero_sum_poisson``; identical contract."""
    cdef cnp.ndarray[double, ndim=1] r0 = np.ascontiguousarray(resid0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] sl = np.ascontiguousarray(slope, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] loc_a = np.ascontiguousarray(loc, dtype=np.float64)
    cdef Py_ssize_t n = loc_a.shape[0]
    cdef Py_ssize_t k = loc_a.shape[1]
    cdef int L = <int>floor(bound)
    cdef cnp.ndarray[double, ndim=2] out = np.empty((n, k))
    cdef cnp.ndarray[double, ndim=1] lgam = np.empty(L + 1)
    cdef cnp.ndarray[double, ndim=1] buf = np.empty(L + 1)

    cdef Py_ssize_t i, j
    cdef int m
    cdef double i2d = 0.5 / (resid_sd * resid_sd)
    cdef double rate2 = rate * rate
    cdef double resid, val, vmax, acc

    for m in range(1, L + 1):
        lgam[m] = lgamma(m + 1.0)

    with nogil:
        for i in range(n):
            for j in range(k):
                vmax = -INFINITY
                for m in range(1, L + 1):
                    resid = r0[i] - sl[i] * m
                    val = m * loc_a[i, j] - lgam[m] - resid * resid * i2d - rate2 * m
                    buf[m] = val
                    if val > vmax:
                        vmax = val
                if vmax == -INFINITY:
                    out[i, j] = -INFINITY
                    continue
                acc = 0.0
                for m in range(1, L + 1):
                    acc += exp(buf[m] - vmax)
                out[i, j] = vmax + log(acc)
    return out


def log_false_zero_sum_negbin(resid0, slope, loc, double dispersion,
                              double resid_sd, double rate, double bound):
    """See ``reference.log_false_zero_sum_negbin``; identical contract."""
    cdef cnp.ndarray[double, ndim=1] r0 = np.ascontiguousarray(resid0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] sl = np.ascontiguousarray(slope, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] loc_a = np.ascontiguousarray(loc, dtype=np.float64)
    cdef Py_ssize_t n = loc_a.shape[0]
    cdef Py_ssize_t k = loc_a.shape[1]
    cdef int L = <int>floor(bound)
    cdef cnp.ndarray[double, ndim=2] out = np.empty((n, k))
    cdef cnp.ndarray[double, ndim=1] lgm = np.empty(L + 1)
    cdef cnp.ndarray[double, ndim=1] lgrm = np.empty(L + 1)
    cdef cnp.ndarray[double, ndim=1] buf = np.empty(L + 1)

    cdef Py_ssize_t i, j
    cdef int m
    cdef double i2d = 0.5 / (resid_sd * resid_sd)
    cdef double rate2 = rate * rate
    cdef double lgr = lgamma(dispersion)
    cdef double log_r = log(dispersion)
    cdef double resid, val, vmax, acc, log_frac

    for m in range(1, L + 1):
        lgm[m] = lgamma(m + 1.0)
        lgrm[m] = lgamma(dispersion + m)

    with nogil:
        for i in range(n):
            for j in range(k):
                # log(mu/(r+mu)) = loc - logaddexp(log_r, loc)
                if log_r > loc_a[i, j]:
                    log_frac = loc_a[i, j] - (log_r + log(1.0 + exp(loc_a[i, j] - log_r)))
                else:
                    log_frac = -log(1.0 + exp(log_r - loc_a[i, j]))
                vmax = -INFINITY
                for m in range(1, L + 1):
                    resid = r0[i] - sl[i] * m
                    val = (lgrm[m] - lgr - lgm[m] + m * log_frac
                           - resid * resid * i2d - rate2 * m)
                    buf[m] = val
                    if val > vmax:
                        vmax = val
                if vmax == -INFINITY:
                    out[i, j] = -INFINITY
                    continue
                acc = 0.0
                for m in range(1, L + 1):
                    acc += exp(buf[m] - vmax)
                out[i, j] = vmax + log(acc)
    return out
