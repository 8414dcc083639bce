# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled likelihood kernels; same contract as lcga._kernels_py.

The hot loops here dominate fit time: every EM sweep / Newton step evaluates
per-observation censored-normal or cumulative-probit log-likelihoods and
derivative terms across all subjects and classes.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, M_SQRT1_2, erfc, exp, expm1, isnan, log, log1p

cnp.import_array()

cdef double LOG_FLOOR = -745.0
cdef double _LOG_SQRT_2PI = 0.9189385332046727
cdef double _RATIO_EXP_CAP = 250.0
cdef double _TINY = 5e-324


cdef inline double _log_phi(double z) noexcept nogil:
    return -0.5 * z * z - _LOG_SQRT_2PI


cdef inline double _ndtr(double z) noexcept nogil:
    return 0.5 * erfc(-z * M_SQRT1_2)


cdef inline double _log_ndtr(double z) noexcept nogil:
    # erfc is accurate and non-underflowing down to z ~ -30; switch to the
    # Mills-ratio asymptotic series beyond that (error < 3e-16 at z = -30).
    cdef double t, series
    if z > 6.0:
        return log1p(-0.5 * erfc(z * M_SQRT1_2))
    if z >= -30.0:
        return log(0.5 * erfc(-z * M_SQRT1_2))
    t = 1.0 / (z * z)
    series = 1.0 - t * (1.0 - 3.0 * t * (1.0 - 5.0 * t *
             (1.0 - 7.0 * t * (1.0 - 9.0 * t * (1.0 - 11.0 * t)))))
    return _log_phi(z) - log(-z) + log(series)


cdef inline double _ratio(double log_num, double log_den) noexcept nogil:
    cdef double arg = log_num - log_den
    if arg > _RATIO_EXP_CAP:
        arg = _RATIO_EXP_CAP
    return exp(arg)


cdef inline double _log_cdf_diff(double a, double b) noexcept nogil:
    """log(Phi(b) - Phi(a)) for a < b; -inf/nan degeneracies map to the floor."""
    cdef double la, lb, out, p
    if isnan(a) or isnan(b):
        return a + b  # propagate nan
    if b <= 0.0:
        la = _log_ndtr(a)
        lb = _log_ndtr(b)
        out = lb + log1p(-exp(la - lb))
    elif a >= 0.0:
        la = _log_ndtr(-a)
        lb = _log_ndtr(-b)
        out = la + log1p(-exp(lb - la))
    else:
        p = _ndtr(b) - _ndtr(a)
        if p < _TINY:
            p = _TINY
        out = log(p)
    if isnan(out) or out == -INFINITY:
        return LOG_FLOOR
    return out


def cnorm_terms(const double[::1] y, const double[:, ::1] mu, double sigma,
                double ymin, double ymax, bint want_derivs):
    """Censored-normal per-observation log-likelihood and derivative terms."""
    cdef Py_ssize_t n_obs = mu.shape[0]
    cdef Py_ssize_t K = mu.shape[1]
    ll_arr = np.empty((n_obs, K))
    cdef double[:, ::1] ll = ll_arr
    dmu_arr = dls_arr = None
    cdef double[:, ::1] dmu = ll  # placeholder views; rebound when needed
    cdef double[:, ::1] dls = ll
    if want_derivs:
        dmu_arr = np.empty((n_obs, K))
        dls_arr = np.empty((n_obs, K))
        dmu = dmu_arr
        dls = dls_arr

    cdef Py_ssize_t i, k
    cdef double yv, z, lcdf, r, v
    cdef double log_sigma = log(sigma)
    with nogil:
        for i in range(n_obs):
            yv = y[i]
            for k in range(K):
                if yv == ymin:
                    z = (ymin - mu[i, k]) / sigma
                    lcdf = _log_ndtr(z)
                    v = lcdf
                    if want_derivs:
                        r = _ratio(_log_phi(z), lcdf)
                        dmu[i, k] = -r / sigma
                        dls[i, k] = -z * r
                elif yv == ymax:
                    z = (mu[i, k] - ymax) / sigma
                    lcdf = _log_ndtr(z)
                    v = lcdf
                    if want_derivs:
                        r = _ratio(_log_phi(z), lcdf)
                        dmu[i, k] = r / sigma
                        dls[i, k] = -z * r
                else:
                    z = (yv - mu[i, k]) / sigma
                    v = _log_phi(z) - log_sigma
                    if want_derivs:
                        dmu[i, k] = z / sigma
                        dls[i, k] = z * z - 1.0
                ll[i, k] = LOG_FLOOR if v < LOG_FLOOR else v
    return ll_arr, dmu_arr, dls_arr


def probit_terms(const cnp.int64_t[::1] y_cat, const double[:, ::1] mu, const double[::1] eta,
                 bint want_derivs):
    """Cumulative-probit per-observation log-likelihood and derivative terms."""
    cdef Py_ssize_t n_obs = mu.shape[0]
    cdef Py_ssize_t K = mu.shape[1]
    cdef Py_ssize_t M = eta.shape[0] + 1
    ll_arr = np.empty((n_obs, K))
    cdef double[:, ::1] ll = ll_arr
    dmu_arr = deta_arr = None
    cdef double[:, ::1] dmu = ll
    cdef double[:, :, ::1] deta
    if want_derivs:
        dmu_arr = np.empty((n_obs, K))
        deta_arr = np.zeros((n_obs, K, M - 1))
        dmu = dmu_arr
        deta = deta_arr

    cdef Py_ssize_t i, k
    cdef cnp.int64_t cat
    cdef double m, x, a, b, v, r, ra, rb
    with nogil:
        for i in range(n_obs):
            cat = y_cat[i]
            for k in range(K):
                m = mu[i, k]
                if cat == 1:
                    x = eta[0] - m
                    v = _log_ndtr(x)
                    if want_derivs:
                        r = _ratio(_log_phi(x), v)
                        dmu[i, k] = -r
                        deta[i, k, 0] = r
                elif cat == M:
                    x = m - eta[M - 2]
                    v = _log_ndtr(x)
                    if want_derivs:
                        r = _ratio(_log_phi(x), v)
                        dmu[i, k] = r
                        deta[i, k, M - 2] = -r
                else:
                    a = eta[cat - 2] - m
                    b = eta[cat - 1] - m
                    v = _log_cdf_diff(a, b)
                    if want_derivs:
                        ra = _ratio(_log_phi(a), v)
                        rb = _ratio(_log_phi(b), v)
                        dmu[i, k] = ra - rb
                        deta[i, k, cat - 1] = rb
                        deta[i, k, cat - 2] = -ra
                ll[i, k] = LOG_FLOOR if v < LOG_FLOOR else v
    return ll_arr, dmu_arr, deta_arr


def sum_by_subject(const double[:, ::1] values, const cnp.int64_t[::1] offsets):
    """Sum contiguous observation blocks: (n_obs, C) -> (n_subjects, C)."""
    cdef Py_ssize_t n_subj = offsets.shape[0] - 1
    cdef Py_ssize_t C = values.shape[1]
    out_arr = np.zeros((n_subj, C))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, c
    with nogil:
        for i in range(n_subj):
            for j in range(offsets[i], offsets[i + 1]):
                for c in range(C):
                    out[i, c] += values[j, c]
    return out_arr


# ---------------------------------------------------------------------------
# Fused per-(subject, class) kernels. Scores and times are integers on small
# grids, so the transcendental work collapses to a (time x level x class)
# lookup table followed by gathers and subject reductions.
# ---------------------------------------------------------------------------

def cnorm_class_terms(const double[:, ::1] Ug, const double[:, ::1] B,
                      double sigma, double ymin, double ymax,
                      const double[::1] y_levels,
                      const cnp.int64_t[::1] t_idx,
                      const cnp.int64_t[::1] s_idx,
                      const cnp.int64_t[::1] offsets, bint want_derivs):
    """Censored-normal per-subject-class sums via the level-grid table.

    Ug is the (T, d+1) scaled-time power grid, y_levels the (S,) distinct
    score values, t_idx/s_idx the per-observation grid coordinates. Returns
    (L, D, Dls): log-likelihood sums (n, K), U-weighted d/dmu sums
    (n, K, d+1), and d/dlog(sigma) sums (n, K).
    """
    cdef Py_ssize_t T = Ug.shape[0]
    cdef Py_ssize_t d1 = Ug.shape[1]
    cdef Py_ssize_t K = B.shape[0]
    cdef Py_ssize_t S = y_levels.shape[0]
    cdef Py_ssize_t n_subj = offsets.shape[0] - 1

    tab_ll_arr = np.empty((T, S, K))
    tab_dmu_arr = np.empty((T, S, K)) if want_derivs else None
    tab_dls_arr = np.empty((T, S, K)) if want_derivs else None
    cdef double[:, :, ::1] tab_ll = tab_ll_arr
    cdef double[:, :, ::1] tab_dmu = tab_ll
    cdef double[:, :, ::1] tab_dls = tab_ll
    if want_derivs:
        tab_dmu = tab_dmu_arr
        tab_dls = tab_dls_arr

    L_arr = np.zeros((n_subj, K))
    cdef double[:, ::1] L = L_arr
    D_arr = Dls_arr = None
    cdef double[:, :, ::1] D
    cdef double[:, ::1] Dls = L
    if want_derivs:
        D_arr = np.zeros((n_subj, K, d1))
        Dls_arr = np.zeros((n_subj, K))
        D = D_arr
        Dls = Dls_arr

    cdef Py_ssize_t t, si, i, j, k, m
    cdef double yv, muv, z, lcdf, r, v, dmu_v
    cdef double log_sigma = log(sigma)
    with nogil:
        for t in range(T):
            for k in range(K):
                muv = 0.0
                for m in range(d1):
                    muv += B[k, m] * Ug[t, m]
                for si in range(S):
                    yv = y_levels[si]
                    dmu_v = 0.0
                    if yv == ymin:
                        z = (ymin - muv) / sigma
                        lcdf = _log_ndtr(z)
                        v = lcdf
                        if want_derivs:
                            r = _ratio(_log_phi(z), lcdf)
                            tab_dmu[t, si, k] = -r / sigma
                            tab_dls[t, si, k] = -z * r
                    elif yv == ymax:
                        z = (muv - ymax) / sigma
                        lcdf = _log_ndtr(z)
                        v = lcdf
                        if want_derivs:
                            r = _ratio(_log_phi(z), lcdf)
                            tab_dmu[t, si, k] = r / sigma
                            tab_dls[t, si, k] = -z * r
                    else:
                        z = (yv - muv) / sigma
                        v = _log_phi(z) - log_sigma
                        if want_derivs:
                            tab_dmu[t, si, k] = z / sigma
                            tab_dls[t, si, k] = z * z - 1.0
                    tab_ll[t, si, k] = LOG_FLOOR if v < LOG_FLOOR else v
        for i in range(n_subj):
            for j in range(offsets[i], offsets[i + 1]):
                t = t_idx[j]
                si = s_idx[j]
                for k in range(K):
                    L[i, k] += tab_ll[t, si, k]
                if want_derivs:
                    for k in range(K):
                        dmu_v = tab_dmu[t, si, k]
                        for m in range(d1):
                            D[i, k, m] += dmu_v * Ug[t, m]
                        Dls[i, k] += tab_dls[t, si, k]
    return L_arr, D_arr, Dls_arr


def probit_class_terms(const double[:, ::1] Ug, const double[:, ::1] B,
                       const double[::1] eta,
                       const cnp.int64_t[::1] t_idx,
                       const cnp.int64_t[::1] s_idx,
                       const cnp.int64_t[::1] offsets, bint want_derivs):
    """Cumulative-probit per-subject-class sums via the category-grid table.

    s_idx holds categories minus one. Returns (L, D, Deta) with per-subject
    threshold derivative sums (n, K, M-1) in place of the sigma column.
    """
    cdef Py_ssize_t T = Ug.shape[0]
    cdef Py_ssize_t d1 = Ug.shape[1]
    cdef Py_ssize_t K = B.shape[0]
    cdef Py_ssize_t M = eta.shape[0] + 1
    cdef Py_ssize_t n_subj = offsets.shape[0] - 1

    tab_ll_arr = np.empty((T, M, K))
    tab_dmu_arr = np.empty((T, M, K)) if want_derivs else None
    # per-cell threshold derivatives live on at most two entries
    tab_dlo_arr = np.zeros((T, M, K)) if want_derivs else None
    tab_dhi_arr = np.zeros((T, M, K)) if want_derivs else None
    cdef double[:, :, ::1] tab_ll = tab_ll_arr
    cdef double[:, :, ::1] tab_dmu = tab_ll
    cdef double[:, :, ::1] tab_dlo = tab_ll
    cdef double[:, :, ::1] tab_dhi = tab_ll
    if want_derivs:
        tab_dmu = tab_dmu_arr
        tab_dlo = tab_dlo_arr
        tab_dhi = tab_dhi_arr

    L_arr = np.zeros((n_subj, K))
    cdef double[:, ::1] L = L_arr
    D_arr = Deta_arr = None
    cdef double[:, :, ::1] D
    cdef double[:, :, ::1] Deta
    if want_derivs:
        D_arr = np.zeros((n_subj, K, d1))
        Deta_arr = np.zeros((n_subj, K, M - 1))
        D = D_arr
        Deta = Deta_arr

    cdef Py_ssize_t t, si, i, j, k, m, cat
    cdef double muv, x, a, b, v, r, ra, rb, dmu_v
    with nogil:
        for t in range(T):
            for k in range(K):
                muv = 0.0
                for m in range(d1):
                    muv += B[k, m] * Ug[t, m]
                for si in range(M):
                    cat = si + 1
                    if cat == 1:
                        x = eta[0] - muv
                        v = _log_ndtr(x)
                        if want_derivs:
                            r = _ratio(_log_phi(x), v)
                            tab_dmu[t, si, k] = -r
                            tab_dhi[t, si, k] = r   # d/d eta_1
                    elif cat == M:
                        x = muv - eta[M - 2]
                        v = _log_ndtr(x)
                        if want_derivs:
                            r = _ratio(_log_phi(x), v)
                            tab_dmu[t, si, k] = r
                            tab_dlo[t, si, k] = -r  # d/d eta_{M-1}
                    else:
                        a = eta[cat - 2] - muv
                        b = eta[cat - 1] - muv
                        v = _log_cdf_diff(a, b)
                        if want_derivs:
                            ra = _ratio(_log_phi(a), v)
                            rb = _ratio(_log_phi(b), v)
                            tab_dmu[t, si, k] = ra - rb
                            tab_dhi[t, si, k] = rb  # d/d eta_{cat-1}
                            tab_dlo[t, si, k] = -ra  # d/d eta_{cat-2}
                    tab_ll[t, si, k] = LOG_FLOOR if v < LOG_FLOOR else v
        for i in range(n_subj):
            for j in range(offsets[i], offsets[i + 1]):
                t = t_idx[j]
                si = s_idx[j]
                cat = si + 1
                for k in range(K):
                    L[i, k] += tab_ll[t, si, k]
                if want_derivs:
                    for k in range(K):
                        dmu_v = tab_dmu[t, si, k]
                        for m in range(d1):
                            D[i, k, m] += dmu_v * Ug[t, m]
                        if cat == 1:
                            Deta[i, k, 0] += tab_dhi[t, si, k]
                        elif cat == M:
                            Deta[i, k, M - 2] += tab_dlo[t, si, k]
                        else:
                            Deta[i, k, cat - 1] += tab_dhi[t, si, k]
                            Deta[i, k, cat - 2] += tab_dlo[t, si, k]
    return L_arr, D_arr, Deta_arr
