"""NumPy implementation of the per-observation likelihood kernels.

Mirrors the compiled module lcga._ckernels; lcga.kernels picks whichever is
available at import. All functions take C-contiguous float64/int64 arrays
whose observation rows are grouped by subject.

Log-probabilities are floored at LOG_FLOOR (-745, about log of the smallest
positive double) so early optimizer iterations never see -inf; derivative
terms are computed from the unfloored expressions.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr, ndtr

LOG_FLOOR = -745.0
_LOG_SQRT_2PI = 0.9189385332046727
_RATIO_EXP_CAP = 250.0  # caps exp() arguments in ratio terms; keeps BHHH products finite


def _log_phi(z):
    return -0.5 * z * z - _LOG_SQRT_2PI


def _ratio(log_num, log_den):
    """exp(log_num - log_den) with the exponent capped against overflow."""
    return np.exp(np.minimum(log_num - log_den, _RATIO_EXP_CAP))


def cnorm_terms(y, mu, sigma, ymin, ymax, want_derivs):
    """Censored-normal per-observation log-likelihood and derivatives.

    y: (n_obs,) scores; mu: (n_obs, K) class means. Returns (ll, dmu, dls)
    each (n_obs, K); dls is the derivative w.r.t. log(sigma). dmu/dls are
    None when want_derivs is false.
    """
    low = y == ymin
    high = y == ymax
    mid = ~(low | high)

    ll = np.empty_like(mu)
    zl = (ymin - mu[low]) / sigma
    zh = (mu[high] - ymax) / sigma
    zm = (y[mid, None] - mu[mid]) / sigma
    log_cdf_l = log_ndtr(zl)
    log_cdf_h = log_ndtr(zh)
    ll[low] = log_cdf_l
    ll[high] = log_cdf_h
    ll[mid] = _log_phi(zm) - np.log(sigma)

    dmu = dls = None
    if want_derivs:
        dmu = np.empty_like(mu)
        dls = np.empty_like(mu)
        rl = _ratio(_log_phi(zl), log_cdf_l)
        dmu[low] = -rl / sigma
        dls[low] = -zl * rl
        rh = _ratio(_log_phi(zh), log_cdf_h)
        dmu[high] = rh / sigma
        dls[high] = -zh * rh
        dmu[mid] = zm / sigma
        dls[mid] = zm * zm - 1.0

    np.maximum(ll, LOG_FLOOR, out=ll)
    return ll, dmu, dls


def _log_cdf_diff(a, b):
    """log(Phi(b) - Phi(a)) for a < b elementwise, stable in both tails."""
    out = np.empty_like(a)
    lower = b <= 0.0
    upper = a >= 0.0
    straddle = ~(lower | upper)
    with np.errstate(divide="ignore", invalid="ignore"):
        la, lb = log_ndtr(a[lower]), log_ndtr(b[lower])
        out[lower] = lb + np.log1p(-np.exp(la - lb))
        lna, lnb = log_ndtr(-a[upper]), log_ndtr(-b[upper])
        out[upper] = lna + np.log1p(-np.exp(lnb - lna))
    p = ndtr(b[straddle]) - ndtr(a[straddle])
    out[straddle] = np.log(np.maximum(p, 5e-324))
    # zero-width degeneracies map to the floor; nan inputs must propagate
    out = np.where(out == -np.inf, LOG_FLOOR, out)
    return np.where(np.isnan(a) | np.isnan(b), np.nan, out)


def probit_terms(y_cat, mu, eta, want_derivs):
    """Cumulative-probit per-observation log-likelihood and derivatives.

    y_cat: (n_obs,) categories in 1..M; mu: (n_obs, K); eta: (M-1,) strictly
    increasing thresholds. Returns (ll, dmu, deta); deta has shape
    (n_obs, K, M-1) and holds d ll / d eta_l.
    """
    n_obs, K = mu.shape
    M = eta.shape[0] + 1
    first = y_cat == 1
    last = y_cat == M
    mid = ~(first | last)

    ll = np.empty_like(mu)
    x1 = eta[0] - mu[first]
    xM = mu[last] - eta[M - 2]
    ll[first] = log_ndtr(x1)
    ll[last] = log_ndtr(xM)
    cat_mid = y_cat[mid]
    a = eta[cat_mid - 2][:, None] - mu[mid]
    b = eta[cat_mid - 1][:, None] - mu[mid]
    ll[mid] = _log_cdf_diff(a, b)

    dmu = deta = None
    if want_derivs:
        dmu = np.zeros_like(mu)
        deta = np.zeros((n_obs, K, M - 1))
        r1 = _ratio(_log_phi(x1), ll[first])
        dmu[first] = -r1
        deta[first, :, 0] = r1
        rM = _ratio(_log_phi(xM), ll[last])
        dmu[last] = rM
        deta[last, :, M - 2] = -rM
        ra = _ratio(_log_phi(a), ll[mid])
        rb = _ratio(_log_phi(b), ll[mid])
        dmu[mid] = ra - rb
        rows = np.where(mid)[0]
        deta[rows, :, cat_mid - 1] = rb
        deta[rows, :, cat_mid - 2] = -ra

    np.maximum(ll, LOG_FLOOR, out=ll)
    return ll, dmu, deta


def sum_by_subject(values, offsets):
    """Sum contiguous observation blocks: (n_obs, C) -> (n_subjects, C).

    offsets has length n_subjects + 1; block i is offsets[i]:offsets[i+1]
    and is never empty.
    """
    return np.add.reduceat(values, offsets[:-1], axis=0)


# ---------------------------------------------------------------------------
# Fused per-(subject, class) kernels. Scores and times are integers on small
# grids, so the transcendental work collapses to a (time x level x class)
# lookup table followed by gathers and subject reductions. These are what the
# fit loops call; the elementwise functions above remain for scalar
# operations and cross-checks.
# ---------------------------------------------------------------------------

def _reduce_mu_weighted(dmu, U, offsets):
    d1 = U.shape[1]
    return np.stack([sum_by_subject(dmu * U[:, m][:, None], offsets)
                     for m in range(d1)], axis=2)


def cnorm_class_terms(Ug, B, sigma, ymin, ymax, y_levels, t_idx, s_idx,
                      offsets, want_derivs):
    """Censored-normal per-subject-class sums via the level-grid table.

    Ug is the (T, d+1) scaled-time power grid, y_levels the (S,) distinct
    score values, t_idx/s_idx the per-observation grid coordinates. Returns
    (L, D, Dls): log-likelihood sums (n, K), U-weighted d/dmu sums
    (n, K, d+1), and d/dlog(sigma) sums (n, K).
    """
    mu_g = Ug @ B.T                       # (T, K)
    S = y_levels.shape[0]
    y_flat = np.tile(y_levels, mu_g.shape[0])
    mu_flat = np.repeat(mu_g, S, axis=0)  # row t*S + s
    ll_t, dmu_t, dls_t = cnorm_terms(y_flat, mu_flat, sigma, ymin, ymax,
                                     want_derivs)
    combo = t_idx * S + s_idx
    L = sum_by_subject(ll_t[combo], offsets)
    if not want_derivs:
        return L, None, None
    D = _reduce_mu_weighted(dmu_t[combo], Ug[t_idx], offsets)
    return L, D, sum_by_subject(dls_t[combo], offsets)


def probit_class_terms(Ug, B, eta, t_idx, s_idx, offsets, want_derivs):
    """Cumulative-probit per-subject-class sums via the category-grid table.

    s_idx holds categories minus one. Returns (L, D, Deta) with per-subject
    threshold derivative sums (n, K, M-1) in place of the sigma column.
    """
    mu_g = Ug @ B.T
    M = eta.shape[0] + 1
    cat_flat = np.tile(np.arange(1, M + 1, dtype=np.int64), mu_g.shape[0])
    mu_flat = np.repeat(mu_g, M, axis=0)
    ll_t, dmu_t, deta_t = probit_terms(cat_flat, mu_flat, eta, want_derivs)
    combo = t_idx * M + s_idx
    L = sum_by_subject(ll_t[combo], offsets)
    if not want_derivs:
        return L, None, None
    K = B.shape[0]
    deta_obs = deta_t[combo].reshape(t_idx.shape[0], K * (M - 1))
    D = _reduce_mu_weighted(dmu_t[combo], Ug[t_idx], offsets)
    return L, D, sum_by_subject(deta_obs, offsets).reshape(-1, K, M - 1)
