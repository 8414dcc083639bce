"""Mixture log-likelihood and analytic gradients for both outcome families.

Class-k means are polynomials in scaled time: mu = sum_m B[k][m] * u^m with
u = time_scale * t. Dataset-level operations use time_scale = 1/max_time so
polynomial terms stay well-conditioned; the scale is recorded on fit results
for back-transformation.

The flat gradient layout matches types.param_layout: membership intercepts,
membership slopes (row-major, covariates on only), trajectory coefficients
(row-major, first class constant dropped for probit), then log(sigma) or the
raw thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from . import _kernels_py, kernels
from .errors import (DimensionError, InputDataError, NonFiniteLoglikError,
                     ParameterDomainError)
from .types import (CensoredNormal, CumulativeProbit, LongitudinalDataset,
                    ModelSpec, ParameterSet, SubjectRecord, param_layout)

_LOG_SQRT_2PI = 0.9189385332046727
LOG_FLOOR = _kernels_py.LOG_FLOOR


def default_time_scale(data: LongitudinalDataset) -> float:
    return 1.0 / data.max_time


# ---------------------------------------------------------------------------
# Scalar per-observation operations
# ---------------------------------------------------------------------------

def class_membership_probs(params: ParameterSet, z, spec: ModelSpec) -> np.ndarray:
    """Multinomial-logit class probabilities for one covariate vector.

    The last class is the reference with exponent zero; computed with
    max-subtraction so extreme logits cannot overflow.
    """
    z = np.asarray(z, dtype=np.float64)
    K = spec.n_classes
    if params.membership_slopes.shape[1] != z.size:
        raise DimensionError("covariates", f"length {params.membership_slopes.shape[1]}",
                             z.size)
    params.validate_for(spec, z.size)
    if K == 1:
        return np.ones(1)
    logits = np.zeros(K)
    logits[:-1] = params.membership_intercepts + params.membership_slopes @ z
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def cnorm_obs_loglik(y: float, mu: float, sigma: float, ymin: float, ymax: float) -> float:
    """Censored-normal log-density of one observation.

    Point mass log(Phi) at the censoring bounds, scaled normal density
    between them; tail evaluation goes through the stable log-CDF and is
    floored at LOG_FLOOR.
    """
    if sigma <= 0:
        raise ParameterDomainError(f"sigma must be > 0, got {sigma}")
    if not (ymin <= y <= ymax):
        raise ParameterDomainError(f"score {y} outside censoring bounds [{ymin}, {ymax}]")
    if y == ymin:
        ll = float(log_ndtr((ymin - mu) / sigma))
    elif y == ymax:
        ll = float(log_ndtr((mu - ymax) / sigma))
    else:
        z = (y - mu) / sigma
        ll = -0.5 * z * z - _LOG_SQRT_2PI - math.log(sigma)
    return max(ll, LOG_FLOOR)


def probit_category_probs(eta, mu: float) -> np.ndarray:
    """Category probabilities (Phi(eta_1 - mu), ..., 1 - Phi(eta_{M-1} - mu)).

    Entries are clipped at zero against rounding; the sum telescopes to 1.
    """
    eta = np.asarray(eta, dtype=np.float64)
    if eta.ndim != 1 or eta.size < 1:
        raise DimensionError("eta", "1-d vector of length >= 1", eta.shape)
    if np.any(np.diff(eta) <= 0):
        raise ParameterDomainError(f"thresholds must be strictly increasing: {eta}")
    cdf = np.concatenate([[0.0], ndtr(eta - mu), [1.0]])
    return np.clip(np.diff(cdf), 0.0, None)


def probit_obs_loglik(category: int, mu: float, eta) -> float:
    """Log-probability of one ordinal category, stable in both tails."""
    eta = np.asarray(eta, dtype=np.float64)
    M = eta.size + 1
    if not (1 <= category <= M):
        raise InputDataError(f"category {category} outside 1..{M}")
    ll, _, _ = _kernels_py.probit_terms(np.array([category], dtype=np.int64),
                                        np.array([[mu]], dtype=np.float64),
                                        eta, False)
    return float(ll[0, 0])


def series_loglik_given_class(spec: ModelSpec, params: ParameterSet,
                              subject: SubjectRecord, k: int,
                              time_scale: float = 1.0) -> float:
    """Sum of the subject's per-observation log-likelihoods under class k.

    Observations are conditionally independent given the class. Dataset-wide
    operations pass time_scale = 1/max_time; the default leaves times raw.
    """
    K = spec.n_classes
    if not (0 <= k < K):
        raise ParameterDomainError(f"class index {k} outside 0..{K - 1}")
    coeffs = params.trajectory_coeffs[k]
    total = 0.0
    if isinstance(spec.family, CensoredNormal):
        fam = spec.family
        for t, y in zip(subject.times, subject.scores):
            u = t * time_scale
            mu = sum(c * u ** m for m, c in enumerate(coeffs))
            total += cnorm_obs_loglik(y, mu, params.sigma, fam.min, fam.max)
    else:
        eta = params.thresholds
        for t, y in zip(subject.times, subject.scores):
            u = t * time_scale
            mu = sum(c * u ** m for m, c in enumerate(coeffs))
            total += probit_obs_loglik(y, mu, eta)
    return total


# ---------------------------------------------------------------------------
# Packed arrays (cached per dataset) and bulk evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PackedData:
    """Flat observation arrays grouped by subject, shared by both kernel
    backends. Times and scores live on integer grids, so observations are
    also indexed into the (time, level) lookup tables the kernels build."""

    y: np.ndarray          # (n_obs,) float64 scores
    y_int: np.ndarray      # (n_obs,) int64 scores
    times: np.ndarray      # (n_obs,) float64 raw periods
    offsets: np.ndarray    # (n_subjects + 1,) int64 block boundaries
    Z: np.ndarray          # (n_subjects, p) covariates
    t_idx: np.ndarray      # (n_obs,) int64 period minus one
    s_idx: np.ndarray      # (n_obs,) int64 score minus score_min
    y_levels: np.ndarray   # (S,) float64 distinct score values, low..high
    grid_times: np.ndarray  # (T,) float64 periods 1..max_time
    n_obs: int


def packed(data: LongitudinalDataset) -> PackedData:
    try:
        return data._packed_cache
    except AttributeError:
        pass
    scores, times, offsets = [], [], [0]
    for subj in data.subjects:
        scores.extend(subj.scores)
        times.extend(subj.times)
        offsets.append(offsets[-1] + len(subj))
    y = np.asarray(scores, dtype=np.float64)
    y_int = np.asarray(scores, dtype=np.int64)
    t = np.asarray(times, dtype=np.float64)
    lo, hi = data.score_bounds
    pk = PackedData(y=y, y_int=y_int, times=t,
                    offsets=np.asarray(offsets, dtype=np.int64),
                    Z=np.asarray([s.covariates for s in data.subjects],
                                 dtype=np.float64),
                    t_idx=np.asarray(times, dtype=np.int64) - 1,
                    s_idx=y_int - lo,
                    y_levels=np.arange(lo, hi + 1, dtype=np.float64),
                    grid_times=np.arange(1, data.max_time + 1, dtype=np.float64),
                    n_obs=len(scores))
    for name in ("y", "y_int", "times", "offsets", "Z", "t_idx", "s_idx",
                 "y_levels", "grid_times"):
        getattr(pk, name).flags.writeable = False
    object.__setattr__(data, "_packed_cache", pk)
    return pk


def time_powers(times: np.ndarray, poly_order: int, time_scale: float) -> np.ndarray:
    """Design matrix of scaled-time powers, one row per input time."""
    u = times * time_scale
    U = np.empty((times.shape[0], poly_order + 1))
    U[:, 0] = 1.0
    for m in range(1, poly_order + 1):
        U[:, m] = U[:, m - 1] * u
    return U


def grid_powers(pk: PackedData, poly_order: int, time_scale: float) -> np.ndarray:
    """Scaled-time power grid over periods 1..T, (T, poly_order + 1)."""
    return time_powers(pk.grid_times, poly_order, time_scale)


def _check_family_data(spec: ModelSpec, data: LongitudinalDataset):
    lo, hi = data.score_bounds
    if isinstance(spec.family, CumulativeProbit):
        M = spec.family.n_categories
        if (lo, hi) != (1, M):
            raise DimensionError("family.n_categories",
                                 f"dataset score bounds (1, {M})", (lo, hi))
    else:
        if lo < spec.family.min or hi > spec.family.max:
            raise DimensionError("family censoring bounds",
                                 f"cover dataset score bounds ({lo}, {hi})",
                                 (spec.family.min, spec.family.max))


def family_class_terms(spec: ModelSpec, pk: PackedData, Ug: np.ndarray,
                       B: np.ndarray, scale_param, want_derivs: bool):
    """Per-subject-class log-likelihood sums and derivative sums via the
    active kernel backend (the fused hot path).

    Ug is the time-power grid from grid_powers. scale_param is sigma for
    CNORM or the threshold vector eta for probit. Returns (L, D, Dscale):
    L is (n, K); D is the U-weighted d/dmu sums (n, K, d+1); Dscale is the
    d/dlog(sigma) sums (n, K) or the threshold derivative sums (n, K, M-1).
    """
    if isinstance(spec.family, CensoredNormal):
        return kernels.cnorm_class_terms(Ug, B, scale_param,
                                         float(spec.family.min),
                                         float(spec.family.max),
                                         pk.y_levels, pk.t_idx, pk.s_idx,
                                         pk.offsets, want_derivs)
    return kernels.probit_class_terms(Ug, B, scale_param, pk.t_idx, pk.s_idx,
                                      pk.offsets, want_derivs)


def _scale_param(spec: ModelSpec, params: ParameterSet):
    return params.sigma if isinstance(spec.family, CensoredNormal) \
        else params.thresholds


def membership_log_matrix(params: ParameterSet, Z: np.ndarray, K: int) -> np.ndarray:
    """Row-wise log class-membership probabilities, (n, K)."""
    n = Z.shape[0]
    if K == 1:
        return np.zeros((n, 1))
    A = np.zeros((n, K))
    A[:, :-1] = params.membership_intercepts + Z @ params.membership_slopes.T
    A -= A.max(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        A -= np.log(np.exp(A).sum(axis=1, keepdims=True))
    return A


@dataclass(frozen=True)
class MixtureParts:
    """Intermediates of one mixture log-likelihood evaluation."""

    loglik: float
    subject_logliks: np.ndarray  # (n,)
    class_logliks: np.ndarray    # (n, K) conditional log-likelihoods
    log_membership: np.ndarray   # (n, K)

    def posterior(self) -> np.ndarray:
        return np.exp(self.log_membership + self.class_logliks
                      - self.subject_logliks[:, None])


def class_loglik_matrix(spec: ModelSpec, params: ParameterSet,
                        data: LongitudinalDataset, time_scale=None) -> np.ndarray:
    """(n, K) matrix of per-subject conditional log-likelihoods."""
    _check_family_data(spec, data)
    pk = packed(data)
    if time_scale is None:
        time_scale = default_time_scale(data)
    Ug = grid_powers(pk, spec.poly_order, time_scale)
    L, _, _ = family_class_terms(spec, pk, Ug, params.trajectory_coeffs,
                                 _scale_param(spec, params), False)
    return L


def mixture_parts(spec: ModelSpec, params: ParameterSet,
                  data: LongitudinalDataset, time_scale=None) -> MixtureParts:
    pk = packed(data)
    L = class_loglik_matrix(spec, params, data, time_scale)
    logpi = membership_log_matrix(params, pk.Z, spec.n_classes)
    G = logpi + L
    m = G.max(axis=1)
    ll_i = m + np.log(np.exp(G - m[:, None]).sum(axis=1))
    if not np.all(np.isfinite(ll_i)):
        bad = int(np.flatnonzero(~np.isfinite(ll_i))[0])
        raise NonFiniteLoglikError(bad)
    return MixtureParts(loglik=float(ll_i.sum()), subject_logliks=ll_i,
                        class_logliks=L, log_membership=logpi)


def mixture_loglik(spec: ModelSpec, params: ParameterSet,
                   data: LongitudinalDataset) -> float:
    """Observed-data log-likelihood of the finite mixture (log-sum-exp over
    classes, summed over subjects)."""
    params.validate_for(spec, data.covariate_dim)
    return mixture_parts(spec, params, data).loglik


# ---------------------------------------------------------------------------
# Gradient / per-subject score assembly
# ---------------------------------------------------------------------------

def _membership_scores(W: np.ndarray, logpi: np.ndarray, Z: np.ndarray,
                       spec: ModelSpec) -> np.ndarray:
    """Per-subject scores for the membership block, (n, n_theta + n_slopes)."""
    K = spec.n_classes
    if K == 1:
        return np.zeros((Z.shape[0], 0))
    resid = W[:, :-1] - np.exp(logpi[:, :-1])
    if not spec.membership_covariates:
        return resid
    cross = resid[:, :, None] * Z[:, None, :]
    return np.concatenate([resid, cross.reshape(Z.shape[0], -1)], axis=1)


def traj_scale_scores(spec: ModelSpec, raw_thresholds, W: np.ndarray,
                      D: np.ndarray, Dscale) -> np.ndarray:
    """Per-subject scores for trajectory coefficients and sigma/thresholds,
    assembled from the fused kernel's per-subject derivative sums."""
    n, K, d1 = D.shape
    score_B = (W[:, :, None] * D).reshape(n, K * d1)
    if spec.is_probit:
        score_B = score_B[:, 1:]  # B[0][0] pinned at zero
        g_eta = (W[:, :, None] * Dscale).sum(axis=1)
        score_a = np.cumsum(g_eta[:, ::-1], axis=1)[:, ::-1]
        if raw_thresholds.shape[0] > 1:
            score_a[:, 1:] *= np.exp(raw_thresholds[1:])
        return np.concatenate([score_B, score_a], axis=1)
    score_s = (W * Dscale).sum(axis=1)
    return np.concatenate([score_B, score_s[:, None]], axis=1)


def loglik_and_scores(spec: ModelSpec, params: ParameterSet,
                      data: LongitudinalDataset, time_scale=None):
    """Observed-data log-likelihood with per-subject score rows.

    Returns (loglik, grad, scores) where scores is (n, P) in the flat layout
    and grad = scores.sum(axis=0).
    """
    _check_family_data(spec, data)
    pk = packed(data)
    if time_scale is None:
        time_scale = default_time_scale(data)
    Ug = grid_powers(pk, spec.poly_order, time_scale)
    L, D, Dscale = family_class_terms(spec, pk, Ug, params.trajectory_coeffs,
                                      _scale_param(spec, params), True)
    logpi = membership_log_matrix(params, pk.Z, spec.n_classes)
    G = logpi + L
    m = G.max(axis=1)
    ll_i = m + np.log(np.exp(G - m[:, None]).sum(axis=1))
    if not np.all(np.isfinite(ll_i)):
        bad = int(np.flatnonzero(~np.isfinite(ll_i))[0])
        raise NonFiniteLoglikError(bad)
    W = np.exp(G - ll_i[:, None])
    S = np.concatenate([_membership_scores(W, logpi, pk.Z, spec),
                        traj_scale_scores(spec, params.raw_thresholds, W, D,
                                          Dscale)],
                       axis=1)
    return float(ll_i.sum()), S.sum(axis=0), S


def mixture_loglik_grad(spec: ModelSpec, params: ParameterSet,
                        data: LongitudinalDataset) -> np.ndarray:
    """Analytic gradient of mixture_loglik in the unconstrained flat layout."""
    params.validate_for(spec, data.covariate_dim)
    _, grad, _ = loglik_and_scores(spec, params, data)
    return grad
