"""Maximum-likelihood fitting via multi-start EM and damped quasi-Newton.

Both backends work on the unconstrained flat parameter vector from
types.param_layout. Newton-type steps use the outer product of per-subject
score rows as the Hessian approximation (positive semidefinite by
construction), damped with a ridge that grows on rejected steps and shrinks
back to its floor on accepted ones.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
from scipy.special import ndtri

from . import likelihood as lk
from .errors import LcgaError, NonFiniteLoglikError
from .types import (CensoredNormal, CumulativeProbit, LongitudinalDataset,
                    ModelSpec, ParameterSet, n_free_params, pack_params,
                    param_layout, thresholds_from_raw, unpack_params)

STATUS_CONVERGED = "Converged"
STATUS_MAX_ITERATIONS = "MaxIterations"
STATUS_FALSE_CONVERGENCE = "FalseConvergence"

_MONOTONE_SLACK = 1e-10
_DAMPING_INIT = 1e-3
_DAMPING_FLOOR = 1e-8
_DAMPING_MAX = 1e12


@dataclass(frozen=True)
class LoglikOnly:
    """Stop when the log-likelihood improvement falls below tol_ll."""

    tol_ll: float = 1e-8


@dataclass(frozen=True)
class Triple:
    """Stop only when parameter, log-likelihood, and scaled-gradient criteria
    hold simultaneously (the stricter stopping rule)."""

    tol_param: float = 1e-6
    tol_ll: float = 1e-8
    tol_grad: float = 1e-4


Convergence = Union[LoglikOnly, Triple]


@dataclass(frozen=True)
class FitConfig:
    n_starts: int = 20
    max_iter: int = 500
    mode: str = "em"  # "em" or "direct"
    convergence: Convergence = LoglikOnly()
    perturbation_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_starts < 1:
            raise LcgaError(f"n_starts must be >= 1, got {self.n_starts}")
        if self.max_iter < 1:
            raise LcgaError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.mode not in ("em", "direct"):
            raise LcgaError(f"mode must be 'em' or 'direct', got {self.mode!r}")
        tols = (self.convergence.tol_ll,) if isinstance(self.convergence, LoglikOnly) \
            else (self.convergence.tol_param, self.convergence.tol_ll,
                  self.convergence.tol_grad)
        if any(t <= 0 for t in tols):
            raise LcgaError("convergence tolerances must be > 0")


@dataclass
class FitResult:
    params: ParameterSet
    loglik: float
    n_params: int
    converged: bool
    convergence_detail: dict
    n_iter: int
    start_index_of_best: int
    status: str
    wall_time: float
    time_scale: float
    loglik_trace: tuple = ()
    start_statuses: tuple = ()


def _grad_tol(conv: Convergence) -> float:
    return conv.tol_grad if isinstance(conv, Triple) else 1e-4


def _scaled_grad_norm(grad, loglik) -> float:
    return float(np.max(np.abs(grad)) / (1.0 + abs(loglik)))


def _check_convergence(conv, dll, dparam, gscaled):
    """Per-criterion booleans plus the overall verdict."""
    crit = {"loglik": abs(dll) <= conv.tol_ll}
    if isinstance(conv, Triple):
        crit["param"] = dparam <= conv.tol_param
        crit["gradient"] = gscaled is not None and gscaled <= conv.tol_grad
    return all(crit.values()), crit


# ---------------------------------------------------------------------------
# Objective wrapper
# ---------------------------------------------------------------------------

class _Objective:
    """Mixture log-likelihood on the flat vector, with failure -> -inf."""

    def __init__(self, spec: ModelSpec, data: LongitudinalDataset):
        self.spec = spec
        self.data = data
        self.p = data.covariate_dim
        self.layout = param_layout(spec, self.p)
        self.time_scale = lk.default_time_scale(data)

    def unpack(self, x):
        return unpack_params(x, self.spec, self.p)

    def parts(self, x):
        if not np.all(np.isfinite(x)):
            return None
        try:
            return lk.mixture_parts(self.spec, self.unpack(x), self.data,
                                    self.time_scale)
        except (NonFiniteLoglikError, FloatingPointError):
            return None

    def value(self, x) -> float:
        parts = self.parts(x)
        return -math.inf if parts is None else parts.loglik

    def value_grad_scores(self, x):
        if not np.all(np.isfinite(x)):
            return -math.inf, None, None
        try:
            return lk.loglik_and_scores(self.spec, self.unpack(x), self.data,
                                        self.time_scale)
        except (NonFiniteLoglikError, FloatingPointError):
            return -math.inf, None, None


def _solve_ridge(H, g, lam):
    try:
        return np.linalg.solve(H + lam * np.eye(H.shape[0]), g)
    except np.linalg.LinAlgError:
        return None


# ---------------------------------------------------------------------------
# Direct backend: Marquardt-damped Newton on the observed-data loglik
# ---------------------------------------------------------------------------

def direct_fit(spec: ModelSpec, data: LongitudinalDataset, start: ParameterSet,
               config: FitConfig) -> FitResult:
    """Maximize the mixture log-likelihood by damped Newton-type steps.

    Only steps that do not decrease the objective are accepted; the ridge is
    multiplied by 10 on rejection and divided by 10 (down to its floor) on
    acceptance. Non-finite proposals are repaired by re-centering at the last
    good point with 10x damping, at most three times in a row.
    """
    t0 = time.perf_counter()
    obj = _Objective(spec, data)
    conv = config.convergence
    x = pack_params(start, spec)
    ll, grad, scores = obj.value_grad_scores(x)
    detail = {"criteria": {}, "deltas": {}}
    trace = [ll]
    status = STATUS_MAX_ITERATIONS
    n_iter = 0
    lam = _DAMPING_INIT
    bad_streak = 0

    if not math.isfinite(ll):
        status = STATUS_FALSE_CONVERGENCE
        detail["reason"] = "non-finite log-likelihood at the starting point"
        return _finish(obj, x, ll, detail, 0, status, t0, tuple(trace))

    for n_iter in range(1, config.max_iter + 1):
        H = scores.T @ scores
        step = _solve_ridge(H, grad, lam)
        if step is None:
            lam = min(lam * 10.0, _DAMPING_MAX)
            continue
        x_try = x + step
        ll_try = obj.value(x_try)
        if not math.isfinite(ll_try):
            bad_streak += 1
            lam = min(lam * 10.0, _DAMPING_MAX)
            if bad_streak > 3:
                status = STATUS_FALSE_CONVERGENCE
                detail["reason"] = "non-finite value survived three repair attempts"
                break
            continue
        if ll_try >= ll:
            bad_streak = 0
            dll = ll_try - ll
            dparam = float(np.max(np.abs(step)))
            x = x_try
            ll, grad, scores = obj.value_grad_scores(x)
            trace.append(ll)
            lam = max(_DAMPING_FLOOR, lam / 10.0)
            gscaled = _scaled_grad_norm(grad, ll)
            done, crit = _check_convergence(conv, dll, dparam, gscaled)
            detail["criteria"] = crit
            detail["deltas"] = {"loglik": dll, "param": dparam,
                                "gradient_scaled": gscaled}
            if done:
                status = STATUS_CONVERGED
                break
        else:
            lam = lam * 10.0
            if lam > _DAMPING_MAX:
                gscaled = _scaled_grad_norm(grad, ll)
                detail["deltas"]["gradient_scaled"] = gscaled
                if gscaled <= _grad_tol(conv):
                    status = STATUS_CONVERGED
                else:
                    status = STATUS_FALSE_CONVERGENCE
                    detail["reason"] = ("no improving step found with gradient "
                                        "above tolerance")
                break

    detail["final_damping"] = lam
    return _finish(obj, x, ll, detail, n_iter, status, t0, tuple(trace))


def _finish(obj, x, ll, detail, n_iter, status, t0, trace) -> FitResult:
    return FitResult(params=obj.unpack(x), loglik=ll,
                     n_params=obj.layout.size,
                     converged=status == STATUS_CONVERGED,
                     convergence_detail=detail, n_iter=n_iter,
                     start_index_of_best=0, status=status,
                     wall_time=time.perf_counter() - t0,
                     time_scale=obj.time_scale, loglik_trace=trace)


# ---------------------------------------------------------------------------
# EM backend
# ---------------------------------------------------------------------------

_MSTEP_MAX_ITER = 25
_MSTEP_MAX_HALVINGS = 10
_MSTEP_TOL = 1e-10
# Membership coefficients live in a large box: perfectly separating
# covariates have no finite logit MLE, and the box makes the saturated
# optimum attainable (class probabilities within exp(-35) of 0/1).
_LOGIT_BOUND = 35.0


def _membership_mstep(spec, Z, W, theta, slopes):
    """Weighted multinomial-logit update for the membership block.

    Closed form without covariates; otherwise Newton with the exact
    multinomial Hessian and a step-halving line search.
    """
    K = spec.n_classes
    if not spec.membership_covariates:
        pbar = np.clip(W.mean(axis=0), 1e-12, None)
        return np.log(pbar[:-1] / pbar[-1]), np.zeros_like(slopes)

    n, p = Z.shape
    zeta = np.concatenate([np.ones((n, 1)), Z], axis=1)
    q = p + 1
    gamma = np.concatenate([theta[:, None], slopes], axis=1)  # (K-1, q)

    def q_value_pi(gm):
        A = np.zeros((n, K))
        A[:, :-1] = zeta @ gm.T
        A -= A.max(axis=1, keepdims=True)
        logpi = A - np.log(np.exp(A).sum(axis=1, keepdims=True))
        return float((W * logpi).sum()), np.exp(logpi)

    # Qm is concave given W, so run Newton to convergence (within the cap):
    # full maximization here lets separated-covariate logits reach the box
    # in a few sweeps instead of crawling across hundreds.
    qv, Pi = q_value_pi(gamma)
    eye = np.eye(K - 1)
    for _ in range(_MSTEP_MAX_ITER):
        R = W[:, :-1] - Pi[:, :-1]
        g = (R.T @ zeta).ravel()
        P1 = Pi[:, :-1]
        T = np.einsum("ik,km->ikm", P1, eye) - P1[:, :, None] * P1[:, None, :]
        NH = np.einsum("ikm,ia,ib->kamb", T, zeta, zeta).reshape((K - 1) * q,
                                                                 (K - 1) * q)
        ridge = 1e-10 * (1.0 + np.trace(NH))
        step = _solve_ridge(NH, g, ridge)
        if step is None:
            break
        step = step.reshape(K - 1, q)
        scale = 1.0
        gain = -1.0
        for _ in range(_MSTEP_MAX_HALVINGS):
            cand = np.clip(gamma + scale * step, -_LOGIT_BOUND, _LOGIT_BOUND)
            qv_new, Pi_new = q_value_pi(cand)
            if math.isfinite(qv_new) and qv_new >= qv:
                gain = qv_new - qv
                gamma, qv, Pi = cand, qv_new, Pi_new
                break
            scale *= 0.5
        if gain <= _MSTEP_TOL:
            break
    return gamma[:, 0].copy(), gamma[:, 1:].copy()


def _traj_eval(obj, pk, U, W, B, scale_vec, want_scores):
    """Weighted complete-data objective for the trajectory + scale block."""
    spec = obj.spec
    if isinstance(spec.family, CensoredNormal):
        scale_param = float(np.exp(scale_vec[0]))
        raw = None
    else:
        raw = scale_vec
        scale_param = thresholds_from_raw(scale_vec)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        L, D, Dscale = lk.family_class_terms(spec, pk, U, B, scale_param,
                                             want_scores)
        qv = float((W * L).sum())
        if not want_scores:
            return qv, None, None
        S = lk.traj_scale_scores(spec, raw, W, D, Dscale)
    if not np.all(np.isfinite(S)):
        return qv, None, None
    return qv, S.sum(axis=0), S


def _split_traj_block(obj, xt):
    """xt -> (B, scale_vec) per the flat layout conventions."""
    spec = obj.spec
    K, d1 = spec.n_classes, spec.poly_order + 1
    n_traj = K * d1 - (1 if spec.is_probit else 0)
    traj = xt[:n_traj]
    if spec.is_probit:
        B = np.concatenate([[0.0], traj]).reshape(K, d1)
    else:
        B = traj.reshape(K, d1).copy()
    return B, xt[n_traj:].copy()


def _trajectory_mstep(obj, pk, U, W, xt):
    """Damped Newton with step halving on the weighted class log-likelihoods;
    at most _MSTEP_MAX_ITER inner iterations (generalized EM).

    Halving trials are value-only; the gradient and scores are refreshed only
    when another inner iteration is worth taking.
    """
    B, scale_vec = _split_traj_block(obj, xt)
    qv, g, S = _traj_eval(obj, pk, U, W, B, scale_vec, True)
    if g is None:
        return xt
    x_cur = xt.copy()
    first_gain = None
    for _ in range(_MSTEP_MAX_ITER):
        H = S.T @ S
        ridge = 1e-8 * (1.0 + np.trace(H) / H.shape[0])
        step = _solve_ridge(H, g, ridge)
        if step is None:
            break
        scale = 1.0
        gain = -1.0
        for _ in range(_MSTEP_MAX_HALVINGS):
            cand = x_cur + scale * step
            Bc, sc = _split_traj_block(obj, cand)
            qv_new, _, _ = _traj_eval(obj, pk, U, W, Bc, sc, False)
            if math.isfinite(qv_new) and qv_new >= qv:
                gain = qv_new - qv
                x_cur, qv = cand, qv_new
                break
            scale *= 0.5
        if gain < 0:
            break
        if first_gain is None:
            first_gain = gain
        if gain <= max(0.01 * first_gain, _MSTEP_TOL):
            break  # diminishing returns; the outer sweep picks it up
        Bc, sc = _split_traj_block(obj, x_cur)
        _, g, S = _traj_eval(obj, pk, U, W, Bc, sc, True)
        if g is None:
            break
    return x_cur


def em_fit(spec: ModelSpec, data: LongitudinalDataset, start: ParameterSet,
           config: FitConfig) -> FitResult:
    """EM: posterior-weight E-step, then separable M-steps for the membership
    logit and the trajectory/scale block.

    The observed-data log-likelihood is checked every sweep; a decrease
    beyond the 1e-10 slack is repaired by halving toward the previous point
    and declared FalseConvergence if it persists.
    """
    t0 = time.perf_counter()
    obj = _Objective(spec, data)
    conv = config.convergence
    pk = lk.packed(data)
    U = lk.grid_powers(pk, spec.poly_order, obj.time_scale)
    lay = obj.layout
    K = spec.n_classes

    x = pack_params(start, spec)
    parts = obj.parts(x)
    detail = {"criteria": {}, "deltas": {}}
    if parts is None:
        detail["reason"] = "non-finite log-likelihood at the starting point"
        return _finish(obj, x, -math.inf, detail, 0,
                       STATUS_FALSE_CONVERGENCE, t0, (-math.inf,))
    ll = parts.loglik
    trace = [ll]
    status = STATUS_MAX_ITERATIONS
    n_iter = 0

    traj_slice = slice(lay.traj.start, lay.scale.stop)
    for n_iter in range(1, config.max_iter + 1):
        W = parts.posterior()
        x_new = x.copy()
        if K > 1:
            theta, slopes = _membership_mstep(
                spec, pk.Z, W, x[lay.theta],
                x[lay.slopes].reshape(K - 1, obj.p) if spec.membership_covariates
                else np.zeros((K - 1, obj.p)))
            x_new[lay.theta] = theta
            if spec.membership_covariates:
                x_new[lay.slopes] = slopes.ravel()
        x_new[traj_slice] = _trajectory_mstep(obj, pk, U, W, x[traj_slice])

        parts_new = obj.parts(x_new)
        halved = 0
        while (parts_new is None or parts_new.loglik < ll - _MONOTONE_SLACK) \
                and halved < 8:
            x_new = 0.5 * (x + x_new)
            parts_new = obj.parts(x_new)
            halved += 1
        if parts_new is None or parts_new.loglik < ll - _MONOTONE_SLACK:
            status = STATUS_FALSE_CONVERGENCE
            detail["reason"] = "observed log-likelihood decreased; repair exhausted"
            break

        dll = parts_new.loglik - ll
        dparam = float(np.max(np.abs(x_new - x)))
        x, parts, ll = x_new, parts_new, parts_new.loglik
        trace.append(ll)
        gscaled = None
        if isinstance(conv, Triple):
            _, grad, _ = obj.value_grad_scores(x)
            gscaled = _scaled_grad_norm(grad, ll) if grad is not None else math.inf
        done, crit = _check_convergence(conv, dll, dparam, gscaled)
        detail["criteria"] = crit
        detail["deltas"] = {"loglik": dll, "param": dparam,
                            "gradient_scaled": gscaled}
        if done:
            status = STATUS_CONVERGED
            break

    return _finish(obj, x, ll, detail, n_iter, status, t0, tuple(trace))


# ---------------------------------------------------------------------------
# One-class fit and start generation
# ---------------------------------------------------------------------------

def fit_one_class(spec: ModelSpec, data: LongitudinalDataset,
                  config: Optional[FitConfig] = None) -> FitResult:
    """Deterministic single-class fit: closed-form start, Newton-type polish.

    Degenerate data (every score identical, e.g. all at a censoring bound)
    cannot be maximized and returns FalseConvergence with a diagnostic.
    """
    if spec.n_classes != 1:
        raise LcgaError(f"fit_one_class requires n_classes == 1, got {spec.n_classes}")
    config = config or FitConfig()
    pk = lk.packed(data)
    scores = pk.y
    start = _one_class_start(spec, data, scores)

    if np.all(scores == scores[0]):
        t0 = time.perf_counter()
        obj = _Objective(spec, data)
        x = pack_params(start, spec)
        return _finish(obj, x, obj.value(x),
                       {"reason": f"degenerate data: all scores equal {scores[0]:g}",
                        "criteria": {}, "deltas": {}},
                       0, STATUS_FALSE_CONVERGENCE, t0, ())

    return direct_fit(spec, data, start, config)


def _one_class_start(spec, data, scores) -> ParameterSet:
    d1 = spec.poly_order + 1
    p = data.covariate_dim
    empty_theta = np.zeros(0)
    empty_slopes = np.zeros((0, p))
    B = np.zeros((1, d1))
    if isinstance(spec.family, CensoredNormal):
        B[0, 0] = float(scores.mean())
        sigma = max(float(scores.std()), 0.25)
        return ParameterSet(membership_intercepts=empty_theta,
                            membership_slopes=empty_slopes,
                            trajectory_coeffs=B, sigma=sigma)
    M = spec.family.n_categories
    counts = np.bincount(scores.astype(np.int64), minlength=M + 1)[1:M + 1]
    cum = np.clip(np.cumsum(counts)[:-1] / scores.size, 1e-3, 1.0 - 1e-3)
    eta = ndtri(cum)
    eta = np.maximum.accumulate(eta + 1e-6 * np.arange(M - 1))  # enforce strict order
    a = np.empty(M - 1)
    a[0] = eta[0]
    if M > 2:
        a[1:] = np.log(np.maximum(np.diff(eta), 1e-6))
    return ParameterSet(membership_intercepts=empty_theta,
                        membership_slopes=empty_slopes,
                        trajectory_coeffs=B, raw_thresholds=a)


def generate_starts(one_class: FitResult, spec: ModelSpec, config: FitConfig,
                    rng: np.random.Generator,
                    data: LongitudinalDataset) -> list:
    """Multi-start parameter sets built around the one-class estimates.

    Each start replicates the one-class trajectory into K rows, anchors the
    class constants at equally spaced quantiles of the observed scores (for
    probit, at positions spread across the threshold span), and adds
    independent Gaussian noise with per-coefficient scale
    perturbation_scale * max(|coefficient|, 0.1). Membership starts uniform.
    """
    if not one_class.converged:
        raise LcgaError("generate_starts requires a converged one-class fit")
    K, d1, p = spec.n_classes, spec.poly_order + 1, data.covariate_dim
    base = one_class.params.trajectory_coeffs[0]
    fractions = (np.arange(K) + 1.0) / (K + 1.0)

    if isinstance(spec.family, CensoredNormal):
        anchors = np.quantile(lk.packed(data).y, fractions)
        sigma = one_class.params.sigma
        a = None
    else:
        eta = one_class.params.thresholds
        lo, hi = eta[0] - 1.0, eta[-1] + 1.0
        positions = lo + (hi - lo) * fractions
        anchors = positions - positions[0]
        a = one_class.params.raw_thresholds.copy()
        a[0] -= positions[0]  # shift thresholds so class 1 keeps constant 0
        sigma = None

    centers = np.tile(base, (K, 1))
    noise_scale = config.perturbation_scale * np.maximum(np.abs(centers), 0.1)

    starts = []
    for _ in range(config.n_starts):
        B = centers + rng.standard_normal((K, d1)) * noise_scale
        B[:, 0] = anchors  # spacing overwrites the perturbed constants
        starts.append(ParameterSet(
            membership_intercepts=np.zeros(K - 1),
            membership_slopes=np.zeros((K - 1, p)),
            trajectory_coeffs=B, sigma=sigma,
            raw_thresholds=None if a is None else a.copy()))
    return starts


# ---------------------------------------------------------------------------
# Multi-start orchestration
# ---------------------------------------------------------------------------

def _fit_worker(args):
    spec, data, start, config = args
    fn = em_fit if config.mode == "em" else direct_fit
    return fn(spec, data, start, config)


def multi_start_fit(spec: ModelSpec, data: LongitudinalDataset,
                    config: FitConfig, n_workers: int = 1) -> FitResult:
    """Run the configured backend from every start and return the converged
    result with the highest log-likelihood.

    If no start converges the best-so-far result is returned with status
    FalseConvergence. Per-start statuses are recorded; starts are independent
    so worker scheduling cannot change the outcome.
    """
    t0 = time.perf_counter()
    if spec.n_classes == 1:
        res = fit_one_class(spec, data, config)
        res.start_statuses = (res.status,)
        res.wall_time = time.perf_counter() - t0
        return res

    one_spec = replace(spec, n_classes=1)
    one = fit_one_class(one_spec, data, config)
    if not one.converged:
        res = _expand_one_class(one, spec, data)
        res.wall_time = time.perf_counter() - t0
        return res

    rng = np.random.default_rng(config.seed)
    starts = generate_starts(one, spec, config, rng, data)
    tasks = [(spec, data, s, config) for s in starts]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_fit_worker, tasks))
    else:
        results = [_fit_worker(t) for t in tasks]

    converged = [i for i, r in enumerate(results)
                 if r.status == STATUS_CONVERGED]
    pool_idx = converged if converged else range(len(results))
    best_i = max(pool_idx, key=lambda i: results[i].loglik)
    best = results[best_i]
    best.start_index_of_best = best_i
    best.start_statuses = tuple(r.status for r in results)
    if not converged:
        best.status = STATUS_FALSE_CONVERGENCE
        best.converged = False
        best.convergence_detail.setdefault("reason", "no start converged")
    best.wall_time = time.perf_counter() - t0
    return best


def _expand_one_class(one: FitResult, spec: ModelSpec,
                      data: LongitudinalDataset) -> FitResult:
    """Degenerate K-class result when the one-class base fit failed."""
    K, p = spec.n_classes, data.covariate_dim
    params = ParameterSet(
        membership_intercepts=np.zeros(K - 1),
        membership_slopes=np.zeros((K - 1, p)),
        trajectory_coeffs=np.tile(one.params.trajectory_coeffs[0], (K, 1)),
        sigma=one.params.sigma,
        raw_thresholds=one.params.raw_thresholds)
    try:
        ll = lk.mixture_loglik(spec, params, data)
    except NonFiniteLoglikError:
        ll = -math.inf
    return FitResult(params=params, loglik=ll,
                     n_params=n_free_params(spec, p), converged=False,
                     convergence_detail={"reason": "one-class start fit failed",
                                         "one_class": one.convergence_detail},
                     n_iter=0, start_index_of_best=0,
                     status=STATUS_FALSE_CONVERGENCE, wall_time=one.wall_time,
                     time_scale=one.time_scale)
