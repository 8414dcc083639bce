"""Domain types: datasets, model specifications, parameter sets.

Everything here is immutable after construction, so instances can be shared
freely across worker processes and threads.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import DimensionError, InputDataError, ParameterDomainError


# ---------------------------------------------------------------------------
# Outcome families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CensoredNormal:
    """Bounded scores modelled as a normal variable censored at both ends."""

    min: int
    max: int

    kind = "cnorm"

    def __post_init__(self):
        if self.min >= self.max:
            raise ParameterDomainError(
                f"CensoredNormal requires min < max, got [{self.min}, {self.max}]")


@dataclass(frozen=True)
class CumulativeProbit:
    """Ordinal scores on 1..M with category probabilities from normal CDF
    differences at ordered thresholds."""

    n_categories: int

    kind = "probit"

    def __post_init__(self):
        if self.n_categories < 2:
            raise ParameterDomainError(
                f"CumulativeProbit requires at least 2 categories, got {self.n_categories}")


Family = Union[CensoredNormal, CumulativeProbit]


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubjectRecord:
    """One subject's observation series plus baseline covariates.

    times and scores run in parallel; times are integer periods, strictly
    increasing. true_class carries the simulation truth label when known.
    """

    subject_id: str
    times: tuple
    scores: tuple
    covariates: tuple
    true_class: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(int(t) for t in self.times))
        object.__setattr__(self, "scores", tuple(int(s) for s in self.scores))
        object.__setattr__(self, "covariates", tuple(float(z) for z in self.covariates))
        if len(self.times) != len(self.scores):
            raise DimensionError(f"subject {self.subject_id}: scores",
                                 f"length {len(self.times)}", len(self.scores))
        if len(self.times) == 0:
            raise InputDataError(f"subject {self.subject_id} has no observations")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise InputDataError(
                f"subject {self.subject_id}: times must be strictly increasing")

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class CategoryMap:
    """Partition of an integer score range into ordered categories 1..M.

    upper_bounds[i] is the inclusive top score of category i+1 and the last
    bound must equal the top of the score range.
    """

    upper_bounds: tuple
    score_range: tuple = (0, 10)

    def __post_init__(self):
        object.__setattr__(self, "upper_bounds", tuple(int(b) for b in self.upper_bounds))
        object.__setattr__(self, "score_range",
                           (int(self.score_range[0]), int(self.score_range[1])))
        lo, hi = self.score_range
        bounds = self.upper_bounds
        if not bounds or any(b <= a for a, b in zip(bounds, bounds[1:])):
            raise ParameterDomainError("category upper bounds must be strictly increasing")
        if bounds[0] < lo or bounds[-1] != hi:
            raise ParameterDomainError(
                f"category bounds {bounds} do not partition {lo}..{hi}")

    @property
    def n_categories(self):
        return len(self.upper_bounds)

    def category_of(self, score: int) -> int:
        lo, hi = self.score_range
        if not (lo <= score <= hi):
            raise InputDataError(f"score {score} outside category map domain {lo}..{hi}")
        return 1 + bisect.bisect_left(self.upper_bounds, score)

    @classmethod
    def default_three_level(cls) -> "CategoryMap":
        """0-3 / 4-6 / 7-10, the usual none-mild / moderate / severe split."""
        return cls(upper_bounds=(3, 6, 10), score_range=(0, 10))

    @classmethod
    def full_scale(cls) -> "CategoryMap":
        """Identity map turning raw 0..10 scores into 11 ordered categories."""
        return cls(upper_bounds=tuple(range(11)), score_range=(0, 10))


@dataclass(frozen=True)
class LongitudinalDataset:
    """Per-subject observation series plus baseline covariates.

    score_bounds declares the valid outcome range; every stored score must be
    an integer inside it (0..10 raw, 1..M after categorization).
    """

    subjects: tuple
    max_time: int
    score_bounds: tuple = (0, 10)
    category_map: Optional[CategoryMap] = None

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if not self.subjects:
            raise InputDataError("dataset has no subjects")
        if self.max_time < 1:
            raise InputDataError(f"max_time must be >= 1, got {self.max_time}")
        p = len(self.subjects[0].covariates)
        lo, hi = self.score_bounds
        for subj in self.subjects:
            if len(subj.covariates) != p:
                raise DimensionError(f"subject {subj.subject_id}: covariates",
                                     f"length {p}", len(subj.covariates))
            if subj.times[0] < 1 or subj.times[-1] > self.max_time:
                raise InputDataError(
                    f"subject {subj.subject_id}: times outside 1..{self.max_time}")
            for s in subj.scores:
                if not (lo <= s <= hi):
                    raise InputDataError(
                        f"subject {subj.subject_id}: score {s} outside {lo}..{hi}")
        object.__setattr__(self, "_covariate_dim", p)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def covariate_dim(self) -> int:
        return self._covariate_dim

    @property
    def n_observations(self) -> int:
        return sum(len(s) for s in self.subjects)

    def subject_ids(self):
        return [s.subject_id for s in self.subjects]

    def true_classes(self):
        """Truth labels, or None if any subject lacks one."""
        labels = [s.true_class for s in self.subjects]
        if any(c is None for c in labels):
            return None
        return np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# Model specification and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """What to fit: outcome family, class count, trajectory order, and
    whether baseline covariates enter the membership logit."""

    family: Family
    n_classes: int
    poly_order: int = 2
    membership_covariates: bool = True

    def __post_init__(self):
        if self.n_classes < 1:
            raise ParameterDomainError(f"n_classes must be >= 1, got {self.n_classes}")
        if not (0 <= self.poly_order <= 3):
            raise ParameterDomainError(
                f"poly_order must be in 0..3, got {self.poly_order}")

    @property
    def is_probit(self) -> bool:
        return isinstance(self.family, CumulativeProbit)


def thresholds_from_raw(a: np.ndarray) -> np.ndarray:
    """eta_1 = a_1, eta_l = eta_{l-1} + exp(a_l): strictly increasing by
    construction."""
    eta = np.empty_like(a)
    eta[0] = a[0]
    if a.size > 1:
        eta[1:] = a[0] + np.cumsum(np.exp(a[1:]))
    return eta


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Membership logits, per-class trajectory coefficients, and the scale
    (sigma) or thresholds (raw_thresholds) depending on the family.

    trajectory_coeffs[k][m] multiplies (scaled time)^m for class k. The last
    class is the membership reference with logit fixed at zero. Thresholds
    are stored unconstrained: eta_1 = a_1, eta_l = eta_{l-1} + exp(a_l).
    """

    membership_intercepts: np.ndarray
    membership_slopes: np.ndarray
    trajectory_coeffs: np.ndarray
    sigma: Optional[float] = None
    raw_thresholds: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("membership_intercepts", "membership_slopes", "trajectory_coeffs"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.raw_thresholds is not None:
            arr = np.array(self.raw_thresholds, dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, "raw_thresholds", arr)
        if self.sigma is not None:
            object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def n_classes(self) -> int:
        return self.trajectory_coeffs.shape[0]

    @property
    def thresholds(self):
        """Reconstructed strictly increasing eta, or None for CNORM."""
        if self.raw_thresholds is None:
            return None
        return thresholds_from_raw(self.raw_thresholds)

    def validate_for(self, spec: ModelSpec, covariate_dim: int):
        """Check shapes against spec and parameter-domain invariants."""
        K, d = spec.n_classes, spec.poly_order
        if self.membership_intercepts.shape != (K - 1,):
            raise DimensionError("membership_intercepts", (K - 1,),
                                 self.membership_intercepts.shape)
        if self.membership_slopes.shape != (K - 1, covariate_dim):
            raise DimensionError("membership_slopes", (K - 1, covariate_dim),
                                 self.membership_slopes.shape)
        if self.trajectory_coeffs.shape != (K, d + 1):
            raise DimensionError("trajectory_coeffs", (K, d + 1),
                                 self.trajectory_coeffs.shape)
        if isinstance(spec.family, CensoredNormal):
            if self.sigma is None or self.sigma <= 0:
                raise ParameterDomainError(f"sigma must be > 0, got {self.sigma}")
        else:
            M = spec.family.n_categories
            if self.raw_thresholds is None or self.raw_thresholds.shape != (M - 1,):
                got = None if self.raw_thresholds is None else self.raw_thresholds.shape
                raise DimensionError("raw_thresholds", (M - 1,), got)
            eta = self.thresholds
            if np.any(np.diff(eta) <= 0):
                raise ParameterDomainError(f"thresholds must be strictly increasing: {eta}")


# ---------------------------------------------------------------------------
# Flat parameter layout (the unconstrained vector optimizers work on)
# ---------------------------------------------------------------------------
#
# Order: theta, Lambda row-major (only when covariates are on), B row-major
# (dropping B[0][0] for probit, where it is pinned at zero), then log(sigma)
# or the raw thresholds.

@dataclass(frozen=True)
class ParamLayout:
    spec: ModelSpec
    covariate_dim: int
    theta: slice
    slopes: slice
    traj: slice
    scale: slice
    size: int

    @property
    def pin_first_constant(self) -> bool:
        return self.spec.is_probit


def param_layout(spec: ModelSpec, covariate_dim: int) -> ParamLayout:
    K, d, p = spec.n_classes, spec.poly_order, covariate_dim
    n_theta = K - 1
    n_slopes = (K - 1) * p if spec.membership_covariates else 0
    n_traj = K * (d + 1) - (1 if spec.is_probit else 0)
    if isinstance(spec.family, CensoredNormal):
        n_scale = 1
    else:
        n_scale = spec.family.n_categories - 1
    o1 = n_theta
    o2 = o1 + n_slopes
    o3 = o2 + n_traj
    return ParamLayout(spec=spec, covariate_dim=p,
                       theta=slice(0, o1), slopes=slice(o1, o2),
                       traj=slice(o2, o3), scale=slice(o3, o3 + n_scale),
                       size=o3 + n_scale)


def n_free_params(spec: ModelSpec, covariate_dim: int) -> int:
    return param_layout(spec, covariate_dim).size


def normalize_probit_location(params: ParameterSet) -> ParameterSet:
    """Shift class constants and thresholds so that B[0][0] == 0.

    A common shift of all constants and all thresholds leaves the probit
    likelihood unchanged; this picks the representative with the first
    class's constant pinned at zero.
    """
    delta = params.trajectory_coeffs[0, 0]
    if delta == 0.0:
        return params
    B = params.trajectory_coeffs.copy()
    B[:, 0] -= delta
    a = params.raw_thresholds.copy()
    a[0] -= delta
    return ParameterSet(membership_intercepts=params.membership_intercepts,
                        membership_slopes=params.membership_slopes,
                        trajectory_coeffs=B, sigma=None, raw_thresholds=a)


def pack_params(params: ParameterSet, spec: ModelSpec) -> np.ndarray:
    """Flatten a ParameterSet into the unconstrained vector."""
    p = params.membership_slopes.shape[1]
    lay = param_layout(spec, p)
    if spec.is_probit:
        params = normalize_probit_location(params)
    x = np.empty(lay.size)
    x[lay.theta] = params.membership_intercepts
    if spec.membership_covariates:
        x[lay.slopes] = params.membership_slopes.ravel()
    traj = params.trajectory_coeffs.ravel()
    x[lay.traj] = traj[1:] if spec.is_probit else traj
    if isinstance(spec.family, CensoredNormal):
        x[lay.scale] = np.log(params.sigma)
    else:
        x[lay.scale] = params.raw_thresholds
    return x


def unpack_params(x: np.ndarray, spec: ModelSpec, covariate_dim: int) -> ParameterSet:
    """Inverse of pack_params."""
    lay = param_layout(spec, covariate_dim)
    if x.shape != (lay.size,):
        raise DimensionError("parameter vector", (lay.size,), x.shape)
    K, d, p = spec.n_classes, spec.poly_order, covariate_dim
    theta = x[lay.theta].copy()
    if spec.membership_covariates:
        slopes = x[lay.slopes].reshape(K - 1, p).copy()
    else:
        slopes = np.zeros((K - 1, p))
    if spec.is_probit:
        traj = np.concatenate([[0.0], x[lay.traj]]).reshape(K, d + 1)
        return ParameterSet(membership_intercepts=theta, membership_slopes=slopes,
                            trajectory_coeffs=traj, sigma=None,
                            raw_thresholds=x[lay.scale].copy())
    traj = x[lay.traj].reshape(K, d + 1).copy()
    return ParameterSet(membership_intercepts=theta, membership_slopes=slopes,
                        trajectory_coeffs=traj, sigma=float(np.exp(x[lay.scale][0])),
                        raw_thresholds=None)
