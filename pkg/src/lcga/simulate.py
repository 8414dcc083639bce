"""Synthetic cohort generators with known class labels.

Both designs draw integer symptom scores for three trajectory groups
(constant-low, increasing, decreasing) over T equally spaced periods:
a per-period rate lambda_t = z1 + s2*z2*t + s3*z3*t (+ pre-event treatment
bump in design 2) plus standard normal noise, floored at rate_floor; the
score is an Exponential(rate lambda_t) draw rounded half-away-from-zero and
bounded to 0..10.

Design 2 adds an unobserved per-subject event time (negative binomial plus
one) whose indicator raises the rate until the event; the event time is not
exported as a covariate. Design 1 draws and discards the event time so that
design 2 with beta_treatment = 0 and design-1 slopes reproduces design 1
draw-for-draw at the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import LcgaError
from .types import CategoryMap, LongitudinalDataset, SubjectRecord

_SCENARIO1_COVARIATES = ((2.0, 0.0, 0.0), (1.0, 0.0, 1.0), (0.0, 1.0, 0.0))
_SCENARIO2_COVARIATES = ((0.2, 0.0, 0.0), (0.3, 0.0, 1.0), (0.15, 1.0, 0.0))
_SCENARIO1_SLOPES = (0.5, -0.05)
_SCENARIO2_SLOPES = (0.01, -0.02)
GROUP_NAMES = ("constant_low", "increasing", "decreasing")


@dataclass(frozen=True)
class ScenarioConfig:
    """Knobs of the two synthetic designs; defaults reproduce them as
    published (5,000 subjects split 3000/1000/1000 over 12 periods)."""

    scenario: int = 1
    n_per_group: tuple = (3000, 1000, 1000)
    n_periods: int = 12
    beta_treatment: float = 0.2
    group_covariates: Optional[tuple] = None  # three z vectors; per-scenario default
    time_slopes: Optional[tuple] = None       # (s2, s3); per-scenario default
    rate_floor: float = 0.05
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise LcgaError(f"scenario must be 1 or 2, got {self.scenario}")
        if len(self.n_per_group) != 3 or any(c < 0 for c in self.n_per_group):
            raise LcgaError(f"n_per_group needs three counts >= 0, got {self.n_per_group}")
        if self.n_periods < 1:
            raise LcgaError(f"n_periods must be >= 1, got {self.n_periods}")
        if self.rate_floor <= 0:
            raise LcgaError(f"rate_floor must be > 0, got {self.rate_floor}")
        if self.noise_sd < 0:
            raise LcgaError(f"noise_sd must be >= 0, got {self.noise_sd}")

    def resolved_covariates(self) -> tuple:
        if self.group_covariates is not None:
            return tuple(tuple(float(v) for v in z) for z in self.group_covariates)
        return _SCENARIO1_COVARIATES if self.scenario == 1 else _SCENARIO2_COVARIATES

    def resolved_slopes(self) -> tuple:
        if self.time_slopes is not None:
            return tuple(float(s) for s in self.time_slopes)
        return _SCENARIO1_SLOPES if self.scenario == 1 else _SCENARIO2_SLOPES


def _round_half_away(y: float) -> int:
    # scores are non-negative, so half-away-from-zero == half-up
    return int(math.floor(y + 0.5))


def _draw_subject(rng, z, slopes, beta_tr, n_periods, rate_floor, noise_sd):
    """One subject's score series; always consumes the event-time draw so the
    two designs share a draw path."""
    event_time = int(rng.negative_binomial(1, 0.5)) + 1
    s2, s3 = slopes
    scores = []
    for t in range(1, n_periods + 1):
        eps = rng.standard_normal() * noise_sd
        lam = z[0] + s2 * z[1] * t + s3 * z[2] * t + eps
        if beta_tr != 0.0 and event_time > t:
            lam += beta_tr
        lam = max(lam, rate_floor)
        y = rng.exponential(1.0 / lam)
        scores.append(min(10, max(0, _round_half_away(y))))
    return scores


def _generate(cfg: ScenarioConfig, beta_tr: float,
              root: Optional[np.random.SeedSequence]) -> LongitudinalDataset:
    if root is None:
        root = np.random.SeedSequence(cfg.seed)
    covs = cfg.resolved_covariates()
    slopes = cfg.resolved_slopes()
    times = tuple(range(1, cfg.n_periods + 1))
    subjects = []
    index = 0
    for group, (count, z) in enumerate(zip(cfg.n_per_group, covs)):
        for _ in range(count):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=root.entropy, spawn_key=(index,)))
            scores = _draw_subject(rng, z, slopes, beta_tr, cfg.n_periods,
                                   cfg.rate_floor, cfg.noise_sd)
            subjects.append(SubjectRecord(subject_id=f"sim{index:05d}",
                                          times=times, scores=scores,
                                          covariates=z, true_class=group))
            index += 1
    return LongitudinalDataset(subjects=tuple(subjects), max_time=cfg.n_periods,
                               score_bounds=(0, 10))


def simulate_scenario1(cfg: ScenarioConfig,
                       rng: Optional[np.random.SeedSequence] = None
                       ) -> LongitudinalDataset:
    """Design 1: three groups, no event process."""
    return _generate(cfg, 0.0, rng)


def simulate_scenario2(cfg: ScenarioConfig,
                       rng: Optional[np.random.SeedSequence] = None
                       ) -> LongitudinalDataset:
    """Design 2: adds the unmeasured event raising the rate before the event
    time (implemented exactly as specified, treatment indicator 1{T > t})."""
    return _generate(cfg, cfg.beta_treatment, rng)


def simulate(cfg: ScenarioConfig,
             rng: Optional[np.random.SeedSequence] = None) -> LongitudinalDataset:
    return simulate_scenario1(cfg, rng) if cfg.scenario == 1 \
        else simulate_scenario2(cfg, rng)


def categorize(data: LongitudinalDataset, cmap: CategoryMap) -> LongitudinalDataset:
    """Map raw scores through the category breakpoints, yielding a dataset on
    the 1..M ordinal scale with the map recorded as metadata."""
    subjects = tuple(
        SubjectRecord(subject_id=s.subject_id, times=s.times,
                      scores=tuple(cmap.category_of(y) for y in s.scores),
                      covariates=s.covariates, true_class=s.true_class)
        for s in data.subjects)
    return LongitudinalDataset(subjects=subjects, max_time=data.max_time,
                               score_bounds=(1, cmap.n_categories),
                               category_map=cmap)
