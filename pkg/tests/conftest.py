import numpy as np
import pytest

from lcga.types import (CensoredNormal, CumulativeProbit, LongitudinalDataset,
                        ModelSpec, ParameterSet, SubjectRecord)


def make_subject(sid, scores, covariates=(), times=None, true_class=None):
    times = times if times is not None else tuple(range(1, len(scores) + 1))
    return SubjectRecord(subject_id=sid, times=times, scores=scores,
                         covariates=covariates, true_class=true_class)


def make_dataset(score_rows, covariate_rows=None, score_bounds=(0, 10),
                 max_time=None, true_classes=None):
    n = len(score_rows)
    covariate_rows = covariate_rows or [()] * n
    true_classes = true_classes or [None] * n
    subjects = [make_subject(f"s{i}", scores, covariate_rows[i],
                             true_class=true_classes[i])
                for i, scores in enumerate(score_rows)]
    mt = max_time or max(s.times[-1] for s in subjects)
    return LongitudinalDataset(subjects=tuple(subjects), max_time=mt,
                               score_bounds=score_bounds)


def random_params(spec, covariate_dim, rng, spread=1.0):
    K, d1 = spec.n_classes, spec.poly_order + 1
    theta = rng.normal(0.0, spread, K - 1)
    slopes = (rng.normal(0.0, spread, (K - 1, covariate_dim))
              if spec.membership_covariates else np.zeros((K - 1, covariate_dim)))
    B = rng.normal(0.0, 2.0 * spread, (K, d1))
    if isinstance(spec.family, CumulativeProbit):
        B[0, 0] = 0.0
        M = spec.family.n_categories
        a = np.concatenate([rng.normal(-1.0, 0.5, 1), rng.normal(0.0, 0.4, M - 2)])
        return ParameterSet(membership_intercepts=theta, membership_slopes=slopes,
                            trajectory_coeffs=B, raw_thresholds=a)
    B[:, 0] += 5.0  # keep means inside the 0..10 band
    return ParameterSet(membership_intercepts=theta, membership_slopes=slopes,
                        trajectory_coeffs=B, sigma=float(rng.uniform(0.8, 2.5)))


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


@pytest.fixture
def tiny_cnorm():
    """5 subjects on 0..10 with two covariates, K=2, linear trajectories."""
    rows = [(0, 2, 3, 5), (10, 9, 7, 6), (4, 4, 5, 5), (0, 0, 1, 0), (8, 10, 10, 9)]
    covs = [(0.5, 1.0), (1.5, -0.5), (0.0, 0.0), (2.0, 0.3), (-1.0, 1.2)]
    data = make_dataset(rows, covs)
    spec = ModelSpec(family=CensoredNormal(min=0, max=10), n_classes=2,
                     poly_order=1, membership_covariates=True)
    return spec, data


@pytest.fixture
def tiny_probit():
    """5 subjects on categories 1..3 with two covariates, K=2."""
    rows = [(1, 1, 2, 1), (3, 3, 2, 3), (2, 2, 1, 2), (1, 2, 3, 3), (3, 1, 1, 1)]
    covs = [(0.5, 1.0), (1.5, -0.5), (0.0, 0.0), (2.0, 0.3), (-1.0, 1.2)]
    data = make_dataset(rows, covs, score_bounds=(1, 3))
    spec = ModelSpec(family=CumulativeProbit(n_categories=3), n_classes=2,
                     poly_order=1, membership_covariates=True)
    return spec, data
