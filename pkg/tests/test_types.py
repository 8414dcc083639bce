import numpy as np
import pytest

from lcga.errors import (DimensionError, InputDataError, ParameterDomainError)
from lcga.types import (CategoryMap, CensoredNormal, CumulativeProbit,
                        LongitudinalDataset, ModelSpec, ParameterSet,
                        SubjectRecord, n_free_params, pack_params,
                        param_layout, unpack_params)
from conftest import make_dataset, make_subject, random_params


def test_subject_record_validation():
    with pytest.raises(DimensionError):
        SubjectRecord("a", times=(1, 2), scores=(1,), covariates=())
    with pytest.raises(InputDataError):
        SubjectRecord("a", times=(1, 1), scores=(1, 2), covariates=())
    with pytest.raises(InputDataError):
        SubjectRecord("a", times=(), scores=(), covariates=())


def test_dataset_validation():
    with pytest.raises(InputDataError):
        make_dataset([(0, 11)])  # score above declared bounds
    with pytest.raises(DimensionError):
        make_dataset([(1, 2), (3, 4)], covariate_rows=[(1.0,), (1.0, 2.0)])
    data = make_dataset([(0, 5, 10)], covariate_rows=[(1.0, 2.0)])
    assert data.n_subjects == 1
    assert data.covariate_dim == 2
    assert data.n_observations == 3
    with pytest.raises(InputDataError):
        LongitudinalDataset(subjects=(make_subject("a", (1,), times=(5,)),),
                            max_time=3, score_bounds=(0, 10))


def test_category_map_default_levels():
    cmap = CategoryMap.default_three_level()
    assert cmap.n_categories == 3
    assert cmap.category_of(3) == 1
    assert cmap.category_of(4) == 2
    assert cmap.category_of(7) == 3
    assert cmap.category_of(0) == 1
    assert cmap.category_of(10) == 3
    with pytest.raises(InputDataError):
        cmap.category_of(11)


def test_category_map_partition_invariants():
    with pytest.raises(ParameterDomainError):
        CategoryMap(upper_bounds=(3, 6, 9))  # does not reach the top
    with pytest.raises(ParameterDomainError):
        CategoryMap(upper_bounds=(6, 3, 10))
    full = CategoryMap.full_scale()
    assert full.n_categories == 11
    assert [full.category_of(s) for s in range(11)] == list(range(1, 12))


def test_model_spec_validation():
    with pytest.raises(ParameterDomainError):
        ModelSpec(family=CensoredNormal(min=0, max=10), n_classes=0)
    with pytest.raises(ParameterDomainError):
        ModelSpec(family=CensoredNormal(min=0, max=10), n_classes=2, poly_order=4)
    with pytest.raises(ParameterDomainError):
        CensoredNormal(min=10, max=10)
    with pytest.raises(ParameterDomainError):
        CumulativeProbit(n_categories=1)


def test_threshold_reconstruction_strictly_increasing():
    params = ParameterSet(membership_intercepts=np.zeros(0),
                          membership_slopes=np.zeros((0, 0)),
                          trajectory_coeffs=np.zeros((1, 1)),
                          raw_thresholds=np.array([-1.0, -0.3, 2.0]))
    eta = params.thresholds
    assert np.all(np.diff(eta) > 0)
    assert eta[0] == -1.0
    assert np.allclose(eta, [-1.0, -1.0 + np.exp(-0.3),
                             -1.0 + np.exp(-0.3) + np.exp(2.0)])


def test_validate_for_reports_offending_field():
    spec = ModelSpec(family=CensoredNormal(min=0, max=10), n_classes=3,
                     poly_order=1)
    params = ParameterSet(membership_intercepts=np.zeros(1),  # should be 2
                          membership_slopes=np.zeros((2, 2)),
                          trajectory_coeffs=np.zeros((3, 2)), sigma=1.0)
    with pytest.raises(DimensionError) as err:
        params.validate_for(spec, 2)
    assert err.value.field == "membership_intercepts"
    bad_sigma = ParameterSet(membership_intercepts=np.zeros(2),
                             membership_slopes=np.zeros((2, 2)),
                             trajectory_coeffs=np.zeros((3, 2)), sigma=-1.0)
    with pytest.raises(ParameterDomainError):
        bad_sigma.validate_for(spec, 2)


@pytest.mark.parametrize("family,covariates", [
    (CensoredNormal(min=0, max=10), True),
    (CensoredNormal(min=0, max=10), False),
    (CumulativeProbit(n_categories=3), True),
    (CumulativeProbit(n_categories=3), False),
])
def test_pack_unpack_roundtrip(family, covariates, rng):
    spec = ModelSpec(family=family, n_classes=3, poly_order=2,
                     membership_covariates=covariates)
    params = random_params(spec, 2, rng)
    x = pack_params(params, spec)
    assert x.shape == (n_free_params(spec, 2),)
    back = unpack_params(x, spec, 2)
    assert np.allclose(back.membership_intercepts, params.membership_intercepts)
    if covariates:
        assert np.allclose(back.membership_slopes, params.membership_slopes)
    else:
        assert np.all(back.membership_slopes == 0.0)
    assert np.allclose(back.trajectory_coeffs, params.trajectory_coeffs)
    if isinstance(family, CensoredNormal):
        assert back.sigma == pytest.approx(params.sigma, rel=1e-12)
    else:
        assert np.allclose(back.raw_thresholds, params.raw_thresholds)
        assert back.trajectory_coeffs[0, 0] == 0.0


def test_free_param_counts():
    cnorm = ModelSpec(family=CensoredNormal(min=0, max=10), n_classes=3,
                      poly_order=2, membership_covariates=True)
    # theta 2 + slopes 2*3 + B 3*3 + sigma
    assert n_free_params(cnorm, 3) == 2 + 6 + 9 + 1
    probit = ModelSpec(family=CumulativeProbit(n_categories=3), n_classes=3,
                       poly_order=2, membership_covariates=False)
    # theta 2 + B (9 - 1 pinned) + thresholds 2
    assert n_free_params(probit, 3) == 2 + 8 + 2


def test_probit_pin_location_normalization(rng):
    spec = ModelSpec(family=CumulativeProbit(n_categories=3), n_classes=2,
                     poly_order=1, membership_covariates=True)
    params = random_params(spec, 2, rng)
    shifted = ParameterSet(membership_intercepts=params.membership_intercepts,
                           membership_slopes=params.membership_slopes,
                           trajectory_coeffs=params.trajectory_coeffs + [[0.7, 0.0],
                                                                          [0.7, 0.0]],
                           raw_thresholds=np.array([params.raw_thresholds[0] + 0.7,
                                                    params.raw_thresholds[1]]))
    # same model, different location representative: packs to the same vector
    assert np.allclose(pack_params(shifted, spec), pack_params(params, spec))
