import math

import numpy as np
import pytest

from spire import (ConfigError, DataError, Dataset, ModelSpec, Observation,
                   OutcomeParams, Term, adaptive_quadrature, design_affine,
                   design_matrix, design_row, log_density_outcome,
                   score_outcome)
from spire.simulation import controlled_model, realistic_model


def test_design_row_simple():
    spec = ModelSpec(terms=(Term("intercept"), Term("x"), Term("z", k=0)))
    np.testing.assert_allclose(design_row(spec, 2.0, [3.0]), [1.0, 2.0, 3.0])


def test_design_row_realistic():
    spec = realistic_model()
    row = design_row(spec, 0.5, [0.2, 0.1, 1.0])
    np.testing.assert_allclose(row, [1.0, 0.3, 0.1, 1.0, 0.3])


def test_design_row_intercept_only():
    spec = ModelSpec(terms=(Term("intercept"),))
    np.testing.assert_allclose(design_row(spec, 123.4, [5.0]), [1.0])


def test_design_row_bad_index():
    spec = ModelSpec(terms=(Term("intercept"), Term("z", k=3)))
    with pytest.raises(ConfigError):
        design_row(spec, 0.0, [1.0])


def test_design_affine_matches_rows():
    rng = np.random.default_rng(3)
    spec = realistic_model()
    z = rng.uniform(size=(20, 3))
    d0, d1 = design_affine(spec, z)
    for i, x in enumerate(rng.normal(size=20)):
        np.testing.assert_allclose(d0[i] + d1[i] * x, design_row(spec, x, z[i]),
                                   rtol=1e-12)


def test_log_density_standard_normal_mode():
    spec = ModelSpec(terms=(Term("intercept"),))
    params = OutcomeParams(beta=[0.0], sigma2=1.0)
    assert log_density_outcome(spec, params, 0.0, 0.0, [0.0]) == pytest.approx(
        -0.5 * math.log(2 * math.pi), abs=1e-12)


def test_log_density_mode_of_wider_normal():
    spec = ModelSpec(terms=(Term("intercept"),))
    params = OutcomeParams(beta=[1.0], sigma2=4.0)
    assert log_density_outcome(spec, params, 1.0, 0.0, [0.0]) == pytest.approx(
        -0.5 * math.log(8 * math.pi), abs=1e-12)


def test_log_density_controlled_zero_residual():
    params = OutcomeParams(beta=[0.5, 0.2, -0.2], sigma2=1.0)
    val = log_density_outcome(controlled_model(), params, 0.5, 0.0, [0.0])
    assert val == pytest.approx(-0.9189385, abs=1e-7)


def test_score_zero_residual():
    params = OutcomeParams(beta=[0.5, 0.2, -0.2], sigma2=2.0)
    s = score_outcome(controlled_model(), params, 0.5 + 0.2 * 1.3 - 0.2, 1.3, [1.0])
    np.testing.assert_allclose(s[:3], 0.0, atol=1e-12)
    assert s[3] == pytest.approx(-1.0 / (2 * 2.0), abs=1e-12)


def test_score_intercept_only():
    spec = ModelSpec(terms=(Term("intercept"),))
    params = OutcomeParams(beta=[1.0], sigma2=1.0)
    np.testing.assert_allclose(score_outcome(spec, params, 2.0, 0.0, [0.0]),
                               [1.0, 0.0], atol=1e-12)


def test_score_matches_finite_differences():
    rng = np.random.default_rng(42)
    spec = realistic_model()
    for _ in range(50):
        beta = rng.normal(size=5)
        sigma2 = float(rng.uniform(0.3, 3.0))
        params = OutcomeParams(beta=beta, sigma2=sigma2)
        x = float(rng.normal())
        z = rng.uniform(size=3)
        y = float(rng.normal())
        theta = params.to_vector()
        grad = np.empty(theta.size)
        for k in range(theta.size):
            h = 1e-5 * (1.0 + abs(theta[k]))
            tp, tm = theta.copy(), theta.copy()
            tp[k] += h
            tm[k] -= h
            grad[k] = (
                log_density_outcome(spec, OutcomeParams.from_vector(tp), y, x, z)
                - log_density_outcome(spec, OutcomeParams.from_vector(tm), y, x, z)
            ) / (2 * h)
        got = score_outcome(spec, params, y, x, z)
        np.testing.assert_allclose(got, grad, rtol=1e-6, atol=1e-8)


def test_density_normalizes_and_score_is_mean_zero():
    spec = controlled_model()
    params = OutcomeParams(beta=[0.5, 0.2, -0.2], sigma2=1.7)
    x, z = 0.4, np.array([1.0])
    mu = float(design_row(spec, x, z) @ params.beta)
    sd = math.sqrt(params.sigma2)
    lo, hi = mu - 12 * sd, mu + 12 * sd

    total = adaptive_quadrature(
        lambda y: math.exp(log_density_outcome(spec, params, y, x, z)), lo, hi)
    assert total == pytest.approx(1.0, abs=1e-8)

    for k in range(4):
        moment = adaptive_quadrature(
            lambda y: score_outcome(spec, params, y, x, z)[k]
            * math.exp(log_density_outcome(spec, params, y, x, z)), lo, hi)
        assert moment == pytest.approx(0.0, abs=1e-8)


def test_design_matrix_stacks_rows():
    spec = controlled_model()
    x = np.array([0.0, 1.0, 2.0])
    z = np.array([[0.0], [1.0], [0.0]])
    m = design_matrix(spec, x, z)
    np.testing.assert_allclose(m, [[1, 0, 0], [1, 1, 1], [1, 2, 0]])


def test_modelspec_needs_intercept():
    with pytest.raises(ConfigError):
        ModelSpec(terms=(Term("x"),))
    with pytest.raises(ConfigError):
        ModelSpec(terms=())


def test_params_validation():
    with pytest.raises(ConfigError):
        OutcomeParams(beta=[1.0], sigma2=0.0)
    with pytest.raises(ConfigError):
        OutcomeParams(beta=[np.nan], sigma2=1.0)
    params = OutcomeParams(beta=[1.0, 2.0], sigma2=1.0)
    with pytest.raises(ConfigError):
        log_density_outcome(ModelSpec(terms=(Term("intercept"),)), params, 0, 0, [0])


def test_observation_validation():
    with pytest.raises(DataError):
        Observation(y=0.0, w=np.inf, delta=1, z=[0.0])
    with pytest.raises(DataError):
        Observation(y=0.0, w=0.0, delta=2, z=[0.0])


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(y=[1.0], w=[1.0], delta=[0], z=[[0.0]])  # no uncensored row
    with pytest.raises(DataError):
        Dataset(y=[], w=[], delta=[], z=np.empty((0, 1)))
    ds = Dataset(y=[1.0, 2.0], w=[1.0, 0.5], delta=[1, 0], z=[[0.0], [1.0]])
    assert ds.n == 2 and ds.d == 1 and ds.n_uncensored == 1
    assert ds.censoring_rate == pytest.approx(0.5)
    rows = list(ds.rows())
    assert rows[1].delta == 0 and rows[1].w == 0.5


def test_dataset_rows_roundtrip():
    ds = Dataset(y=[1.0, 2.0, 3.0], w=[0.3, 0.7, 0.1], delta=[1, 0, 1],
                 z=[[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
    back = Dataset.from_rows(list(ds.rows()))
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.w, ds.w)
    np.testing.assert_array_equal(back.delta, ds.delta)
    np.testing.assert_array_equal(back.z, ds.z)
