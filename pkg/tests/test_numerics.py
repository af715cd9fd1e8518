import math

import numpy as np
import pytest

from spire import (ConfigError, NumericalError, OutcomeParams, ToleranceError,
                   adaptive_quadrature, gauss_hermite,
                   integrate_against_outcome, newton_solve, solve_linear)
from spire.simulation import controlled_model


def test_gauss_hermite_two_points():
    rule = gauss_hermite(2)
    np.testing.assert_allclose(rule.nodes, [-1.0, 1.0], atol=1e-14)
    np.testing.assert_allclose(rule.weights, [0.5, 0.5], atol=1e-14)


def test_gauss_hermite_second_moment():
    for n in (2, 3, 10, 40):
        rule = gauss_hermite(n)
        assert np.sum(rule.weights * rule.nodes**2) == pytest.approx(1.0, abs=1e-10)


def test_gauss_hermite_fourth_moment():
    for n in (3, 5, 40):
        rule = gauss_hermite(n)
        assert np.sum(rule.weights * rule.nodes**4) == pytest.approx(3.0, abs=1e-9)


def test_gauss_hermite_polynomial_exactness():
    # degree 2n-1 exactness against the standard normal weight
    moments = {0: 1.0, 2: 1.0, 4: 3.0, 6: 15.0, 8: 105.0, 10: 945.0}
    for n in range(2, 21):
        rule = gauss_hermite(n)
        for deg, want in moments.items():
            if deg <= 2 * n - 1:
                got = float(np.sum(rule.weights * rule.nodes**deg))
                assert got == pytest.approx(want, rel=1e-10, abs=1e-10)


def test_gauss_hermite_range_check():
    with pytest.raises(ConfigError):
        gauss_hermite(1)
    with pytest.raises(ConfigError):
        gauss_hermite(129)


def test_integrate_against_outcome_constant_and_mean():
    spec = controlled_model()
    params = OutcomeParams(beta=[0.5, 0.2, -0.2], sigma2=2.0)
    rule = gauss_hermite(20)
    one = integrate_against_outcome(lambda y: 1.0, spec, params, 0.3, [1.0], rule)
    assert float(one) == pytest.approx(1.0, abs=1e-12)
    mu = 0.5 + 0.2 * 0.3 - 0.2
    mean = integrate_against_outcome(lambda y: y, spec, params, 0.3, [1.0], rule)
    assert float(mean) == pytest.approx(mu, abs=1e-12)


def test_integrate_against_outcome_nonfinite_raises():
    spec = controlled_model()
    params = OutcomeParams(beta=[0.5, 0.2, -0.2], sigma2=1.0)
    with pytest.raises(NumericalError):
        integrate_against_outcome(lambda y: float("inf"), spec, params, 0.0,
                                  [0.0], gauss_hermite(4))


def test_solve_linear_identity_and_diagonal():
    b = np.array([[2.0], [4.0]])
    x, fb = solve_linear(np.eye(2), b)
    np.testing.assert_allclose(x, b)
    assert not fb
    x, fb = solve_linear(np.diag([2.0, 4.0]), np.array([2.0, 4.0]))
    np.testing.assert_allclose(x, [1.0, 1.0])
    assert not fb


def test_solve_linear_random_residual():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(10, 10)) + 10 * np.eye(10)
    b = rng.normal(size=(10, 3))
    x, fb = solve_linear(a, b)
    assert not fb
    assert np.linalg.norm(a @ x - b) <= 1e-10 * np.linalg.norm(b) + 1e-12


def test_solve_linear_rank_deficient_fallback():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 4))
    a[3] = a[2]  # duplicate row
    x_true = rng.normal(size=4)
    b = a @ x_true  # consistent system
    x, fb = solve_linear(a, b)
    assert fb
    assert np.linalg.norm(a @ x - b) <= 1e-8 * max(np.linalg.norm(b), 1.0)


def test_newton_linear_one_iteration():
    rep = newton_solve(lambda b: b - 1.0, np.array([0.0]))
    assert rep.converged
    assert rep.iterations <= 2
    np.testing.assert_allclose(rep.root, [1.0], atol=1e-12)


def test_newton_two_dim():
    rep = newton_solve(lambda b: np.array([b[0] ** 2 - 4.0, b[1]]),
                       np.array([1.0, 1.0]))
    assert rep.converged
    np.testing.assert_allclose(rep.root, [2.0, 0.0], atol=1e-8)


def test_newton_random_linear_systems_converge_fast():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a = rng.normal(size=(3, 3)) + 4 * np.eye(3)
        b = rng.normal(size=3)
        rep = newton_solve(lambda v: a @ v - b, rng.normal(size=3))
        assert rep.converged and rep.iterations <= 2
        np.testing.assert_allclose(rep.root, np.linalg.solve(a, b), atol=1e-6)


def test_newton_nonconvergence_reported():
    # no root: f(x) = x^2 + 1 stalls and must be flagged, not raised
    rep = newton_solve(lambda b: b * b + 1.0, np.array([0.5]), max_iter=15)
    assert not rep.converged
    assert rep.final_norm > 1e-8


def test_newton_keeps_jacobian():
    rep = newton_solve(lambda b: 3.0 * b - 6.0, np.array([0.0]))
    assert rep.jacobian is not None
    np.testing.assert_allclose(rep.jacobian, [[3.0]], rtol=1e-7)


def test_adaptive_quadrature_basics():
    assert adaptive_quadrature(lambda y: 1.0, 0.0, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert adaptive_quadrature(lambda y: y * y, 0.0, 1.0) == pytest.approx(1 / 3, abs=1e-10)


def test_adaptive_quadrature_normal_density():
    val = adaptive_quadrature(
        lambda y: math.exp(-0.5 * y * y) / math.sqrt(2 * math.pi), -8.0, 8.0)
    assert val == pytest.approx(1.0, abs=1e-10)


def test_adaptive_quadrature_depth_cap():
    with pytest.raises(ToleranceError):
        adaptive_quadrature(lambda y: abs(y - 1 / 3) ** -0.5 if y != 1 / 3 else 1e12,
                            0.0, 1.0, tol=1e-14, max_depth=8)
