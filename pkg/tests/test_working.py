import math

import mpmath
import numpy as np
import pytest

from spire import (ConfigError, Dataset, DegenerateWorkingModelError, Grid,
                   KmConfig, censoring_survival_weight, censoring_weight_fn,
                   discretize_parametric, km_density_on_grid, km_survival,
                   make_grid, uniform_working_model)
from spire.simulation import generate_controlled, generate_realistic, rng_for
from spire.working import _km_curve


def _toy_dataset(w, delta, z=None):
    n = len(w)
    z = np.zeros((n, 1)) if z is None else np.asarray(z)
    return Dataset(y=np.zeros(n), w=np.asarray(w, dtype=float),
                   delta=np.asarray(delta), z=z)


def test_make_grid_inflation():
    ds = _toy_dataset([0.2, 1.0], [1, 1])
    g = make_grid(ds, 3)
    np.testing.assert_allclose(g.points, [0.0, 0.5000005, 1.000001], rtol=1e-12)


def test_make_grid_two_points():
    ds = _toy_dataset([1.0], [1])
    g = make_grid(ds, 2)
    np.testing.assert_allclose(g.points, [0.0, 1.000001], rtol=1e-12)


def test_make_grid_m_check():
    ds = _toy_dataset([1.0], [1])
    with pytest.raises(ConfigError):
        make_grid(ds, 1)


def test_grid_covers_every_censored_time():
    for rep in range(5):
        ds = generate_controlled(400, 0.0, rng_for(11, rep))
        g = make_grid(ds, 40)
        for c in ds.w[ds.delta == 0]:
            assert g.first_index_above(c) < g.m


def test_discretize_uniform_density():
    grid = Grid(points=np.linspace(0.0, 1.0, 4))
    wm = discretize_parametric(lambda x, c, z: np.ones_like(x), grid)
    np.testing.assert_allclose(wm.weights(0.3, [0.0]), [0.25] * 4)


def test_discretize_symmetry():
    grid = Grid(points=np.linspace(-1.0, 1.0, 9))
    wm = discretize_parametric(
        lambda x, c, z: np.exp(-0.5 * (x - c) ** 2 / 0.4), grid)
    p = wm.weights(0.0, [0.0])
    np.testing.assert_allclose(p, p[::-1], rtol=1e-12)
    assert p.sum() == pytest.approx(1.0, abs=1e-14)


def test_discretize_matches_high_precision_beta():
    # realistic-style conditional beta density, evaluated with mpmath
    grid = Grid(points=np.linspace(0.0, 1.4, 23))
    c, z = 0.62, np.array([0.31, 0.22, 1.0])
    a, b = 1.6 + 5.0 * c, 2.0 + z[1] + z[2]

    def dens(x, cc, zz):
        u = x - zz[0]
        out = np.zeros_like(x)
        ok = (u > 0) & (u < 1)
        out[ok] = u[ok] ** (a - 1) * (1 - u[ok]) ** (b - 1)
        return out

    wm = discretize_parametric(dens, grid)
    got = wm.weights(c, z)

    mpmath.mp.dps = 50
    vals = []
    for x in grid.points:
        u = mpmath.mpf(float(x)) - mpmath.mpf(float(z[0]))
        if 0 < u < 1:
            vals.append(u ** (a - 1) * (1 - u) ** (b - 1)
                        / mpmath.beta(mpmath.mpf(a), mpmath.mpf(b)))
        else:
            vals.append(mpmath.mpf(0))
    total = sum(vals)
    want = np.array([float(v / total) for v in vals])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_discretize_degenerate_raises():
    grid = Grid(points=np.linspace(0.0, 1.0, 5))
    wm = discretize_parametric(lambda x, c, z: np.zeros_like(x), grid)
    with pytest.raises(DegenerateWorkingModelError):
        wm.weights(0.2, [0.0])


def test_discretize_scale_invariance():
    grid = Grid(points=np.linspace(0.0, 2.0, 15))
    base = lambda x, c, z: np.exp(-x) + 0.1 * c
    wm1 = discretize_parametric(base, grid)
    wm2 = discretize_parametric(lambda x, c, z: 7.3 * base(x, c, z), grid)
    for c in (0.1, 0.9, 1.5):
        np.testing.assert_allclose(wm1.weights(c, [0.0]), wm2.weights(c, [0.0]),
                                   atol=1e-12)


def test_km_survival_before_first_event_is_one():
    ds = _toy_dataset([0.5, 0.8, 1.2], [1, 1, 0])
    assert km_survival(ds, 0.1, [0.0], KmConfig(0.05)) == 1.0


def test_km_survival_no_events_is_one():
    # curve level: with no events the product is empty for every t
    w = np.array([0.5, 0.9, 1.4])
    times, surv = _km_curve(w, np.zeros(3, dtype=bool), np.zeros((3, 1)),
                            np.zeros(1), 0.05)
    assert times.size == 0 and surv.size == 0


def test_km_survival_matches_empirical_no_censoring():
    rng = np.random.default_rng(5)
    w = rng.uniform(0.0, 2.0, size=50)
    ds = _toy_dataset(w, np.ones(50, dtype=int), rng.normal(size=(50, 1)))
    cfg = KmConfig(1e6)  # effectively uniform kernel weights
    n = 50
    ot = np.sort(w)
    for t in np.concatenate([[ot[0] - 0.1], (ot[:-1] + ot[1:]) / 2, [ot[-1] + 0.1]]):
        emp = max(float(np.mean(w > t)), 1.0 / n)
        assert km_survival(ds, t, [0.0], cfg) == pytest.approx(emp, abs=1e-10)


def test_km_survival_monotone_and_bounded():
    ds = generate_controlled(120, 0.0, rng_for(1, 0))
    cfg = KmConfig(0.05)
    for z in ([0.0], [1.0]):
        vals = [km_survival(ds, t, z, cfg) for t in np.linspace(-1.5, 2.0, 60)]
        assert all(v2 <= v1 + 1e-12 for v1, v2 in zip(vals, vals[1:]))
        assert all(1.0 / ds.n - 1e-12 <= v <= 1.0 + 1e-12 for v in vals)


def test_km_density_single_uncensored():
    ds = _toy_dataset([0.5], [1])
    grid = Grid(points=np.array([0.0, 0.5, 1.0]))
    wm = km_density_on_grid(ds, grid, KmConfig(0.05))
    np.testing.assert_allclose(wm.weights(0.0, [0.0]), [0.0, 1.0, 0.0], atol=1e-15)


def test_km_density_sums_to_one_and_ignores_c():
    ds = generate_controlled(150, 0.0, rng_for(2, 0))
    grid = make_grid(ds, 25)
    wm = km_density_on_grid(ds, grid, KmConfig(0.05))
    p1 = wm.weights(0.1, [1.0])
    p2 = wm.weights(0.9, [1.0])
    np.testing.assert_allclose(p1, p2, atol=0)
    assert p1.sum() == pytest.approx(1.0, abs=1e-12)


def test_km_density_matches_histogram_uncensored():
    rng = np.random.default_rng(9)
    w = rng.uniform(0.05, 0.95, size=20)
    ds = _toy_dataset(w, np.ones(20, dtype=int), rng.normal(size=(20, 1)))
    grid = Grid(points=np.linspace(0.0, 1.0, 6))
    wm = km_density_on_grid(ds, grid, KmConfig(1e6))
    got = wm.weights(0.0, [0.0])
    mids = (grid.points[1:] + grid.points[:-1]) / 2
    counts = np.bincount(np.searchsorted(mids, w), minlength=6)
    np.testing.assert_allclose(got, counts / 20.0, atol=1e-12)


def test_censoring_weight_trivial_cases():
    ds = _toy_dataset([0.5, 0.7], [1, 1])
    assert censoring_survival_weight(ds, 0.6, [0.0], KmConfig(0.05)) == 1.0
    ds2 = _toy_dataset([0.5, 0.7, 0.2], [1, 1, 0])
    assert censoring_survival_weight(ds2, 0.1, [0.0], KmConfig(0.05)) == 1.0


def test_censoring_weight_decreases_under_heavy_censoring():
    ds = generate_controlled(400, -0.5, rng_for(3, 1))  # ~80% censored
    cfg = KmConfig(0.05)
    w_fn = censoring_weight_fn(ds, cfg)
    c_min = ds.w[ds.delta == 0].min()
    x_hi = np.quantile(ds.w[ds.delta == 1], 0.9)
    assert w_fn(x_hi, np.array([1.0])) < 1.0
    assert w_fn(c_min - 0.01, np.array([1.0])) == 1.0
    assert w_fn(x_hi, np.array([1.0])) == pytest.approx(
        censoring_survival_weight(ds, x_hi, [1.0], cfg), abs=0)


def test_weights_nonnegative_and_normalized_everywhere():
    ds = generate_realistic(300, rng_for(4, 0))
    grid = make_grid(ds, 30)
    models = [
        uniform_working_model(grid),
        km_density_on_grid(ds, grid, KmConfig(0.05)),
        discretize_parametric(
            lambda x, c, z: np.exp(-0.5 * (x - c) ** 2 / 0.2), grid),
    ]
    # query at (c, z) drawn from the design itself, the domain fits use
    probe = generate_realistic(100, rng_for(4, 1))
    for c, z in zip(probe.w, probe.z):
        for wm in models:
            p = wm.weights(float(c), z)
            assert np.all(p >= 0)
            assert abs(p.sum() - 1.0) <= 1e-12
