"""Working models for the conditional law of the censored covariate.

A working model is an analyst-supplied, possibly wrong, conditional density
for x given (c, z).  Estimation only ever sees it through a discrete
approximation: a grid ``x_1 < ... < x_m`` and normalized weights
``p_j(c, z)`` proportional to the working density at the grid points.

Three constructions are provided:

* :func:`discretize_parametric` -- weights from any closed-form density;
* :func:`uniform_working_model` -- constant weights (the canonical
  misspecified choice);
* :func:`km_density_on_grid` -- jump masses of the kernel-localized
  Kaplan-Meier survival estimate of x given z, which deliberately ignores
  c (an independence working model).

:func:`censoring_survival_weight` estimates ``pr(C >= x | z)`` from the
flipped indicator (study exit treated as the event) for inverse
probability weighting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError, DegenerateWorkingModelError
from .model import Dataset


@dataclass(frozen=True)
class Grid:
    """Sorted support points for a discrete working density."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1)
        if pts.size < 2:
            raise ConfigError("grid needs at least 2 points")
        if not np.all(np.diff(pts) > 0):
            raise ConfigError("grid points must be strictly increasing")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def m(self) -> int:
        return self.points.size

    def first_index_above(self, c: float) -> int:
        """Smallest j with points[j] > c (== m when none)."""
        return int(np.searchsorted(self.points, c, side="right"))


def make_grid(dataset: Dataset, m: int, lower: float | None = None) -> Grid:
    """Equispaced grid from ``lower`` to ``max(w) * (1 + 1e-6)``.

    ``lower`` defaults to 0, or to the smallest observed time when the
    data extend below 0.  The slight inflation of the upper end guarantees
    every censored c has at least one grid point strictly above it.
    """
    if m < 2:
        raise ConfigError("m must be at least 2")
    if lower is None:
        lower = min(0.0, float(np.min(dataset.w)))
    mx = float(np.max(dataset.w))
    upper = mx * (1.0 + 1e-6) if mx > 0 else mx + 1e-6 * (1.0 + abs(mx))
    if not upper > lower:
        raise ConfigError(f"grid range [{lower}, {upper}] is empty")
    return Grid(points=np.linspace(lower, upper, int(m)))


@dataclass(frozen=True)
class DiscreteWorkingModel:
    """Grid plus a weight function ``(c, z) -> p`` with p summing to one."""

    grid: Grid
    weight_fn: Callable[[float, np.ndarray], np.ndarray]
    kind: str  # "parametric" | "uniform" | "localized_km"

    def weights(self, c: float, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        p = np.asarray(self.weight_fn(float(c), z), dtype=float)
        if p.shape != (self.grid.m,):
            raise ConfigError(
                f"weight_fn returned shape {p.shape}, expected ({self.grid.m},)"
            )
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise DegenerateWorkingModelError(
                f"working model produced invalid weights at c={c}, z={z}"
            )
        s = p.sum()
        if abs(s - 1.0) > 1e-12:
            raise DegenerateWorkingModelError(
                f"working weights sum to {s}, not 1, at c={c}, z={z}"
            )
        return p


def discretize_parametric(density, grid: Grid, kind: str = "parametric") -> DiscreteWorkingModel:
    """Working model with weights ``density(x_j, c, z)`` normalized over the grid.

    ``density`` must accept a vector of x values and return nonnegative
    values; an all-zero evaluation raises, naming the offending (c, z).
    """

    def weight_fn(c, z):
        vals = np.asarray(density(grid.points, c, z), dtype=float)
        if vals.shape != (grid.m,):
            vals = np.broadcast_to(vals, (grid.m,)).astype(float)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise DegenerateWorkingModelError(
                f"working density invalid on the grid at c={c}, z={z}"
            )
        s = vals.sum()
        if s <= 0:
            raise DegenerateWorkingModelError(
                f"working density vanishes on the whole grid at c={c}, z={z}"
            )
        return vals / s

    return DiscreteWorkingModel(grid=grid, weight_fn=weight_fn, kind=kind)


def uniform_working_model(grid: Grid) -> DiscreteWorkingModel:
    """Equal weight on every grid point, for any (c, z)."""
    return discretize_parametric(lambda x, c, z: np.ones_like(x), grid, kind="uniform")


@dataclass(frozen=True)
class KmConfig:
    """Bandwidth of the Gaussian product kernel used to localize on z."""

    bandwidth: float

    def __post_init__(self):
        if not (math.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ConfigError(f"bandwidth must be positive, got {self.bandwidth}")


def _kernel_weights(z_mat: np.ndarray, z: np.ndarray, h: float) -> np.ndarray:
    # product of componentwise Gaussian kernels, rescaled by the nearest
    # point so far-away queries do not underflow; constants and common
    # factors cancel in every ratio the estimator forms
    sq = np.sum((z_mat - z[None, :]) ** 2, axis=1)
    return np.exp(-0.5 * (sq - sq.min()) / (h * h))


def _km_curve(w: np.ndarray, events: np.ndarray, z_mat: np.ndarray,
              z: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Event times (sorted, ties broken by row index) and the raw
    product-limit survival value just after each event.

    The 1/n floor belongs to survival queries, not to the jump sizes, so it
    is applied by the callers that need it."""
    n = w.size
    kw = _kernel_weights(z_mat, z, h)
    order = np.lexsort((np.arange(n), w))
    w_sorted = w[order]
    kw_sorted = kw[order]
    ev_sorted = events[order].astype(bool)
    # at-risk mass for a jump at w_j: everyone with w >= w_j (ties included)
    suffix = np.concatenate([np.cumsum(kw_sorted[::-1])[::-1], [0.0]])
    first_at_value = np.searchsorted(w_sorted, w_sorted, side="left")
    at_risk = suffix[first_at_value]
    ev_idx = np.flatnonzero(ev_sorted)
    times = w_sorted[ev_idx]
    factors = 1.0 - kw_sorted[ev_idx] / at_risk[ev_idx]
    surv = np.cumprod(np.clip(factors, 0.0, 1.0))
    return times, surv


def km_survival(dataset: Dataset, t: float, z, cfg: KmConfig) -> float:
    """Localized Kaplan-Meier estimate of pr(X > t | z), floored at 1/n."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    times, surv = _km_curve(dataset.w, dataset.delta == 1, dataset.z, z, cfg.bandwidth)
    k = int(np.searchsorted(times, t, side="right"))
    if k == 0:
        return 1.0
    return float(max(surv[k - 1], 1.0 / dataset.n))


def _grid_masses(times: np.ndarray, surv: np.ndarray, grid: Grid) -> np.ndarray:
    before = np.concatenate([[1.0], surv[:-1]])
    jumps = before - surv
    masses = np.zeros(grid.m)
    if times.size:
        mids = 0.5 * (grid.points[1:] + grid.points[:-1])
        nearest = np.searchsorted(mids, times)
        np.add.at(masses, nearest, jumps)
    return masses


def km_density_on_grid(dataset: Dataset, grid: Grid, cfg: KmConfig) -> DiscreteWorkingModel:
    """Discrete density from the jumps of the localized Kaplan-Meier curve.

    Jump masses at uncensored w values are assigned to the nearest grid
    point and renormalized.  The resulting weights depend on z only: the
    model asserts independence of x from c given z.
    """
    if dataset.n_uncensored == 0:
        raise DataError("localized Kaplan-Meier needs at least one uncensored row")
    cache: dict[bytes, np.ndarray] = {}

    def weight_fn(c, z):
        key = z.tobytes()
        got = cache.get(key)
        if got is None:
            times, surv = _km_curve(dataset.w, dataset.delta == 1,
                                    dataset.z, z, cfg.bandwidth)
            masses = _grid_masses(times, surv, grid)
            total = masses.sum()
            if total <= 0:
                raise DegenerateWorkingModelError(
                    f"Kaplan-Meier working model has no mass at z={z}"
                )
            got = masses / total
            cache[key] = got
        return got

    return DiscreteWorkingModel(grid=grid, weight_fn=weight_fn, kind="localized_km")


def censoring_survival_weight(dataset: Dataset, x: float, z, cfg: KmConfig) -> float:
    """Estimate of pr(C >= x | z) from the censoring-time Kaplan-Meier.

    Treats study exit as the event (indicator 1 - delta).  Identically one
    when the dataset has no censored rows.
    """
    if np.all(dataset.delta == 1):
        return 1.0
    z = np.atleast_1d(np.asarray(z, dtype=float))
    times, surv = _km_curve(dataset.w, dataset.delta == 0, dataset.z, z, cfg.bandwidth)
    k = int(np.searchsorted(times, x, side="right"))
    if k == 0:
        return 1.0
    return float(max(surv[k - 1], 1.0 / dataset.n))


def censoring_weight_fn(dataset: Dataset, cfg: KmConfig):
    """Vector-friendly ``(x, z) -> pr(C >= x | z)`` with per-z curve caching."""
    if np.all(dataset.delta == 1):
        return lambda x, z: 1.0
    cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}

    def weight(x, z):
        z = np.atleast_1d(np.asarray(z, dtype=float))
        key = z.tobytes()
        got = cache.get(key)
        if got is None:
            got = _km_curve(dataset.w, dataset.delta == 0, dataset.z, z, cfg.bandwidth)
            cache[key] = got
        times, surv = got
        k = int(np.searchsorted(times, x, side="right"))
        return 1.0 if k == 0 else float(max(surv[k - 1], 1.0 / dataset.n))

    return weight
