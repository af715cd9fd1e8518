"""Observed data containers and the normal-linear outcome model.

Each subject contributes ``(y, w, delta, z)``: a response ``y``, the observed
part ``w = min(x, c)`` of a covariate ``x`` that may be right-censored at
``c``, the indicator ``delta = 1(x <= c)``, and fully observed covariates
``z``.  The outcome model is homoscedastic normal-linear,

    y | x, z  ~  Normal(sum_t beta_t * term_t(x, z), sigma2),

where the mean terms are declared through :class:`ModelSpec`.  Every
supported term is affine in ``x``; downstream integration code relies on
that (see :func:`design_affine`).

The estimated parameter vector is always ``(beta, sigma2)``, so the score
:func:`score_outcome` has ``len(beta) + 1`` components.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

_LOG_2PI = math.log(2.0 * math.pi)

TERM_KINDS = ("intercept", "x", "x_minus_z", "z", "x_minus_z_times_z")


@dataclass(frozen=True)
class Term:
    """One mean-model term.

    kind:
        * ``"intercept"``           -- constant 1
        * ``"x"``                   -- the censored covariate itself
        * ``"x_minus_z"``           -- x shifted by covariate ``k``
        * ``"z"``                   -- covariate ``k``
        * ``"x_minus_z_times_z"``   -- (x - z_k) * z_j interaction
    """

    kind: str
    k: int | None = None
    j: int | None = None

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ConfigError(f"unknown term kind {self.kind!r}")
        needs_k = self.kind in ("x_minus_z", "z", "x_minus_z_times_z")
        if needs_k and (self.k is None or self.k < 0):
            raise ConfigError(f"term {self.kind!r} needs a covariate index k >= 0")
        if self.kind == "x_minus_z_times_z" and (self.j is None or self.j < 0):
            raise ConfigError("interaction term needs a second covariate index j >= 0")

    def max_index(self) -> int:
        """Largest covariate index the term touches, -1 if none."""
        return max(-1 if self.k is None else self.k, -1 if self.j is None else self.j)


@dataclass(frozen=True)
class ModelSpec:
    """Declarative mean structure of the outcome model."""

    terms: tuple[Term, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ConfigError("mean model needs at least one term")
        if not any(t.kind == "intercept" for t in self.terms):
            raise ConfigError("mean model must contain an intercept")

    @property
    def n_coef(self) -> int:
        """Number of mean coefficients (length of beta)."""
        return len(self.terms)

    @property
    def parameter_count(self) -> int:
        """Total parameters estimated: mean coefficients plus sigma2."""
        return len(self.terms) + 1

    def max_cov_index(self) -> int:
        return max(t.max_index() for t in self.terms)

    def check_dimension(self, d: int) -> None:
        if self.max_cov_index() >= d:
            raise ConfigError(
                f"mean model uses covariate index {self.max_cov_index()} "
                f"but data have only d={d} covariates"
            )


@dataclass(frozen=True)
class OutcomeParams:
    """Regression coefficients plus error variance."""

    beta: np.ndarray
    sigma2: float

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float).reshape(-1)
        beta.flags.writeable = False
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if not np.all(np.isfinite(beta)):
            raise ConfigError("beta must be finite")
        if not (math.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, [self.sigma2]])

    @classmethod
    def from_vector(cls, theta: Sequence[float]) -> "OutcomeParams":
        theta = np.asarray(theta, dtype=float)
        return cls(beta=theta[:-1], sigma2=float(theta[-1]))

    def check_for(self, spec: ModelSpec) -> None:
        if self.beta.size != spec.n_coef:
            raise ConfigError(
                f"beta has {self.beta.size} entries, mean model has {spec.n_coef} terms"
            )


@dataclass(frozen=True)
class Observation:
    """A single observed row (y, w, delta, z)."""

    y: float
    w: float
    delta: int
    z: np.ndarray

    def __post_init__(self):
        z = np.atleast_1d(np.array(self.z, dtype=float))
        z.flags.writeable = False
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "w", float(self.w))
        object.__setattr__(self, "delta", int(self.delta))
        if not math.isfinite(self.w):
            raise DataError("w must be finite")
        if self.delta not in (0, 1):
            raise DataError(f"delta must be 0 or 1, got {self.delta}")


@dataclass(frozen=True)
class Dataset:
    """A validated collection of observations, stored column-wise."""

    y: np.ndarray
    w: np.ndarray
    delta: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        w = np.array(self.w, dtype=float).reshape(-1)
        delta = np.array(self.delta, dtype=int).reshape(-1)
        z = np.array(self.z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, 1)
        n = y.size
        if n == 0:
            raise DataError("dataset is empty")
        if not (w.size == n and delta.size == n and z.shape[0] == n):
            raise DataError("y, w, delta, z must have matching row counts")
        if not np.all(np.isfinite(y)):
            raise DataError("y contains non-finite values")
        if not np.all(np.isfinite(w)):
            raise DataError("w contains non-finite values")
        if not np.all(np.isfinite(z)):
            raise DataError("z contains non-finite values")
        if not np.all((delta == 0) | (delta == 1)):
            raise DataError("delta must contain only 0/1")
        if not np.any(delta == 1):
            raise DataError("dataset has no uncensored rows; nothing to initialize from")
        for a in (y, w, delta, z):
            a.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "z", z)

    @classmethod
    def from_rows(cls, rows: Sequence[Observation]) -> "Dataset":
        if not rows:
            raise DataError("dataset is empty")
        d = rows[0].z.size
        if any(r.z.size != d for r in rows):
            raise DataError("all rows must share the covariate dimension d")
        return cls(
            y=np.array([r.y for r in rows]),
            w=np.array([r.w for r in rows]),
            delta=np.array([r.delta for r in rows]),
            z=np.vstack([r.z for r in rows]),
        )

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.z.shape[1]

    @property
    def n_uncensored(self) -> int:
        return int(np.sum(self.delta == 1))

    @property
    def censoring_rate(self) -> float:
        return float(np.mean(self.delta == 0))

    def rows(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield Observation(self.y[i], self.w[i], self.delta[i], self.z[i])


def _term_value(term: Term, x: float, z: np.ndarray) -> float:
    d = z.size
    if term.max_index() >= d:
        raise ConfigError(
            f"term {term.kind!r} uses covariate index {term.max_index()} "
            f"but z has length {d}"
        )
    if term.kind == "intercept":
        return 1.0
    if term.kind == "x":
        return x
    if term.kind == "x_minus_z":
        return x - z[term.k]
    if term.kind == "z":
        return z[term.k]
    return (x - z[term.k]) * z[term.j]


def design_row(spec: ModelSpec, x: float, z) -> np.ndarray:
    """Evaluate the mean-term basis at a single (x, z)."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return np.array([_term_value(t, float(x), z) for t in spec.terms])


def design_affine(spec: ModelSpec, z_mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Decompose the design rows as ``D0 + D1 * x`` for a batch of z rows.

    Returns two (n, p) arrays such that ``design_row(spec, x, z[i]) ==
    D0[i] + D1[i] * x`` for any x.  Valid because every term kind is affine
    in x.
    """
    z_mat = np.atleast_2d(np.asarray(z_mat, dtype=float))
    n, d = z_mat.shape
    spec.check_dimension(d)
    p = spec.n_coef
    d0 = np.zeros((n, p))
    d1 = np.zeros((n, p))
    for t_idx, t in enumerate(spec.terms):
        if t.kind == "intercept":
            d0[:, t_idx] = 1.0
        elif t.kind == "x":
            d1[:, t_idx] = 1.0
        elif t.kind == "x_minus_z":
            d0[:, t_idx] = -z_mat[:, t.k]
            d1[:, t_idx] = 1.0
        elif t.kind == "z":
            d0[:, t_idx] = z_mat[:, t.k]
        else:  # x_minus_z_times_z
            d0[:, t_idx] = -z_mat[:, t.k] * z_mat[:, t.j]
            d1[:, t_idx] = z_mat[:, t.j]
    return d0, d1


def design_matrix(spec: ModelSpec, x_arr: np.ndarray, z_mat: np.ndarray) -> np.ndarray:
    """Stack design rows for paired arrays of x and z."""
    d0, d1 = design_affine(spec, z_mat)
    x_arr = np.asarray(x_arr, dtype=float).reshape(-1)
    return d0 + d1 * x_arr[:, None]


def mean_value(spec: ModelSpec, params: OutcomeParams, x: float, z) -> float:
    return float(design_row(spec, x, z) @ params.beta)


def log_density_outcome(spec: ModelSpec, params: OutcomeParams, y: float, x: float, z) -> float:
    """log f(y | x, z) under the normal-linear outcome model."""
    params.check_for(spec)
    r = float(y) - mean_value(spec, params, x, z)
    return -0.5 * (_LOG_2PI + math.log(params.sigma2) + r * r / params.sigma2)


def score_outcome(spec: ModelSpec, params: OutcomeParams, y: float, x: float, z) -> np.ndarray:
    """Gradient of :func:`log_density_outcome` in (beta, sigma2).

    The beta block is ``(r / sigma2) * design_row`` with residual r; the
    sigma2 component is ``(r^2 / sigma2^2 - 1 / sigma2) / 2``.
    """
    params.check_for(spec)
    row = design_row(spec, x, z)
    s2 = params.sigma2
    r = float(y) - float(row @ params.beta)
    out = np.empty(row.size + 1)
    out[:-1] = (r / s2) * row
    out[-1] = 0.5 * (r * r / (s2 * s2) - 1.0 / s2)
    return out
