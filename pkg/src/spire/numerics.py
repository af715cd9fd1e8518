"""Quadrature, linear solves, and root finding shared by the estimators.

The quadrature rule is probabilist Gauss-Hermite: ``sum(w_i * g(t_i))``
approximates ``integral g(y) phi(y) dy`` against the standard normal
density.  Integrals against the outcome density N(mu, sigma2) reduce to
this rule by the substitution ``y = mu + sigma * t``.

:func:`adaptive_quadrature` is an independent adaptive-Simpson integrator
kept deliberately separate from the Gauss-Hermite path; tests use it as an
oracle for the score-correction integrals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError, ToleranceError
from .model import ModelSpec, OutcomeParams, mean_value

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights of a probabilist Gauss-Hermite rule."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float).reshape(-1)
        weights = np.array(self.weights, dtype=float).reshape(-1)
        if nodes.size != weights.size:
            raise ConfigError("nodes and weights must have equal length")
        if np.any(weights <= 0):
            raise ConfigError("quadrature weights must be positive")
        nodes.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def order(self) -> int:
        return self.nodes.size


def gauss_hermite(n_q: int) -> QuadratureRule:
    """Probabilist Gauss-Hermite rule with ``n_q`` nodes.

    Exact for polynomials up to degree ``2 n_q - 1`` against the standard
    normal weight.  ``n_q = 2`` gives nodes ``(-1, 1)`` and weights
    ``(0.5, 0.5)``.
    """
    if not (2 <= n_q <= 128):
        raise ConfigError(f"n_q must be in [2, 128], got {n_q}")
    nodes, weights = np.polynomial.hermite_e.hermegauss(int(n_q))
    return QuadratureRule(nodes=nodes, weights=weights / _SQRT_2PI)


def integrate_against_outcome(g, spec: ModelSpec, params: OutcomeParams,
                              x: float, z, rule: QuadratureRule) -> np.ndarray:
    """Integrate ``g(y)`` against the outcome density f(y | x, z).

    ``g`` may return a scalar or a vector; the result has the same shape.
    """
    mu = mean_value(spec, params, x, z)
    sd = math.sqrt(params.sigma2)
    vals = []
    for t in rule.nodes:
        v = np.asarray(g(mu + sd * t), dtype=float)
        if not np.all(np.isfinite(v)):
            raise NumericalError(
                f"integrand non-finite at x={x}, z={z}, node y={mu + sd * t}"
            )
        vals.append(v)
    return np.tensordot(rule.weights, np.stack(vals), axes=1)


def solve_linear(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve ``a @ x = b`` with a least-squares fallback.

    Returns ``(x, used_fallback)``.  The direct solve is accepted when the
    relative residual ||a x - b||_F / ||b||_F is at most 1e-8; otherwise the
    minimum-norm least-squares solution (singular values truncated at a
    relative threshold of 1e-10) is returned and flagged.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    b_norm = np.linalg.norm(b)
    try:
        x = np.linalg.solve(a, b)
        if np.all(np.isfinite(x)):
            resid = np.linalg.norm(a @ x - b)
            if resid <= 1e-8 * max(b_norm, 1e-300):
                return x, False
    except np.linalg.LinAlgError:
        pass
    x = np.linalg.lstsq(a, b, rcond=1e-10)[0]
    return x, True


@dataclass
class SolveReport:
    """Outcome of a Newton solve; the Jacobian is kept for the sandwich."""

    root: np.ndarray
    iterations: int
    final_norm: float
    converged: bool
    jacobian: np.ndarray | None = None


def fd_jacobian(f, x: np.ndarray, fx: np.ndarray | None = None,
                rel_step: float = 1e-5) -> np.ndarray:
    """Central finite-difference Jacobian with step ``rel_step * (1 + |x_k|)``."""
    x = np.asarray(x, dtype=float)
    if fx is None:
        fx = np.asarray(f(x), dtype=float)
    m = np.asarray(fx).size
    jac = np.empty((m, x.size))
    for k in range(x.size):
        h = rel_step * (1.0 + abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        jac[:, k] = (np.asarray(f(xp), dtype=float) - np.asarray(f(xm), dtype=float)) / (2.0 * h)
    return jac


def newton_solve(f, x0, tol: float = 1e-8, max_iter: int = 100) -> SolveReport:
    """Damped Newton iteration on ``f(x) = 0``.

    Jacobians come from :func:`fd_jacobian`; each step is halved (up to 20
    times) until ||f|| decreases, rejecting candidates where f is
    non-finite.  Iteration stops when ``||f||_inf <= tol``, when the
    accepted step is below 1e-12, or after ``max_iter`` iterations; the
    report's ``converged`` flag records whether the tolerance was met.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    fx = np.atleast_1d(np.asarray(f(x), dtype=float))
    if not np.all(np.isfinite(fx)):
        raise NumericalError("f(x0) is not finite; cannot start Newton iteration")
    jac = None
    iterations = 0
    while iterations < max_iter:
        if np.max(np.abs(fx)) <= tol:
            break
        jac = fd_jacobian(f, x, fx)
        if not np.all(np.isfinite(jac)):
            break
        step, _ = solve_linear(jac, -fx)
        lam = 1.0
        accepted = False
        fx_norm = np.linalg.norm(fx)
        for _ in range(21):
            cand = x + lam * step
            f_cand = np.atleast_1d(np.asarray(f(cand), dtype=float))
            if np.all(np.isfinite(f_cand)) and np.linalg.norm(f_cand) < fx_norm:
                x, fx = cand, f_cand
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break
        iterations += 1
        if np.linalg.norm(lam * step) <= 1e-12:
            break
    final_norm = float(np.max(np.abs(fx)))
    converged = final_norm <= tol
    if jac is None:
        jac = fd_jacobian(f, x, fx)
    return SolveReport(root=x, iterations=iterations, final_norm=final_norm,
                       converged=converged, jacobian=jac)


def _simpson(g, a, fa, b, fb):
    m = 0.5 * (a + b)
    fm = g(m)
    return m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb)


def adaptive_quadrature(g, lo: float, hi: float, tol: float = 1e-10,
                        max_depth: int = 50) -> float:
    """Adaptive Simpson estimate of ``integral_lo^hi g(y) dy``."""
    lo = float(lo)
    hi = float(hi)
    f_lo, f_hi = g(lo), g(hi)
    mid, f_mid, whole = _simpson(g, lo, f_lo, hi, f_hi)

    def recurse(a, fa, b, fb, m, fm, s, eps, depth):
        if depth > max_depth:
            raise ToleranceError(
                f"adaptive quadrature hit depth {max_depth} on [{a}, {b}]"
            )
        lm, flm, s_left = _simpson(g, a, fa, m, fm)
        rm, frm, s_right = _simpson(g, m, fm, b, fb)
        if abs(s_left + s_right - s) <= 15.0 * eps:
            return s_left + s_right + (s_left + s_right - s) / 15.0
        return (recurse(a, fa, m, fm, lm, flm, s_left, eps / 2.0, depth + 1)
                + recurse(m, fm, b, fb, rm, frm, s_right, eps / 2.0, depth + 1))

    return recurse(lo, f_lo, hi, f_hi, mid, f_mid, whole, tol, 0)
