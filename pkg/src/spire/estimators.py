"""Score constructions and fitting for the four estimators.

Four per-observation scores are available:

* complete case (``cc``): the outcome score on uncensored rows, zero
  otherwise;
* inverse probability weighting (``ipw``): the complete-case score divided
  by an analyst-supplied ``pr(C >= x | x, z)``;
* maximum likelihood (``mle``): uncensored rows keep the outcome score,
  censored rows get the working-model conditional expectation of it;
* the efficient score (``spire``): the mle score minus a correction built
  from the function ``a0``, which solves one small linear system per
  censored configuration.

The correction systems ``A(c, z) a0^T = B(c, z)`` have entries that are
integrals against the outcome density; they are evaluated with shared
Gauss-Hermite sweeps, batched across censored rows (deduplicated when two
rows share the same active grid points, weights, and covariates, which
happens systematically for weight functions that ignore c).

``a0`` vanishes on grid points at or below c, so uncensored rows are never
corrected: the efficient score of a ``delta = 1`` row *is* the outcome
score.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigError, DegenerateWorkingModelError, NumericalError,
                     SingularInformationError)
from .model import (Dataset, ModelSpec, Observation, OutcomeParams,
                    design_affine, design_matrix, score_outcome)
from .numerics import (QuadratureRule, SolveReport, fd_jacobian, gauss_hermite,
                       integrate_against_outcome, newton_solve, solve_linear)
from .working import DiscreteWorkingModel

_CHUNK_ELEMENTS = 1 << 22  # cap on the (groups, S, n_q, S) logit tensor size


@dataclass(frozen=True)
class EstimatorKind:
    """Which estimating equation to solve, with its required handles."""

    name: str
    weight_fn: object = None
    working_model: DiscreteWorkingModel | None = None

    def __post_init__(self):
        if self.name not in ("cc", "ipw", "mle", "spire"):
            raise ConfigError(f"unknown estimator kind {self.name!r}")
        if self.name == "ipw" and self.weight_fn is None:
            raise ConfigError("ipw needs a weight function handle")
        if self.name in ("mle", "spire") and self.working_model is None:
            raise ConfigError(f"{self.name} needs a working model handle")

    @classmethod
    def cc(cls) -> "EstimatorKind":
        return cls(name="cc")

    @classmethod
    def ipw(cls, weight_fn) -> "EstimatorKind":
        return cls(name="ipw", weight_fn=weight_fn)

    @classmethod
    def mle(cls, working_model: DiscreteWorkingModel) -> "EstimatorKind":
        return cls(name="mle", working_model=working_model)

    @classmethod
    def spire(cls, working_model: DiscreteWorkingModel) -> "EstimatorKind":
        return cls(name="spire", working_model=working_model)


@dataclass
class A0Solution:
    """Values of a0 on the active grid points of one (c, z) configuration.

    ``values[:, j]`` is the correction vector at ``grid.points[active_indices[j]]``;
    a0 is identically zero at grid points at or below c, so those are never
    stored.
    """

    active_indices: np.ndarray
    values: np.ndarray  # (q, m_active)
    condition_flag: bool


@dataclass
class EstimationResult:
    """Point estimate with sandwich covariance and solver diagnostics."""

    params: OutcomeParams
    covariance: np.ndarray  # asymptotic covariance of sqrt(n) (beta_hat - beta)
    ase: np.ndarray         # sqrt(diag(covariance) / n_used)
    report: SolveReport
    kind: EstimatorKind
    dropped_rows: int = 0
    n_used: int = 0

    @property
    def converged(self) -> bool:
        return self.report.converged


# ---------------------------------------------------------------------------
# per-observation scores
# ---------------------------------------------------------------------------

def score_cc(spec: ModelSpec, params: OutcomeParams, obs: Observation) -> np.ndarray:
    """Complete-case score: delta * S^F(y, w, z); zero when censored."""
    if obs.delta == 0:
        return np.zeros(spec.parameter_count)
    return score_outcome(spec, params, obs.y, obs.w, obs.z)


def score_ipw(spec: ModelSpec, params: OutcomeParams, obs: Observation,
              weight_fn) -> np.ndarray:
    """Complete-case score reweighted by 1 / pr(C >= x | x, z)."""
    if obs.delta == 0:
        return np.zeros(spec.parameter_count)
    w = float(weight_fn(obs.w, obs.z))
    if not (math.isfinite(w) and w > 0):
        raise NumericalError(f"ipw weight {w} at x={obs.w} is not positive")
    return score_outcome(spec, params, obs.y, obs.w, obs.z) / w


def _support(wm: DiscreteWorkingModel, c: float, z: np.ndarray):
    """Active grid indices with positive working weight, and the weights
    renormalized over them."""
    p_full = wm.weights(c, z)
    lo = wm.grid.first_index_above(c)
    idx = lo + np.flatnonzero(p_full[lo:] > 0)
    if idx.size == 0:
        return idx, np.empty(0)
    p = p_full[idx]
    return idx, p / p.sum()


def _log_density_terms(spec, beta, sigma2, y, xs, z):
    d0, d1 = design_affine(spec, z[None, :])
    mu = (d0 @ beta)[0] + (d1 @ beta)[0] * xs
    r = y - mu
    return r, d0[0], d1[0]


def score_working(spec: ModelSpec, params: OutcomeParams, obs: Observation,
                  wm: DiscreteWorkingModel) -> np.ndarray:
    """Score of the observed-data likelihood under the working model.

    This is also the mle estimating function: for censored rows it averages
    the outcome score over the active grid points, weighted by
    ``p_j(c, z) f(y | x_j, z)`` with log-sum-exp stabilization.
    """
    if obs.delta == 1:
        return score_outcome(spec, params, obs.y, obs.w, obs.z)
    params.check_for(spec)
    idx, p = _support(wm, obs.w, obs.z)
    if idx.size == 0:
        raise DegenerateWorkingModelError(
            f"no active grid point with positive weight above c={obs.w}"
        )
    xs = wm.grid.points[idx]
    s2 = params.sigma2
    r, d0, d1 = _log_density_terms(spec, params.beta, s2, obs.y, xs, obs.z)
    logits = np.log(p) - 0.5 * r * r / s2
    m = logits.max()
    if not math.isfinite(m):
        raise NumericalError(f"working-score denominator underflow at row c={obs.w}")
    rho = np.exp(logits - m)
    rho /= rho.sum()
    out = np.empty(spec.parameter_count)
    out[:-1] = (d0 * np.sum(rho * r) + d1 * np.sum(rho * r * xs)) / s2
    out[-1] = 0.5 * (np.sum(rho * r * r) / (s2 * s2) - 1.0 / s2)
    return out


# ---------------------------------------------------------------------------
# a0 linear systems
# ---------------------------------------------------------------------------

_A0_RIDGE = 3e-5        # Tikhonov level for the correction systems (A has unit scale)
_A0_MIN_YNODES = 96     # shared Gauss-Legendre resolution of the y integrals


def _ygrid(order: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(max(_A0_MIN_YNODES, 2 * order))


def _a0_tensor_block(x, lp, d0, d1, beta, sigma2, rule):
    """A and B blocks for a padded batch of censored configurations.

    x, lp : (G, S) active grid points and log-weights (-inf padding)
    d0, d1: (G, p) affine design pieces at each configuration's z
    Returns A (G, S, S) and B (G, S, p + 1); padded k rows carry garbage
    that the solver masks out.

    All integrals of one configuration share a single Gauss-Legendre grid
    in y covering every component's 8.5-sigma range, so the density matrix
    is evaluated once and the entries reduce to matrix products.
    """
    sd = math.sqrt(sigma2)
    inv_norm = 1.0 / math.sqrt(2.0 * math.pi * sigma2)
    a_lin = d0 @ beta
    b_lin = d1 @ beta
    p_w = np.exp(lp)                      # padded entries are 0
    mu = a_lin[:, None] + b_lin[:, None] * x
    real = p_w > 0.0
    mu_lo = np.where(real, mu, np.inf).min(axis=1) - 8.5 * sd
    mu_hi = np.where(real, mu, -np.inf).max(axis=1) + 8.5 * sd
    t, wt = _ygrid(rule.order)
    half = 0.5 * (mu_hi - mu_lo)
    y = (mu_lo + half)[:, None] + half[:, None] * t[None, :]      # (G, NY)
    wy = half[:, None] * wt[None, :]
    resid = y[:, None, :] - mu[:, :, None]                        # (G, S, NY)
    dens = np.exp(-0.5 * resid * resid / sigma2)
    dens_p = dens * p_w[:, :, None]
    mix = np.maximum(dens_p.sum(axis=1), 1e-300)                  # (G, NY)
    outer = dens * (wy / mix)[:, None, :]                         # f_k * wy / mix
    a_mat = inv_norm * np.einsum("gki,gji->gkj", outer, dens_p)
    n0 = np.sum(dens_p * resid, axis=1)
    n1 = np.sum(dens_p * resid * x[:, :, None], axis=1)
    n2 = np.sum(dens_p * resid * resid, axis=1)
    c0 = np.einsum("gki,gi->gk", outer, n0)
    c1 = np.einsum("gki,gi->gk", outer, n1)
    c2 = np.einsum("gki,gi->gk", outer, 0.5 * (n2 / (sigma2 * sigma2) - mix / sigma2))
    p = d0.shape[1]
    b_mat = np.empty(x.shape + (p + 1,))
    b_mat[..., :p] = (inv_norm / sigma2) * (
        d0[:, None, :] * c0[..., None] + d1[:, None, :] * c1[..., None])
    b_mat[..., p] = inv_norm * c2
    return a_mat, b_mat


def _ridge_solve(a_mat, b_mat, lam: float = _A0_RIDGE):
    """Tikhonov-stabilized solve; a_mat has unit scale (stochastic rows).

    The correction systems are discretizations of compact
    conditional-expectation operators: their spectra decay to zero, so a
    plain solve amplifies quadrature noise along weak directions into huge
    null-space components.  Those components barely move the correction
    values but wreck the smoothness of the score in beta, so they are
    filtered with a small ridge, which keeps the solution a smooth
    function of the parameters.
    """
    s = a_mat.shape[-1]
    gram = np.swapaxes(a_mat, -1, -2) @ a_mat + (lam * lam) * np.eye(s)
    rhs = np.swapaxes(a_mat, -1, -2) @ b_mat
    return np.linalg.solve(gram, rhs)


def _a0_flags(a_mat, b_mat, sol, axes):
    """Flag configurations whose stabilized solution leaves a visible
    residual, the sign that the system was materially ill-conditioned."""
    resid = a_mat @ sol - b_mat
    rnorm = np.sqrt(np.sum(resid * resid, axis=axes))
    bnorm = np.sqrt(np.sum(b_mat * b_mat, axis=axes))
    return rnorm > 1e-8 * np.maximum(bnorm, 1e-300)


def _solve_a0_batch(a_mat, b_mat, sizes):
    """Solve the padded batch of systems; pads get identity rows / zero rhs."""
    ng, s, _ = a_mat.shape
    valid = np.arange(s)[None, :] < sizes[:, None]
    pair = valid[:, :, None] & valid[:, None, :]
    a_mat = np.where(pair, a_mat, 0.0)
    didx = np.arange(s)
    a_mat[:, didx, didx] += np.where(valid, 0.0, 1.0)
    b_mat = np.where(valid[:, :, None], b_mat, 0.0)
    sol = _ridge_solve(a_mat, b_mat)
    return sol, _a0_flags(a_mat, b_mat, sol, axes=(1, 2))


def build_a0_system(spec: ModelSpec, params: OutcomeParams, c: float, z,
                    wm: DiscreteWorkingModel,
                    rule: QuadratureRule | None = None):
    """Assemble the linear system determining a0 at one (c, z).

    Returns ``(A, B, active_indices)`` with A of shape (m_a, m_a) and B of
    shape (m_a, q), both restricted to active grid points carrying positive
    weight.  Row k collects every entry from one quadrature sweep against
    the outcome density at x_k; each row of A sums to one.
    """
    params.check_for(spec)
    rule = rule or gauss_hermite(40)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    idx, p = _support(wm, c, z)
    if idx.size == 0:
        raise DegenerateWorkingModelError(
            f"no active grid point with positive weight above c={c}; drop the row"
        )
    xs = wm.grid.points[idx]
    s = idx.size
    q = spec.parameter_count
    s2 = params.sigma2
    d0, d1 = design_affine(spec, z[None, :])
    mu = (d0[0] @ params.beta) + (d1[0] @ params.beta) * xs
    log_p = np.log(p)

    def ratio_and_score_avg(y):
        logits = log_p - 0.5 * (y - mu) ** 2 / s2
        rho = np.exp(logits - logits.max())
        rho /= rho.sum()
        r = y - mu
        out = np.empty(s + q)
        out[:s] = rho
        out[s:s + q - 1] = (d0[0] * np.sum(rho * r) + d1[0] * np.sum(rho * r * xs)) / s2
        out[s + q - 1] = 0.5 * (np.sum(rho * r * r) / (s2 * s2) - 1.0 / s2)
        return out

    a_mat = np.empty((s, s))
    b_mat = np.empty((s, q))
    for k in range(s):
        row = integrate_against_outcome(ratio_and_score_avg, spec, params,
                                        xs[k], z, rule)
        a_mat[k] = row[:s]
        b_mat[k] = row[s:]
    return a_mat, b_mat, idx


def solve_a0(a_mat: np.ndarray, b_mat: np.ndarray,
             active_indices: np.ndarray | None = None) -> A0Solution:
    """Solve ``A a0^T = B`` and package the result as an :class:`A0Solution`.

    Uses the same Tikhonov-stabilized solve as the fitting path (see
    :func:`_ridge_solve`); the condition flag records configurations where
    the stabilized solution leaves a visible residual, i.e. where a plain
    solve would have amplified noise instead.
    """
    sol = _ridge_solve(np.asarray(a_mat, dtype=float),
                       np.asarray(b_mat, dtype=float))
    flagged = bool(_a0_flags(a_mat, b_mat, sol, axes=(0, 1)))
    if active_indices is None:
        active_indices = np.arange(a_mat.shape[0])
    return A0Solution(active_indices=np.asarray(active_indices),
                      values=sol.T, condition_flag=flagged)


class A0Cache:
    """Lazy store of a0 solutions per (c, z) at fixed parameters."""

    def __init__(self, spec: ModelSpec, params: OutcomeParams,
                 wm: DiscreteWorkingModel, rule: QuadratureRule | None = None):
        self.spec = spec
        self.params = params
        self.wm = wm
        self.rule = rule or gauss_hermite(40)
        self._store: dict[tuple, A0Solution] = {}

    def solution_for(self, c: float, z) -> A0Solution:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        key = (float(c), z.tobytes())
        got = self._store.get(key)
        if got is None:
            a_mat, b_mat, idx = build_a0_system(self.spec, self.params, c, z,
                                                self.wm, self.rule)
            got = solve_a0(a_mat, b_mat, idx)
            self._store[key] = got
        return got


def efficient_score(spec: ModelSpec, params: OutcomeParams, obs: Observation,
                    wm: DiscreteWorkingModel, cache: A0Cache | None = None,
                    rule: QuadratureRule | None = None) -> np.ndarray:
    """The efficient score of one observation under the working model.

    Uncensored rows return the outcome score untouched (the correction
    vanishes there); censored rows subtract the rho-weighted average of a0
    over the active grid points.
    """
    if obs.delta == 1:
        return score_outcome(spec, params, obs.y, obs.w, obs.z)
    if cache is None:
        cache = A0Cache(spec, params, wm, rule)
    sol = cache.solution_for(obs.w, obs.z)
    base = score_working(spec, params, obs, wm)
    idx = sol.active_indices
    xs = wm.grid.points[idx]
    p_full = wm.weights(obs.w, obs.z)
    p = p_full[idx]
    p = p / p.sum()
    s2 = params.sigma2
    r, _, _ = _log_density_terms(spec, params.beta, s2, obs.y, xs, obs.z)
    logits = np.log(p) - 0.5 * r * r / s2
    rho = np.exp(logits - logits.max())
    rho /= rho.sum()
    return base - sol.values @ rho


# ---------------------------------------------------------------------------
# vectorized fitting
# ---------------------------------------------------------------------------

@dataclass
class _CensoredBlock:
    """Beta-independent pieces of the censored rows, padded for batching."""

    y0: np.ndarray
    d0: np.ndarray
    d1: np.ndarray
    xs: np.ndarray      # (n0, S) active grid values, 0 padding
    lp: np.ndarray      # (n0, S) log weights, -inf padding
    sizes: np.ndarray   # per-row support size
    group_of_row: np.ndarray
    rep: np.ndarray     # representative row per group
    group_sizes: np.ndarray
    chunks: list        # [(group_index_array, S_chunk), ...]
    s_max: int


def _plan_chunks(order, sizes, n_q, budget):
    chunks = []
    start = 0
    while start < order.size:
        s_chunk = max(int(sizes[order[start]]), 1)
        max_g = max(1, budget // max(s_chunk * s_chunk * n_q, 1))
        stop = min(start + max_g, order.size)
        chunks.append((order[start:stop], s_chunk))
        start = stop
    return chunks


def _prepare_censored(dataset: Dataset, spec: ModelSpec,
                      wm: DiscreteWorkingModel, n_q: int):
    """Collect supports, weights, and dedup groups for all censored rows.

    Returns the block plus the original indices of kept and dropped rows.
    """
    cens_idx = np.flatnonzero(dataset.delta == 0)
    keep, dropped = [], []
    supports, weights = [], []
    key_to_group: dict = {}
    group_of_row = []
    rep = []
    for i in cens_idx:
        c = dataset.w[i]
        z = dataset.z[i]
        idx, p = _support(wm, c, z)
        if idx.size == 0:
            dropped.append(i)
            continue
        keep.append(i)
        supports.append(idx)
        weights.append(p)
        key = (idx.tobytes(), p.tobytes(), z.tobytes())
        g = key_to_group.get(key)
        if g is None:
            g = len(rep)
            key_to_group[key] = g
            rep.append(len(keep) - 1)
        group_of_row.append(g)
    keep = np.asarray(keep, dtype=int)
    if keep.size == 0:
        return None, keep, np.asarray(dropped, dtype=int)
    sizes = np.array([s.size for s in supports])
    s_max = int(sizes.max())
    n0 = keep.size
    xs = np.zeros((n0, s_max))
    lp = np.full((n0, s_max), -np.inf)
    grid_pts = wm.grid.points
    for r, (idx, p) in enumerate(zip(supports, weights)):
        xs[r, :idx.size] = grid_pts[idx]
        lp[r, :idx.size] = np.log(p)
    d0, d1 = design_affine(spec, dataset.z[keep])
    rep = np.asarray(rep, dtype=int)
    group_of_row = np.asarray(group_of_row, dtype=int)
    group_sizes = sizes[rep]
    order = np.argsort(-group_sizes, kind="stable")
    chunks = _plan_chunks(order, sizes[rep], n_q, _CHUNK_ELEMENTS)
    block = _CensoredBlock(y0=dataset.y[keep], d0=d0, d1=d1, xs=xs, lp=lp,
                           sizes=sizes, group_of_row=group_of_row, rep=rep,
                           group_sizes=group_sizes, chunks=chunks, s_max=s_max)
    return block, keep, np.asarray(dropped, dtype=int)


def _a0_rows(block: _CensoredBlock, beta, sigma2, rule):
    """a0 values aligned with each censored row's padded support."""
    q = beta.size + 1
    ng = block.rep.size
    a0_g = np.zeros((ng, block.s_max, q))
    flags = np.zeros(ng, dtype=bool)
    for g_idx, s_chunk in block.chunks:
        rows = block.rep[g_idx]
        a_mat, b_mat = _a0_tensor_block(block.xs[rows, :s_chunk],
                                        block.lp[rows, :s_chunk],
                                        block.d0[rows], block.d1[rows],
                                        beta, sigma2, rule)
        sol, fb = _solve_a0_batch(a_mat, b_mat, block.group_sizes[g_idx])
        a0_g[g_idx, :s_chunk, :] = sol
        flags[g_idx] = fb
    return a0_g[block.group_of_row], flags


def _censored_scores(block: _CensoredBlock, beta, sigma2, a0_rows):
    """Working scores (minus the a0 correction when given) for censored rows."""
    a_lin = block.d0 @ beta
    b_lin = block.d1 @ beta
    resid = block.y0[:, None] - a_lin[:, None] - b_lin[:, None] * block.xs
    logits = block.lp - 0.5 * resid * resid / sigma2
    m = logits.max(axis=1)
    if not np.all(np.isfinite(m)):
        bad = int(np.flatnonzero(~np.isfinite(m))[0])
        raise NumericalError(f"score denominator underflow on censored row {bad}")
    rho = np.exp(logits - m[:, None])
    rho /= rho.sum(axis=1, keepdims=True)
    pr = np.sum(rho * resid, axis=1)
    prx = np.sum(rho * resid * block.xs, axis=1)
    pr2 = np.sum(rho * resid * resid, axis=1)
    p = beta.size
    out = np.empty((block.y0.size, p + 1))
    out[:, :p] = (block.d0 * pr[:, None] + block.d1 * prx[:, None]) / sigma2
    out[:, p] = 0.5 * (pr2 / (sigma2 * sigma2) - 1.0 / sigma2)
    if a0_rows is not None:
        out -= np.einsum("rj,rjq->rq", rho, a0_rows)
    return out


class _Scorer:
    """Per-observation score matrix for one estimator on one dataset."""

    def __init__(self, dataset: Dataset, spec: ModelSpec, kind: EstimatorKind,
                 rule: QuadratureRule | None = None):
        spec.check_dimension(dataset.d)
        self.spec = spec
        self.kind = kind
        self.rule = rule or gauss_hermite(40)
        self.p = spec.n_coef
        self.q = spec.parameter_count
        unc = dataset.delta == 1
        self.x1 = design_matrix(spec, dataset.w[unc], dataset.z[unc])
        self.y1 = dataset.y[unc]
        self.invw = None
        if kind.name == "ipw":
            w_unc = dataset.w[unc]
            z_unc = dataset.z[unc]
            wts = np.array([float(kind.weight_fn(w_unc[i], z_unc[i]))
                            for i in range(w_unc.size)])
            if np.any(~np.isfinite(wts)) or np.any(wts <= 0):
                raise NumericalError("ipw weights must be positive and finite")
            self.invw = 1.0 / wts
        self.block = None
        kept = np.flatnonzero(~unc)
        dropped = np.empty(0, dtype=int)
        if kind.name in ("mle", "spire"):
            self.block, kept, dropped = _prepare_censored(
                dataset, spec, kind.working_model, self.rule.order)
        self.dropped_rows = int(dropped.size)
        used = np.concatenate([np.flatnonzero(unc), kept])
        order = np.argsort(used, kind="stable")
        self.used_rows = np.sort(used)
        self.n_used = used.size
        pos = np.empty_like(order)
        pos[order] = np.arange(used.size)
        self.pos_unc = pos[:self.y1.size]
        self.pos_cen = pos[self.y1.size:]
        self.cc_zero_rows = kind.name in ("cc", "ipw")
        self._memo_key = None
        self._memo_val = None

    def matrix(self, theta: np.ndarray) -> np.ndarray | None:
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        if key == self._memo_key:
            return self._memo_val
        beta, s2 = theta[:self.p], theta[self.p]
        if not (np.all(np.isfinite(theta)) and s2 > 0):
            return None
        out = np.zeros((self.n_used, self.q))
        r1 = self.y1 - self.x1 @ beta
        sb = self.x1 * (r1 / s2)[:, None]
        ss = 0.5 * (r1 * r1 / (s2 * s2) - 1.0 / s2)
        if self.invw is not None:
            sb = sb * self.invw[:, None]
            ss = ss * self.invw
        out[self.pos_unc, :self.p] = sb
        out[self.pos_unc, self.p] = ss
        if self.block is not None:
            a0_rows = None
            if self.kind.name == "spire":
                a0_rows, _ = _a0_rows(self.block, beta, s2, self.rule)
            out[self.pos_cen] = _censored_scores(self.block, beta, s2, a0_rows)
        self._memo_key = key
        self._memo_val = out
        return out

    def mean(self, theta: np.ndarray) -> np.ndarray:
        mat = self.matrix(theta)
        if mat is None:
            return np.full(self.q, np.nan)
        return mat.mean(axis=0)


def score_matrix(dataset: Dataset, spec: ModelSpec, kind: EstimatorKind,
                 params: OutcomeParams, rule: QuadratureRule | None = None) -> np.ndarray:
    """Per-observation scores (n_used, q), rows in original dataset order."""
    params.check_for(spec)
    return _Scorer(dataset, spec, kind, rule).matrix(params.to_vector())


def score_rows(dataset: Dataset, spec: ModelSpec, kind: EstimatorKind,
               params: OutcomeParams, rule: QuadratureRule | None = None
               ) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`score_matrix`, also returning the original row indices."""
    params.check_for(spec)
    scorer = _Scorer(dataset, spec, kind, rule)
    return scorer.matrix(params.to_vector()), scorer.used_rows


def _psd_symmetrize(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.clip(vals, 0.0, None)) @ vecs.T


def _sandwich_from(jac: np.ndarray, smat: np.ndarray) -> np.ndarray:
    v = smat.T @ smat / smat.shape[0]
    try:
        ainv_v = np.linalg.solve(jac, v)
        cov = np.linalg.solve(jac, ainv_v.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError(
            "score Jacobian is singular; use richer data or a smaller mean model"
        ) from exc
    if not np.all(np.isfinite(cov)):
        raise SingularInformationError(
            "score Jacobian is numerically singular; use richer data or a smaller mean model"
        )
    return _psd_symmetrize(cov)


def sandwich_covariance(score_fn, dataset: Dataset, params: OutcomeParams) -> np.ndarray:
    """Sandwich covariance of sqrt(n) (theta_hat - theta) at a root.

    ``score_fn(dataset, params)`` must return the (n, q) matrix of
    per-observation scores.  The bread is the finite-difference Jacobian of
    the mean score, the filling the mean outer product.
    """
    smat = np.asarray(score_fn(dataset, params), dtype=float)

    def mean_score(theta):
        return np.asarray(score_fn(dataset, OutcomeParams.from_vector(theta)),
                          dtype=float).mean(axis=0)

    jac = fd_jacobian(mean_score, params.to_vector())
    return _sandwich_from(jac, smat)


def _ols_theta(x1: np.ndarray, y1: np.ndarray) -> np.ndarray:
    beta = np.linalg.lstsq(x1, y1, rcond=None)[0]
    resid = y1 - x1 @ beta
    s2 = float(np.mean(resid * resid))
    return np.concatenate([beta, [max(s2, 1e-10)]])


def fit(dataset: Dataset, spec: ModelSpec, kind: EstimatorKind, *,
        rule: QuadratureRule | None = None, n_q: int = 40,
        tol: float = 1e-8, max_iter: int = 100) -> EstimationResult:
    """Solve the estimating equation of ``kind`` and attach the sandwich.

    Every fit starts from the complete-case solution, which itself starts
    from ordinary least squares on the uncensored rows.  For ``spire`` the
    a0 systems are rebuilt at every parameter value the solver visits (they
    depend on beta through the outcome density).  Censored rows whose
    working support is empty are dropped and counted; non-convergence is
    reported in the result, never silently.
    """
    rule = rule or gauss_hermite(n_q)
    scorer = _Scorer(dataset, spec, kind, rule)
    theta0 = _ols_theta(scorer.x1, scorer.y1)
    if kind.name == "cc":
        report = newton_solve(scorer.mean, theta0, tol=tol, max_iter=max_iter)
    else:
        cc_scorer = _Scorer(dataset, spec, EstimatorKind.cc(), rule)
        cc_report = newton_solve(cc_scorer.mean, theta0, tol=tol, max_iter=max_iter)
        report = newton_solve(scorer.mean, cc_report.root, tol=tol, max_iter=max_iter)
    theta = report.root
    params = OutcomeParams.from_vector(theta)
    smat = scorer.matrix(theta)
    q = scorer.q
    cov = np.full((q, q), np.nan)
    ase = np.full(q, np.nan)
    try:
        cov = _sandwich_from(report.jacobian, smat)
        ase = np.sqrt(np.diag(cov) / scorer.n_used)
    except SingularInformationError:
        if report.converged:
            raise
    return EstimationResult(params=params, covariance=cov, ase=ase,
                            report=report, kind=kind,
                            dropped_rows=scorer.dropped_rows,
                            n_used=scorer.n_used)
