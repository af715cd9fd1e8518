"""Data generators and the Monte Carlo harness.

Three designs are available:

* ``controlled``: binary z, uniform study-exit time around z, normal
  covariate around c - mu, linear outcome.  ``mu`` tunes the censoring
  rate (0.75 / 0 / -0.3 / -0.5 give roughly 10 / 50 / 70 / 80 percent).
* ``realistic``: three covariates (entry age, a genetic score, sex), beta
  study-exit and diagnosis times anchored at entry age, interaction
  outcome model, about 85 percent censoring.
* ``power``: like controlled but with study exit uniform on (z-1, z+1) and
  covariate mean ``alpha * c + mu``; ``alpha = 0`` makes censoring
  noninformative, larger alpha strengthens the dependence.  ``mu`` is
  calibrated per (alpha, sigma) to hold censoring at 80 percent.

Replicates draw from counter-based substreams of one seed, so Monte Carlo
results are byte-identical whatever the worker count.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special, stats

from .errors import ConfigError
from .estimators import EstimatorKind, fit
from .inference import TEST_BASES, _test_against_mle
from .model import Dataset, ModelSpec, OutcomeParams, Term
from .numerics import gauss_hermite
from .working import (DiscreteWorkingModel, Grid, KmConfig, censoring_weight_fn,
                      discretize_parametric, km_density_on_grid, make_grid,
                      uniform_working_model)

DESIGNS = ("controlled", "realistic", "power")
WORKING_CHOICES = ("none", "true", "unif", "km")

CONTROLLED_BETA = (0.5, 0.2, -0.2)
REALISTIC_BETA = (1.3, -1.8, -1.5, 0.1, 0.2)
NOISE_SIGMA2 = 1.0


def controlled_model() -> ModelSpec:
    return ModelSpec(terms=(Term("intercept"), Term("x"), Term("z", k=0)))


def realistic_model() -> ModelSpec:
    return ModelSpec(terms=(
        Term("intercept"),
        Term("x_minus_z", k=0),
        Term("z", k=1),
        Term("z", k=2),
        Term("x_minus_z_times_z", k=0, j=2),
    ))


def model_for(design: str) -> ModelSpec:
    if design == "realistic":
        return realistic_model()
    return controlled_model()


def true_params(design: str) -> OutcomeParams:
    beta = REALISTIC_BETA if design == "realistic" else CONTROLLED_BETA
    return OutcomeParams(beta=np.array(beta), sigma2=NOISE_SIGMA2)


def rng_for(seed: int, replicate: int) -> np.random.Generator:
    """Independent counter-based stream for one replicate of one seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replicate),))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def generate_controlled(n: int, mu: float, rng: np.random.Generator) -> Dataset:
    b = CONTROLLED_BETA
    z = rng.binomial(1, 0.5, size=n).astype(float)
    c = rng.uniform(z - 0.5, z + 0.5)
    x = rng.normal(c - mu, np.sqrt((z + 1.0) / 4.0))
    eps = rng.normal(0.0, math.sqrt(NOISE_SIGMA2), size=n)
    y = b[0] + b[1] * x + b[2] * z + eps
    delta = (x <= c).astype(int)
    w = np.minimum(x, c)
    return Dataset(y=y, w=w, delta=delta, z=z.reshape(-1, 1))


def generate_realistic(n: int, rng: np.random.Generator) -> Dataset:
    z0 = rng.beta(1.8874, 3.8470, size=n)
    z1 = rng.beta(3.5383, 11.4963, size=n)
    z2 = rng.binomial(1, 0.5, size=n).astype(float)
    c = rng.beta(0.3 + z1, 1.1 + z2) + z0
    x = rng.beta(1.6 + 5.0 * c, 2.0 + z1 + z2) + z0
    b = REALISTIC_BETA
    eps = rng.normal(0.0, math.sqrt(NOISE_SIGMA2), size=n)
    y = b[0] + b[1] * (x - z0) + b[2] * z1 + b[3] * z2 + b[4] * (x - z0) * z2 + eps
    delta = (x <= c).astype(int)
    w = np.minimum(x, c)
    return Dataset(y=y, w=w, delta=delta, z=np.column_stack([z0, z1, z2]))


def generate_power(n: int, alpha: float, mu: float, sigma: float,
                   rng: np.random.Generator) -> Dataset:
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    b = CONTROLLED_BETA
    z = rng.binomial(1, 0.5, size=n).astype(float)
    c = rng.uniform(z - 1.0, z + 1.0)
    x = rng.normal(alpha * c + mu, np.sqrt((z + 1.0) / (sigma * sigma)))
    eps = rng.normal(0.0, math.sqrt(NOISE_SIGMA2), size=n)
    y = b[0] + b[1] * x + b[2] * z + eps
    delta = (x <= c).astype(int)
    w = np.minimum(x, c)
    return Dataset(y=y, w=w, delta=delta, z=z.reshape(-1, 1))


def calibrate_power_mu(alpha: float, sigma: float, target: float = 0.80) -> float:
    """Find mu so the power design censors the target fraction.

    The censoring probability P(X > C) is an explicit one-dimensional
    integral per z stratum, increasing in mu, so bisection suffices.
    """
    nodes, weights = np.polynomial.legendre.leggauss(200)

    def rate(mu):
        total = 0.0
        for z in (0.0, 1.0):
            lo, hi = z - 1.0, z + 1.0
            c = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
            sd = math.sqrt(z + 1.0) / sigma
            p_gt = stats.norm.sf((c - alpha * c - mu) / sd)
            # integral of P(X > c) times the uniform density 1/(hi-lo)
            total += 0.5 * float(np.sum(weights * p_gt))
        return total / 2.0

    lo_mu, hi_mu = -20.0, 20.0
    if not (rate(lo_mu) <= target <= rate(hi_mu)):
        raise ConfigError("target censoring rate is out of reach")
    for _ in range(200):
        mid = 0.5 * (lo_mu + hi_mu)
        if rate(mid) < target:
            lo_mu = mid
        else:
            hi_mu = mid
    return 0.5 * (lo_mu + hi_mu)


# ---------------------------------------------------------------------------
# working-model and weight factories
# ---------------------------------------------------------------------------

def _beta_pdf(u, a, b):
    u = np.asarray(u, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    inside = (u > 0.0) & (u < 1.0)
    uu = np.where(inside, u, 0.5)
    logpdf = (special.xlogy(a - 1.0, uu) + special.xlog1py(b - 1.0, -uu)
              - special.betaln(a, b))
    return np.where(inside, np.exp(logpdf), 0.0)


def covariate_moments(config: "SimulationConfig") -> tuple[float, float]:
    """Population mean and standard deviation of the latent covariate x."""
    if config.design == "controlled":
        # x = c - mu + noise; var c = 1/12 + 1/4, mean noise var = 3/8
        return 0.5 - config.mu, math.sqrt(1.0 / 3.0 + 3.0 / 8.0)
    if config.design == "power":
        var_c = 1.0 / 3.0 + 1.0 / 4.0  # U(z-1, z+1) mixed over binary z
        var = config.alpha ** 2 * var_c + 1.5 / (config.sigma ** 2)
        return config.alpha * 0.5 + config.mu, math.sqrt(var)
    raise ConfigError("covariate moments are closed-form only for the normal designs")


def grid_for(config: "SimulationConfig", dataset: Dataset) -> Grid:
    """Simulation grid: must cover both the observed times and the region
    where the design's working densities put mass.

    For the normal designs the covariate support reaches well below 0 and
    above max(w), so the grid spans the population mean of x plus/minus
    three standard deviations (the same interval the uniform working model
    uses); clipping it at max(w) would truncate the conditional densities
    and bias the likelihood-based estimators.  The realistic design keeps
    the default span: its covariate lives inside [0, max(w)] already.
    """
    if config.design == "realistic":
        return make_grid(dataset, config.m)
    xm, xs = covariate_moments(config)
    mx = float(np.max(dataset.w))
    lo = min(xm - 3.0 * xs, 0.0)
    hi = max(xm + 3.0 * xs, mx * (1.0 + 1e-6))
    return Grid(points=np.linspace(lo, hi, config.m))


def _true_density(config: "SimulationConfig"):
    if config.design == "controlled":
        mu = config.mu

        def dens(x, c, z):
            v = (z[0] + 1.0) / 4.0
            return np.exp(-0.5 * (x - (c - mu)) ** 2 / v)

        return dens
    if config.design == "power":
        alpha, mu, sigma = config.alpha, config.mu, config.sigma

        def dens(x, c, z):
            v = (z[0] + 1.0) / (sigma * sigma)
            return np.exp(-0.5 * (x - (alpha * c + mu)) ** 2 / v)

        return dens

    def dens(x, c, z):
        return _beta_pdf(x - z[0], 1.6 + 5.0 * c, 2.0 + z[1] + z[2])

    return dens


def make_working_model(config: "SimulationConfig", dataset: Dataset,
                       grid: Grid, choice: str) -> DiscreteWorkingModel:
    """Build the requested working model for one simulated dataset."""
    if choice == "true":
        return discretize_parametric(_true_density(config), grid)
    if choice == "unif":
        if config.design == "realistic":
            # uniform for the entry-anchored covariate x - z0 on (0, 1)
            return discretize_parametric(
                lambda x, c, z: ((x - z[0] > 0.0) & (x - z[0] < 1.0)).astype(float),
                grid, kind="uniform")
        return uniform_working_model(grid)
    if choice == "km":
        return km_density_on_grid(dataset, grid, KmConfig(config.bandwidth))
    raise ConfigError(f"unknown working-model choice {choice!r}")


def _uniform_normal_exit_weight(x, z_val, half_width, alpha, mu, sd):
    """pr(C >= x | x, z) when C | z is uniform and x | c, z is normal."""
    lo, hi = z_val - half_width, z_val + half_width
    if x <= lo:
        return 1.0
    if alpha == 0.0:
        if x >= hi:
            return 0.0
        return (hi - x) / (hi - lo)
    sf = stats.norm.sf
    num = sf((alpha * max(x, lo) + mu - x) / sd) - sf((alpha * hi + mu - x) / sd)
    den = sf((alpha * lo + mu - x) / sd) - sf((alpha * hi + mu - x) / sd)
    if den <= 0.0:
        return 1.0
    return float(min(max(num / den, 0.0), 1.0))


def make_ipw_weight(config: "SimulationConfig", dataset: Dataset, choice: str):
    """Weight function pr(C >= x | x, z) for the ipw estimator.

    ``true`` plugs in the generator's analytic weight; any other choice
    falls back to the censoring-time localized Kaplan-Meier.
    """
    if choice != "true":
        return censoring_weight_fn(dataset, KmConfig(config.bandwidth))
    if config.design == "controlled":
        mu = config.mu

        def weight(x, z):
            sd = math.sqrt((z[0] + 1.0) / 4.0)
            return _uniform_normal_exit_weight(x, z[0], 0.5, 1.0, -mu, sd)

        return weight
    if config.design == "power":
        alpha, mu, sigma = config.alpha, config.mu, config.sigma

        def weight(x, z):
            sd = math.sqrt(z[0] + 1.0) / sigma
            return _uniform_normal_exit_weight(x, z[0], 1.0, alpha, mu, sd)

        return weight

    nodes, wts = np.polynomial.legendre.leggauss(200)

    def weight(x, z):
        z0, z1, z2 = z[0], z[1], z[2]

        def integral(lo, hi):
            if hi <= lo:
                return 0.0
            c = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
            f = (_beta_pdf(x - z0, 1.6 + 5.0 * c, 2.0 + z1 + z2)
                 * _beta_pdf(c - z0, 0.3 + z1, 1.1 + z2))
            return 0.5 * (hi - lo) * float(np.sum(wts * f))

        den = integral(z0, z0 + 1.0)
        if den <= 0.0:
            return 1.0
        num = integral(max(x, z0), z0 + 1.0)
        return float(min(max(num / den, 0.0), 1.0))

    return weight


# ---------------------------------------------------------------------------
# Monte Carlo driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimulationConfig:
    """One Monte Carlo run: design, sample sizes, seed, estimator requests."""

    design: str = "controlled"
    n: int = 1000
    n_replicates: int = 100
    seed: int = 0
    mu: float = 0.0
    alpha: float = 0.0
    sigma: float = 2.0
    estimators: tuple = (("spire", "true"),)
    m: int = 50
    n_q: int = 40
    bandwidth: float = 0.05
    tol: float = 1e-8
    max_iter: int = 100
    threads: int = 1

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ConfigError(f"design must be one of {DESIGNS}")
        if self.n < 50:
            raise ConfigError("n must be at least 50")
        if self.n_replicates < 1:
            raise ConfigError("need at least one replicate")
        for kind, working in self.estimators:
            if kind not in ("cc", "ipw", "mle", "spire"):
                raise ConfigError(f"unknown estimator {kind!r}")
            if working not in WORKING_CHOICES:
                raise ConfigError(f"unknown working-model choice {working!r}")


def parse_estimators(text: str) -> tuple:
    """Parse ``"spire:true,mle:mis"`` into ((kind, working), ...).

    ``mis`` is an alias for ``unif``; cc takes no working model.
    """
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            kind, working = part.split(":", 1)
        else:
            kind, working = part, "none"
        kind = kind.strip().lower()
        working = working.strip().lower()
        if working == "mis":
            working = "unif"
        if kind == "cc":
            working = "none"
        if kind in ("ipw", "mle", "spire") and working == "none":
            raise ConfigError(f"estimator {kind} needs a working-model choice")
        out.append((kind, working))
    if not out:
        raise ConfigError("no estimators requested")
    return tuple(out)


def generate(config: SimulationConfig, rng: np.random.Generator) -> Dataset:
    if config.design == "controlled":
        return generate_controlled(config.n, config.mu, rng)
    if config.design == "realistic":
        return generate_realistic(config.n, rng)
    return generate_power(config.n, config.alpha, config.mu, config.sigma, rng)


def _fit_replicate(config: SimulationConfig, rep: int):
    rng = rng_for(config.seed, rep)
    dataset = generate(config, rng)
    grid = grid_for(config, dataset)
    rule = gauss_hermite(config.n_q)
    wm_cache: dict[str, DiscreteWorkingModel] = {}
    out = {}
    for kind_name, working in config.estimators:
        if kind_name == "cc":
            kind = EstimatorKind.cc()
        elif kind_name == "ipw":
            kind = EstimatorKind.ipw(make_ipw_weight(config, dataset, working))
        else:
            wm = wm_cache.get(working)
            if wm is None:
                wm = make_working_model(config, dataset, grid, working)
                wm_cache[working] = wm
            kind = (EstimatorKind.mle(wm) if kind_name == "mle"
                    else EstimatorKind.spire(wm))
        try:
            res = fit(dataset, dataset_spec(config), kind, rule=rule,
                      tol=config.tol, max_iter=config.max_iter)
            ok = bool(res.converged and np.all(np.isfinite(res.ase)))
            out[(kind_name, working)] = (res.params.to_vector().tolist(),
                                         res.ase.tolist(), ok,
                                         res.dropped_rows)
        except Exception:
            q = dataset_spec(config).parameter_count
            out[(kind_name, working)] = ([float("nan")] * q, [float("nan")] * q,
                                         False, 0)
    return out, dataset.censoring_rate


def dataset_spec(config: SimulationConfig) -> ModelSpec:
    return model_for(config.design)


@dataclass
class SummaryRow:
    design: str
    estimator: str
    working: str
    param: str
    mean: float | None
    ese: float | None
    ase: float | None
    cov: float | None
    nonconverged: int

    @property
    def flagged(self) -> bool:
        return self.nonconverged > 0.2 * max(self._total, 1)

    _total: int = 0


@dataclass
class SummaryTable:
    rows: list
    censoring_mean: float
    n_replicates: int
    config: SimulationConfig

    def flagged(self) -> bool:
        return any(r.flagged for r in self.rows)

    def to_csv_text(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))

        lines = ["design,estimator,working,param,mean,ese,ase,cov,nonconverged"]
        for r in self.rows:
            lines.append(",".join([
                r.design, r.estimator, r.working, r.param,
                fmt(r.mean), fmt(r.ese), fmt(r.ase), fmt(r.cov),
                str(r.nonconverged),
            ]))
        return "\n".join(lines) + "\n"

    def row_for(self, estimator: str, working: str, param: str) -> SummaryRow:
        for r in self.rows:
            if (r.estimator, r.working, r.param) == (estimator, working, param):
                return r
        raise KeyError((estimator, working, param))


def _param_names(spec: ModelSpec) -> list[str]:
    return [f"beta{i}" for i in range(spec.n_coef)] + ["sigma2"]


def _resolve_power_mu(config: SimulationConfig) -> SimulationConfig:
    if config.design == "power" and not math.isfinite(config.mu):
        return replace(config, mu=calibrate_power_mu(config.alpha, config.sigma))
    return config


def _map_replicates(worker, config: SimulationConfig):
    reps = range(config.n_replicates)
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(worker, [config] * config.n_replicates, reps,
                                 chunksize=max(1, config.n_replicates // (4 * config.threads))))
    return [worker(config, rep) for rep in reps]


def run_monte_carlo(config: SimulationConfig) -> SummaryTable:
    """Fit every requested estimator on every replicate and aggregate.

    Non-convergent fits are excluded from the averages and counted in the
    ``nonconverged`` column; a cell is flagged when more than 20 percent of
    its replicates failed.
    """
    config = _resolve_power_mu(config)
    spec = dataset_spec(config)
    names = _param_names(spec)
    truth = true_params(config.design).to_vector()
    results = _map_replicates(_fit_replicate, config)
    rows = []
    cens = float(np.mean([c for _, c in results]))
    for kind_name, working in config.estimators:
        thetas, ases, n_bad = [], [], 0
        for rep_out, _ in results:
            theta, ase, ok, _dropped = rep_out[(kind_name, working)]
            if ok:
                thetas.append(theta)
                ases.append(ase)
            else:
                n_bad += 1
        thetas = np.asarray(thetas, dtype=float)
        ases = np.asarray(ases, dtype=float)
        for k, pname in enumerate(names):
            if thetas.size == 0:
                row = SummaryRow(config.design, kind_name, working, pname,
                                 None, None, None, None, n_bad)
            else:
                est = thetas[:, k]
                ase_k = ases[:, k]
                hits = np.abs(est - truth[k]) <= 1.959963984540054 * ase_k
                ese = float(np.std(est, ddof=1)) if est.size > 1 else None
                row = SummaryRow(config.design, kind_name, working, pname,
                                 float(est.mean()), ese, float(ase_k.mean()),
                                 float(hits.mean()), n_bad)
            row._total = config.n_replicates
            rows.append(row)
    return SummaryTable(rows=rows, censoring_mean=cens,
                        n_replicates=config.n_replicates, config=config)


# ---------------------------------------------------------------------------
# size / power study of the censoring test
# ---------------------------------------------------------------------------

@dataclass
class PowerRow:
    design: str
    alpha: float | None
    base: str
    rejections: int
    n_tests: int
    failures: int

    @property
    def power(self) -> float:
        return self.rejections / max(self.n_tests, 1)


def _test_replicate(config: SimulationConfig, rep: int):
    rng = rng_for(config.seed, rep)
    dataset = generate(config, rng)
    out = {}
    try:
        results = _test_against_mle(
            dataset, dataset_spec(config), TEST_BASES,
            bandwidth=config.bandwidth, m=config.m,
            rule=gauss_hermite(config.n_q),
            tol=config.tol, max_iter=config.max_iter, strict=False)
        for base, res in results.items():
            if res is None:
                out[base] = (float("nan"), False)
            else:
                out[base] = (res.p_value, True)
    except Exception:
        pass
    for base in TEST_BASES:
        out.setdefault(base, (float("nan"), False))
    return out


def run_power_study(config: SimulationConfig, alphas=None,
                    level: float = 0.05) -> list[PowerRow]:
    """Empirical rejection rate of the censoring test per base estimator.

    For the power design, one row per (alpha, base) with mu recalibrated to
    hold 80 percent censoring; alpha = 0 rows are the empirical size.  For
    the realistic design a single informative-censoring point is run.
    """
    rows = []
    if config.design == "power":
        alphas = [config.alpha] if alphas is None else list(alphas)
        keep_mu = math.isfinite(config.mu) and len(alphas) == 1
        configs = [
            replace(config, alpha=float(a),
                    mu=config.mu if keep_mu
                    else calibrate_power_mu(float(a), config.sigma))
            for a in alphas
        ]
    else:
        configs = [config]
        alphas = [None]
    for alpha, cfg in zip(alphas, configs):
        results = _map_replicates(_test_replicate, cfg)
        for base in TEST_BASES:
            pvals = np.array([r[base][0] for r in results])
            ok = np.array([r[base][1] for r in results])
            rej = int(np.sum((pvals[ok] < level)))
            rows.append(PowerRow(design=config.design,
                                 alpha=None if alpha is None else float(alpha),
                                 base=base, rejections=rej,
                                 n_tests=int(ok.sum()),
                                 failures=int((~ok).sum())))
    return rows
