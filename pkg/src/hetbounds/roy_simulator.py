"""Generalized Roy model with endogenous selection, oracle truths and studies.

Data generating process (defaults)::

    X ~ U(0,1)^p,  D ~ Bernoulli(0.5),  v ~ N(0,1)
    eps1 = sigma1 (rho v + sqrt(1-rho^2) xi),  eps0 = sigma0 xi'   (xi, xi' ~ N(0,1))
    S = 1{x1 gamma1 + D - v >= 0}
    Y(1) = mu1(x1) + eps1,  Y(0) = eps0,  mu1(x) = 0.35 - 4x^2 + 4x^3

with ``gamma1 = Phi^{-1}(0.99) - 1``. Always-takers satisfy
``v <= x1 gamma1``, so the effect for them is
``theta(z) = mu1(z) - rho sigma1 phi(z gamma1) / Phi(z gamma1)``.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .core_data import ConfigError, HeterogeneitySpec, ObservationTable
from .nuisance_learners import DEFAULT_GRID, LearnerConfig, NuisanceFit
from .orthogonal_scores import ScoreSettings
from .pipeline import SPLINE_CANDIDATES, EstimationSettings, estimate
from .pointwise_inference import confidence_interval
from .series_projection import BasisSpec, build_basis, project

GAMMA1 = float(ndtri(0.99) - 1.0)
COVERAGE_GRID = tuple(round(0.1 * j, 1) for j in range(1, 10))
ORACLE_GRID = tuple(np.linspace(0.0, 1.0, 50))
STRATA = ((0.0, 0.5), (0.5, 1.0))
DEVIATIONS = tuple(round(0.1 * j, 1) for j in range(-5, 6))
FAILURE_CAP = 0.02


class StudyError(RuntimeError):
    """Too many replications failed."""


class OracleWarning(UserWarning):
    """An oracle stratum had to be widened."""


@dataclass(frozen=True)
class RoyConfig:
    n: int = 2000
    p: int = 10
    gamma1: float = GAMMA1
    mu1: tuple = (0.35, 0.0, -4.0, 4.0)
    sigma1: float = 0.2
    sigma0: float = 0.2
    rho_cov: float = 0.5
    treat_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ConfigError("n and p must be positive")
        if not -1 < self.rho_cov < 1:
            raise ConfigError("rho_cov must lie in (-1, 1)")
        if not 0 < self.treat_prob < 1:
            raise ConfigError("treat_prob must lie in (0, 1)")
        object.__setattr__(self, "mu1", tuple(float(c) for c in self.mu1))

    def mu1_at(self, z) -> np.ndarray:
        return np.polynomial.polynomial.polyval(np.asarray(z, dtype=float), self.mu1)


@dataclass(frozen=True)
class RoyDraw:
    """Observed table plus the latent variables behind it."""

    table: ObservationTable
    v: np.ndarray
    s_pot: np.ndarray
    y_pot: np.ndarray


def simulate_latent(config: RoyConfig, seed: Optional[int] = None) -> RoyDraw:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    n = config.n
    x = rng.uniform(size=(n, config.p))
    d = (rng.uniform(size=n) < config.treat_prob).astype(int)
    v, xi1, xi0 = rng.standard_normal((3, n))
    eps1 = config.sigma1 * (config.rho_cov * v + math.sqrt(1 - config.rho_cov ** 2) * xi1)
    eps0 = config.sigma0 * xi0
    index = x[:, 0] * config.gamma1
    s_pot = np.column_stack([(index - v >= 0), (index + 1 - v >= 0)]).astype(int)
    y_pot = np.column_stack([eps0, config.mu1_at(x[:, 0]) + eps1])
    s = s_pot[np.arange(n), d]
    y = np.where(s == 1, y_pot[np.arange(n), d], 0.0)
    table = ObservationTable(x, d, s, y, np.full(n, config.treat_prob))
    return RoyDraw(table, v, s_pot, y_pot)


def simulate(config: RoyConfig, seed: Optional[int] = None) -> ObservationTable:
    return simulate_latent(config, seed).table


def true_selection(z, d: int, config: RoyConfig) -> np.ndarray:
    return ndtr(np.asarray(z, dtype=float) * config.gamma1 + d)


def true_theta(z, config: RoyConfig = RoyConfig()) -> np.ndarray:
    a = np.asarray(z, dtype=float) * config.gamma1
    mills = np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi) / ndtr(a)
    return config.mu1_at(z) - config.rho_cov * config.sigma1 * mills


# ---------------------------------------------------------------------------
# truncated-normal quantiles of the selected treated outcome
# ---------------------------------------------------------------------------

_T = np.linspace(-8.0, 8.0, 4001)
_GL_X, _GL_W = np.polynomial.legendre.leggauss(96)


def _truncated_cdf(a: float, rho: float) -> np.ndarray:
    """CDF on ``_T`` of ``rho v + sqrt(1-rho^2) xi`` given ``v <= a``."""
    lo = -9.0
    v = 0.5 * (a - lo) * _GL_X + 0.5 * (a + lo)
    w = 0.5 * (a - lo) * _GL_W * np.exp(-0.5 * v * v) / math.sqrt(2 * math.pi)
    s = math.sqrt(1 - rho * rho)
    cdf = ndtr((_T[:, None] - rho * v[None, :]) / s) @ w
    return np.maximum.accumulate(cdf / ndtr(a))


@lru_cache(maxsize=8)
def _cdf_table(rho: float, a_lo: float, a_hi: float, m: int = 81):
    a = np.linspace(a_lo, a_hi, m)
    return a, np.array([_truncated_cdf(ai, rho) for ai in a])


def _standard_quantiles(a: np.ndarray, u, rho: float, a_lo: float, a_hi: float) -> np.ndarray:
    """Quantiles of the standardized truncated error at levels ``u`` for each ``a``."""
    nodes, cdfs = _cdf_table(rho, a_lo, a_hi)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    qn = np.array([np.interp(u, c, _T) for c in cdfs])
    pos = np.clip((a - a_lo) / (a_hi - a_lo) * (len(nodes) - 1), 0, len(nodes) - 1)
    j = np.minimum(np.floor(pos).astype(int), len(nodes) - 2)
    f = (pos - j)[:, None]
    return (1 - f) * qn[j] + f * qn[j + 1]


def _a_range(config: RoyConfig) -> tuple[float, float]:
    ends = sorted([1.0, config.gamma1 + 1.0])
    return round(ends[0], 12), round(ends[1], 12)


def true_quantiles(z, u, config: RoyConfig = RoyConfig(), arm: int = 1) -> np.ndarray:
    """Conditional ``u``-quantiles of the selected outcome in arm ``arm`` at ``x1 = z``."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if arm == 0:
        return np.broadcast_to(config.sigma0 * ndtri(u), (len(z), len(u))).copy()
    a = z * config.gamma1 + 1.0
    lo, hi = _a_range(config)
    w = _standard_quantiles(a, u, config.rho_cov, lo, hi)
    return config.mu1_at(z)[:, None] + config.sigma1 * w


def true_nuisance(table: ObservationTable, config: RoyConfig = RoyConfig(),
                  grid=DEFAULT_GRID) -> NuisanceFit:
    """Oracle nuisances in the layout produced by cross-fitting."""
    grid = np.asarray(grid, dtype=float)
    z = table.x[:, 0]
    return NuisanceFit(
        s0_hat=true_selection(z, 0, config), s1_hat=true_selection(z, 1, config),
        q1_grid=true_quantiles(z, grid, config, 1), q0_grid=true_quantiles(z, grid, config, 0),
        grid=grid, folds=None, learner_tag="oracle")


def analytic_bounds(z, config: RoyConfig = RoyConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Sharp bounds by one-dimensional integration of the truncated error law."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    p0 = true_selection(z, 0, config) / true_selection(z, 1, config)
    lo_b, hi_b = np.empty(len(z)), np.empty(len(z))
    for i, zi in enumerate(z):
        cdf = _truncated_cdf(zi * config.gamma1 + 1.0, config.rho_cov)
        mid = 0.5 * (_T[1:] + _T[:-1])
        mass = np.diff(cdf)
        cum = np.cumsum(mass)
        # mean of the lowest p0 share and of the highest p0 share
        lo_w = np.clip(p0[i] - (cum - mass), 0, mass)
        hi_w = np.clip(p0[i] - (cum[-1] - cum), 0, mass)
        lo_b[i] = np.sum(lo_w * mid) / p0[i]
        hi_b[i] = np.sum(hi_w * mid) / p0[i]
    mu = config.mu1_at(z)
    return mu + config.sigma1 * lo_b, mu + config.sigma1 * hi_b


def _stratum(z: float, width: float) -> tuple[float, float]:
    # symmetric even at the edges of [0, 1]: the conditional law extends smoothly
    return z - width / 2, z + width / 2


def _stratum_draws(lo, hi, m, config, rng):
    x1 = rng.uniform(lo, hi, size=m)
    v, xi1, xi0 = rng.standard_normal((3, m))
    idx = x1 * config.gamma1
    y1 = config.mu1_at(x1) + config.sigma1 * (config.rho_cov * v
                                              + math.sqrt(1 - config.rho_cov ** 2) * xi1)
    y0 = config.sigma0 * xi0
    return idx, v, y1, y0


def oracle_bounds(z_grid=ORACLE_GRID, config: RoyConfig = RoyConfig(), draws: int = 10**7,
                  width: float = 0.02, seed: int = 12345) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force trimmed means by simulation within narrow strata of ``z``.

    Selected treated outcomes are trimmed to the share ``p0`` evaluated at the
    stratum centre; the selected control mean is subtracted.
    """
    z_grid = np.asarray(z_grid, dtype=float)
    m = max(draws // len(z_grid), 1000)
    lo_b, hi_b = np.empty(len(z_grid)), np.empty(len(z_grid))
    for i, z in enumerate(z_grid):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        w = width
        while True:
            idx, v, y1, y0 = _stratum_draws(*_stratum(z, w), m, config, rng)
            y_t = np.sort(y1[idx + 1 - v >= 0])
            y_c = y0[idx - v >= 0]
            if y_t.size >= 2 and y_c.size >= 2:
                break
            warnings.warn(f"oracle stratum at z={z} empty; widening", OracleWarning, stacklevel=2)
            w *= 2
        p0 = float(true_selection(z, 0, config) / true_selection(z, 1, config))
        keep = max(int(round(p0 * y_t.size)), 1)
        base = y_c.mean()
        lo_b[i] = y_t[:keep].mean() - base
        hi_b[i] = y_t[-keep:].mean() - base
    return lo_b, hi_b


def brute_force_theta(z, config: RoyConfig = RoyConfig(), draws: int = 10**7, width: float = 0.02,
                      seed: int = 54321) -> float:
    """Mean of ``Y(1) - Y(0)`` over always-takers with ``x1`` in a stratum around ``z``."""
    rng = np.random.default_rng(seed)
    idx, v, y1, y0 = _stratum_draws(*_stratum(z, width), draws, config, rng)
    at = idx - v >= 0
    return float(np.mean(y1[at] - y0[at]))


def stratum_theta(lo: float, hi: float, config: RoyConfig = RoyConfig()) -> float:
    """``E[theta(Z) | lo <= Z <= hi]`` for uniform ``Z``."""
    x, w = np.polynomial.legendre.leggauss(64)
    z = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    return float(0.5 * np.sum(w * true_theta(z, config)))


# ---------------------------------------------------------------------------
# replication studies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudySettings:
    alpha: float = 0.05
    folds: int = 2
    nuisance: str = "parametric"
    learner: LearnerConfig = LearnerConfig(quantile_degree=3)
    candidates: tuple = SPLINE_CANDIDATES
    z_grid: tuple = COVERAGE_GRID
    strata: tuple = STRATA
    deviations: tuple = DEVIATIONS
    bootstrap_reps: int = 0
    band_alpha: float = 0.10
    event: str = "relaxed"
    score: ScoreSettings = ScoreSettings()

    def __post_init__(self):
        if self.nuisance not in ("parametric", "forest", "oracle"):
            raise ConfigError(f"unknown nuisance mode {self.nuisance!r}")

    def learner_config(self, seed: int) -> LearnerConfig:
        if self.nuisance == "forest":
            return replace(self.learner, selection_learner="probability_forest",
                           quantile_learner="quantile_forest", seed=seed)
        return replace(self.learner, seed=seed)


@dataclass
class RepResult:
    rep: int
    ok: bool
    error: str = ""
    covered: Optional[np.ndarray] = None
    ci_lo: Optional[np.ndarray] = None
    ci_hi: Optional[np.ndarray] = None
    strata_lo: Optional[np.ndarray] = None
    strata_hi: Optional[np.ndarray] = None
    band_covered: Optional[bool] = None


def rep_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, rep]).generate_state(1)[0])


def replicate(config: RoyConfig, settings: StudySettings, rep: int, tasks=("pointwise",)) -> RepResult:
    """One simulated sample through the estimator; errors are captured."""
    s = rep_seed(config.seed, rep)
    try:
        table = simulate(config, s)
        het = HeterogeneitySpec((0,))
        est = EstimationSettings(alpha=settings.alpha, folds=settings.folds,
                                 learner=settings.learner_config(s), score=settings.score,
                                 candidates=settings.candidates, event=settings.event,
                                 bootstrap_reps=settings.bootstrap_reps if "band" in tasks else 0,
                                 band_alpha=settings.band_alpha, seed=s)
        oracle = true_nuisance(table, config) if settings.nuisance == "oracle" else None
        res = estimate(table, het, est, settings.z_grid, nuisance=oracle)
        truth = true_theta(np.asarray(settings.z_grid), config)
        out = RepResult(rep, True)
        iv = res.intervals
        out.ci_lo, out.ci_hi = iv.ci_lo, iv.ci_hi
        out.covered = (iv.ci_lo <= truth) & (truth <= iv.ci_hi)
        if "power" in tasks:
            out.strata_lo, out.strata_hi = _strata_intervals(table, res.scores, settings)
        if "band" in tasks and res.band is not None:
            band_truth = true_theta(res.band.z, config)
            out.band_covered = bool(np.all((res.band.lo <= band_truth) & (band_truth <= res.band.hi)))
        return out
    except Exception as exc:  # noqa: BLE001  failures are counted, not fatal
        return RepResult(rep, False, f"{type(exc).__name__}: {exc}")


def _strata_intervals(table, scores, settings: StudySettings):
    z = table.x[:, 0]
    label = np.zeros(len(z))
    for j, (lo, hi) in enumerate(settings.strata):
        label[(z >= lo) & (z <= hi) if j == len(settings.strata) - 1 else (z >= lo) & (z < hi)] = j
    cats = tuple(float(j) for j in range(len(settings.strata)))
    basis = build_basis(label, BasisSpec("indicator", categories=cats))
    curve = project(scores.psi_L, scores.psi_U, label, basis, basis)
    pts = curve.evaluate(np.asarray(cats))
    lo, hi, _, _ = confidence_interval(pts.theta_L, pts.theta_U, pts.sigma_L, pts.sigma_U,
                                       pts.rho, table.n, settings.alpha, event=settings.event)
    return lo, hi


def _worker(args):
    config, settings, rep, tasks = args
    return replicate(config, settings, rep, tasks)


def run_replications(config: RoyConfig, settings: StudySettings, reps: int,
                     tasks=("pointwise",), threads: Optional[int] = None, start: int = 0) -> list:
    """Run replications ``start, ..., start + reps - 1``, in parallel when ``threads > 1``.

    Each replication is seeded by its index alone, so splitting a study into
    consecutive blocks reproduces the single-block results.
    """
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    if start < 0:
        raise ConfigError("start must be non-negative")
    threads = threads or os.cpu_count() or 1
    jobs = [(config, settings, r, tuple(tasks)) for r in range(start, start + reps)]
    if threads == 1:
        results = [_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_worker, jobs, chunksize=max(1, reps // (4 * threads))))
    failed = [r for r in results if not r.ok]
    if len(failed) > FAILURE_CAP * reps:
        raise StudyError(f"{len(failed)} of {reps} replications failed; first: {failed[0].error}")
    return results


@dataclass(frozen=True)
class CoverageTable:
    z: np.ndarray
    coverage: np.ndarray
    mc_se: np.ndarray
    reps_used: int
    failures: int

    def rows(self):
        return zip(self.z, self.coverage, self.mc_se)


@dataclass(frozen=True)
class PowerTable:
    stratum: np.ndarray
    deviation: np.ndarray
    null_value: np.ndarray
    rejection: np.ndarray
    mc_se: np.ndarray
    reps_used: int
    failures: int

    def rows(self):
        return zip(self.stratum, self.deviation, self.null_value, self.rejection, self.mc_se)


def summarize_coverage(results: Sequence[RepResult], settings: StudySettings) -> CoverageTable:
    ok = [r for r in results if r.ok]
    cov = np.mean([r.covered for r in ok], axis=0)
    se = np.sqrt(cov * (1 - cov) / len(ok))
    return CoverageTable(np.asarray(settings.z_grid), cov, se, len(ok), len(results) - len(ok))


def summarize_power(results: Sequence[RepResult], settings: StudySettings,
                    config: RoyConfig) -> PowerTable:
    ok = [r for r in results if r.ok and r.strata_lo is not None]
    lo = np.array([r.strata_lo for r in ok])
    hi = np.array([r.strata_hi for r in ok])
    rows = []
    for j, (a, b) in enumerate(settings.strata):
        base = stratum_theta(a, b, config)
        for dev in settings.deviations:
            val = base + dev
            rej = float(np.mean((val < lo[:, j]) | (val > hi[:, j])))
            rows.append((j, dev, val, rej, math.sqrt(rej * (1 - rej) / len(ok))))
    cols = list(zip(*rows))
    return PowerTable(*(np.asarray(c) for c in cols), len(ok), len(results) - len(ok))


def summarize_bands(results: Sequence[RepResult]) -> dict:
    ok = [r for r in results if r.ok and r.band_covered is not None]
    cov = float(np.mean([r.band_covered for r in ok]))
    return {"uniform_coverage": cov, "mc_se": math.sqrt(cov * (1 - cov) / len(ok)),
            "reps_used": len(ok), "failures": len(results) - len(ok)}


def run_coverage_study(config: RoyConfig, settings: StudySettings = StudySettings(),
                       reps: int = 500, threads: Optional[int] = None) -> CoverageTable:
    if reps < 100:
        raise ConfigError("coverage studies need at least 100 replications")
    return summarize_coverage(run_replications(config, settings, reps, ("pointwise",), threads), settings)


def run_power_study(config: RoyConfig, settings: StudySettings = StudySettings(),
                    reps: int = 500, threads: Optional[int] = None) -> PowerTable:
    if reps < 100:
        raise ConfigError("power studies need at least 100 replications")
    res = run_replications(config, settings, reps, ("pointwise", "power"), threads)
    return summarize_power(res, settings, config)


def run_band_study(config: RoyConfig, settings: StudySettings = StudySettings(bootstrap_reps=1000),
                   reps: int = 300, threads: Optional[int] = None) -> dict:
    if reps < 100:
        raise ConfigError("band studies need at least 100 replications")
    if settings.bootstrap_reps < 1:
        raise ConfigError("band studies need bootstrap replications")
    return summarize_bands(run_replications(config, settings, reps, ("pointwise", "band"), threads))


def manifest_entry(config: RoyConfig, settings: StudySettings) -> dict:
    return {"roy": asdict(config), "study": _plain(asdict(settings))}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
