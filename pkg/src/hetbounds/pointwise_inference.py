"""Pointwise confidence intervals for the effect at a single value of ``Z``.

The interval is the union of a bound-based interval with critical value
``c_hat`` and a band around the variance-weighted pseudo-true parameter. The
critical value solves

    inf_{Delta >= 0} P(E1 or E2) = 1 - alpha,

with ``(u1, u2)`` standard bivariate normal with correlation ``rho``,
``E1 = {u1 - Delta - c <= 0 <= u2 + c}`` and
``E2 = {|u1 + u2 - Delta| <= sqrt(2(1+rho)) z_{1-alpha/2}}``.

``event="verbatim"`` drops the ``+c`` on the right-hand comparison of ``E1``.

Three evaluators of the event probability are available. ``"quadrature"``
(default) conditions on ``s = u1 + u2`` and integrates one dimension with
composite Gauss-Legendre rules, which is exact up to ~1e-10. ``"qmc"`` uses a
scrambled Sobol sequence of 2^20 points; ``"mc"`` uses plain Monte Carlo.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import optimize
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

RHO_CLIP = 1.0 - 1e-10
QMC_LOG2 = 20
QMC_SEED = 20240229
LATTICE_STEP = 0.01
EVENTS = ("relaxed", "verbatim")
METHODS = ("quadrature", "qmc", "mc")


class SolverError(RuntimeError):
    """The critical-value root is not bracketed."""


@dataclass(frozen=True)
class PseudoTrue:
    theta_star: np.ndarray
    sigma_star: np.ndarray


def pseudo_true(theta_L, theta_U, sigma_L, sigma_U, rho) -> PseudoTrue:
    """Variance-weighted combination of the two bound estimates."""
    theta_L, theta_U = np.asarray(theta_L, float), np.asarray(theta_U, float)
    sigma_L, sigma_U = np.asarray(sigma_L, float), np.asarray(sigma_U, float)
    rho = np.asarray(rho, float)
    tot = sigma_L + sigma_U
    with np.errstate(invalid="ignore", divide="ignore"):
        star = np.where(tot > 0, (sigma_U * theta_L + sigma_L * theta_U) / tot,
                        0.5 * (theta_L + theta_U))
        sd = np.where(tot > 0, sigma_L * sigma_U * np.sqrt(2 * (1 + rho)) / tot, 0.0)
    return PseudoTrue(star, sd)


# ---------------------------------------------------------------------------
# event probability
# ---------------------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(48)
_W_LIMIT = 12.0


def _check_rho(rho: float) -> float:
    rho = float(np.clip(rho, -RHO_CLIP, RHO_CLIP))
    if not abs(rho) < 1:
        raise AssertionError("correlation must lie strictly inside (-1, 1) after clipping")
    return rho


def _prob_quadrature(c, delta, rho, alpha, event) -> float:
    z = ndtri(1 - alpha / 2)
    sig_s = math.sqrt(2 * (1 + rho))
    tau = math.sqrt((1 - rho) / 2)
    c_right = c if event == "relaxed" else 0.0
    centre = delta / sig_s
    lo_band, hi_band = centre - z, centre + z
    p2 = ndtr(hi_band) - ndtr(lo_band)
    # kinks of the conditional probability of E1 given w = s/sig_s
    kinks = [delta + c - c_right, -2 * c_right, 2 * (delta + c)]
    kinks = [k / sig_s for k in kinks]

    def piece(a, b):
        if b <= a:
            return 0.0
        pts = sorted({a, b, *[k for k in kinks if a < k < b]})
        total = 0.0
        for lo, hi in zip(pts[:-1], pts[1:]):
            w = 0.5 * (hi - lo) * _GL_X + 0.5 * (hi + lo)
            s = sig_s * w
            upper = np.minimum(delta + c, s + c_right)
            cond = ndtr((upper - 0.5 * s) / tau)
            dens = np.exp(-0.5 * w * w) / math.sqrt(2 * math.pi)
            total += 0.5 * (hi - lo) * float(np.sum(_GL_W * dens * cond))
        return total

    p1_out = piece(-_W_LIMIT, min(lo_band, _W_LIMIT)) + piece(max(hi_band, -_W_LIMIT), _W_LIMIT)
    return float(min(1.0, p2 + p1_out))


@lru_cache(maxsize=2)
def _qmc_normals(log2_n: int = QMC_LOG2, seed: int = QMC_SEED) -> np.ndarray:
    u = qmc.Sobol(d=2, scramble=True, seed=seed).random_base2(log2_n)
    return ndtri(np.clip(u, 1e-16, 1 - 1e-16))


@lru_cache(maxsize=2)
def _mc_normals(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, 2))


def _prob_sampled(g, c, delta, rho, alpha, event) -> float:
    z = ndtri(1 - alpha / 2)
    u1 = g[:, 0]
    u2 = rho * g[:, 0] + math.sqrt(1 - rho * rho) * g[:, 1]
    c_right = c if event == "relaxed" else 0.0
    e1 = (u1 - delta - c <= 0) & (0 <= u2 + c_right)
    e2 = np.abs(u1 + u2 - delta) <= math.sqrt(2 * (1 + rho)) * z
    return float(np.mean(e1 | e2))


def coverage_prob(c: float, delta: float, rho: float, alpha: float, event: str = "relaxed",
                  method: str = "quadrature", mc_draws: int = 10**6, mc_seed: int = 0) -> float:
    """Probability of the union event for standard normals with correlation ``rho``."""
    if event not in EVENTS:
        raise ValueError(f"event must be one of {EVENTS}")
    if delta < 0:
        raise ValueError("delta must be non-negative")
    rho = _check_rho(rho)
    if method == "quadrature":
        return _prob_quadrature(c, delta, rho, alpha, event)
    if method == "qmc":
        return _prob_sampled(_qmc_normals(), c, delta, rho, alpha, event)
    if method == "mc":
        return _prob_sampled(_mc_normals(mc_draws, mc_seed), c, delta, rho, alpha, event)
    raise ValueError(f"method must be one of {METHODS}")


def delta_max(c: float, rho: float, alpha: float) -> float:
    return 2 * (ndtri(1 - alpha / 2) + c) * (1 + math.sqrt(2 * (1 + rho)))


def infimum_over_delta(c: float, rho: float, alpha: float, event: str = "relaxed",
                       method: str = "quadrature", n_grid: int = 64) -> tuple[float, float]:
    """``(min_prob, argmin_delta)`` over ``[0, delta_max]``: grid search then golden section."""
    dmax = delta_max(c, rho, alpha)
    grid = np.linspace(0.0, dmax, n_grid)
    vals = np.array([coverage_prob(c, d, rho, alpha, event, method) for d in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    res = optimize.minimize_scalar(lambda d: coverage_prob(c, d, rho, alpha, event, method),
                                   bounds=(lo, hi), method="bounded", options={"xatol": 1e-7})
    if res.fun < vals[i]:
        return float(res.fun), float(res.x)
    return float(vals[i]), float(grid[i])


@dataclass(frozen=True)
class CriticalValue:
    c_hat: float
    alpha: float
    rho: float
    iterations: int
    tolerance: float
    argmin_delta: Optional[float]
    at_lower_bracket: bool = False


def critical_value(rho: float, alpha: float, event: str = "relaxed", method: str = "quadrature",
                   delta: Optional[float] = None, tol: float = 1e-6) -> CriticalValue:
    """Solve ``f(c) = 1 - alpha`` for ``c`` in ``[z_{1-alpha}, z_{1-alpha/2}]``.

    With ``delta`` given, ``f`` is the event probability at that fixed
    ``Delta``; otherwise ``f`` is its infimum over ``Delta >= 0``.
    """
    if not 0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")
    rho = _check_rho(rho)
    lo, hi = float(ndtri(1 - alpha)), float(ndtri(1 - alpha / 2))
    info = {"argmin": None}

    def f(c):
        if delta is not None:
            return coverage_prob(c, delta, rho, alpha, event, method) - (1 - alpha)
        val, arg = infimum_over_delta(c, rho, alpha, event, method)
        info["argmin"] = arg
        return val - (1 - alpha)

    f_lo = f(lo)
    if f_lo >= 0:
        return CriticalValue(lo, alpha, rho, 1, 0.0, info["argmin"], True)
    f_hi = f(hi)
    slack = 5e-4 if method != "quadrature" else 1e-9
    if f_hi < -slack:
        raise SolverError(
            f"coverage {f_hi + 1 - alpha:.6f} < {1 - alpha} at c = z_(1-alpha/2) = {hi:.4f} "
            f"(rho={rho}, event={event}, method={method}); the probability kernel is suspect")
    if f_hi <= 0:
        return CriticalValue(hi, alpha, rho, 2, abs(f_hi), info["argmin"])
    root, res = optimize.brentq(f, lo, hi, xtol=tol, full_output=True)
    f(root)
    return CriticalValue(float(root), alpha, rho, res.iterations, tol, info["argmin"])


@dataclass
class CriticalValueTable:
    """Memoized critical values on a ``rho`` lattice with linear interpolation."""

    alpha: float
    event: str = "relaxed"
    method: str = "quadrature"
    step: float = LATTICE_STEP
    _cache: dict = field(default_factory=dict, repr=False)

    def _node(self, j: int) -> float:
        if j not in self._cache:
            r = float(np.clip(j * self.step, -RHO_CLIP, RHO_CLIP))
            self._cache[j] = critical_value(r, self.alpha, self.event, self.method).c_hat
        return self._cache[j]

    def __call__(self, rho) -> np.ndarray:
        rho = np.clip(np.asarray(rho, dtype=float), -RHO_CLIP, RHO_CLIP)
        pos = rho / self.step
        j0 = np.floor(pos).astype(int)
        frac = pos - j0
        out = np.empty_like(rho)
        flat_out, flat_j, flat_f = out.reshape(-1), j0.reshape(-1), frac.reshape(-1)
        for i in range(flat_out.size):
            a = self._node(int(flat_j[i]))
            b = self._node(int(flat_j[i]) + 1) if flat_f[i] > 0 else a
            flat_out[i] = (1 - flat_f[i]) * a + flat_f[i] * b
        return out


_TABLES: dict = {}


def critical_value_lookup(rho, alpha: float, event: str = "relaxed",
                          method: str = "quadrature") -> np.ndarray:
    key = (float(alpha), event, method)
    if key not in _TABLES:
        _TABLES[key] = CriticalValueTable(float(alpha), event, method)
    return _TABLES[key](rho)


@dataclass(frozen=True)
class PointwiseIntervals:
    z: np.ndarray
    theta_L: np.ndarray
    theta_U: np.ndarray
    theta_star: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    c_hat: np.ndarray
    rho: np.ndarray

    def rows(self):
        return zip(self.z, self.theta_L, self.theta_U, self.theta_star, self.ci_lo,
                   self.ci_hi, self.c_hat, self.rho)


def confidence_interval(theta_L, theta_U, sigma_L, sigma_U, rho, n: int, alpha: float,
                        c_hat=None, event: str = "relaxed", method: str = "quadrature"):
    """Union interval, returned as ``(ci_lo, ci_hi, c_hat, theta_star)`` arrays."""
    theta_L, theta_U = np.asarray(theta_L, float), np.asarray(theta_U, float)
    sigma_L, sigma_U = np.asarray(sigma_L, float), np.asarray(sigma_U, float)
    rho = np.asarray(rho, float)
    if c_hat is None:
        c_hat = critical_value_lookup(rho, alpha, event, method)
    c_hat = np.broadcast_to(np.asarray(c_hat, float), theta_L.shape)
    pt = pseudo_true(theta_L, theta_U, sigma_L, sigma_U, rho)
    root_n = math.sqrt(n)
    z = ndtri(1 - alpha / 2)
    lo1 = theta_L - sigma_L * c_hat / root_n
    hi1 = theta_U + sigma_U * c_hat / root_n
    lo2 = pt.theta_star - pt.sigma_star * z / root_n
    hi2 = pt.theta_star + pt.sigma_star * z / root_n
    return np.minimum(lo1, lo2), np.maximum(hi1, hi2), np.array(c_hat), pt.theta_star


def pointwise_intervals(points, n: int, alpha: float, event: str = "relaxed",
                        method: str = "quadrature") -> PointwiseIntervals:
    """Intervals at every point of a :class:`CurvePoints` evaluation."""
    lo, hi, c, star = confidence_interval(points.theta_L, points.theta_U, points.sigma_L,
                                          points.sigma_U, points.rho, n, alpha,
                                          event=event, method=method)
    return PointwiseIntervals(points.z, points.theta_L, points.theta_U, star, lo, hi, c, points.rho)
