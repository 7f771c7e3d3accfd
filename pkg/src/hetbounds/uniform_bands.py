"""Uniform confidence bands by the exponential multiplier bootstrap.

Each replication draws standard exponential weights ``h`` once and reuses them
in the weighted regressions of both bounds. Pseudo-outcomes are not
recomputed, so no nuisance model is refit.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .series_projection import BoundsCurve, qr_solve

MIN_GRID = 101
DISCARD_CAP = 0.01
CHUNK = 100


class BandWarning(UserWarning):
    """Grid points were skipped because a bootstrap variance was zero."""


class BootstrapError(RuntimeError):
    """Too many replications had singular weighted designs."""


def refine_grid(z_grid, min_points: int = MIN_GRID) -> np.ndarray:
    """Merge a 1-D grid with an equispaced grid of at least ``min_points`` points."""
    z = np.unique(np.asarray(z_grid, dtype=float).ravel())
    if z.size >= min_points or z.size < 2:
        return z
    return np.unique(np.concatenate([z, np.linspace(z[0], z[-1], min_points)]))


def exponential_weights(n: int, seed: int, rep: int, attempt: int = 0) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, rep, attempt])).standard_exponential(n)


def bootstrap_fit(psi_L, psi_U, design_L, design_U, h):
    """Weighted least squares for both bounds with shared weights.

    Returns ``(beta_L, beta_U, resid_L, resid_U)``. ``h`` may be a vector or
    a ``(reps, n)`` matrix, in which case the outputs gain a leading axis.
    Each fit uses the same QR solver as the point estimate, so unit weights
    reproduce it bit for bit.
    """
    h = np.asarray(h, dtype=float)
    rows = h.reshape(-1, h.shape[-1])
    out = []
    for x, y in ((design_L, psi_L), (design_U, psi_U)):
        root = np.sqrt(rows)
        beta = np.array([qr_solve(x * w[:, None], y * w) for w in root])
        beta = beta.reshape(h.shape[:-1] + (x.shape[1],))
        out.append((beta, y - beta @ x.T))
    return out[0][0], out[1][0], out[0][1], out[1][1]


def _weighted_sigma(x, resid, h, at, n):
    """sqrt of ``b(z)' Q_h^{-1} S_h Q_h^{-1} b(z)`` per replication and grid point."""
    q = np.einsum("rn,ni,nj->rij", h, x, x) / n
    s = np.einsum("rn,ni,nj->rij", h * resid ** 2, x, x) / n
    a = np.linalg.solve(q, np.broadcast_to(at.T, (len(h),) + at.T.shape))
    var = np.einsum("rig,rij,rjg->rg", a, s, a)
    return np.sqrt(np.maximum(var, 0.0))


@dataclass
class BootstrapRun:
    reps: int
    seed: int
    z_grid: np.ndarray
    inf_t_L: np.ndarray
    sup_t_U: np.ndarray
    discarded: int = 0
    skipped_points: int = 0
    diagnostics: dict = field(default_factory=dict)

    def quantiles(self, alpha: float) -> tuple[float, float]:
        """``c_{alpha/2}(inf t_L)`` and ``c_{1-alpha/2}(sup t_U)``."""
        return (float(np.quantile(self.inf_t_L, alpha / 2)),
                float(np.quantile(self.sup_t_U, 1 - alpha / 2)))


def t_process(curve: BoundsCurve, beta_L_b, beta_U_b, sigma_L_b, sigma_U_b, bl, bu):
    """Bootstrap t statistics on the grid; rows are replications."""
    root_n = math.sqrt(curve.n)
    num_l = (beta_L_b - curve.beta_L) @ bl.T
    num_u = (beta_U_b - curve.beta_U) @ bu.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t_l = np.where(sigma_L_b > 0, root_n * num_l / sigma_L_b, np.nan)
        t_u = np.where(sigma_U_b > 0, root_n * num_u / sigma_U_b, np.nan)
    return t_l, t_u


def run_bootstrap(curve: BoundsCurve, psi_L, psi_U, z_values, z_grid, reps: int = 1000,
                  seed: int = 0, refine: bool = True, weights: Optional[np.ndarray] = None) -> BootstrapRun:
    """Multiplier bootstrap of the inf/sup t statistics over ``z_grid``.

    ``weights`` overrides the random draws with a fixed ``(reps, n)`` matrix.
    """
    if reps < 1:
        raise ValueError("bootstrap needs at least one replication")
    grid = refine_grid(z_grid) if refine else np.asarray(z_grid, dtype=float).ravel()
    xl = curve.basis_L.design(z_values)
    xu = curve.basis_U.design(z_values)
    bl = curve.basis_L.design(grid)
    bu = curve.basis_U.design(grid)
    n = len(psi_L)
    inf_t, sup_t = [], []
    discarded = 0
    skipped = np.zeros(grid.size, dtype=bool)
    for start in range(0, reps, CHUNK):
        stop = min(start + CHUNK, reps)
        if weights is not None:
            h = np.asarray(weights[start:stop], dtype=float)
        else:
            rows = []
            for r in range(start, stop):
                attempt = 0
                while True:
                    w = exponential_weights(n, seed, r, attempt)
                    if _well_posed(xl, w) and _well_posed(xu, w):
                        break
                    discarded += 1
                    attempt += 1
                    if discarded > max(1, DISCARD_CAP * reps):
                        raise BootstrapError(f"{discarded} replications had singular weighted designs")
                rows.append(w)
            h = np.vstack(rows)
        b_l, b_u, e_l, e_u = bootstrap_fit(psi_L, psi_U, xl, xu, h)
        s_l = _weighted_sigma(xl, e_l, h, bl, n)
        s_u = _weighted_sigma(xu, e_u, h, bu, n)
        t_l, t_u = t_process(curve, b_l, b_u, s_l, s_u, bl, bu)
        bad = np.isnan(t_l) | np.isnan(t_u)
        skipped |= bad.any(axis=0)
        inf_t.append(t_l)
        sup_t.append(t_u)
    t_l = np.vstack(inf_t)[:, ~skipped]
    t_u = np.vstack(sup_t)[:, ~skipped]
    if skipped.any():
        warnings.warn(f"{int(skipped.sum())} grid points skipped: zero bootstrap variance",
                      BandWarning, stacklevel=2)
    if t_l.shape[1] == 0:
        raise BootstrapError("every grid point had zero bootstrap variance")
    return BootstrapRun(reps, seed, grid[~skipped], t_l.min(axis=1), t_u.max(axis=1),
                        discarded, int(skipped.sum()))


def _well_posed(x, w) -> bool:
    return np.linalg.cond((x * w[:, None]).T @ x) < 1e12


@dataclass(frozen=True)
class Band:
    z: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    c_lower: float
    c_upper: float

    def export(self, path, diagnostics_path=None, run: Optional[BootstrapRun] = None) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["z", "band_lo", "band_hi"])
            for row in zip(self.z, self.lo, self.hi):
                w.writerow([f"{v:.10g}" for v in row])
        if diagnostics_path is not None:
            info = {"c_lower": self.c_lower, "c_upper": self.c_upper}
            if run is not None:
                info.update(reps=run.reps, seed=run.seed, discarded=run.discarded,
                            skipped_points=run.skipped_points)
            Path(diagnostics_path).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def confidence_band(curve: BoundsCurve, run: BootstrapRun, alpha: float) -> Band:
    """Lower curve moved by the ``alpha/2`` quantile of ``inf t_L`` (a negative
    number in practice); upper curve by the ``1-alpha/2`` quantile of ``sup t_U``."""
    c_lo, c_hi = run.quantiles(alpha)
    pts = curve.evaluate(run.z_grid)
    root_n = math.sqrt(curve.n)
    lo = pts.theta_L + c_lo * pts.sigma_L / root_n
    hi = pts.theta_U + c_hi * pts.sigma_U / root_n
    return Band(run.z_grid, lo, hi, c_lo, c_hi)
