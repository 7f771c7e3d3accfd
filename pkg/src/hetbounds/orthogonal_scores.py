"""Per-unit pseudo-outcomes for the lower and upper bound.

Cells are classified by the trimming share ``p0(x) = s(0,x)/s(1,x)``:

* PLUS (``p0 < 1``): treatment raises selection, and the selected *treated*
  outcomes are trimmed to the share ``p0``.
* MINUS (``p0 > 1``): treatment lowers selection, and the selected *control*
  outcomes are trimmed to the share ``1/p0``.

Three score forms are available:

``"orthogonal"`` (default)
    The trimmed-mean moment plus influence-function corrections for the
    selection probabilities and the trimming quantile. It is normalized per
    unit by the always-taker probability and recentred on a plug-in bound, so
    that ``E[psi | X] = theta_B(X)`` and the mean is first-order insensitive to
    errors in ``s0``, ``s1`` and ``q``.

``"appendix"``
    A literal transcription with global normalizers ``mu10_plus`` and
    ``mu11_minus``.

``"naive"``
    The uncorrected trimmed-mean moment with per-unit normalization. It is
    kept as a negative control for orthogonality tests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core_data import ObservationTable
from .nuisance_learners import NuisanceFit

PLUS, MINUS = 1, -1
TIE_TOL = 1e-12
SCORE_FORMS = ("orthogonal", "appendix", "naive")


class ScoreError(ArithmeticError):
    """A pseudo-outcome came out non-finite."""


@dataclass(frozen=True)
class CellClassification:
    sign: np.ndarray
    p0_hat: np.ndarray
    mu10_plus: Optional[float]
    mu11_minus: Optional[float]
    n_ties: int

    @property
    def plus(self) -> np.ndarray:
        return self.sign == PLUS

    @property
    def minus(self) -> np.ndarray:
        return self.sign == MINUS


def classify_cells(nuisance: NuisanceFit) -> CellClassification:
    """Assign PLUS/MINUS by comparing the estimated trimming share with one.

    Ties (``|p0 - 1| < 1e-12``) go to PLUS.
    """
    p0 = np.asarray(nuisance.s0_hat, dtype=float) / np.asarray(nuisance.s1_hat, dtype=float)
    if not np.all(np.isfinite(p0) & (p0 > 0)):
        raise ScoreError("trimming share must be finite and positive; clip selection predictions")
    ties = np.abs(p0 - 1.0) < TIE_TOL
    sign = np.where((p0 < 1.0) | ties, PLUS, MINUS).astype(np.int8)
    plus = sign == PLUS
    mu10 = float(np.mean(nuisance.s0_hat[plus])) if plus.any() else None
    mu11 = float(np.mean(nuisance.s1_hat[~plus])) if (~plus).any() else None
    return CellClassification(sign, p0, mu10, mu11, int(ties.sum()))


@dataclass(frozen=True)
class TrimmingLevels:
    """Unrounded levels and their nearest-grid indices for both bounds."""

    lower: np.ndarray
    upper: np.ndarray
    lower_idx: np.ndarray
    upper_idx: np.ndarray
    grid: np.ndarray

    @property
    def lower_rounded(self) -> np.ndarray:
        return self.grid[self.lower_idx]

    @property
    def upper_rounded(self) -> np.ndarray:
        return self.grid[self.upper_idx]


def nearest_grid_index(levels: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Index of the closest grid value; exact midpoints go to the lower value."""
    levels = np.asarray(levels, dtype=float)
    hi = np.clip(np.searchsorted(grid, levels), 1, len(grid) - 1)
    lo = hi - 1
    take_hi = np.abs(grid[hi] - levels) < np.abs(levels - grid[lo]) - 1e-12
    idx = np.where(take_hi, hi, lo)
    if len(grid) == 1:
        return np.zeros_like(idx)
    return idx


def trimming_levels(cells: CellClassification, grid) -> TrimmingLevels:
    """PLUS: ``(p0, 1-p0)``; MINUS: ``(1-1/p0, 1/p0)``; rounded to the grid."""
    grid = np.asarray(grid, dtype=float)
    p0 = cells.p0_hat
    plus = cells.plus
    inv = 1.0 / p0
    lower = np.where(plus, np.minimum(p0, 1.0), 1.0 - inv)
    upper = np.where(plus, 1.0 - np.minimum(p0, 1.0), inv)
    return TrimmingLevels(lower, upper, nearest_grid_index(lower, grid),
                          nearest_grid_index(upper, grid), grid)


@dataclass(frozen=True)
class ScoreSettings:
    form: str = "orthogonal"
    symmetric_propensity: bool = True

    def __post_init__(self):
        if self.form not in SCORE_FORMS:
            raise ValueError(f"score form must be one of {SCORE_FORMS}")


@dataclass(frozen=True)
class ScoreVector:
    psi_L: np.ndarray
    psi_U: np.ndarray
    cells: CellClassification
    levels: TrimmingLevels
    settings: ScoreSettings

    @property
    def n(self) -> int:
        return len(self.psi_L)


def _pick(grid_values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return grid_values[np.arange(len(idx)), idx]


def _prefix_mean(q: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Mean of ``q[i, :idx[i]+1]``."""
    cs = np.cumsum(q, axis=1)
    return _pick(cs, idx) / (idx + 1)


def _suffix_mean(q: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Mean of ``q[i, idx[i]:]``."""
    cs = np.cumsum(q[:, ::-1], axis=1)[:, ::-1]
    return _pick(cs, idx) / (q.shape[1] - idx)


def _orthogonal(table, nu, cells, lv):
    d = table.d_treat.astype(float)
    s = table.s_select.astype(float)
    y = table.y_obs
    e = table.propensity
    a = (1 - d) * s / (1 - e)
    b = d * s / e
    s0, s1, p0 = nu.s0_hat, nu.s1_hat, cells.p0_hat
    q1, q0 = nu.q1_grid, nu.q0_grid
    mean1, mean0 = q1.mean(axis=1), q0.mean(axis=1)
    plus = cells.plus

    # PLUS cells: trim selected treated outcomes to the share p0.
    ql, qu = _pick(q1, lv.lower_idx), _pick(q1, lv.upper_idx)
    pl, pu = lv.lower, lv.upper
    sel_adj = a - s0, b - s1
    m_lp = (b * y * (y <= ql) - a * y + ql * sel_adj[0] - ql * p0 * sel_adj[1]
            - ql * b * ((y <= ql) - pl))
    m_up = (b * y * (y >= qu) - a * y + qu * sel_adj[0] - qu * p0 * sel_adj[1]
            + qu * b * ((y <= qu) - pu))
    th_lp = _prefix_mean(q1, lv.lower_idx) - mean0
    th_up = _suffix_mean(q1, lv.upper_idx) - mean0
    psi_lp = th_lp + (m_lp - th_lp * a) / s0
    psi_up = th_up + (m_up - th_up * a) / s0

    # MINUS cells: trim selected control outcomes to the share r = 1/p0.
    r = 1.0 / p0
    gl, gu = _pick(q0, lv.lower_idx), _pick(q0, lv.upper_idx)
    m_lm = (b * y - a * y * (y >= gl) - gl * sel_adj[1] + gl * r * sel_adj[0]
            - gl * a * ((y <= gl) - pl))
    m_um = (b * y - a * y * (y <= gu) - gu * sel_adj[1] + gu * r * sel_adj[0]
            + gu * a * ((y <= gu) - pu))
    th_lm = mean1 - _suffix_mean(q0, lv.lower_idx)
    th_um = mean1 - _prefix_mean(q0, lv.upper_idx)
    psi_lm = th_lm + (m_lm - th_lm * b) / s1
    psi_um = th_um + (m_um - th_um * b) / s1

    parts = {"plug_in_L": np.where(plus, th_lp, th_lm), "plug_in_U": np.where(plus, th_up, th_um)}
    return np.where(plus, psi_lp, psi_lm), np.where(plus, psi_up, psi_um), parts


def _naive(table, nu, cells, lv):
    d = table.d_treat.astype(float)
    s = table.s_select.astype(float)
    y = table.y_obs
    e = table.propensity
    a = (1 - d) * s / (1 - e)
    b = d * s / e
    plus = cells.plus
    ql, qu = _pick(nu.q1_grid, lv.lower_idx), _pick(nu.q1_grid, lv.upper_idx)
    gl, gu = _pick(nu.q0_grid, lv.lower_idx), _pick(nu.q0_grid, lv.upper_idx)
    psi_l = np.where(plus, (b * y * (y <= ql) - a * y) / nu.s0_hat,
                     (b * y - a * y * (y >= gl)) / nu.s1_hat)
    psi_u = np.where(plus, (b * y * (y >= qu) - a * y) / nu.s0_hat,
                     (b * y - a * y * (y <= gu)) / nu.s1_hat)
    return psi_l, psi_u, {}


def _appendix(table, nu, cells, lv, symmetric):
    d = table.d_treat.astype(float)
    s = table.s_select.astype(float)
    y = table.y_obs
    e = table.propensity
    a = (1 - d) * s / (1 - e)
    a_u = a if symmetric else (1 - d) * s / e
    b = d * s / e
    s0, s1, p0 = nu.s0_hat, nu.s1_hat, cells.p0_hat
    plus = cells.plus.astype(float)
    minus = 1.0 - plus
    w_plus = plus / cells.mu10_plus if cells.mu10_plus else np.zeros_like(plus)
    w_minus = minus / cells.mu11_minus if cells.mu11_minus else np.zeros_like(minus)
    q = nu.q1_grid
    # one quantile per unit and bound; the cell decides which level it encodes
    ql, qu = _pick(q, lv.lower_idx), _pick(q, lv.upper_idx)

    star_l = (w_plus * (b * y * (y <= ql) - a * y)
              + w_minus * (b * y - a * y * (y >= ql)))
    star_u = (w_plus * (b * y * (y >= qu) - a * y)
              + w_minus * (b * y - a * y * (y <= qu)))
    alpha_lp = ql * (a - s0) - ql * p0 * (b - s1) - ql * s1 * (b * (y <= ql) / s1 - p0)
    alpha_lm = (-ql / p0 * (a - s0) + ql * (b - s1)
                + ql * s0 * (b * (y <= ql) / s0 + (1 - 1 / p0)))
    alpha_up = qu * (a_u - s0) - qu * p0 * (b - s1) + qu * s1 * (b * (y <= qu) / s1 - (1 - p0))
    alpha_um = qu / p0 * (a_u - s0) + qu * (b - s1) + qu * s0 * (b * (y <= qu) / s0 - 1 / p0)
    psi_l = star_l + w_plus * alpha_lp + w_minus * alpha_lm
    psi_u = star_u + w_plus * alpha_up + w_minus * alpha_um
    return psi_l, psi_u, {}


def compute_scores(table: ObservationTable, nuisance: NuisanceFit,
                   cells: Optional[CellClassification] = None,
                   settings: ScoreSettings = ScoreSettings()) -> ScoreVector:
    """Evaluate ``psi_L`` and ``psi_U`` for every unit."""
    if nuisance.s0_hat.shape != (table.n,):
        raise ValueError("nuisance predictions do not match the table")
    cells = cells or classify_cells(nuisance)
    lv = trimming_levels(cells, nuisance.grid)
    with np.errstate(divide="ignore", invalid="ignore"):
        if settings.form == "orthogonal":
            psi_l, psi_u, _ = _orthogonal(table, nuisance, cells, lv)
        elif settings.form == "naive":
            psi_l, psi_u, _ = _naive(table, nuisance, cells, lv)
        else:
            psi_l, psi_u, _ = _appendix(table, nuisance, cells, lv, settings.symmetric_propensity)
    for name, psi in (("psi_L", psi_l), ("psi_U", psi_u)):
        bad = np.flatnonzero(~np.isfinite(psi))
        if bad.size:
            i = int(bad[0])
            raise ScoreError(
                f"{name} non-finite for unit {i}: D={table.d_treat[i]}, S={table.s_select[i]}, "
                f"e={table.propensity[i]:.4g}, s0={nuisance.s0_hat[i]:.4g}, "
                f"s1={nuisance.s1_hat[i]:.4g}, p0={cells.p0_hat[i]:.4g}, "
                f"levels=({lv.lower[i]:.4g}, {lv.upper[i]:.4g})")
    return ScoreVector(psi_l, psi_u, cells, lv, settings)


def score_lower(table, nuisance, cells=None, settings: ScoreSettings = ScoreSettings()) -> np.ndarray:
    return compute_scores(table, nuisance, cells, settings).psi_L


def score_upper(table, nuisance, cells=None, settings: ScoreSettings = ScoreSettings()) -> np.ndarray:
    return compute_scores(table, nuisance, cells, settings).psi_U


def perturb_nuisance(nuisance: NuisanceFit, component: str, amount) -> NuisanceFit:
    """Shift one nuisance component by ``amount`` (scalar or per-unit array).

    ``"q"`` shifts both quantile functions, which keeps them monotone in u.
    """
    amount = np.asarray(amount, dtype=float)
    if component == "s0":
        return replace(nuisance, s0_hat=np.clip(nuisance.s0_hat + amount, 1e-6, 1 - 1e-6))
    if component == "s1":
        return replace(nuisance, s1_hat=np.clip(nuisance.s1_hat + amount, 1e-6, 1 - 1e-6))
    if component == "q":
        shift = amount[:, None] if amount.ndim == 1 else amount
        return replace(nuisance, q1_grid=nuisance.q1_grid + shift, q0_grid=nuisance.q0_grid + shift)
    raise ValueError(f"unknown nuisance component {component!r}")


def difference_quotients(table: ObservationTable, nuisance: NuisanceFit, component: str,
                         t: float, direction=0.05,
                         settings: ScoreSettings = ScoreSettings()) -> np.ndarray:
    """Per-unit ``[psi_B(eta + t*dir) - psi_B(eta)] / t`` as an ``(n, 2)`` array.

    The cell signs and global normalizers of the base fit are held fixed, so
    only ``p0`` moves with the perturbed selection probabilities.
    """
    if t == 0:
        raise ValueError("perturbation scale must be non-zero")
    base_cells = classify_cells(nuisance)
    base = compute_scores(table, nuisance, base_cells, settings)
    moved = perturb_nuisance(nuisance, component, t * np.asarray(direction, dtype=float))
    cells = replace(base_cells, p0_hat=moved.s0_hat / moved.s1_hat)
    pert = compute_scores(table, moved, cells, settings)
    return np.column_stack([pert.psi_L - base.psi_L, pert.psi_U - base.psi_U]) / t


def orthogonality_check(table: ObservationTable, nuisance: NuisanceFit, component: str,
                        t: float, direction=0.05,
                        settings: ScoreSettings = ScoreSettings()) -> tuple[float, float]:
    """Finite-difference directional derivative ``(D_L, D_U)`` of the sample mean score."""
    dq = difference_quotients(table, nuisance, component, t, direction, settings)
    return float(dq[:, 0].mean()), float(dq[:, 1].mean())


def richardson_first_order(table: ObservationTable, nuisance: NuisanceFit, component: str,
                           t: float, direction=0.05,
                           settings: ScoreSettings = ScoreSettings()) -> tuple[np.ndarray, np.ndarray]:
    """First-order term ``2 D(t/2) - D(t)`` and its sampling standard error, per bound."""
    per_unit = (2 * difference_quotients(table, nuisance, component, t / 2, direction, settings)
                - difference_quotients(table, nuisance, component, t, direction, settings))
    return per_unit.mean(axis=0), per_unit.std(axis=0, ddof=1) / np.sqrt(len(per_unit))


def export_scores(scores: ScoreVector, path) -> None:
    """Write unit id, scores, cell sign and rounded trimming levels to CSV."""
    path = Path(path)
    lv = scores.levels
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "psi_L", "psi_U", "cell", "level_L", "level_U"])
        for i in range(scores.n):
            w.writerow([i, repr(float(scores.psi_L[i])), repr(float(scores.psi_U[i])),
                        "PLUS" if scores.cells.sign[i] == PLUS else "MINUS",
                        f"{lv.lower_rounded[i]:.2f}", f"{lv.upper_rounded[i]:.2f}"])
