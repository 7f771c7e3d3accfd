"""End-to-end estimation: folds, nuisances, scores, projection and inference."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core_data import ConfigError, HeterogeneitySpec, ObservationTable, make_folds
from .nuisance_learners import LearnerConfig, NuisanceFit, crossfit
from .orthogonal_scores import ScoreSettings, ScoreVector, compute_scores
from .pointwise_inference import PointwiseIntervals, pointwise_intervals
from .series_projection import (BasisSpec, BoundsCurve, CurvePoints, build_basis, loocv_select,
                                project)
from .uniform_bands import Band, BootstrapRun, confidence_band, run_bootstrap

SPLINE_CANDIDATES = (BasisSpec("constant"),) + tuple(BasisSpec("bspline", 4, m) for m in range(6))


class SelectionWarning(UserWarning):
    """The selected basis sits at the largest candidate dimension."""


@dataclass(frozen=True)
class EstimationSettings:
    alpha: float = 0.05
    folds: int = 10
    learner: LearnerConfig = LearnerConfig()
    score: ScoreSettings = ScoreSettings()
    candidates: tuple = SPLINE_CANDIDATES
    shared_basis: bool = False
    event: str = "relaxed"
    cv_method: str = "quadrature"
    bootstrap_reps: int = 0
    band_alpha: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 0.5:
            raise ConfigError("alpha must lie in (0, 0.5)")
        if self.folds < 2:
            raise ConfigError("fold count must be at least 2")
        if self.bootstrap_reps < 0:
            raise ConfigError("bootstrap reps must be non-negative")
        if not self.candidates:
            raise ConfigError("at least one basis candidate is required")


@dataclass
class EstimationResult:
    nuisance: NuisanceFit
    scores: ScoreVector
    curve: BoundsCurve
    points: CurvePoints
    intervals: PointwiseIntervals
    band: Optional[Band] = None
    bootstrap: Optional[BootstrapRun] = None
    selection: dict = field(default_factory=dict)

    def summary(self) -> dict:
        """Unconditional bounds: sample means of the pseudo-outcomes."""
        return {"theta_L": float(np.mean(self.scores.psi_L)),
                "theta_U": float(np.mean(self.scores.psi_U)), "n": self.scores.n}


def column_candidates(het: HeterogeneitySpec, z: np.ndarray, candidates: Sequence) -> list:
    """One candidate per entry, with categorical columns fixed to an indicator basis."""
    out = []
    for cand in candidates:
        specs = []
        for j, kind in enumerate(het.kinds):
            if kind == "categorical":
                specs.append(BasisSpec("indicator", categories=tuple(np.unique(z[:, j]).tolist())))
            else:
                specs.append(cand)
        out.append(tuple(specs))
    unique = []
    for c in out:
        if c not in unique:
            unique.append(c)
    return unique


def select_bases(z, scores: ScoreVector, het: HeterogeneitySpec, settings: EstimationSettings):
    cands = column_candidates(het, z, settings.candidates)
    spec_l, cv_l = loocv_select(z, scores.psi_L, cands)
    if settings.shared_basis:
        spec_u, cv_u = spec_l, cv_l
    else:
        spec_u, cv_u = loocv_select(z, scores.psi_U, cands)
    basis_l = build_basis(z, spec_l)
    basis_u = build_basis(z, spec_u)
    max_k = max(build_basis(z, c).k for c in cands)
    for name, b in (("lower", basis_l), ("upper", basis_u)):
        if len(cands) > 1 and b.k == max_k:
            warnings.warn(f"{name} basis selected at the largest candidate dimension k={b.k}",
                          SelectionWarning, stacklevel=2)
    info = {"basis_L": basis_l.describe(), "basis_U": basis_u.describe(),
            "loocv_L": [float(v) for v in cv_l], "loocv_U": [float(v) for v in cv_u],
            "candidates": [[s.label() for s in c] for c in cands]}
    return basis_l, basis_u, info


def estimate(table: ObservationTable, het: HeterogeneitySpec, settings: EstimationSettings,
             z_grid, nuisance: Optional[NuisanceFit] = None, bases=None,
             select=None, quant=None) -> EstimationResult:
    """Run the full pipeline and evaluate inference on ``z_grid``.

    ``nuisance`` skips cross-fitting (used for oracle runs). ``bases`` fixes the
    ``(basis_L, basis_U)`` pair instead of selecting it by leave-one-out CV.
    """
    z = het.values(table)
    if nuisance is None:
        folds = make_folds(table.n, settings.folds, settings.seed)
        nuisance = crossfit(table, folds, settings.learner, select, quant)
    scores = compute_scores(table, nuisance, settings=settings.score)
    if bases is None:
        basis_l, basis_u, info = select_bases(z, scores, het, settings)
    else:
        basis_l, basis_u = bases
        info = {"basis_L": basis_l.describe(), "basis_U": basis_u.describe()}
    curve = project(scores.psi_L, scores.psi_U, z, basis_l, basis_u)
    grid = np.asarray(z_grid, dtype=float)
    if grid.ndim == 1:
        grid = grid.reshape(-1, 1)
    points = curve.evaluate(grid)
    intervals = pointwise_intervals(points, table.n, settings.alpha, settings.event, settings.cv_method)
    result = EstimationResult(nuisance, scores, curve, points, intervals, selection=info)
    if settings.bootstrap_reps:
        if grid.shape[1] != 1:
            raise ConfigError("uniform bands are implemented for one heterogeneity column")
        run = run_bootstrap(curve, scores.psi_L, scores.psi_U, z, grid[:, 0],
                            settings.bootstrap_reps, settings.seed)
        result.bootstrap = run
        result.band = confidence_band(curve, run, settings.band_alpha or settings.alpha)
    return result
