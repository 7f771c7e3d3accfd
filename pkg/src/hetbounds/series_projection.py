"""Least-squares projection of pseudo-outcomes on basis functions of ``Z``.

The bound curves are ``theta_B(z) = b_B(z)' beta_B`` with ``beta_B`` from an
ordinary least-squares regression of ``psi_B`` on ``b_B(Z)``. The joint
asymptotic variance of the two curves at ``z`` is the 2x2 sandwich

    Omega(z) = B(z)' Q^{-1} S Q^{-1} B(z),

where ``Q`` is block-diagonal with ``Q_B = E_n[b_B b_B']`` and ``S`` stacks the
residual outer products ``E_n[b_B b_C' e_B e_C]``.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

RHO_CLIP = 1.0 - 1e-10
VAR_FLOOR = 1e-12
RANK_TOL = 1e-10
HAT_TOL = 1e-10
TIE_RTOL = 1e-10


class ProjectionError(np.linalg.LinAlgError):
    """The regression design is singular."""


class BasisWarning(UserWarning):
    """Columns were dropped or a variance entry was floored."""


@dataclass(frozen=True)
class BasisSpec:
    """Univariate basis recipe.

    ``kind`` is ``"bspline"``, ``"indicator"`` or ``"constant"``. For splines,
    ``order`` is the polynomial order (degree + 1) and ``n_interior`` the
    number of interior knots placed at empirical quantiles.
    """

    kind: str = "bspline"
    order: int = 4
    n_interior: int = 3
    categories: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("bspline", "indicator", "constant"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.kind == "bspline" and (self.order < 1 or self.n_interior < 0):
            raise ValueError("spline order must be >= 1 and interior knots >= 0")
        if self.kind == "indicator" and not self.categories:
            raise ValueError("indicator basis needs a category list")
        if self.categories is not None:
            object.__setattr__(self, "categories", tuple(self.categories))

    @property
    def nominal_k(self) -> int:
        if self.kind == "constant":
            return 1
        if self.kind == "indicator":
            return len(self.categories)
        return self.order + self.n_interior

    def label(self) -> str:
        if self.kind == "bspline":
            return f"bspline(order={self.order},interior={self.n_interior})"
        if self.kind == "indicator":
            return f"indicator({len(self.categories)})"
        return "constant"


@dataclass(frozen=True)
class _Factor:
    spec: BasisSpec
    knots: Optional[np.ndarray] = None
    lo: float = 0.0
    hi: float = 1.0

    def columns(self, z: np.ndarray) -> np.ndarray:
        if self.spec.kind == "constant":
            return np.ones((len(z), 1))
        if self.spec.kind == "indicator":
            cats = np.asarray(self.spec.categories, dtype=float)
            bad = ~np.isin(z, cats)
            if bad.any():
                raise ValueError(f"categorical value {z[bad][0]} not in declared categories")
            return (z[:, None] == cats[None, :]).astype(float)
        zc = np.clip(z, self.lo, self.hi)
        deg = self.spec.order - 1
        return BSpline.design_matrix(zc, self.knots, deg, extrapolate=False).toarray()


@dataclass(frozen=True)
class Basis:
    """A basis fitted to sample values of ``Z`` (knots fixed at fit time)."""

    factors: tuple
    keep: np.ndarray
    specs: tuple

    @property
    def k(self) -> int:
        return int(self.keep.size)

    def design(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, 1)
        if z.shape[1] != len(self.factors):
            raise ValueError(f"expected {len(self.factors)} heterogeneity columns, got {z.shape[1]}")
        if not np.all(np.isfinite(z)):
            raise ValueError("heterogeneity values must be finite")
        out = self.factors[0].columns(z[:, 0])
        for j, fac in enumerate(self.factors[1:], start=1):
            cols = fac.columns(z[:, j])
            out = (out[:, :, None] * cols[:, None, :]).reshape(len(z), -1)
        return out[:, self.keep]

    def describe(self) -> dict:
        return {"specs": [asdict(s) for s in self.specs], "k": self.k,
                "knots": [None if f.knots is None else f.knots.tolist() for f in self.factors]}


def _fit_factor(z: np.ndarray, spec: BasisSpec) -> _Factor:
    if spec.kind != "bspline":
        return _Factor(spec)
    lo, hi = float(np.min(z)), float(np.max(z))
    if hi <= lo:
        raise ValueError("spline basis needs a non-degenerate heterogeneity column")
    probs = np.arange(1, spec.n_interior + 1) / (spec.n_interior + 1)
    interior = np.unique(np.quantile(z, probs)) if spec.n_interior else np.empty(0)
    interior = interior[(interior > lo) & (interior < hi)]
    m = spec.order
    knots = np.concatenate([np.full(m, lo), interior, np.full(m, hi)])
    return _Factor(spec, knots, lo, hi)


def pivoted_rank(x: np.ndarray, tol: float = RANK_TOL) -> tuple[int, np.ndarray]:
    """Numerical rank and column pivot order from a pivoted QR."""
    if x.shape[1] == 0:
        return 0, np.empty(0, dtype=int)
    _, r, piv = linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0:
        return 0, piv
    rank = int(np.sum(diag > tol * diag[0] * max(x.shape)))
    return rank, piv


def build_basis(z_values, spec) -> Basis:
    """Fit a basis to sample heterogeneity values.

    ``spec`` is one :class:`BasisSpec` (applied to every column) or a sequence
    with one spec per column; multivariate ``Z`` gives the tensor product.
    Columns that are linearly dependent on the sample are dropped with a
    warning, in pivoted-QR order.
    """
    z = np.asarray(z_values, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    specs = tuple(spec) if isinstance(spec, (list, tuple)) else (spec,) * z.shape[1]
    if len(specs) != z.shape[1]:
        raise ValueError("one basis spec per heterogeneity column is required")
    factors = tuple(_fit_factor(z[:, j], s) for j, s in enumerate(specs))
    full = Basis(factors, np.arange(_full_width(factors, z)), specs)
    x = full.design(z)
    rank, piv = pivoted_rank(x)
    if rank < x.shape[1]:
        dropped = np.sort(piv[rank:])
        warnings.warn(f"basis is rank deficient on the sample; dropping columns {dropped.tolist()}",
                      BasisWarning, stacklevel=2)
        return Basis(factors, np.sort(piv[:rank]), specs)
    return full


def _full_width(factors, z) -> int:
    width = 1
    for j, f in enumerate(factors):
        width *= f.columns(z[:1, j]).shape[1]
    return width


def hat_diagonal(x: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(x)
    return np.einsum("ij,ij->i", q, q)


def loocv_score(x: np.ndarray, y: np.ndarray) -> float:
    """Closed-form leave-one-out squared error; ``inf`` when disqualified."""
    n, k = x.shape
    if n <= k or pivoted_rank(x)[0] < k:
        return np.inf
    q, r = np.linalg.qr(x)
    h = np.einsum("ij,ij->i", q, q)
    if np.any(h >= 1.0 - HAT_TOL):
        return np.inf
    e = y - q @ (q.T @ y)
    return float(np.sum((e / (1.0 - h)) ** 2))


def loocv_select(z_values, psi, candidates: Sequence) -> tuple:
    """Pick the candidate spec with the smallest leave-one-out error.

    Ties (equal up to ``TIE_RTOL``) go to the smaller dimension, then to the
    earlier candidate. Returns
    ``(spec, scores)`` where ``scores`` lists one value per candidate.
    """
    if not candidates:
        raise ValueError("no basis candidates supplied")
    psi = np.asarray(psi, dtype=float)
    scores, dims = [], []
    for cand in candidates:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BasisWarning)
            try:
                basis = build_basis(z_values, cand)
            except ValueError:
                scores.append(np.inf)
                dims.append(np.inf)
                continue
        x = basis.design(z_values)
        full_k = _full_width(basis.factors, np.asarray(z_values, dtype=float).reshape(len(psi), -1))
        scores.append(loocv_score(x, psi) if basis.k == full_k else np.inf)
        dims.append(basis.k)
    if not np.any(np.isfinite(scores)):
        raise ProjectionError("every basis candidate was disqualified")
    # Scores within round-off of the minimum count as tied.
    floor = min(scores)
    slack = TIE_RTOL * (floor + float(psi @ psi))
    tied = [i for i, s in enumerate(scores) if s <= floor + slack]
    best = min(tied, key=lambda i: (dims[i], i))
    return candidates[best], scores


@dataclass(frozen=True)
class CurvePoints:
    z: np.ndarray
    theta_L: np.ndarray
    theta_U: np.ndarray
    sigma_L: np.ndarray
    sigma_U: np.ndarray
    rho: np.ndarray
    omega: np.ndarray


@dataclass
class BoundsCurve:
    beta_L: np.ndarray
    beta_U: np.ndarray
    basis_L: Basis
    basis_U: Basis
    resid_L: np.ndarray
    resid_U: np.ndarray
    qinv_L: np.ndarray
    qinv_U: np.ndarray
    meat: np.ndarray
    n: int
    diagnostics: dict = field(default_factory=dict)

    def evaluate(self, z) -> CurvePoints:
        """Bound curves and variance field at the rows of ``z``."""
        z = np.asarray(z, dtype=float)
        bl = self.basis_L.design(z)
        bu = self.basis_U.design(z)
        kl = bl.shape[1]
        al = bl @ self.qinv_L
        au = bu @ self.qinv_U
        s_ll = self.meat[:kl, :kl]
        s_lu = self.meat[:kl, kl:]
        s_uu = self.meat[kl:, kl:]
        v_l = np.einsum("ij,jk,ik->i", al, s_ll, al)
        v_u = np.einsum("ij,jk,ik->i", au, s_uu, au)
        c_lu = np.einsum("ij,jk,ik->i", al, s_lu, au)
        floored = (v_l < VAR_FLOOR) | (v_u < VAR_FLOOR)
        if floored.any():
            warnings.warn(f"variance floored at {int(floored.sum())} evaluation points",
                          BasisWarning, stacklevel=2)
        v_l = np.maximum(v_l, VAR_FLOOR)
        v_u = np.maximum(v_u, VAR_FLOOR)
        sl, su = np.sqrt(v_l), np.sqrt(v_u)
        rho = np.clip(c_lu / (sl * su), -RHO_CLIP, RHO_CLIP)
        omega = np.stack([np.stack([v_l, c_lu], -1), np.stack([c_lu, v_u], -1)], -2)
        zz = z if z.ndim == 1 else z[:, 0]
        return CurvePoints(zz, bl @ self.beta_L, bu @ self.beta_U, sl, su, rho, omega)

    def export(self, z, path, metadata_path=None) -> None:
        pts = self.evaluate(z)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["z", "theta_L", "theta_U", "sigma_L", "sigma_U", "rho"])
            for row in zip(pts.z, pts.theta_L, pts.theta_U, pts.sigma_L, pts.sigma_U, pts.rho):
                w.writerow([f"{v:.10g}" for v in row])
        if metadata_path is not None:
            meta = {"basis_L": self.basis_L.describe(), "basis_U": self.basis_U.describe(),
                    "n": self.n, **self.diagnostics}
            Path(metadata_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def qr_solve(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares coefficients through a thin QR (no rank check)."""
    q, r = np.linalg.qr(x)
    return linalg.solve_triangular(r, q.T @ y)


def _ols(x: np.ndarray, y: np.ndarray, name: str) -> np.ndarray:
    rank, piv = pivoted_rank(x)
    if rank < x.shape[1]:
        raise ProjectionError(f"{name} design is singular; collinear columns {np.sort(piv[rank:]).tolist()}")
    return qr_solve(x, y)


def project(psi_L, psi_U, z_values, basis_L: Basis, basis_U: Optional[Basis] = None) -> BoundsCurve:
    """Two separate least-squares fits of the pseudo-outcomes on the bases."""
    basis_U = basis_U or basis_L
    psi_L = np.asarray(psi_L, dtype=float)
    psi_U = np.asarray(psi_U, dtype=float)
    xl = basis_L.design(z_values)
    xu = basis_U.design(z_values)
    n = len(psi_L)
    beta_l = _ols(xl, psi_L, "lower-bound")
    beta_u = _ols(xu, psi_U, "upper-bound")
    e_l = psi_L - xl @ beta_l
    e_u = psi_U - xu @ beta_u
    qinv_l = np.linalg.inv(xl.T @ xl / n)
    qinv_u = np.linalg.inv(xu.T @ xu / n)
    g = np.hstack([xl * e_l[:, None], xu * e_u[:, None]])
    meat = g.T @ g / n
    return BoundsCurve(beta_l, beta_u, basis_L, basis_U, e_l, e_u, qinv_l, qinv_u, meat, n,
                       {"k_L": basis_L.k, "k_U": basis_U.k})


def variance_field(curve: BoundsCurve, z) -> tuple:
    """``(Omega, sigma_L, sigma_U, rho)`` at the rows of ``z``."""
    pts = curve.evaluate(z)
    return pts.omega, pts.sigma_L, pts.sigma_U, pts.rho
