"""Cross-fitted nuisance learners for selection probabilities and quantiles.

Two families are provided:

* parametric: ridge-penalized logistic selection model on ``[1, f(x), d, d*f(x)]``
  and linear quantile regression on ``[1, f(x)]``, where ``f`` is an additive
  polynomial expansion (degree 1 gives the raw covariates);
* honest random forests: probability forests for selection and quantile
  forests built from forest weights.

Quantiles are always produced on a fixed grid of levels and monotonized by
sorting along the level axis.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit, ndtr
from sklearn.tree import DecisionTreeRegressor

from .core_data import ConfigError, FoldAssignment, ObservationTable

DEFAULT_GRID = tuple(round(0.01 * j, 2) for j in range(1, 100))
SELECTION_CLIP = 0.01
SQRT_2PI = math.sqrt(2 * math.pi)


class FoldError(RuntimeError):
    """A training complement lacks the rows a learner needs."""


class LearnerWarning(UserWarning):
    """Non-fatal numerical issue inside a nuisance learner."""


@dataclass(frozen=True)
class LearnerConfig:
    selection_learner: str = "logistic"
    quantile_learner: str = "linear_quantile"
    n_trees: int = 1000
    honesty: bool = True
    honesty_fraction: float = 0.5
    sample_fraction: float = 0.5
    min_leaf: int = 5
    max_features: Optional[int] = None
    grid: tuple = DEFAULT_GRID
    ridge_scale: float = 1e-6
    clip: float = SELECTION_CLIP
    selection_degree: int = 1
    quantile_degree: int = 1
    seed: int = 0

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 1 or g.size == 0 or np.any(np.diff(g) <= 0) or g[0] <= 0 or g[-1] >= 1:
            raise ConfigError("quantile grid must be strictly increasing inside (0,1)")
        if self.selection_learner not in ("logistic", "probability_forest"):
            raise ConfigError(f"unknown selection learner {self.selection_learner!r}")
        if self.quantile_learner not in ("linear_quantile", "quantile_forest"):
            raise ConfigError(f"unknown quantile learner {self.quantile_learner!r}")
        if not 0 < self.clip < 0.5:
            raise ConfigError("selection clip must lie in (0, 0.5)")
        if self.selection_degree < 1 or self.quantile_degree < 1:
            raise ConfigError("feature expansion degrees must be >= 1")
        object.__setattr__(self, "grid", tuple(float(v) for v in g))


# ---------------------------------------------------------------------------
# feature map
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureMap:
    """Standardized additive polynomial expansion fitted on training rows."""

    degree: int
    center: np.ndarray
    scale: np.ndarray
    powers: tuple  # (column, power) pairs

    @classmethod
    def fit(cls, x: np.ndarray, degree: int) -> "FeatureMap":
        x = np.asarray(x, dtype=float)
        pairs = []
        for j in range(x.shape[1]):
            binary = np.unique(x[:, j]).size <= 2
            top = 1 if binary else degree
            pairs += [(j, k) for k in range(1, top + 1)]
        raw = _raw_features(x, pairs)
        center = raw.mean(axis=0) if raw.shape[1] else np.zeros(0)
        scale = raw.std(axis=0) if raw.shape[1] else np.zeros(0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(degree, center, scale, tuple(pairs))

    def transform(self, x: np.ndarray) -> np.ndarray:
        raw = _raw_features(np.asarray(x, dtype=float), self.powers)
        return (raw - self.center) / self.scale


def _raw_features(x, pairs):
    if not pairs:
        return np.zeros((x.shape[0], 0))
    return np.column_stack([x[:, j] ** k for j, k in pairs])


# ---------------------------------------------------------------------------
# logistic selection model
# ---------------------------------------------------------------------------

class SelectionPredictor(Protocol):
    def predict(self, x: np.ndarray, d: int) -> np.ndarray: ...


@dataclass
class LogisticSelection:
    features: FeatureMap
    coef: np.ndarray
    converged: bool
    n_iter: int
    penalty: float

    def predict(self, x: np.ndarray, d: int) -> np.ndarray:
        f = self.features.transform(x)
        return expit(_logit_design(f, np.full(len(f), float(d))) @ self.coef)

    def summary(self) -> dict:
        return {"kind": "logistic", "coef": self.coef.tolist(), "converged": self.converged,
                "n_iter": self.n_iter, "penalty": self.penalty}


@dataclass
class ConstantSelection:
    """Arm-wise constant predictor used when a training outcome is degenerate."""

    rates: tuple

    def predict(self, x: np.ndarray, d: int) -> np.ndarray:
        return np.full(len(x), self.rates[int(d)])

    def summary(self) -> dict:
        return {"kind": "constant", "rates": list(self.rates)}


def _logit_design(f, d):
    one = np.ones((len(f), 1))
    return np.hstack([one, f, d[:, None], d[:, None] * f])


def _newton_logistic(z, s, lam, max_iter=100, tol=1e-8):
    k = z.shape[1]
    pen = np.full(k, lam)
    pen[0] = 0.0
    beta = np.zeros(k)
    rate = np.clip(s.mean(), 1e-6, 1 - 1e-6)
    beta[0] = math.log(rate / (1 - rate))

    def objective(b):
        eta = z @ b
        ll = np.sum(s * log_ndtr_logistic(eta) + (1 - s) * log_ndtr_logistic(-eta))
        return -ll + 0.5 * np.sum(pen * b * b)

    obj = objective(beta)
    grad_norms = []
    for it in range(1, max_iter + 1):
        mu = expit(z @ beta)
        grad = z.T @ (mu - s) + pen * beta
        gnorm = float(np.max(np.abs(grad)))
        grad_norms.append(gnorm)
        if gnorm < tol * max(1.0, len(s)):
            return beta, True, it, grad_norms
        w = mu * (1 - mu)
        hess = (z * w[:, None]).T @ z + np.diag(pen) + 1e-12 * np.eye(k)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta - t * step
            cobj = objective(cand)
            if cobj <= obj or t < 1e-10:
                break
            t *= 0.5
        if obj - cobj < 1e-14 * max(1.0, abs(obj)):
            beta, obj = cand, cobj
            return beta, True, it, grad_norms
        beta, obj = cand, cobj
    return beta, False, max_iter, grad_norms


def log_ndtr_logistic(eta):
    """log of the logistic CDF, stable for large |eta|."""
    return -np.logaddexp(0.0, -eta)


def fit_logistic_selection(x, d, s, ridge_scale: float = 1e-6, degree: int = 1) -> SelectionPredictor:
    """Penalized logistic model for ``P(S=1 | X=x, D=d)`` with treatment
    interactions, fitted by damped Newton iterations."""
    x = np.asarray(x, dtype=float).reshape(len(s), -1)
    d = np.asarray(d, dtype=float)
    s = np.asarray(s, dtype=float)
    if not (np.any(d == 1) and np.any(d == 0)):
        raise FoldError("logistic selection needs both treatment arms in the training data")
    if np.all(s == s[0]):
        warnings.warn("selection outcome is constant in training data; using constant predictor",
                      LearnerWarning, stacklevel=2)
        return ConstantSelection((float(s[0]), float(s[0])))
    fmap = FeatureMap.fit(x, degree)
    z = _logit_design(fmap.transform(x), d)
    lam = ridge_scale * len(s)
    beta, ok, it, norms = _newton_logistic(z, s, lam)
    diverging = not ok or np.max(np.abs(beta)) > 50
    if diverging:
        warnings.warn("possible separation in logistic selection model; refitting with a "
                      "stronger penalty", LearnerWarning, stacklevel=2)
        lam = max(lam * 1e4, 1e-2 * len(s))
        beta, ok, it, _ = _newton_logistic(z, s, lam)
    return LogisticSelection(fmap, beta, ok, it, lam)


# ---------------------------------------------------------------------------
# linear quantile regression (batched over levels)
# ---------------------------------------------------------------------------

@dataclass
class LinearQuantile:
    features: FeatureMap
    coef: np.ndarray  # (k, L)
    levels: np.ndarray
    converged: bool
    n_iter: int

    def predict(self, x: np.ndarray) -> np.ndarray:
        f = self.features.transform(x)
        z = np.hstack([np.ones((len(f), 1)), f])
        return z @ self.coef

    def summary(self) -> dict:
        return {"kind": "linear_quantile", "coef_shape": list(self.coef.shape),
                "converged": self.converged, "n_iter": self.n_iter}


def check_loss(r: np.ndarray, u) -> np.ndarray:
    """Pinball loss summed over rows; ``r`` is (n,) or (n, L)."""
    u = np.asarray(u, dtype=float)
    return np.sum(r * (u - (r < 0)), axis=0)


def _smoothed_objective(r, levels, h):
    return np.sum(r * (levels - ndtr(-r / h)) + h * np.exp(-0.5 * (r / h) ** 2) / SQRT_2PI, axis=0)


def _smoothed_qr(z, y, levels, beta0, h, ridge, max_iter, tol):
    """Damped Newton iterations on the Gaussian-kernel smoothed check loss,
    run for all levels at once (one k-by-k system per level); levels that
    have converged drop out of the active set."""
    n, k = z.shape
    pen = np.full(k, ridge)
    pen[0] = 0.0
    jitter = 1e-10 * np.trace(z.T @ z) / k
    beta = beta0.copy()
    live = np.arange(len(levels))
    it = 0
    for it in range(1, max_iter + 1):
        b, u = beta[:, live], levels[live]
        r = y[:, None] - z @ b
        grad = -(z.T @ (u[None, :] - ndtr(-r / h))) / n + pen[:, None] * b
        done = np.max(np.abs(grad), axis=0) <= tol
        if done.all():
            return beta, True, it
        keep = ~done
        live, b, u, r, grad = live[keep], b[:, keep], u[keep], r[:, keep], grad[:, keep]
        obj = _smoothed_objective(r, u, h) / n + 0.5 * pen @ b**2
        w = np.exp(-0.5 * (r / h) ** 2) / (SQRT_2PI * h * n)
        hess = np.empty((len(live), k, k))
        near = np.abs(r) < 9 * h
        for j in range(len(live)):
            rows = near[:, j]
            zr = z[rows]
            hess[j] = (zr * w[rows, j, None]).T @ zr
        hess += np.diag(pen + jitter)[None]
        step = np.linalg.solve(hess, grad.T[:, :, None])[:, :, 0].T
        pending = np.arange(len(live))
        t = 1.0
        stalled = np.zeros(len(live), dtype=bool)
        for _ in range(20):
            trial = b[:, pending] - t * step[:, pending]
            rt = y[:, None] - z @ trial
            tobj = _smoothed_objective(rt, u[pending], h) / n + 0.5 * pen @ trial**2
            ok = tobj <= obj[pending] + 1e-15 * np.abs(obj[pending])
            beta[:, live[pending[ok]]] = trial[:, ok]
            stalled[pending[ok]] = t * np.max(np.abs(step[:, pending[ok]]), axis=0) < 1e-13
            pending = pending[~ok]
            if pending.size == 0:
                break
            t *= 0.5
        stalled[pending] = True
        live = live[~stalled]
        if live.size == 0:
            return beta, True, it
    return beta, False, it


def _polish(z, y, levels, beta):
    """Try the basic solution through the k rows with the smallest residuals;
    keep it per level whenever it lowers the exact check loss."""
    k = z.shape[1]
    if len(y) < k:
        return beta
    r = y[:, None] - z @ beta
    best = check_loss(r, levels)
    out = beta.copy()
    for j in range(len(levels)):
        rows = np.argsort(np.abs(r[:, j]), kind="stable")[:k]
        zb = z[rows]
        if np.linalg.matrix_rank(zb) < k:
            continue
        cand = np.linalg.solve(zb, y[rows])
        loss = check_loss(y - z @ cand, levels[j])
        if loss < best[j] - 1e-12 * max(1.0, abs(best[j])):
            out[:, j] = cand
            best[j] = loss
    return out


def fit_linear_quantile(x, y, u, degree: int = 1, max_iter: int = 50, tol: float = 1e-9,
                        h_start: float = 0.25, h_shrink: float = 5.0,
                        h_floor: float = 2e-3) -> LinearQuantile:
    """Linear conditional quantile model ``q(u, x) = [1, f(x)]'b(u)``.

    ``u`` may be a scalar or an array of levels; all levels are solved jointly.
    The smoothing bandwidth starts at half the residual scale and is halved
    down to a floor, with warm starts; a basic-solution polish follows.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n == 0:
        raise FoldError("linear quantile regression needs at least one training row")
    x = np.asarray(x, dtype=float).reshape(n, -1)
    levels = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any((levels <= 0) | (levels >= 1)):
        raise ValueError("quantile levels must lie in (0,1)")
    fmap = FeatureMap.fit(x, degree)
    z = np.hstack([np.ones((n, 1)), fmap.transform(x)])
    k = z.shape[1]
    ridge = 0.0
    if n <= k:
        warnings.warn(f"{n} rows for {k} quantile-regression parameters; adding a ridge penalty",
                      LearnerWarning, stacklevel=2)
        ridge = 1e-3
    ls = np.linalg.lstsq(z.T @ z + max(ridge, 1e-10) * n * np.eye(k), z.T @ y, rcond=None)[0]
    res = y - z @ ls
    beta0 = np.repeat(ls[:, None], len(levels), axis=1)
    beta0[0] += np.quantile(res, levels)
    scale = float(np.std(res)) or 1.0
    floor = h_floor * scale
    h = h_start * scale
    beta, ok, total = beta0, False, 0
    while True:
        beta, ok, it = _smoothed_qr(z, y, levels, beta, h, ridge, max_iter, tol)
        total += it
        if h <= floor:
            break
        h = max(floor, h / h_shrink)
    if ridge == 0.0:
        beta = _polish(z, y, levels, beta)
    return LinearQuantile(fmap, beta, levels, ok, total)


# ---------------------------------------------------------------------------
# honest forests
# ---------------------------------------------------------------------------

def _default_mtry(p: int) -> int:
    return min(p, int(math.ceil(math.sqrt(p) + 20))) if p > 0 else 1


@dataclass
class _HonestTrees:
    trees: list
    est_index: list  # estimation-sample indices per tree
    est_leaf: list  # leaf ids of estimation samples per tree


def _grow_honest(x, y, n_trees, honesty, honesty_fraction, sample_fraction, min_leaf,
                 max_features, seed) -> _HonestTrees:
    n = len(y)
    m = max(2, int(round(sample_fraction * n)))
    mtry = max_features or _default_mtry(x.shape[1])
    seeds = np.random.SeedSequence(seed).generate_state(n_trees)
    trees, est_idx, est_leaf = [], [], []
    for t in range(n_trees):
        rng = np.random.default_rng(int(seeds[t]))
        sub = rng.choice(n, size=m, replace=False) if m < n else rng.permutation(n)
        if honesty:
            cut = max(1, min(m - 1, int(round(honesty_fraction * m))))
            grow, est = sub[:cut], sub[cut:]
        else:
            grow, est = sub, sub
        tree = DecisionTreeRegressor(min_samples_leaf=min_leaf, max_features=min(mtry, x.shape[1]),
                                     random_state=int(seeds[t]) % (2**31 - 1))
        tree.fit(x[grow], y[grow])
        trees.append(tree)
        est_idx.append(est)
        est_leaf.append(tree.apply(x[est]))
    return _HonestTrees(trees, est_idx, est_leaf)


@dataclass
class ProbabilityForest:
    forest: _HonestTrees
    leaf_mean: list  # per tree: dict-like arrays (node id -> mean, count)
    fallback: float
    n_fallback: int = 0

    def predict_target(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        total = np.zeros(len(x))
        count = np.zeros(len(x))
        for tree, (means, counts) in zip(self.forest.trees, self.leaf_mean):
            leaf = tree.apply(x)
            ok = counts[leaf] > 0
            total[ok] += means[leaf[ok]]
            count[ok] += 1
        out = np.full(len(x), self.fallback)
        has = count > 0
        out[has] = total[has] / count[has]
        missing = int((~has).sum())
        if missing:
            self.n_fallback += missing
            warnings.warn(f"{missing} forest queries fell in empty leaves of every tree; "
                          "using the training mean", LearnerWarning, stacklevel=2)
        return out

    def summary(self) -> dict:
        return {"kind": "probability_forest", "n_trees": len(self.forest.trees),
                "n_fallback": self.n_fallback}


def fit_probability_forest(x, target, n_trees: int = 1000, honesty: bool = True,
                           honesty_fraction: float = 0.5, sample_fraction: float = 0.5,
                           min_leaf: int = 5, max_features: Optional[int] = None,
                           seed: int = 0) -> ProbabilityForest:
    """Honest forest estimate of ``P(target=1 | x)``: structure from one half of
    each subsample, leaf frequencies from the other half."""
    target = np.asarray(target, dtype=float)
    n = len(target)
    x = np.asarray(x, dtype=float).reshape(n, -1)
    if n < 2 * min_leaf:
        raise FoldError(f"probability forest needs at least {2 * min_leaf} rows, got {n}")
    forest = _grow_honest(x, target, n_trees, honesty, honesty_fraction, sample_fraction,
                          min_leaf, max_features, seed)
    stats = []
    for tree, idx, leaf in zip(forest.trees, forest.est_index, forest.est_leaf):
        size = tree.tree_.node_count
        sums = np.bincount(leaf, weights=target[idx], minlength=size)
        cnt = np.bincount(leaf, minlength=size).astype(float)
        means = np.divide(sums, cnt, out=np.zeros(size), where=cnt > 0)
        stats.append((means, cnt))
    return ProbabilityForest(forest, stats, float(target.mean()))


@dataclass
class ArmwiseSelection:
    """Selection predictor made of one probability forest per treatment arm."""

    arms: tuple

    def predict(self, x: np.ndarray, d: int) -> np.ndarray:
        return self.arms[int(d)].predict_target(x)

    def summary(self) -> dict:
        return {"kind": "armwise", "arms": [a.summary() for a in self.arms]}


@dataclass
class QuantileForest:
    forest: _HonestTrees
    y_train: np.ndarray
    levels: np.ndarray
    n_fallback: int = 0

    def weights(self, x: np.ndarray) -> np.ndarray:
        """Dense (m, n_train) matrix of forest weights at query rows."""
        x = np.asarray(x, dtype=float)
        m, n = len(x), len(self.y_train)
        acc = sparse.csr_matrix((m, n))
        used = np.zeros(m)
        rows = np.arange(m)
        for tree, idx, leaf in zip(self.forest.trees, self.forest.est_index, self.forest.est_leaf):
            size = tree.tree_.node_count
            cnt = np.bincount(leaf, minlength=size).astype(float)
            qleaf = tree.apply(x)
            ok = cnt[qleaf] > 0
            used += ok
            a_q = sparse.csr_matrix((np.ones(ok.sum()), (rows[ok], qleaf[ok])), shape=(m, size))
            a_e = sparse.csr_matrix((1.0 / cnt[leaf], (leaf, idx)), shape=(size, n))
            acc = acc + a_q @ a_e
        w = acc.toarray()
        has = used > 0
        w[has] /= used[has, None]
        if np.any(~has):
            self.n_fallback += int((~has).sum())
            warnings.warn("quantile-forest query with no populated leaf; using global "
                          "empirical quantiles", LearnerWarning, stacklevel=2)
            w[~has] = 1.0 / n
        return w

    def predict(self, x: np.ndarray) -> np.ndarray:
        w = self.weights(x)
        return weighted_quantiles(self.y_train, w, self.levels)

    def summary(self) -> dict:
        return {"kind": "quantile_forest", "n_trees": len(self.forest.trees),
                "n_fallback": self.n_fallback}


def weighted_quantiles(y: np.ndarray, w: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Row-wise inverse of the weighted ECDF: smallest y with cumulative weight >= u."""
    order = np.argsort(y, kind="stable")
    ys = y[order]
    cum = np.cumsum(w[:, order], axis=1)
    cum /= cum[:, -1:]
    out = np.empty((w.shape[0], len(levels)))
    tol = 1e-12
    for j, u in enumerate(levels):
        idx = np.sum(cum < u - tol, axis=1)
        out[:, j] = ys[np.minimum(idx, len(ys) - 1)]
    return out


def fit_quantile_forest(x, y, levels=DEFAULT_GRID, n_trees: int = 1000, honesty: bool = True,
                        honesty_fraction: float = 0.5, sample_fraction: float = 0.5,
                        min_leaf: int = 5, max_features: Optional[int] = None,
                        seed: int = 0) -> QuantileForest:
    """Honest quantile regression forest over a fixed grid of levels."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    x = np.asarray(x, dtype=float).reshape(n, -1)
    if n < 2 * min_leaf:
        raise FoldError(f"quantile forest needs at least {2 * min_leaf} rows, got {n}")
    forest = _grow_honest(x, y, n_trees, honesty, honesty_fraction, sample_fraction,
                          min_leaf, max_features, seed)
    return QuantileForest(forest, y.copy(), np.asarray(levels, dtype=float))


# ---------------------------------------------------------------------------
# cross-fitting
# ---------------------------------------------------------------------------

SelectionFactory = Callable[[np.ndarray, np.ndarray, np.ndarray, int], SelectionPredictor]
QuantileFactory = Callable[[np.ndarray, np.ndarray, np.ndarray, int], object]


def selection_factory(config: LearnerConfig) -> SelectionFactory:
    if config.selection_learner == "logistic":
        return lambda x, d, s, seed: fit_logistic_selection(x, d, s, config.ridge_scale,
                                                            config.selection_degree)

    def forest(x, d, s, seed):
        arms = []
        for arm in (0, 1):
            rows = d == arm
            if not rows.any():
                raise FoldError(f"no training rows in treatment arm {arm}")
            arms.append(fit_probability_forest(
                x[rows], s[rows], config.n_trees, config.honesty, config.honesty_fraction,
                config.sample_fraction, config.min_leaf, config.max_features, seed + arm))
        return ArmwiseSelection(tuple(arms))
    return forest


def quantile_factory(config: LearnerConfig) -> QuantileFactory:
    if config.quantile_learner == "linear_quantile":
        return lambda x, y, levels, seed: fit_linear_quantile(x, y, levels, config.quantile_degree)
    return lambda x, y, levels, seed: fit_quantile_forest(
        x, y, levels, config.n_trees, config.honesty, config.honesty_fraction,
        config.sample_fraction, config.min_leaf, config.max_features, seed)


@dataclass
class NuisanceFit:
    """Out-of-fold nuisance predictions.

    ``q1_grid[i, j]`` is the predicted ``grid[j]``-quantile of the outcome of
    selected treated units at ``x_i``; ``q0_grid`` is the same for selected
    control units.
    """

    s0_hat: np.ndarray
    s1_hat: np.ndarray
    q1_grid: np.ndarray
    q0_grid: np.ndarray
    grid: np.ndarray
    folds: Optional[FoldAssignment]
    learner_tag: str
    diagnostics: dict = field(default_factory=dict)
    predictors: list = field(default_factory=list, repr=False)

    def quantile_fn(self, u: float, x: np.ndarray, fold: int, arm: int = 1) -> np.ndarray:
        """Evaluate the fold-``fold`` quantile model at grid level ``u`` for new rows."""
        j = int(np.argmin(np.abs(self.grid - u)))
        if not np.isclose(self.grid[j], u):
            raise ValueError(f"level {u} is not on the quantile grid")
        model = self.predictors[fold]["q1" if arm == 1 else "q0"]
        return np.sort(model.predict(x), axis=1)[:, j]


def crossfit(table: ObservationTable, folds: FoldAssignment, config: LearnerConfig,
             select: Optional[SelectionFactory] = None,
             quant: Optional[QuantileFactory] = None) -> NuisanceFit:
    """Fit learners on each training complement and predict the held-out fold."""
    if folds.fold_of.shape != (table.n,):
        raise ConfigError("fold assignment does not match the table size")
    if folds.k > table.n // 2:
        raise ConfigError(f"k={folds.k} exceeds n/2 for n={table.n}")
    select = select or selection_factory(config)
    quant = quant or quantile_factory(config)
    levels = np.asarray(config.grid)
    n, L = table.n, len(levels)
    s0 = np.empty(n)
    s1 = np.empty(n)
    q1 = np.empty((n, L))
    q0 = np.empty((n, L))
    x, d, s, y = table.x, table.d_treat, table.s_select, table.y_obs
    seeds = np.random.SeedSequence([config.seed, folds.seed]).generate_state(folds.k)
    diag, preds = {"folds": []}, []
    for f in range(folds.k):
        test = folds.indices(f)
        train = folds.complement(f)
        dt, st = d[train], s[train]
        if not (np.any(dt == 1) and np.any(dt == 0)):
            raise FoldError(f"training complement of fold {f} lacks a treatment arm")
        treated_sel = train[(dt == 1) & (st == 1)]
        control_sel = train[(dt == 0) & (st == 1)]
        if treated_sel.size == 0:
            raise FoldError(f"training complement of fold {f} has no selected treated units")
        if control_sel.size == 0:
            raise FoldError(f"training complement of fold {f} has no selected control units")
        seed = int(seeds[f])
        sel_model = select(x[train], dt.astype(float), st.astype(float), seed)
        s0[test] = sel_model.predict(x[test], 0)
        s1[test] = sel_model.predict(x[test], 1)
        m1 = quant(x[treated_sel], y[treated_sel], levels, seed + 2)
        m0 = quant(x[control_sel], y[control_sel], levels, seed + 3)
        q1[test] = m1.predict(x[test])
        q0[test] = m0.predict(x[test])
        preds.append({"selection": sel_model, "q1": m1, "q0": m0})
        diag["folds"].append({
            "fold": f, "n_train": int(train.size), "n_test": int(test.size),
            "selection": _summary(sel_model), "q1": _summary(m1), "q0": _summary(m0),
        })
    crossings = int(np.sum(np.diff(q1, axis=1) < 0) + np.sum(np.diff(q0, axis=1) < 0))
    q1.sort(axis=1)
    q0.sort(axis=1)
    lo, hi = config.clip, 1.0 - config.clip
    diag["n_clipped"] = int(np.sum((s0 < lo) | (s0 > hi)) + np.sum((s1 < lo) | (s1 > hi)))
    diag["n_rearranged"] = crossings
    tag = f"{config.selection_learner}+{config.quantile_learner}"
    return NuisanceFit(np.clip(s0, lo, hi), np.clip(s1, lo, hi), q1, q0, levels, folds, tag,
                       diag, preds)


def _summary(model) -> dict:
    return model.summary() if hasattr(model, "summary") else {"kind": type(model).__name__}
