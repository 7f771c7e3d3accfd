import numpy as np
import pytest
from scipy.stats import norm

from hetbounds.core_data import ConfigError
from hetbounds.roy_simulator import (GAMMA1, ORACLE_GRID, RoyConfig, StudySettings, analytic_bounds,
                                     brute_force_theta, oracle_bounds, replicate, rep_seed,
                                     run_coverage_study, run_replications, simulate, simulate_latent,
                                     stratum_theta, summarize_coverage, summarize_power,
                                     true_quantiles, true_selection, true_theta)


def test_selection_rates_at_extremes():
    cfg = RoyConfig(n=400000, p=1, seed=3)
    draw = simulate_latent(cfg)
    z = draw.table.x[:, 0]
    for lo, hi, d, expected in [(0.0, 0.02, 1, 0.8413), (0.98, 1.0, 1, 0.99), (0.0, 0.02, 0, 0.5)]:
        edge = lo if lo == 0 else hi
        assert true_selection(edge, d, cfg) == pytest.approx(expected, abs=1e-4)
        m = (z >= lo) & (z < hi)
        grid = np.linspace(lo, hi, 201)
        target = true_selection(grid, d, cfg).mean()
        se = np.sqrt(target * (1 - target) / m.sum())
        assert abs(draw.s_pot[m, d].mean() - target) < 3 * se


def test_treated_selection_dominates():
    cfg = RoyConfig(n=20000, seed=1)
    draw = simulate_latent(cfg)
    assert np.all(draw.s_pot[:, 1] >= draw.s_pot[:, 0])
    z = np.linspace(0, 1, 11)
    assert np.all(true_selection(z, 1, cfg) > true_selection(z, 0, cfg))


def test_observed_outcomes_match_potential_outcomes():
    cfg = RoyConfig(n=5000, seed=2)
    draw = simulate_latent(cfg)
    t = draw.table
    sel = t.s_select == 1
    idx = np.arange(t.n)[sel]
    assert np.array_equal(t.y_obs[sel], draw.y_pot[idx, t.d_treat[sel]])
    assert np.all(t.propensity == 0.5)
    assert t.x.shape == (5000, 10)


def test_true_theta_closed_form_values():
    assert true_theta(0.0) == pytest.approx(0.35 - 0.1 * np.sqrt(2 / np.pi), abs=1e-12)
    assert float(true_theta(0.0)) == pytest.approx(0.27021, abs=5e-6)
    flat = RoyConfig(rho_cov=0.0)
    assert float(true_theta(0.5, flat)) == pytest.approx(-0.15, abs=1e-12)
    z = np.linspace(0, 1, 7)
    assert np.allclose(true_theta(z, flat), flat.mu1_at(z))
    assert GAMMA1 == pytest.approx(norm.ppf(0.99) - 1)


@pytest.mark.parametrize("z", [0.0, 0.5, 1.0])
def test_brute_force_matches_closed_form(z):
    assert brute_force_theta(z, draws=2_000_000) == pytest.approx(float(true_theta(z)), abs=0.003)


def test_true_quantiles_match_simulation():
    cfg = RoyConfig()
    rng = np.random.default_rng(4)
    m = 2_000_000
    z = 0.3
    v = rng.standard_normal(m)
    xi = rng.standard_normal(m)
    eps = cfg.sigma1 * (cfg.rho_cov * v + np.sqrt(1 - cfg.rho_cov ** 2) * xi)
    y = (cfg.mu1_at(z) + eps)[z * cfg.gamma1 + 1 - v >= 0]
    u = np.array([0.05, 0.25, 0.5, 0.75, 0.95])
    assert np.allclose(true_quantiles(z, u, cfg)[0], np.quantile(y, u), atol=2e-3)
    assert np.allclose(true_quantiles([0.1, 0.9], u, cfg, arm=0), 0.2 * norm.ppf(u)[None, :])


def test_analytic_bounds_bracket_truth():
    z = np.asarray(ORACLE_GRID)
    lo, hi = analytic_bounds(z)
    truth = true_theta(z)
    assert np.all(lo <= truth) and np.all(truth <= hi)
    assert np.all(hi - lo > 0)


def test_bounds_tighten_as_selection_contrast_vanishes():
    lo, hi = analytic_bounds(np.array([0.0, 1.0]))
    width = hi - lo
    # p0 is 0.594 at z = 0 and 0.917 at z = 1.
    assert width[1] < width[0]


def test_oracle_simulation_agrees_with_analytic_bounds():
    z = np.array([0.0, 0.4, 1.0])
    lo_s, hi_s = oracle_bounds(z, draws=3_000_000)
    lo_a, hi_a = analytic_bounds(z)
    assert np.allclose(lo_s, lo_a, atol=4e-3)
    assert np.allclose(hi_s, hi_a, atol=4e-3)


def test_stratum_theta_averages_truth():
    z = np.linspace(0, 0.5, 100001)
    assert stratum_theta(0.0, 0.5) == pytest.approx(np.trapezoid(true_theta(z), z) / 0.5, abs=1e-8)


def test_simulation_is_seeded():
    a = simulate(RoyConfig(n=300, seed=5))
    b = simulate(RoyConfig(n=300, seed=5))
    c = simulate(RoyConfig(n=300), seed=6)
    assert np.array_equal(a.y_obs, b.y_obs) and not np.array_equal(a.y_obs, c.y_obs)
    assert rep_seed(1, 2) == rep_seed(1, 2) != rep_seed(1, 3)


def test_replication_records_coverage_and_strata():
    cfg = RoyConfig(n=1200, seed=4)
    res = replicate(cfg, StudySettings(), 0, ("pointwise", "power"))
    assert res.ok, res.error
    assert res.covered.shape == (9,) and res.strata_lo.shape == (2,)
    assert np.all(res.ci_lo < res.ci_hi)


def test_failed_replications_are_captured():
    cfg = RoyConfig(n=5, seed=0)
    res = replicate(cfg, StudySettings(), 0)
    assert not res.ok and res.error


def test_summaries_over_small_run():
    cfg = RoyConfig(n=800, seed=9)
    settings = StudySettings()
    results = run_replications(cfg, settings, 4, ("pointwise", "power"), threads=1)
    cov = summarize_coverage(results, settings)
    assert cov.coverage.shape == (9,) and cov.reps_used == 4
    power = summarize_power(results, settings, cfg)
    assert len(power.rejection) == 2 * 11
    assert np.all((power.rejection >= 0) & (power.rejection <= 1))


def test_replication_blocks_reproduce_single_run():
    cfg = RoyConfig(n=600, seed=2)
    whole = run_replications(cfg, StudySettings(), 3, threads=1)
    tail = run_replications(cfg, StudySettings(), 2, threads=1, start=1)
    assert [r.rep for r in tail] == [1, 2]
    for a, b in zip(whole[1:], tail):
        assert np.array_equal(a.ci_lo, b.ci_lo) and np.array_equal(a.ci_hi, b.ci_hi)


def test_studies_require_enough_replications():
    with pytest.raises(ConfigError):
        run_coverage_study(RoyConfig(), reps=99)
    with pytest.raises(ConfigError):
        StudySettings(nuisance="neural")
    with pytest.raises(ConfigError):
        RoyConfig(rho_cov=1.0)
