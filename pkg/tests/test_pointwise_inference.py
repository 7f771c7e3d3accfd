import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from hetbounds.pointwise_inference import (CriticalValueTable, SolverError, confidence_interval,
                                           coverage_prob, critical_value, critical_value_lookup,
                                           delta_max, infimum_over_delta, pseudo_true)

Z95, Z975 = norm.ppf(0.95), norm.ppf(0.975)


def test_pseudo_true_weights_by_opposite_sd():
    pt = pseudo_true(0.0, 1.0, 1.0, 2.0, 0.0)
    assert pt.theta_star == pytest.approx(1 / 3)
    assert pt.sigma_star == pytest.approx(2 * np.sqrt(2) / 3, abs=1e-12)
    assert pseudo_true(0.2, 0.6, 0.0, 0.0, 0.5).theta_star == pytest.approx(0.4)


def test_large_c_covers_with_probability_one():
    for method in ("quadrature", "qmc"):
        assert coverage_prob(40.0, 3.0, 0.3, 0.05, method=method) == pytest.approx(1.0, abs=1e-9)


def test_second_event_alone_has_nominal_mass():
    # c very negative empties the first event, leaving the two-sided band on u1 + u2.
    for rho in (0.0, 0.6, -0.5):
        assert coverage_prob(-50.0, 0.0, rho, 0.05) == pytest.approx(0.95, abs=1e-8)


def test_first_event_dominates_for_large_delta():
    # Delta = 10 makes the band event negligible and the u1 constraint slack.
    rho = 0.4
    exact = norm.cdf(11.645) - multivariate_normal([0, 0], [[1, rho], [rho, 1]]).cdf(
        [11.645, -1.645])
    q = coverage_prob(1.645, 10.0, rho, 0.05, method="quadrature")
    s = coverage_prob(1.645, 10.0, rho, 0.05, method="qmc")
    m = coverage_prob(1.645, 10.0, rho, 0.05, method="mc")
    assert q == pytest.approx(exact, abs=1e-6)
    assert s == pytest.approx(q, abs=5e-4)
    assert m == pytest.approx(q, abs=2e-3)


@pytest.mark.parametrize("event", ["relaxed", "verbatim"])
@pytest.mark.parametrize("rho,delta,c", [(0.0, 0.0, 1.7), (0.5, 1.2, 1.8), (-0.6, 3.0, 1.65),
                                         (0.95, 0.4, 1.9)])
def test_quadrature_agrees_with_sampling_routes(event, rho, delta, c):
    q = coverage_prob(c, delta, rho, 0.05, event, "quadrature")
    assert coverage_prob(c, delta, rho, 0.05, event, "qmc") == pytest.approx(q, abs=5e-4)
    assert coverage_prob(c, delta, rho, 0.05, event, "mc") == pytest.approx(q, abs=2.5e-3)


def test_bracket_holds_on_rho_lattice():
    for rho in np.linspace(-1.0, 1.0, 21):
        cv = critical_value(rho, 0.05)
        assert Z95 - 1e-12 <= cv.c_hat <= Z975 + 1e-12, rho


def test_solution_attains_nominal_level():
    cv = critical_value(0.7, 0.05)
    val, _ = infimum_over_delta(cv.c_hat, 0.7, 0.05)
    if cv.at_lower_bracket:
        assert val >= 0.95 - 1e-9
    else:
        assert val == pytest.approx(0.95, abs=1e-5)


def test_delta_dominant_regime_gives_one_sided_value():
    for rho in (-0.5, 0.0, 0.5):
        assert critical_value(rho, 0.05).c_hat == pytest.approx(Z95, abs=0.015)


def test_near_perfect_correlation_approaches_two_sided_value():
    assert critical_value(1 - 1e-7, 0.05).c_hat == pytest.approx(Z975, abs=0.015)


def test_critical_value_increases_with_rho():
    c = [critical_value(r, 0.05).c_hat for r in (0.8, 0.9, 0.99, 0.999)]
    assert np.all(np.diff(c) >= -1e-6)


def test_alpha_ten_percent_bracket():
    for rho in (0.0, 0.9, 0.999):
        c = critical_value(rho, 0.10).c_hat
        assert norm.ppf(0.90) - 1e-12 <= c <= norm.ppf(0.95) + 1e-12


def test_verbatim_event_fails_two_sided_limit():
    with pytest.raises(SolverError, match="kernel is suspect"):
        critical_value(0.999, 0.05, event="verbatim")


def test_lookup_interpolates_lattice():
    table = CriticalValueTable(0.05)
    a, b = table(np.array([0.95])), table(np.array([0.96]))
    mid = table(np.array([0.955]))
    assert mid == pytest.approx(0.5 * (a + b), abs=1e-12)
    direct = critical_value(0.955, 0.05).c_hat
    assert mid[0] == pytest.approx(direct, abs=5e-3)
    assert critical_value_lookup(0.3, 0.05) == pytest.approx(critical_value(0.3, 0.05).c_hat)


def test_interval_contains_bound_estimates():
    rng = np.random.default_rng(3)
    tl = rng.normal(size=20)
    tu = tl + rng.exponential(size=20)
    sl, su = rng.uniform(0.5, 2, 20), rng.uniform(0.5, 2, 20)
    lo, hi, c, star = confidence_interval(tl, tu, sl, su, rng.uniform(-0.9, 0.9, 20), 400, 0.05)
    assert np.all(lo <= tl) and np.all(hi >= tu)
    assert np.all((star >= tl) & (star <= tu))


def test_reversed_estimates_give_valid_interval():
    lo, hi, _, star = confidence_interval(0.5, 0.3, 1.0, 1.0, 0.2, 1000, 0.05)
    assert star == pytest.approx(0.4)
    assert lo < star < hi


def test_zero_variance_collapses_to_bound_estimates():
    lo, hi, _, _ = confidence_interval(0.1, 0.4, 0.0, 0.0, 0.0, 500, 0.05)
    assert lo == pytest.approx(0.1) and hi == pytest.approx(0.4)


def test_interval_shrinks_with_n():
    a = confidence_interval(0.0, 1.0, 1.0, 1.0, 0.3, 100, 0.05)
    b = confidence_interval(0.0, 1.0, 1.0, 1.0, 0.3, 10000, 0.05)
    assert b[1] - b[0] < a[1] - a[0]


def test_coverage_nondecreasing_in_c():
    vals = [coverage_prob(c, 0.8, 0.5, 0.05) for c in np.linspace(1.0, 2.5, 16)]
    assert np.all(np.diff(vals) >= -1e-12)


def test_delta_max_is_monotone():
    assert delta_max(1.8, 0.2, 0.05) > delta_max(1.7, 0.2, 0.05)
    assert delta_max(1.7, 0.6, 0.05) > delta_max(1.7, 0.2, 0.05)
    val, arg = infimum_over_delta(1.7, 0.3, 0.05)
    assert 0.0 <= arg <= delta_max(1.7, 0.3, 0.05)
    assert coverage_prob(1.7, delta_max(1.7, 0.3, 0.05) + 5, 0.3, 0.05) >= val


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        coverage_prob(1.7, -0.1, 0.0, 0.05)
    with pytest.raises(ValueError):
        coverage_prob(1.7, 0.1, 0.0, 0.05, event="other")
    with pytest.raises(ValueError):
        critical_value(0.0, 0.6)
