import math
import warnings

import numpy as np
import pytest
from scipy import stats

import oracles
from renv.env import affine_approx, analytic_path, sample_path
from renv.errors import NonPositiveDistance, TailDominated
from renv.integrate import propagate, propagate_brox
from renv.measure import (
    EmpiricalMeasure,
    U,
    V,
    domination_constant,
    invariance_check,
    ks_distance,
    pullback_measure,
    quenched_clt_check,
    rate_estimate,
    split_half,
    time_average,
    weighted_distance,
    weighted_norm,
    write_series,
)
from renv.transform import PotentialSpec

ZERO = analytic_path("zero")
STATIONARY_ZERO = PotentialSpec(1.0, 0.0, ZERO)


# weights and norms -------------------------------------------------------------------------


def test_dirac_at_origin_has_unit_norm():
    for weight in (U(0.5), U(0.9), V(0.3)):
        assert weighted_norm(EmpiricalMeasure.dirac(0.0), weight) == 1.0


def test_gaussian_weighted_norm():
    x = np.random.default_rng(0).normal(size=100_000)
    assert weighted_norm(x, U(0.5)) == pytest.approx(oracles.FROZEN["gaussian_weighted_norm"], abs=0.02)


def test_vanishing_alpha_gives_total_mass():
    x = np.random.default_rng(1).normal(size=1000) * 3
    assert weighted_norm(x, U(1e-12)) == pytest.approx(1.0, abs=1e-9)
    assert weighted_norm(x, U(0.0)) == 1.0


def test_v_weight_is_dominated_by_u_weight():
    x = np.linspace(-20, 20, 40001)
    for alpha in (0.2, 0.5, 0.8):
        assert np.all(V(alpha)(x) <= domination_constant(alpha) * U(alpha)(x) * (1 + 1e-12))


def test_tail_dominated_norm_warns():
    heavy = np.concatenate((np.zeros(99), [6.0]))
    with pytest.warns(TailDominated):
        weighted_norm(heavy, U(0.5))


# distances -------------------------------------------------------------------------------------


def test_distance_to_itself_is_zero():
    x = np.random.default_rng(2).normal(size=1000)
    assert weighted_distance(x, x, U(0.5)) == 0.0


def test_shifted_dirac_distance():
    value = weighted_distance([0.0], [1.0], U(0.5), edges=[-0.5, 0.5, 1.5])
    assert value == pytest.approx(1.0 + math.exp(0.25), rel=1e-15)


def test_binned_gaussian_distance_matches_binomial_oracle():
    edges = np.linspace(-6, 6, 65)
    exact = EmpiricalMeasure.from_cdf(stats.norm.cdf, edges)
    values = [weighted_distance(np.random.default_rng(s).normal(size=100_000), exact, U(0.5), edges=edges)
              for s in range(20)]
    # twenty replicates pin the mean to about 2%
    assert np.mean(values) == pytest.approx(oracles.FROZEN["binned_gaussian_tv"], rel=0.05)


@pytest.mark.xfail(strict=True, reason="the stated 0.03 bound lies below the expected binning error 0.0368")
def test_binned_gaussian_distance_below_stated_bound():
    edges = np.linspace(-6, 6, 65)
    exact = EmpiricalMeasure.from_cdf(stats.norm.cdf, edges)
    x = np.random.default_rng(0).normal(size=100_000)
    assert weighted_distance(x, exact, U(0.5), edges=edges) < 0.03


def test_histogram_validation():
    with pytest.raises(ValueError):
        EmpiricalMeasure(edges=[0, 1, 2], masses=[0.5, 0.6])
    with pytest.raises(ValueError):
        EmpiricalMeasure(samples=[])


# Kolmogorov-Smirnov --------------------------------------------------------------------------------


def test_ks_of_sample_against_itself():
    x = np.random.default_rng(3).normal(size=500)
    assert ks_distance(x, x)[0] == 0.0


def test_ks_null_calibration():
    passing = sum(ks_distance(np.random.default_rng(s).normal(size=10_000), stats.norm.cdf)[1] > 0.01
                  for s in range(100))
    assert passing >= 98


def test_ks_detects_unit_shift():
    x = np.random.default_rng(4).normal(size=10_000)
    assert ks_distance(x, stats.norm(1.0, 1.0).cdf)[0] > 0.3


# pullback and invariance ------------------------------------------------------------------------------


def test_zero_environment_pullback_is_standard_normal():
    measure = pullback_measure(STATIONARY_ZERO, 3, n_replicas=100_000)
    assert ks_distance(measure, stats.norm.cdf)[0] <= 0.02


def test_pullback_forgets_the_initial_condition():
    spec = PotentialSpec(1.0, 0.0, sample_path(4))
    from_zero = pullback_measure(spec, 8, initial=0.0, n_replicas=20_000)
    from_two = pullback_measure(spec, 8, initial=2.0, n_replicas=20_000, noise_seed=2)
    floor = split_half(from_zero.samples, lambda a, b: weighted_distance(a, b, U(0.5)))
    assert weighted_distance(from_zero, from_two, U(0.5)) < 2 * floor


def test_zero_environment_invariance():
    assert invariance_check(STATIONARY_ZERO, 4, 20_000)["p_value"] > 0.01


def test_wiener_invariance_and_quasi_invariance():
    result = invariance_check(PotentialSpec(1.0, 0.0, sample_path(4)), 8, 20_000)
    assert result["p_value"] > 0.01
    # the pullback measure itself moves with the environment
    assert result["distance_to_start"] > 2 * result["noise_floor_tv"]


def test_pullback_requires_stationary_spec():
    with pytest.raises(ValueError):
        pullback_measure(PotentialSpec(1.0, 0.5, ZERO), 3, n_replicas=10)


# rates ------------------------------------------------------------------------------------------------------


def test_rate_of_exact_exponential_and_constant():
    t = np.arange(1.0, 7.0)
    assert rate_estimate(t, np.exp(-2 * t))[0] == pytest.approx(-2.0, abs=1e-12)
    assert rate_estimate(t, np.full(t.size, 0.3))[0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(NonPositiveDistance):
        rate_estimate(t, np.zeros(t.size))


def test_ou_forgetting_rate():
    times = np.arange(1, 7)
    distances = []
    for t in times:
        a, _, _ = propagate(STATIONARY_ZERO, 0.0, 0.0, float(t), 0.01, 3, np.arange(100_000))
        b, _, _ = propagate(STATIONARY_ZERO, 0.0, 2.0, float(t), 0.01, 3, np.arange(100_000))
        distances.append(weighted_distance(a, b, U(0.5)))
    assert rate_estimate(times, distances)[0] <= -0.4


# central limit ----------------------------------------------------------------------------------------------


def _exact_ou_ks(z0, t):
    # the zero-environment law at time t is N(z0 e^{-t/2}, 1 - e^{-t})
    law = stats.norm(z0 * math.exp(-t / 2), math.sqrt(1 - math.exp(-t)))
    grid = np.linspace(-8, 8, 160_001)
    return float(np.max(np.abs(law.cdf(grid) - stats.norm.cdf(grid))))


def test_zero_environment_clt():
    result = quenched_clt_check(PotentialSpec(1.0, 0.5, ZERO), (6,), 10_000, z0=0.0)
    assert result["final_ks"] <= 0.02


def test_zero_environment_clt_relaxation_matches_exact_law():
    result = quenched_clt_check(PotentialSpec(1.0, 0.5, ZERO), (2, 4, 6), 10_000, z0=2.0)
    for t, ks, _ in result["rows"]:
        # sampling noise of the KS statistic at n = 10^4 is about 0.01
        assert ks == pytest.approx(_exact_ou_ks(2.0, t), abs=0.015)
    assert result["monotone"]


def test_quenched_clt_needs_decay():
    with pytest.raises(ValueError):
        quenched_clt_check(STATIONARY_ZERO, (1,), 10)


def test_brox_scaling_through_direct_route():
    path = sample_path(2, half_width=256)
    approx = affine_approx(path, 0.4, 0.2, n_max=255)
    y, escaped = propagate_brox(path, 0.75, 0.0, 8.0, 0.002, 1, np.arange(10_000), approx=approx)
    assert not escaped.any()
    assert ks_distance(y / math.exp(4.0), stats.norm.cdf)[0] <= 0.05


# time averages --------------------------------------------------------------------------------------------------


def test_constant_time_average_is_exact():
    result = time_average(PotentialSpec(1.0, 0.0, sample_path(1)), lambda t, x: np.ones_like(x), 5.0, n_paths=8)
    assert np.all(result["averages"] == 1.0)


def test_zero_environment_second_moment():
    result = time_average(STATIONARY_ZERO, lambda t, x: x * x, 200.0)
    assert abs(result["averages"].mean() - 1.0) <= 0.05
    shorter = time_average(STATIONARY_ZERO, lambda t, x: x * x, 50.0)
    assert result["spread"] < shorter["spread"]


def test_time_average_halves_agree():
    result = time_average(PotentialSpec(1.0, 0.0, sample_path(5)), lambda t, x: (np.abs(x) <= 1).astype(float),
                          16.0)
    diff = result["first_half"] - result["second_half"]
    assert abs(diff.mean()) <= 3 * diff.std(ddof=1) / math.sqrt(diff.size)


def test_write_series(tmp_path):
    target = tmp_path / "series.csv"
    write_series(target, [(1.0, 0.5, "U", 0.5, "quenched", 3)])
    assert target.read_text().splitlines() == ["t,distance,norm_kind,alpha,mode,seed", "1.0,0.5,U,0.5,quenched,3"]
