import math

import numpy as np
import pytest
from scipy import stats

from renv.env import affine_approx, analytic_path, sample_path
from renv.errors import ConfigError, EscapeCapExceeded, NonConfining
from renv.integrate import (
    EnsembleConfig,
    cocycle_check,
    config_hash,
    integrate_direct,
    integrate_equivalent,
    propagate,
    propagate_direct,
    run_ensemble,
)
from renv.transform import PotentialSpec

ZERO_SPEC = PotentialSpec(1.0, 0.3, analytic_path("zero"))


def ou_law(z0, t):
    return stats.norm(z0 * math.exp(-t / 2), math.sqrt(1 - math.exp(-t))).cdf


# exact-law calibration ------------------------------------------------------------------


def test_equivalent_route_matches_exact_ou_law():
    z, escaped, _ = propagate(ZERO_SPEC, 0.0, 1.5, 3.0, 0.01, 5, np.arange(10_000))
    assert not escaped.any()
    assert stats.kstest(z, ou_law(1.5, 3.0)).statistic <= 0.02


def test_direct_route_matches_exact_ou_law_and_equivalent_route():
    z, _, _ = propagate_direct(ZERO_SPEC, 0.0, 1.5, 3.0, 0.01, 5, np.arange(10_000))
    assert stats.kstest(z, ou_law(1.5, 3.0)).statistic <= 0.02
    equivalent, _, _ = propagate(ZERO_SPEC, 0.0, 1.5, 3.0, 0.01, 5, np.arange(10_000))
    assert stats.ks_2samp(z, equivalent).statistic <= 0.02


def test_step_halving_moves_the_mean_by_less_than_noise():
    spec = PotentialSpec(1.0, 0.5, sample_path(3))
    coarse, _, _ = propagate(spec, 0.0, 0.0, 3.0, 0.01, 5, np.arange(10_000))
    fine, _, _ = propagate(spec, 0.0, 0.0, 3.0, 0.005, 6, np.arange(10_000))
    se = math.sqrt(coarse.var(ddof=1) / coarse.size + fine.var(ddof=1) / fine.size)
    assert abs(coarse.mean() - fine.mean()) <= 3 * se


def test_trajectories_are_bit_identical_on_rerun():
    spec = PotentialSpec(1.0, 0.5, sample_path(11))
    a = integrate_equivalent(spec, 0.0, 0.3, 1.0, 0.01, 9, replica=4)
    b = integrate_equivalent(PotentialSpec(1.0, 0.5, sample_path(11)), 0.0, 0.3, 1.0, 0.01, 9, replica=4)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.times, b.times)
    assert a.dumps() == b.dumps()


def test_single_trajectory_matches_ensemble_member():
    spec = PotentialSpec(1.0, 0.5, sample_path(11))
    path = integrate_equivalent(spec, 0.0, 0.3, 1.0, 0.01, 9, replica=4)
    z, _, _ = propagate(spec, 0.0, 0.3, 1.0, 0.01, 9, np.arange(8))
    assert path.states[-1] == pytest.approx(z[4], abs=1e-12)
    direct = integrate_direct(ZERO_SPEC, 0.0, 0.3, 1.0, 0.01, 9, replica=2)
    zd, _, _ = propagate_direct(ZERO_SPEC, 0.0, 0.3, 1.0, 0.01, 9, np.arange(4))
    assert direct.states[-1] == zd[2]


def test_later_start_reuses_the_same_increments():
    # runs from s=0 and s=1 see identical Brownian increments on [1, 2]
    spec = PotentialSpec(1.0, 0.5, sample_path(2))
    from_zero = integrate_equivalent(spec, 0.0, 0.0, 2.0, 0.01, 3, replica=0)
    restart = integrate_equivalent(spec, 1.0, from_zero.states[100], 2.0, 0.01, 3, replica=0)
    assert restart.states[-1] == pytest.approx(from_zero.states[-1], abs=1e-9)


def test_coarser_approximation_is_further_from_fine_one():
    coarse, medium = [], []
    for seed in (3, 4, 5, 6):
        path = sample_path(seed)
        spec = PotentialSpec(1.0, 0.0, path)
        runs = {}
        for eps in (1.6, 0.2, 0.05):
            approx = affine_approx(path, 0.4, eps, n_max=8)
            runs[eps], _, _ = propagate_direct(spec, 0.0, 0.0, 1.0, 0.001, 5, np.arange(10_000), approx)
        coarse.append(stats.ks_2samp(runs[1.6], runs[0.05]).statistic)
        medium.append(stats.ks_2samp(runs[0.2], runs[0.05]).statistic)
    assert np.mean(medium) < np.mean(coarse)


# ensembles ------------------------------------------------------------------------------------


def test_worker_count_does_not_change_results():
    base = dict(env_seed=5, noise_seed=2, n_replicas=8, t_final=0.5, r=0.5)
    one = run_ensemble(dict(base, workers=1))
    eight = run_ensemble(dict(base, workers=8))
    assert np.array_equal(one.terminal_samples, eight.terminal_samples)


def test_annealed_zero_environment_matches_quenched():
    common = dict(env_kind="zero", n_replicas=10_000, t_final=1.0)
    annealed = run_ensemble(dict(common, mode="annealed"))
    quenched = run_ensemble(dict(common, mode="quenched"))
    assert np.array_equal(annealed.terminal_samples, quenched.terminal_samples)


def test_annealed_environments_differ_per_replica():
    result = run_ensemble(dict(mode="annealed", n_replicas=20, t_final=0.2, env_seed=4))
    assert len(set(result.env_seeds)) == 20


def test_brox_coordinate_routes_agree():
    # the direct route on a rough environment needs a finer step than the equivalent one
    common = dict(env_seed=1, r=0.5, n_replicas=4000, t_final=2.0, coordinate="brox", dt=0.002)
    z = run_ensemble(dict(common, route="equivalent")).samples
    y = run_ensemble(dict(common, route="direct")).samples
    z_direct = run_ensemble(dict(common, route="direct", coordinate="z")).samples
    assert stats.ks_2samp(z, y).pvalue > 0.01
    assert stats.ks_2samp(z, z_direct).pvalue > 0.01


def test_escape_cap():
    with pytest.raises(EscapeCapExceeded):
        run_ensemble(dict(env_kind="zero", z0=30.0, n_replicas=10))


def test_config_validation():
    with pytest.raises(ConfigError):
        EnsembleConfig(mode="sideways")
    with pytest.raises(ConfigError):
        EnsembleConfig(n_replicas=0)
    with pytest.raises(NonConfining):
        EnsembleConfig(a=0.0)
    assert EnsembleConfig(mode="deterministic-env").env_kind == "deterministic-sqrt"


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_ensemble_dump_lists_every_replica():
    result = run_ensemble(dict(env_kind="zero", n_replicas=100))
    rows = [line for line in result.dumps().splitlines() if not line.startswith("#")]
    assert len(rows) == 101


# cocycle -----------------------------------------------------------------------------------------


def test_cocycle_on_zero_environment():
    assert cocycle_check(ZERO_SPEC, 1.0, 2.0, 0.0, 10_000)[1] > 0.01


@pytest.mark.parametrize("r, s, t", [(0.0, 1.0, 1.0), (0.5, 2.0, 1.0)])
def test_cocycle_on_wiener_environment(r, s, t):
    assert cocycle_check(PotentialSpec(1.0, r, sample_path(3)), s, t, 0.0, 10_000)[1] > 0.01


def test_ensemble_hash_ignores_worker_count():
    one = run_ensemble(dict(env_kind="zero", n_replicas=20, workers=1))
    four = run_ensemble(dict(env_kind="zero", n_replicas=20, workers=4))
    assert one.config_hash == four.config_hash
    assert one.dumps() == four.dumps()
