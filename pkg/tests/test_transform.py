import math

import numpy as np
import pytest
from scipy import integrate as quadrature
from scipy import stats

import oracles
from renv.env import analytic_path, sample_path
from renv.errors import BadTimeOrigin, NonConfining
from renv.transform import (
    PotentialSpec,
    PseudoScale,
    brox_to_z,
    coefficients,
    inverse_scale,
    potential,
    pseudo_scale,
    z_to_brox,
)

ZERO = analytic_path("zero")


# potential ---------------------------------------------------------------------------


def test_zero_environment_potential():
    for t in (0.0, 1.7, 5.0):
        assert potential(PotentialSpec(1.0, 0.3, ZERO), t, 2.0) == 2.0


def test_potential_matches_its_definition():
    path = sample_path(5)
    t, x, r = 0.5, 1.3, 0.2
    by_hand = 0.5 * 1.3**2 + math.exp(-(r + 0.25) * t) * path.evaluate(math.exp(t / 2) * x)
    assert potential(PotentialSpec(1.0, r, path), t, x) == pytest.approx(by_hand, abs=1e-15)
    generic = 0.5 * 2.5 * 1.3**2 + math.exp(-(r + 0.25) * t) * path.evaluate(math.exp(t / 2) * x)
    assert potential(PotentialSpec(2.5, r, path), t, x) == pytest.approx(generic, abs=1e-15)


def test_potential_law_is_stationary_without_decay():
    start, later = [], []
    for seed in range(1000):
        spec = PotentialSpec(1.0, 0.0, sample_path(seed))
        start.append(potential(spec, 0.0, 1.0))
        later.append(potential(spec, 5.0, 1.0))
    assert stats.ks_2samp(start, later).statistic < 0.03


# pseudo-scale --------------------------------------------------------------------------


def test_scale_of_zero_environment_matches_series_oracle():
    spec = PotentialSpec(1.0, 0.3, ZERO)
    value = pseudo_scale(spec, 0.0, 1.0)
    assert value == pytest.approx(oracles.FROZEN["scale_at_one"], abs=1e-9)
    assert value == pytest.approx(1.19493, abs=5e-5)
    assert pseudo_scale(spec, 0.0, -1.0) == pytest.approx(-value, rel=1e-15)
    assert pseudo_scale(spec, 0.0, 0.0) == 0.0


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_scale_matches_adaptive_quadrature_of_the_model(seed):
    # scipy quad over the same piecewise-linear environment, knot by knot
    spec = PotentialSpec(1.0, 0.4, sample_path(seed))
    t = 0.8
    table = PseudoScale(spec, t)
    grid = table.grid
    view = spec.environment_at(t)
    nodes = view.amplitude * view.base.level_slice(table.level, -table.count, table.count)
    q = lambda y: math.exp(0.5 * y * y + float(np.interp(y, grid, nodes)))
    for x in (0.7, -1.9, 3.1):
        inner = grid[(grid > min(0, x)) & (grid < max(0, x))]
        edges = np.concatenate(([min(0.0, x)], inner, [max(0.0, x)]))
        total = sum(quadrature.quad(q, a, b, epsabs=0, epsrel=1e-13)[0] for a, b in zip(edges[:-1], edges[1:]))
        assert table.scale(x) == pytest.approx(math.copysign(total, x), rel=1e-10)


def test_inverse_at_origin_and_oracle():
    spec = PotentialSpec(1.0, 0.3, ZERO)
    assert inverse_scale(spec, 0.0, 0.0) == 0.0
    assert inverse_scale(spec, 0.0, oracles.FROZEN["scale_at_one"]) == pytest.approx(1.0, abs=1e-6)
    assert inverse_scale(PotentialSpec(1.0, 0.5, sample_path(3)), 1.1, 0.0) == 0.0


def test_inverse_round_trip():
    table = PseudoScale(PotentialSpec(1.0, 0.5, sample_path(7)), 1.3)
    x = np.random.default_rng(1).uniform(-5, 5, 100)
    assert np.max(np.abs(table.inverse(table.scale(x)) - x)) <= 1e-8


def test_forward_of_inverse_on_random_environments():
    gen = np.random.default_rng(2)
    worst = 0.0
    for seed in range(20):
        spec = PotentialSpec(1.0, gen.uniform(0.0, 1.0), sample_path(seed))
        for _ in range(5):
            table = PseudoScale(spec, gen.uniform(0.0, 3.0))
            lo, hi = table.scale(-5.0), table.scale(5.0)
            xt = gen.uniform(lo, hi, 10)
            worst = max(worst, float(np.max(np.abs(table.scale(table.inverse(xt)) - xt))))
    assert worst <= 1e-8


def test_non_confining_spec_rejected():
    with pytest.raises(NonConfining):
        inverse_scale(PotentialSpec(-1.0, 0.0, ZERO), 0.0, 0.5)


# coefficients ----------------------------------------------------------------------------


def test_zero_environment_has_no_drift():
    sigma, d = coefficients(PotentialSpec(1.0, 0.3, ZERO), 0.7, np.linspace(-3, 3, 13))
    assert np.all(d == 0.0)
    assert sigma == pytest.approx(np.exp(0.5 * inverse_scale(PotentialSpec(1.0, 0.3, ZERO), 0.7,
                                                              np.linspace(-3, 3, 13)) ** 2), rel=1e-12)


@pytest.mark.parametrize("seed", [0, 4])
def test_unit_diffusion_at_origin(seed):
    sigma, _ = coefficients(PotentialSpec(1.0, 0.5, sample_path(seed)), 0.9, 0.0)
    assert sigma == pytest.approx(1.0, abs=1e-15)


def _knot_crosses(table, x, t, h):
    # knots sit at k 2^-level exp(-t/2) and drift with t; a crossing puts a kink inside the stencil
    ends = sorted(x * 2.0**table.level * math.exp(u / 2) for u in (t - h, t + h))
    return math.floor(ends[0]) != math.floor(ends[1])


def test_drift_matches_time_finite_difference():
    spec = PotentialSpec(1.0, 0.5, sample_path(7))
    gen = np.random.default_rng(3)
    h = 1e-4
    checked = 0
    while checked < 50:
        t, x = gen.uniform(0.2, 2.0), gen.uniform(-3.0, 3.0)
        table = PseudoScale(spec, t)
        if _knot_crosses(table, x, t, h):
            continue
        checked += 1
        _, _, d = table.derivatives(x)
        plus = PseudoScale(spec, t + h, level=table.level).scale(x)
        minus = PseudoScale(spec, t - h, level=table.level).scale(x)
        assert abs(d - (plus - minus) / (2 * h)) <= 1e-4 * (1 + abs(d))


def test_drift_via_inverse_matches_forward():
    table = PseudoScale(PotentialSpec(1.0, 0.5, sample_path(2)), 0.6)
    x = np.linspace(-3, 3, 31) + 0.01
    s, sigma, d = table.derivatives(x)
    sigma_inv, d_inv = table.coefficients(s)
    assert sigma_inv == pytest.approx(sigma, rel=1e-9)
    assert d_inv == pytest.approx(d, rel=1e-7, abs=1e-9)


def test_cocycle_identity_for_tables():
    spec = PotentialSpec(1.0, 0.5, sample_path(7))
    x = np.linspace(-3, 3, 13) + 0.0123
    direct = PseudoScale(spec, 2.5)
    shifted = PseudoScale(spec.rebased(1.0), 1.5)
    assert direct.level == shifted.level
    assert np.max(np.abs(direct.scale(x) - shifted.scale(x))) < 1e-9
    xt = direct.scale(x)
    for a, b in zip(direct.coefficients(xt), shifted.coefficients(xt)):
        assert np.max(np.abs(a - b)) < 1e-9


# Brox correspondence -------------------------------------------------------------------------


def test_brox_maps():
    s, z = brox_to_z([1.0], [0.7])
    assert s[0] == 0.0 and z[0] == 0.7
    s, z = brox_to_z([1.0, math.e, math.e**2], [2.0, 2.0, 2.0])
    assert s == pytest.approx([0, 1, 2], abs=1e-15)
    assert z == pytest.approx(2.0 * np.exp([0.0, -0.5, -1.0]), rel=1e-15)
    times = np.sort(np.random.default_rng(0).uniform(1, 50, 20))
    values = np.random.default_rng(1).normal(size=20)
    back_t, back_y = z_to_brox(*brox_to_z(times, values))
    assert np.max(np.abs(back_t - times)) < 1e-12 * 50 and np.max(np.abs(back_y - values)) < 1e-12 * 10
    with pytest.raises(BadTimeOrigin):
        brox_to_z([0.5], [1.0])
