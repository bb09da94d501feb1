import io
import math

import numpy as np
import pytest

import oracles
from renv import env
from renv.errors import DegenerateEnvironment, OutOfWindow


def _variance_check(values, expected):
    values = np.asarray(values)
    se = np.sqrt(np.var(values * values, ddof=1) / values.size)
    assert abs(np.mean(values * values) - expected) <= 3 * se


# paths ----------------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 17, 2**40])
def test_paths_vanish_at_origin(seed):
    assert env.sample_path(seed).evaluate(0.0) == 0.0


def test_unit_variance_at_one():
    _variance_check([env.sample_path(s, half_width=2).evaluate(1.0) for s in range(10_000)], 1.0)


def test_refinement_does_not_change_values():
    fresh = env.sample_path(5)
    before = fresh.evaluate(0.5)
    x = np.array([0.123456, -3.3, 7.77])
    values = fresh.evaluate(x)
    fresh.refine(fresh.base_level + 3)
    assert fresh.evaluate(0.5) == before
    assert np.array_equal(fresh.evaluate(x), values)


def test_widening_does_not_change_values():
    small = env.sample_path(9, half_width=2)
    x = np.linspace(-1.9, 1.9, 17)
    values = small.evaluate(x)
    small.widen_to(40.0)
    assert np.array_equal(small.evaluate(x), values)
    assert np.array_equal(env.sample_path(9).evaluate(x), values)


def test_query_order_is_irrelevant():
    x = np.linspace(-5, 5, 101)
    a = env.sample_path(4).evaluate(x)
    b = env.sample_path(4).evaluate(x[::-1])[::-1]
    assert np.array_equal(a, b)


def test_level_slice_matches_pointwise_dyadic_values():
    path = env.sample_path(3)
    k = np.arange(-50, 50)
    assert np.array_equal(path.level_slice(10, -50, 49), path.dyadic_values(10, k))
    assert np.array_equal(path.level_slice(2, -50, 49), path.dyadic_values(2, k))


def test_out_of_window_raises():
    with pytest.raises(OutOfWindow):
        env.sample_path(1).evaluate(1e6)


def test_analytic_values():
    assert env.analytic_path("zero").evaluate(3.7) == 0.0
    assert env.analytic_path("synthetic-linear", slope=2.0).evaluate(-1.5) == -3.0
    assert env.analytic_path("deterministic-sqrt").evaluate(4.0) == 2.0


# scaling and flow -------------------------------------------------------------------


def test_scale_linear_path():
    assert env.scale(env.analytic_path("synthetic-linear", slope=1.0), 4.0).evaluate(1.0) == 2.0


def test_scale_identity():
    path = env.sample_path(2)
    x = np.arange(-64, 65) / 8.0
    assert np.array_equal(env.scale(path, 1.0).evaluate(x), path.evaluate(x))


def test_scaling_preserves_wiener_variance():
    _variance_check([env.scale(env.sample_path(s, half_width=4), 3.0).evaluate(1.0) for s in range(10_000)], 1.0)


def test_flow_identity_and_linear_case():
    path = env.sample_path(2)
    x = np.linspace(-3, 3, 25)
    assert np.array_equal(env.flow(path, 0.0).evaluate(x), path.evaluate(x))
    linear = env.analytic_path("synthetic-linear", slope=1.0)
    for t in (0.3, 1.0, 2.5):
        assert env.flow(linear, t).evaluate(x) == pytest.approx(math.exp(t / 4) * x, rel=1e-14)


def test_flow_group_law():
    path = env.sample_path(3)
    x = np.linspace(-2, 2, 401)
    composed = env.flow(env.flow(path, 0.7), 1.3).evaluate(x)
    direct = env.flow(path, 2.0).evaluate(x)
    assert np.max(np.abs(composed - direct)) < 1e-12


# Hölder seminorm and approximation ----------------------------------------------------


@pytest.mark.parametrize("gamma", [0.1, 0.3, 0.4, 0.49])
def test_holder_seminorm_of_linear_path(gamma):
    linear = env.analytic_path("synthetic-linear", slope=1.0)
    assert env.holder_seminorm(linear, gamma, 5) == pytest.approx(2.0, rel=1e-12)


def test_holder_seminorm_of_zero_path():
    zero = env.analytic_path("zero")
    assert env.holder_seminorm(zero, 0.4, 5) == 0.0
    with pytest.raises(DegenerateEnvironment):
        env.affine_approx(zero, 0.4, 0.1, n_max=3)


def test_holder_seminorm_positive_finite_on_many_seeds():
    values = [env.holder_seminorm(env.sample_path(s, half_width=8), 0.4, 3) for s in range(200)]
    assert all(0.0 < h < math.inf for h in values)


def test_holder_compiled_and_numpy_agree():
    values = np.ascontiguousarray(env.sample_path(6).level_slice(8, 0, 256))
    assert env._cell_holder_compiled(values, 2.0**-8, 0.4) == pytest.approx(
        env._cell_holder_numpy(values, 2.0**-8, 0.4), rel=1e-14
    )


def test_piece_counts():
    assert env.piece_count(0, 0.4, 0.5) == oracles.FROZEN["piece_count_n0"]
    assert env.piece_count(3, 0.4, 0.5) == oracles.FROZEN["piece_count_n3"]


def test_linear_path_is_its_own_approximation():
    linear = env.analytic_path("synthetic-linear", slope=1.7)
    approx = env.affine_approx(linear, 0.4, 0.1, n_max=4)
    x = np.linspace(-5, 5, 1001)
    assert np.max(np.abs(approx.value(x) - linear.evaluate(x))) < 1e-12


def test_breakpoint_slope_uses_right_piece():
    approx = env.affine_approx(env.sample_path(3), 0.4, 0.5, n_max=3)
    k = 7
    expected = (approx.node_values[k + 1] - approx.node_values[k]) / (approx.breakpoints[k + 1] - approx.breakpoints[k])
    assert approx.slope(approx.breakpoints[k]) == expected


@pytest.mark.parametrize("gamma", [0.3, 0.4, 0.45])
@pytest.mark.parametrize("epsilon", [0.1, 0.5, 1.0])
def test_approximation_bounds(gamma, epsilon):
    for seed in range(5):
        report = env.approximation_report(env.sample_path(seed), gamma, epsilon, n_max=3)
        assert report["sup_error"] <= epsilon
        assert report["weighted_slope"] <= report["slope_bound"]
        assert report["violations"] == 0


def test_approximation_error_is_exact_supremum():
    # a dense independent evaluation never exceeds the knot maximum
    path = env.sample_path(8)
    approx = env.affine_approx(path, 0.4, 0.5, n_max=2)
    x = np.random.default_rng(0).uniform(-3, 3, 200_000)
    dense = np.max(np.abs(approx.value(x) - path.evaluate(x, level=approx.level)))
    assert dense <= env.approximation_error(path, approx) + 1e-12


# OU section ---------------------------------------------------------------------------


def test_ou_section_at_zero_time():
    path = env.sample_path(12)
    assert env.ou_section(path, 1.3, [0.0])[0] == path.evaluate(1.3)


def test_ou_section_autocovariance_and_variance():
    lag_products, squares = [], []
    for seed in range(5000):
        path = env.sample_path(seed, half_width=4)
        v = env.ou_section(path, 1.0, [0.0, 1.0])
        lag_products.append(v[0] * v[1])
        squares.append(env.ou_section(path, 2.0, [0.0])[0] ** 2)
    for values, expected in ((lag_products, math.exp(-0.25)), (squares, 2.0)):
        values = np.asarray(values)
        se = values.std(ddof=1) / math.sqrt(values.size)
        assert abs(values.mean() - expected) <= 3 * se


# export / import -------------------------------------------------------------------------


def test_export_import_bit_exact(tmp_path):
    path = env.sample_path(21)
    path.evaluate(np.linspace(-3, 3, 7))
    target = tmp_path / "path.tsv"
    env.export_path(path, target)
    again = env.import_path(target)
    assert np.array_equal(path.base_grid()[1], again.base_grid()[1])
    x = np.linspace(-10, 10, 333)
    assert np.array_equal(path.evaluate(x), again.evaluate(x))


def test_export_import_analytic_kinds():
    buffer = io.StringIO()
    env.export_path(env.analytic_path("synthetic-linear", slope=0.5), buffer)
    buffer.seek(0)
    again = env.import_path(buffer)
    assert again.kind == "synthetic-linear" and again.evaluate(2.0) == 1.0
