"""The compiled kernels and their numpy twins must agree."""

import math
import os
import subprocess
import sys

import numpy as np
import pytest

from renv import _accel, kernels, rng
from renv.env import affine_approx, sample_path
from renv.integrate import slope_source
from renv.transform import PotentialSpec, PseudoScale


@pytest.fixture(scope="module")
def table():
    return PseudoScale(PotentialSpec(1.0, 0.5, sample_path(7)), 1.3)


def test_moments_against_quadrature():
    from scipy import integrate as quadrature

    out = np.empty(kernels.N_MOMENTS)
    for c, v in ((0.3, 0.01), (-40.0, 0.2), (25.0, 0.1), (0.0, 0.5)):
        kernels.moments_scalar(c, v, out)
        vectorised = kernels.moments_numpy(np.array([c]), np.array([v]))
        for j in range(kernels.N_MOMENTS):
            exact = quadrature.quad(lambda u: u**j * math.exp(c * u), 0, v, epsabs=0, epsrel=1e-13)[0]
            assert out[j] == pytest.approx(exact, rel=1e-11, abs=1e-300)
            assert vectorised[j][0] == pytest.approx(exact, rel=1e-11, abs=1e-300)


def test_cell_integrals_agree(table):
    args = (table.c, table.width, table.half_a, table.w0, table.w1, table.w2)
    for a, b in zip(kernels.cell_integrals_compiled(*args), kernels.cell_integrals_numpy(*args)):
        assert np.allclose(a, b, rtol=1e-13, atol=0)


def test_inversion_agrees(table):
    xt = np.random.default_rng(0).uniform(table.scale(-4.0), table.scale(4.0), 2000)
    for a, b in zip(kernels.invert_compiled(table, xt), kernels.invert_numpy(table, xt)):
        assert np.allclose(a, b, rtol=1e-10, atol=1e-12)


def test_equivalent_step_agrees(table):
    n = 500
    start = np.random.default_rng(1).uniform(table.scale(-3.0), table.scale(3.0), n)
    replica = np.arange(n, dtype=np.int64)
    key = rng.seed_key(9)
    results = []
    for step_fn in (kernels.equivalent_step_compiled, kernels.equivalent_step_numpy):
        xt = start.copy()
        alive = np.ones(n, dtype=bool)
        positions = np.zeros(n)
        step_fn(table, xt, alive, replica, 41, key, 0.01, positions)
        results.append((xt, alive, positions))
    assert np.array_equal(results[0][1], results[1][1])
    assert np.allclose(results[0][0], results[1][0], rtol=1e-10, atol=1e-12)
    assert np.allclose(results[0][2], results[1][2], rtol=1e-10, atol=1e-12)


def test_direct_step_and_piece_lookup_agree():
    path = sample_path(3)
    approx = affine_approx(path, 0.4, 0.05, n_max=20)
    z = np.concatenate([np.random.default_rng(0).uniform(-21.5, 21.5, 20000), approx.breakpoints[::97],
                        np.arange(-21.0, 22.0)])
    expected = np.searchsorted(approx.breakpoints, z, side="right") - 1
    expected[(z < approx.breakpoints[0]) | (z >= approx.breakpoints[-1])] = -1
    found = np.array([kernels.locate_piece(approx.breakpoints, approx.cell_starts, v) for v in z])
    assert np.array_equal(found, expected)
    source = slope_source(path, approx)
    n = 400
    start = np.random.default_rng(2).uniform(-3, 3, n)
    outcomes = []
    for step_fn in (kernels.direct_step_compiled, kernels.direct_step_numpy):
        x = start.copy()
        alive = np.ones(n, dtype=bool)
        step_fn(x, alive, np.arange(n, dtype=np.int64), 5, rng.seed_key(4), 0.01, 1.0, 0.8, 1.2, source)
        outcomes.append((x, alive))
    assert np.array_equal(outcomes[0][1], outcomes[1][1])
    assert np.allclose(outcomes[0][0], outcomes[1][0], rtol=1e-13, atol=1e-14)


def test_environment_flag_selects_numpy_fallback():
    script = "from renv import _accel, kernels; print(_accel.USE_NUMBA, kernels.invert is kernels.invert_numpy)"
    env = dict(os.environ, RENV_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", script], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]
    if _accel.HAVE_NUMBA and not _accel.NUMBA_DISABLED:
        assert kernels.invert is kernels.invert_compiled


def test_fallback_reproduces_compiled_ensemble():
    script = (
        "import numpy as np; from renv.integrate import run_ensemble;"
        "r = run_ensemble(dict(env_seed=3, n_replicas=50, t_final=0.5, r=0.5));"
        "print(' '.join(repr(v) for v in r.terminal_samples.tolist()))"
    )
    runs = []
    for flag in ("0", "1"):
        env = dict(os.environ, RENV_NO_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", script], env=env, capture_output=True, text=True, check=True)
        runs.append(np.array([float(v) for v in out.stdout.split()]))
    # rounding differences in the inversion are amplified by the rough drift over 50 steps
    assert np.max(np.abs(runs[0] - runs[1])) < 1e-6
