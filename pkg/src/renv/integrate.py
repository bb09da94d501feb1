"""Ensemble integration of the diffusion.

The primary route integrates ``X = S(t, Z)`` with Euler-Maruyama, where the
coefficients ``sigma`` and ``d`` come from a pseudo-scale table rebuilt at
every step, and maps back through the inverse. The cross-check route applies
Euler-Maruyama to ``Z`` itself with the drift of a piecewise-linear
environment. Brownian increments are keyed by ``(noise seed, replica id,
absolute step index)`` so results do not depend on chunking or worker count,
and runs started at different times share increments on common steps.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import kernels, rng
from .env import AffineApproximation, Environment, affine_approx, analytic_path, sample_path
from .errors import BracketExhausted, ConfigError, EscapeCapExceeded, NonConfining, OutOfWindow
from .transform import DEFAULT_RESOLUTION, PotentialSpec, PseudoScale

DEFAULT_DT = 1e-3
DEFAULT_ESCAPE_CAP = 0.01
INITIAL_EXTENT = 6.0


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    coordinate: str = "z"
    env_seed: int | None = None
    noise_seed: int | None = None
    escaped: bool = False
    dt: float | None = None
    tilde_states: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def dumps(self) -> str:
        lines = [
            f"# coordinate: {self.coordinate}",
            f"# env_seed: {self.env_seed}",
            f"# noise_seed: {self.noise_seed}",
            f"# dt: {self.dt!r}",
            f"# escaped: {int(self.escaped)}",
            "t\tstate",
        ]
        lines += [f"{t!r}\t{x!r}" for t, x in zip(self.times.tolist(), self.states.tolist())]
        return "\n".join(lines) + "\n"


@dataclass
class EnsembleResult:
    mode: str
    terminal_samples: np.ndarray
    escaped: np.ndarray
    env_seeds: list
    noise_seed: int
    t_final: float
    config_hash: str = ""
    coordinate: str = "z"
    extra: dict = field(default_factory=dict)

    @property
    def n_replicas(self) -> int:
        return int(self.terminal_samples.size)

    @property
    def samples(self) -> np.ndarray:
        """Terminal values of replicas that stayed inside the represented environment."""
        return self.terminal_samples[~self.escaped]

    @property
    def escaped_fraction(self) -> float:
        return float(np.mean(self.escaped)) if self.escaped.size else 0.0

    def dumps(self) -> str:
        lines = [
            f"# mode: {self.mode}",
            f"# config_hash: {self.config_hash}",
            f"# noise_seed: {self.noise_seed}",
            f"# t_final: {self.t_final!r}",
            f"# coordinate: {self.coordinate}",
            "replica_id\tenv_seed\tterminal_value\tescaped",
        ]
        seeds = self.env_seeds if len(self.env_seeds) == self.n_replicas else self.env_seeds * self.n_replicas
        for i, (seed, value, gone) in enumerate(zip(seeds, self.terminal_samples.tolist(), self.escaped.tolist())):
            lines.append(f"{i}\t{seed}\t{value!r}\t{int(gone)}")
        return "\n".join(lines) + "\n"


def config_hash(config) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _step_grid(s, t_end, dt):
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_end < s:
        raise ValueError("t_end must not precede the start time")
    n_steps = int(round((t_end - s) / dt))
    if abs(n_steps * dt - (t_end - s)) > 1e-9 * max(1.0, abs(t_end - s)):
        raise ValueError("the horizon must be a whole number of steps")
    # absolute indices so runs from different start times share increments
    first = int(round(s / dt))
    return n_steps, first


# equivalent-SDE route ----------------------------------------------------------


class _Tables:
    """Per-run table cache; the zero environment needs a single table."""

    def __init__(self, spec, extent, resolution):
        self.spec = spec
        self.extent = extent
        self.resolution = resolution
        self.static = spec.env.is_zero
        self.current = None

    def at(self, t):
        if self.static and self.current is not None:
            return self.current, False
        table = PseudoScale(self.spec, t, extent=self.extent, resolution=self.resolution)
        changed = self.current is not None and table.level != self.current.level
        self.current = table
        return table, changed

    def cover(self, table, xt, alive):
        """Widen ``table`` until every live value is bracketed; unbracketable replicas escape."""
        live = xt[alive]
        if live.size == 0:
            return
        table.extend_to_value(live)
        self.extent = max(self.extent, table.extent)
        lo, hi = table.s_nodes[0], table.s_nodes[-1]
        alive &= (xt > lo) & (xt < hi)


def propagate(
    spec: PotentialSpec,
    s: float,
    z0,
    t_end: float,
    dt: float,
    noise_seed: int,
    replicas=None,
    store_every: int | None = None,
    extent: float = INITIAL_EXTENT,
    resolution: float = DEFAULT_RESOLUTION,
):
    """Integrate a batch of replicas on the equivalent SDE.

    Returns ``(z_final, escaped, stored)``; ``stored`` is ``None`` unless
    ``store_every`` is given, in which case it is ``(times, z_paths,
    tilde_paths)`` with paths of shape ``(n_stored, n_replicas)``.
    """
    spec.require_confining()
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    if replicas is None:
        replicas = np.arange(z0.size, dtype=np.int64)
    replicas = np.ascontiguousarray(replicas, dtype=np.int64)
    z0 = np.broadcast_to(z0, replicas.shape).copy()
    n_steps, first = _step_grid(s, t_end, dt)
    key = rng.seed_key(noise_seed)
    tables = _Tables(spec, max(extent, 1.05 * float(np.max(np.abs(z0)))), resolution)
    table, _ = tables.at(s)
    table._ensure_covers(z0)
    xt = np.ascontiguousarray(table.scale(z0))
    alive = np.ones(xt.size, dtype=bool)
    positions = z0.copy()
    stored_t, stored_z, stored_x = [], [], []
    for i in range(n_steps):
        t = s + i * dt
        if i:
            previous = table
            table, changed = tables.at(t)
            if changed:
                # keep Z continuous across a change of resolution level
                old = PseudoScale(spec, t, extent=previous.extent, resolution=resolution, level=previous.level)
                tables.cover(old, xt, alive)
                idx = np.flatnonzero(alive)
                z_now = old.inverse(xt[idx])
                try:
                    table._ensure_covers(z_now)
                except (BracketExhausted, OutOfWindow):
                    pass
                inside = np.abs(z_now) <= table.extent
                alive[idx[~inside]] = False
                xt[idx[inside]] = table.scale(z_now[inside])
        tables.cover(table, xt, alive)
        kernels.equivalent_step(table, xt, alive, replicas, first + i, key, dt, positions)
        if store_every and i % store_every == 0:
            stored_t.append(t)
            stored_z.append(np.where(alive, positions, np.nan))
            stored_x.append(xt.copy())
    table, _ = tables.at(t_end)
    tables.cover(table, xt, alive)
    z_final = np.full(xt.size, np.nan)
    if alive.any():
        z_final[alive] = table.inverse(xt[alive])
    if store_every:
        stored_t.append(t_end)
        stored_z.append(z_final.copy())
        stored_x.append(xt.copy())
        return z_final, ~alive, (np.array(stored_t), np.array(stored_z), np.array(stored_x))
    return z_final, ~alive, None


def integrate_equivalent(spec, s, z, t_end, dt, noise_seed, replica=0, store_every=1, **options) -> Trajectory:
    """One replica on the equivalent SDE, stored every ``store_every`` steps."""
    z_final, escaped, stored = propagate(
        spec, s, [z], t_end, dt, noise_seed, replicas=[replica], store_every=store_every, **options
    )
    times, z_path, x_path = stored
    return Trajectory(
        times, z_path[:, 0], "z", spec.env.seed, noise_seed, bool(escaped[0]), dt, tilde_states=x_path[:, 0]
    )


# direct route --------------------------------------------------------------------

_ANALYTIC_CODES = {"zero": 0, "synthetic-linear": 1, "deterministic-sqrt": 2}


def slope_source(env: Environment, approx: AffineApproximation | None = None):
    """Describe ``w'`` of the unscaled path for the direct-route kernels."""
    base = env.base
    if base.kind in _ANALYTIC_CODES and approx is None:
        empty = np.zeros(2)
        return _ANALYTIC_CODES[base.kind], empty, empty, np.zeros(2, dtype=np.int64), float(base.slope)
    if approx is None:
        raise ValueError("random environments need an affine approximation on the direct route")
    return (
        3,
        np.ascontiguousarray(approx.breakpoints),
        np.ascontiguousarray(approx.slopes),
        np.ascontiguousarray(approx.cell_starts, dtype=np.int64),
        0.0,
    )


def propagate_direct(
    spec: PotentialSpec,
    s: float,
    z0,
    t_end: float,
    dt: float,
    noise_seed: int,
    replicas=None,
    approx: AffineApproximation | None = None,
    store_every: int | None = None,
):
    """Euler-Maruyama on ``Z`` with the drift ``-(a z + d_z E(t, z)) / 2``."""
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    if replicas is None:
        replicas = np.arange(z0.size, dtype=np.int64)
    replicas = np.ascontiguousarray(replicas, dtype=np.int64)
    x = np.broadcast_to(z0, replicas.shape).astype(float).copy()
    n_steps, first = _step_grid(s, t_end, dt)
    key = rng.seed_key(noise_seed)
    source = slope_source(spec.env, approx)
    alive = np.ones(x.size, dtype=bool)
    stored_t, stored_z = [], []
    for i in range(n_steps):
        t = s + i * dt
        view = spec.environment_at(t)
        if store_every and i % store_every == 0:
            stored_t.append(t)
            stored_z.append(np.where(alive, x, np.nan))
        kernels.direct_step(x, alive, replicas, first + i, key, dt, spec.a, view.amplitude, view.factor, source)
    x[~alive] = np.nan
    if store_every:
        stored_t.append(t_end)
        stored_z.append(x.copy())
        return x, ~alive, (np.array(stored_t), np.array(stored_z))
    return x, ~alive, None


def integrate_direct(spec, s, z, t_end, dt, noise_seed, approx=None, replica=0, store_every=1) -> Trajectory:
    """One replica of the direct route (piecewise-constant environment slope, right-hand at breakpoints)."""
    _, escaped, (times, path) = propagate_direct(
        spec, s, [z], t_end, dt, noise_seed, replicas=[replica], approx=approx, store_every=store_every
    )
    return Trajectory(times, path[:, 0], "z", spec.env.seed, noise_seed, bool(escaped[0]), dt)


def propagate_brox(env, beta, y0, log_t_end, ds, noise_seed, replicas=None, approx=None):
    """Euler-Maruyama for ``dY = dB - w'(Y) / (2 t**beta) dt`` from ``t = 1`` on a log-uniform grid.

    ``log_t_end`` is ``log`` of the final Brox time; step ``i`` spans
    ``[exp(i ds), exp((i+1) ds)]``.
    """
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if replicas is None:
        replicas = np.arange(y0.size, dtype=np.int64)
    replicas = np.ascontiguousarray(replicas, dtype=np.int64)
    y = np.broadcast_to(y0, replicas.shape).astype(float).copy()
    n_steps, _ = _step_grid(0.0, log_t_end, ds)
    key = rng.seed_key(noise_seed)
    source = slope_source(env, approx)
    alive = np.ones(y.size, dtype=bool)
    for i in range(n_steps):
        t_lo, t_hi = math.exp(i * ds), math.exp((i + 1) * ds)
        kernels.direct_step(y, alive, replicas, i, key, t_hi - t_lo, 0.0, t_lo**-beta, 1.0, source)
    y[~alive] = np.nan
    return y, ~alive


# ensembles ------------------------------------------------------------------------


@dataclass
class EnsembleConfig:
    mode: str = "quenched"
    a: float = 1.0
    r: float = 0.0
    env_kind: str = "random-wiener"
    env_seed: int = 0
    env_slope: float = 0.0
    noise_seed: int = 1
    n_replicas: int = 1000
    z0: float = 0.0
    s: float = 0.0
    t_final: float = 1.0
    dt: float = 0.01
    route: str = "equivalent"
    coordinate: str = "z"
    gamma: float = 0.4
    epsilon: float = 0.05
    escape_cap: float = DEFAULT_ESCAPE_CAP
    workers: int = 1
    resolution: float = DEFAULT_RESOLUTION

    def __post_init__(self):
        if self.mode not in ("quenched", "annealed", "deterministic-env"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.route not in ("equivalent", "direct"):
            raise ConfigError(f"unknown route {self.route!r}")
        if self.coordinate not in ("z", "brox"):
            raise ConfigError(f"unknown coordinate {self.coordinate!r}")
        if self.n_replicas <= 0 or self.dt <= 0 or self.workers <= 0:
            raise ConfigError("n_replicas, dt and workers must be positive")
        if self.mode == "deterministic-env":
            self.env_kind = "deterministic-sqrt"
        if self.a <= 0:
            raise NonConfining("the quadratic coefficient must be positive")


def make_environment(kind, seed=0, slope=0.0):
    if kind == "random-wiener":
        return sample_path(seed)
    return analytic_path(kind, slope=slope)


def _chunks(n, workers):
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [np.arange(bounds[i], bounds[i + 1], dtype=np.int64) for i in range(workers) if bounds[i + 1] > bounds[i]]


def _run_replicas(cfg: EnsembleConfig, env, ids, approx):
    spec = PotentialSpec(cfg.a, cfg.r, env)
    if cfg.coordinate == "brox":
        # Brox time exp(t_final), values reported as Y_t / sqrt(t)
        if cfg.route == "direct":
            y, escaped = propagate_brox(
                env, spec.beta, cfg.z0, cfg.t_final, cfg.dt, cfg.noise_seed, replicas=ids, approx=approx
            )
            return y / math.exp(0.5 * cfg.t_final), escaped
        z, escaped, _ = propagate(spec, 0.0, cfg.z0, cfg.t_final, cfg.dt, cfg.noise_seed, ids, resolution=cfg.resolution)
        return z, escaped
    if cfg.route == "direct":
        z, escaped, _ = propagate_direct(spec, cfg.s, cfg.z0, cfg.s + cfg.t_final, cfg.dt, cfg.noise_seed, ids, approx)
        return z, escaped
    z, escaped, _ = propagate(
        spec, cfg.s, cfg.z0, cfg.s + cfg.t_final, cfg.dt, cfg.noise_seed, ids, resolution=cfg.resolution
    )
    return z, escaped


def _approx_for(cfg, env):
    if cfg.route != "direct" or env.kind != "random-wiener":
        return None
    reach = 8.0 * math.exp(0.5 * (cfg.s + cfg.t_final)) if cfg.coordinate == "z" else 8.0 * math.exp(0.5 * cfg.t_final)
    n_max = int(min(max(reach, 8.0), env.half_width - 1))
    return affine_approx(env, cfg.gamma, cfg.epsilon, n_max=n_max)


def run_ensemble(config) -> EnsembleResult:
    """Run one ensemble; ``config`` is an :class:`EnsembleConfig` or a mapping of its fields."""
    cfg = config if isinstance(config, EnsembleConfig) else EnsembleConfig(**config)
    n = cfg.n_replicas
    terminal = np.empty(n)
    escaped = np.zeros(n, dtype=bool)
    if cfg.mode == "annealed":
        env_seeds = [rng.derive_seed(cfg.env_seed, i) for i in range(n)]
        for i, seed in enumerate(env_seeds):
            env = make_environment(cfg.env_kind, seed, cfg.env_slope)
            z, gone = _run_replicas(cfg, env, np.array([i], dtype=np.int64), _approx_for(cfg, env))
            terminal[i], escaped[i] = z[0], gone[0]
    else:
        env_seeds = [cfg.env_seed]
        env = make_environment(cfg.env_kind, cfg.env_seed, cfg.env_slope)
        approx = _approx_for(cfg, env)
        if env.kind == "random-wiener":
            # materialise the shared path before threads read it
            env.widen_to(min(env.window_cap, 64.0 * math.exp(0.5 * (abs(cfg.s) + cfg.t_final))))
        chunks = _chunks(n, cfg.workers)
        if cfg.workers == 1:
            results = [_run_replicas(cfg, env, ids, approx) for ids in chunks]
        else:
            with ThreadPoolExecutor(cfg.workers) as pool:
                results = list(pool.map(lambda ids: _run_replicas(cfg, env, ids, approx), chunks))
        for ids, (z, gone) in zip(chunks, results):
            terminal[ids], escaped[ids] = z, gone
    result = EnsembleResult(
        cfg.mode, terminal, escaped, env_seeds, cfg.noise_seed, cfg.t_final,
        config_hash({k: v for k, v in cfg.__dict__.items() if k != "workers"}), cfg.coordinate,
    )
    if result.escaped_fraction > cfg.escape_cap:
        raise EscapeCapExceeded(f"{result.escaped_fraction:.3%} of replicas escaped (cap {cfg.escape_cap:.1%})")
    return result


def cocycle_check(spec: PotentialSpec, s, t, z, n, dt=0.01, noise_seed=1):
    """Two-sample KS between ``X_{s+t}`` started at time ``s`` and ``X_t`` under the rebased spec."""
    left, gone_left, _ = propagate(spec, s, z, s + t, dt, noise_seed, np.arange(n))
    right, gone_right, _ = propagate(spec.rebased(s), 0.0, z, t, dt, rng.derive_seed(noise_seed, 1), np.arange(n))
    result = stats.ks_2samp(left[~gone_left], right[~gone_right], method="asymp")
    return float(result.statistic), float(result.pvalue)
