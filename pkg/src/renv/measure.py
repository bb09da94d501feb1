"""Empirical measures, weighted variation distances and the statistical experiments built on them."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import rng
from .errors import NonPositiveDistance, TailDominated
from .integrate import propagate
from .transform import PotentialSpec

DEFAULT_BINS = 64
CLIP = 8.0


# weights ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightFunction:
    """``U_alpha(x) = exp(alpha x^2 / 2)`` or ``V_alpha(x) = exp(|x|^alpha)``."""

    kind: str
    alpha: float

    def __post_init__(self):
        if self.kind not in ("U", "V"):
            raise ValueError("weight kind must be 'U' or 'V'")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "U":
            return np.exp(0.5 * self.alpha * x * x)
        return np.exp(np.abs(x) ** self.alpha)

    def log(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * self.alpha * x * x if self.kind == "U" else np.abs(x) ** self.alpha


def U(alpha) -> WeightFunction:
    return WeightFunction("U", alpha)


def V(alpha) -> WeightFunction:
    return WeightFunction("V", alpha)


def domination_constant(alpha):
    """``sup_x exp(|x|^alpha - alpha x^2 / 2)`` so that ``V_alpha <= c U_alpha``.

    The exponent is maximised where ``|x|^(2 - alpha) = 1``, i.e. at ``|x| = 1``.
    """
    return math.exp(1.0 - 0.5 * alpha)


# measures ------------------------------------------------------------------------------


class EmpiricalMeasure:
    """Equal-weight samples or a histogram ``(edges, masses)``."""

    def __init__(self, samples=None, edges=None, masses=None):
        if (samples is None) == (edges is None):
            raise ValueError("give either samples or a histogram")
        if samples is not None:
            self.samples = np.asarray(samples, dtype=float).ravel()
            if self.samples.size == 0:
                raise ValueError("empty sample")
            self.edges = self.masses = None
        else:
            self.samples = None
            self.edges = np.asarray(edges, dtype=float)
            self.masses = np.asarray(masses, dtype=float)
            if np.any(np.diff(self.edges) <= 0):
                raise ValueError("histogram edges must be strictly increasing")
            if self.masses.size != self.edges.size - 1 or np.any(self.masses < 0):
                raise ValueError("masses must be non-negative, one per bin")
            total = self.masses.sum()
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"histogram mass {total} differs from 1")

    @classmethod
    def dirac(cls, x=0.0):
        return cls(samples=[x])

    @classmethod
    def from_cdf(cls, cdf, edges):
        """Bin a continuous law; tail mass is folded into the end bins."""
        edges = np.asarray(edges, dtype=float)
        values = cdf(edges)
        masses = np.diff(values)
        masses[0] += values[0]
        masses[-1] += 1.0 - values[-1]
        return cls(edges=edges, masses=masses)

    @property
    def is_histogram(self) -> bool:
        return self.samples is None

    @property
    def n(self) -> int:
        return self.samples.size if self.samples is not None else 0

    @property
    def support_window(self):
        if self.samples is not None:
            return float(self.samples.min()), float(self.samples.max())
        return float(self.edges[0]), float(self.edges[-1])

    def binned(self, edges):
        """Masses on ``edges``; values outside are clipped into the end bins."""
        edges = np.asarray(edges, dtype=float)
        if self.samples is not None:
            idx = np.clip(np.searchsorted(edges, self.samples, side="right") - 1, 0, edges.size - 2)
            return np.bincount(idx, minlength=edges.size - 1) / self.samples.size
        if self.edges.size == edges.size and np.array_equal(self.edges, edges):
            return self.masses.copy()
        mids = 0.5 * (self.edges[:-1] + self.edges[1:])
        idx = np.clip(np.searchsorted(edges, mids, side="right") - 1, 0, edges.size - 2)
        return np.bincount(idx, weights=self.masses, minlength=edges.size - 1)

    def sample(self, n, seed):
        """Draw ``n`` points (resampling, or uniform within histogram bins)."""
        generator = np.random.default_rng(seed)
        if self.samples is not None:
            return self.samples[generator.integers(0, self.samples.size, n)]
        bins = generator.choice(self.masses.size, size=n, p=self.masses / self.masses.sum())
        return self.edges[bins] + generator.random(n) * np.diff(self.edges)[bins]


def _as_measure(m):
    if isinstance(m, EmpiricalMeasure):
        return m
    return EmpiricalMeasure(samples=m)


def weighted_norm(measure, F) -> float:
    """``nu(F)``; warns with :class:`TailDominated` when the outermost bin carries over 10%."""
    measure = _as_measure(measure)
    if measure.samples is not None:
        x = measure.samples
        values = F(x)
        total = float(values.sum())
        spread = np.abs(x)
        far, near = float(spread.max()), float(spread.min())
        if far > near:
            top = spread >= far - (far - near) / DEFAULT_BINS
            if float(values[top].sum()) > 0.1 * total:
                warnings.warn("weighted norm dominated by the outermost samples", TailDominated, stacklevel=2)
        return total / x.size
    mids = 0.5 * (measure.edges[:-1] + measure.edges[1:])
    contributions = F(mids) * measure.masses
    total = float(contributions.sum())
    heaviest = np.argmax(np.abs(mids) * (measure.masses > 0))
    if contributions[heaviest] > 0.1 * total and measure.masses.size > 1:
        warnings.warn("weighted norm dominated by the outermost bin", TailDominated, stacklevel=2)
    return total


def common_edges(m1, m2, bins=DEFAULT_BINS, clip=CLIP):
    """``bins`` uniform bins over the joint range clipped to ``[-clip, clip]``."""
    lo = min(_as_measure(m1).support_window[0], _as_measure(m2).support_window[0])
    hi = max(_as_measure(m1).support_window[1], _as_measure(m2).support_window[1])
    lo, hi = max(lo, -clip), min(hi, clip)
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def weighted_distance(m1, m2, F, bins=DEFAULT_BINS, edges=None) -> float:
    """Binned ``||m1 - m2||_F = sum_bins F(midpoint) |mass1 - mass2|``.

    When the binned supports are disjoint the exact ``||m1||_F + ||m2||_F`` is
    returned instead.
    """
    m1, m2 = _as_measure(m1), _as_measure(m2)
    if edges is None:
        edges = common_edges(m1, m2, bins)
    edges = np.asarray(edges, dtype=float)
    p, q = m1.binned(edges), m2.binned(edges)
    if not np.any((p > 0) & (q > 0)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TailDominated)
            return weighted_norm(m1, F) + weighted_norm(m2, F)
    mids = 0.5 * (edges[:-1] + edges[1:])
    return float(np.sum(F(mids) * np.abs(p - q)))


def ks_distance(m1, other):
    """Kolmogorov-Smirnov statistic and asymptotic p-value against a sample or a cdf."""
    x = _as_measure(m1).samples
    if callable(other):
        result = stats.kstest(x, other, method="asymp")
    else:
        result = stats.ks_2samp(x, _as_measure(other).samples, method="asymp")
    return float(result.statistic), float(result.pvalue)


def split_half(samples, statistic, seed=0):
    """Noise floor: ``statistic`` between two random halves of ``samples``."""
    samples = np.asarray(samples, dtype=float)
    order = np.random.default_rng(seed).permutation(samples.size)
    half = samples.size // 2
    return statistic(samples[order[:half]], samples[order[half : 2 * half]])


def rate_estimate(times, distances, log_time=False):
    """Least-squares slope of ``log d`` against ``t`` (or ``log t``) and the residual RMS."""
    times = np.asarray(times, dtype=float)
    distances = np.asarray(distances, dtype=float)
    if times.size < 4:
        raise ValueError("need at least four points")
    if np.any(distances <= 0):
        raise NonPositiveDistance("distances must be positive to take logarithms")
    abscissa = np.log(times) if log_time else times
    slope, intercept = np.polyfit(abscissa, np.log(distances), 1)
    residual = np.log(distances) - (slope * abscissa + intercept)
    return float(slope), float(np.sqrt(np.mean(residual**2)))


# experiments ------------------------------------------------------------------------


def _initial_states(initial, n, seed):
    if isinstance(initial, EmpiricalMeasure):
        return initial.sample(n, seed)
    if callable(initial):
        return np.asarray(initial(n, seed), dtype=float)
    return np.full(n, float(initial))


def _require_stationary(spec):
    if spec.r != 0:
        raise ValueError("this experiment needs r = 0")


def pullback_measure(spec: PotentialSpec, n, initial=0.0, n_replicas=10_000, dt=0.01, noise_seed=1, alpha=0.5):
    """Estimate the quasi-invariant measure by running from time ``-n`` to ``0``.

    Running the original dynamics on ``[-n, 0]`` is the same as running the
    rebased environment ``T_{-n}`` on ``[0, n]``; the former keeps step
    indices absolute so horizons can share Brownian increments.
    """
    _require_stationary(spec)
    z0 = _initial_states(initial, n_replicas, rng.derive_seed(noise_seed, 7))
    if not np.isfinite(np.mean(U(alpha)(z0))):
        raise ValueError("initial measure has infinite weighted norm")
    z, escaped, _ = propagate(spec, -float(n), z0, 0.0, dt, noise_seed, np.arange(n_replicas))
    return EmpiricalMeasure(samples=z[~escaped])


def cauchy_distances(spec: PotentialSpec, horizons=(2, 4, 6, 8), gap=2, initial=0.0, n_replicas=5000, dt=0.0025,
                     noise_seed=1, alpha=0.5):
    """``||mu_n - mu_{n+gap}||_U`` for each horizon, all runs sharing Brownian increments.

    The shared noise couples the runs synchronously. In a rough potential the
    Euler step adds a kick proportional to the local slope of the potential,
    which keeps coupled pairs apart at a floor that shrinks with ``dt``; at
    ``dt = 0.01`` that floor swamps the differences between horizons, hence the
    smaller default.
    """
    weight = U(alpha)
    needed = sorted(set(horizons) | {h + gap for h in horizons})
    estimates = {h: pullback_measure(spec, h, initial, n_replicas, dt, noise_seed, alpha) for h in needed}
    return [weighted_distance(estimates[h], estimates[h + gap], weight) for h in horizons]


def invariance_check(spec: PotentialSpec, pullback_n=8, n_replicas=20_000, dt=0.01, noise_seed=1, alpha=0.5,
                     initial=0.0):
    """Compare ``mu_theta P_1`` with the pullback estimate of ``mu_{T_1 theta}``.

    The left side continues the pullback run on ``[-n, 0]`` for one more unit;
    the right side is a fresh pullback, with independent noise, on the
    environment shifted by one unit.
    """
    _require_stationary(spec)
    weight = U(alpha)
    z0 = _initial_states(initial, n_replicas, rng.derive_seed(noise_seed, 7))
    ids = np.arange(n_replicas)
    at_zero, gone0, _ = propagate(spec, -float(pullback_n), z0, 0.0, dt, noise_seed, ids)
    pushed, gone1, _ = propagate(spec, 0.0, at_zero[~gone0], 1.0, dt, noise_seed, ids[~gone0])
    other_seed = rng.derive_seed(noise_seed, 11)
    shifted = spec.rebased(1.0)
    target, gone2, _ = propagate(shifted, -float(pullback_n), z0, 0.0, dt, other_seed, ids)
    left, right, before = pushed[~gone1], target[~gone2], at_zero[~gone0]
    ks, p_value = ks_distance(left, right)
    tv = weighted_distance(left, right, weight)
    floor_tv = max(
        split_half(left, lambda x, y: weighted_distance(x, y, weight)),
        split_half(right, lambda x, y: weighted_distance(x, y, weight)),
    )
    return {
        "ks": ks,
        "p_value": p_value,
        "weighted_tv": tv,
        "noise_floor_tv": floor_tv,
        "noise_floor_ks": split_half(left, lambda x, y: ks_distance(x, y)[0]),
        # the measure is only quasi-invariant: mu_theta itself differs from mu_theta P_1
        "distance_to_start": weighted_distance(before, left, weight),
        "escaped": int(gone1.sum() + gone2.sum() + (n_replicas - gone1.size)),
    }


def quenched_clt_check(spec: PotentialSpec, t_list=(2, 4, 8), n_replicas=20_000, z0=2.0, dt=0.01, noise_seed=1,
                       threshold=0.05):
    """KS of ``X_t`` against ``N(0, 1)`` along ``t_list`` (one run, checked at each time)."""
    if spec.r <= 0:
        raise ValueError("the quenched CLT needs r > 0")
    z = np.full(n_replicas, float(z0))
    ids = np.arange(n_replicas)
    alive = np.ones(n_replicas, dtype=bool)
    t_prev = 0.0
    rows = []
    for t in sorted(t_list):
        step, gone, _ = propagate(spec, t_prev, z[alive], float(t), dt, noise_seed, ids[alive])
        z[alive] = step
        alive[np.flatnonzero(alive)[gone]] = False
        rows.append((float(t), *ks_distance(z[alive], stats.norm.cdf)))
        t_prev = float(t)
    statistics = [row[1] for row in rows]
    return {
        "rows": rows,
        "monotone": bool(np.all(np.diff(statistics) < 0)),
        "final_ks": statistics[-1],
        "passed": bool(statistics[-1] <= threshold and np.all(np.diff(statistics) < 0)),
        "escaped": int((~alive).sum()),
    }


def time_average(spec: PotentialSpec, F, t_end, n_paths=64, dt=0.01, noise_seed=1, z0=0.0, chunk=1.0):
    """Per-path averages ``(1/t) int_0^t F(tau, X_tau) d tau`` (left-point rule on the step grid).

    ``F`` receives the step time (which indexes the environment flow) and an
    array of positions. Averages over the first and second halves of the
    horizon are reported as well, and ``spread`` is the cross-path standard
    deviation of the averages. On a sampled path the flow stretches the
    abscissa by ``e^{t/2}``, so horizons are limited by the window cap.
    """
    _require_stationary(spec)
    ids = np.arange(n_paths)
    z = np.full(n_paths, float(z0))
    first = np.zeros(n_paths)
    second = np.zeros(n_paths)
    t = 0.0
    n_steps = int(round(t_end / dt))
    steps_per_chunk = max(1, int(round(chunk / dt)))
    done = 0
    while done < n_steps:
        todo = min(steps_per_chunk, n_steps - done)
        t_next = (done + todo) * dt
        z_next, gone, (times, paths, _) = propagate(spec, t, z, t_next, dt, noise_seed, ids, store_every=1)
        for k in range(todo):
            contribution = np.asarray(F(times[k], paths[k]), dtype=float)
            if done + k < n_steps // 2:
                first += contribution
            else:
                second += contribution
        z, t, done = z_next, t_next, done + todo
        if np.any(gone):
            raise RuntimeError("a path left the represented environment")
    # sums of F values divided by step counts, so a constant F averages exactly
    half = n_steps // 2
    averages = (first + second) / n_steps
    return {
        "averages": averages,
        "first_half": first / half,
        "second_half": second / (n_steps - half),
        "spread": float(averages.std(ddof=1)) if n_paths > 1 else 0.0,
    }


def write_series(path, rows):
    """Write ``t,distance,norm_kind,alpha,mode,seed`` rows."""
    with open(path, "w") as handle:
        handle.write("t,distance,norm_kind,alpha,mode,seed\n")
        for row in rows:
            handle.write(",".join(str(v) for v in row) + "\n")
