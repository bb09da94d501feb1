"""Lyapunov families, drift conditions and the discretised coupling construction.

The Lyapunov functions are integrals ``1 + int_0^x exp(E_Delta(t, y)) g(y) dy``
where ``g`` is ``U_alpha'`` (F-family) or ``G_alpha'`` with ``G_alpha =
phi(V_alpha)`` (G-family), and ``E_Delta`` is the time-``t`` view of the gap
between the environment and its affine approximation ``W``.

Everything is evaluated on the level-``L`` piecewise-linear model of the
environment, the same model from which the approximation takes its node
values. ``W`` is never materialised: once its pieces are finer than the dyadic
cells it coincides with the model except on the pieces that straddle a dyadic
knot, so only those breakpoints enter the knot set. Between consecutive knots
both ``E_Delta`` and ``W`` are affine, and the integrals are computed piecewise
by Gauss-Legendre rules of two orders whose disagreement bounds the error.

Values grow like ``U_alpha`` (up to ``exp(x^2/4)``), so the engine works with
quantities divided by the weight and keeps the weight's logarithm separately.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .env import Environment, _grid_values, holder_seminorm, piece_count
from .errors import (
    DegenerateEnvironment,
    NegativeResidual,
    NotACouplingSet,
    QuadratureNotConverged,
    TailDominated,
    ViolationUnbounded,
)
from .integrate import DEFAULT_DT, propagate
from .measure import U, V, WeightFunction
from .transform import PotentialSpec

DEFAULT_LEVEL = 8
DEFAULT_N_MAX = 255
QUADRATURE_TOL = 1e-9
SHELL_FRACTION = 0.9

_GL5 = np.polynomial.legendre.leggauss(5)
_GL7 = np.polynomial.legendre.leggauss(7)


# smoothing function ---------------------------------------------------------------


def _blend(s):
    # quintic with p(0)=1, p(1)=3, p'(0)=p''(0)=0, p'(1)=1, p''(1)=0
    return 1.0 + s**3 * (16.0 - 23.0 * s + 9.0 * s * s)


def phi(v):
    """C^2 function equal to 1 on ``[1, 2]`` and to ``v`` on ``[3, inf)``."""
    v = np.asarray(v, dtype=float)
    s = np.clip(v - 2.0, 0.0, 1.0)
    return np.where(v >= 3.0, v, _blend(s))


def phi_prime(v):
    v = np.asarray(v, dtype=float)
    s = np.clip(v - 2.0, 0.0, 1.0)
    inner = s * s * (48.0 - 92.0 * s + 45.0 * s * s)
    return np.where(v >= 3.0, 1.0, inner)


def phi_second(v):
    v = np.asarray(v, dtype=float)
    s = np.clip(v - 2.0, 0.0, 1.0)
    inner = s * (96.0 - 276.0 * s + 180.0 * s * s)
    return np.where(v >= 3.0, 0.0, inner)


def check_phi(samples=100_001):
    """Verify ``phi(v) <= v`` on a fine grid of ``[1, 4]``; returns the smallest slack."""
    v = np.linspace(1.0, 4.0, samples)
    slack = float(np.min(v - phi(v)))
    if slack < -1e-14:
        raise ValueError("smoothing function exceeds the identity")
    return slack


# the families ------------------------------------------------------------------------


@dataclass(eq=False)
class LyapunovFamily:
    """``F`` (kind ``"F"``) or ``G`` (kind ``"G"``) built on one environment.

    ``hgamma`` and ``eta`` are computed at construction from the environment on
    ``[-(n_max+1), n_max+1]``; the zero environment needs no approximation.
    """

    kind: str
    alpha: float
    env: Environment
    gamma: float = 0.4
    epsilon: float = 0.05
    level: int = DEFAULT_LEVEL
    n_max: int = DEFAULT_N_MAX
    hgamma: float = field(init=False)
    eta: float = field(init=False)

    def __post_init__(self):
        if self.kind not in ("F", "G"):
            raise ValueError("family kind must be 'F' or 'G'")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0.0 < self.gamma < 0.5:
            raise ValueError("gamma must lie in (0, 1/2)")
        if self.kind == "G" and not self.gamma > 0.5 * self.alpha:
            raise ValueError("the G-family needs gamma in (alpha/2, 1/2)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.kind == "G":
            check_phi()
        if self.env.is_zero:
            self.hgamma, self.eta = 0.0, math.inf
            return
        base = self.env.base
        if base.kind == "random-wiener":
            base.widen_to(self.n_max + 1)
        self.hgamma = holder_seminorm(base, self.gamma, self.n_max, self.level)
        if self.hgamma == 0.0:
            raise DegenerateEnvironment("Hölder seminorm vanishes")
        self.eta = (self.epsilon / self.hgamma) ** (1.0 / self.gamma)

    @property
    def weight(self) -> WeightFunction:
        return U(self.alpha) if self.kind == "F" else V(self.alpha)

    def target(self, x):
        """``U_alpha`` or ``G_alpha``: the function the family approximates."""
        w = self.weight(x)
        return w if self.kind == "F" else phi(w)

    def sandwich(self, r, T):
        """``Psi = exp(q eps)`` with ``q = max(1, exp(-(r + 1/4) T))``."""
        q = max(1.0, math.exp(-(r + 0.25) * T))
        return math.exp(q * self.epsilon)

    # integrand g and its derivative, divided by the weight
    def _g_over_w(self, y):
        a = self.alpha
        if self.kind == "F":
            return a * y
        ay = np.abs(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            dv = np.where(ay > 0, a * ay ** (a - 1.0) * np.sign(y), 0.0)
        return phi_prime(np.exp(ay**a)) * dv

    def _dg_over_w(self, y):
        a = self.alpha
        if self.kind == "F":
            return a * (1.0 + a * y * y)
        ay = np.abs(y)
        v = np.exp(ay**a)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            first = np.where(ay > 0, a * ay ** (a - 1.0), 0.0)
            second = np.where(ay > 0, a * a * ay ** (2 * a - 2.0) + a * (a - 1.0) * ay ** (a - 2.0), 0.0)
        # phi'' vanishes outside V in [2, 3], where V is moderate
        curvature = np.where((v > 2.0) & (v < 3.0), phi_second(v) * np.minimum(v, 3.0), 0.0)
        return curvature * first * first + phi_prime(v) * second

    def _smoothness_knots(self):
        if self.kind == "F":
            return np.empty(0)
        edges = np.array([math.log(2.0), math.log(3.0)]) ** (1.0 / self.alpha)
        return np.concatenate((-edges, edges))


# knot structure of the environment model --------------------------------------------


def _model_knots(family: LyapunovFamily, reach):
    """Knots ``u`` (unscaled coordinates) on ``[-reach, reach]`` with ``theta_L(u)`` and ``W(u)``."""
    cells = int(math.ceil(reach))
    base = family.env.base
    scale = 2**family.level
    if base.kind == "random-wiener":
        base.widen_to(cells)
    grid = np.arange(-cells * scale, cells * scale + 1) / scale
    values = np.asarray(_grid_values(base, -cells, cells, family.level), dtype=float)
    dyadic_fraction = np.arange(scale + 1) / scale
    needed = []
    for n in range(cells):
        m = piece_count(n, family.gamma, family.eta)
        if m <= 2 * scale:
            local = np.arange(m + 1) / m
        else:
            # only the pieces straddling a dyadic knot differ from the model
            k = np.floor(dyadic_fraction * m)
            local = np.concatenate((k, np.minimum(k + 1, m))) / m
        needed.append(n + local)
        needed.append(-(n + local))
    breakpoints = np.unique(np.concatenate(needed))
    w_values = np.interp(breakpoints, grid, values)
    knots = np.unique(np.concatenate((breakpoints, grid)))
    return knots, np.interp(knots, grid, values), np.interp(knots, breakpoints, w_values)


@dataclass
class FamilyValues:
    """Family value and chain-rule parts at ``x``, each divided by ``exp(log_weight)``."""

    x: np.ndarray
    log_weight: np.ndarray
    value: np.ndarray
    spatial: np.ndarray
    time: np.ndarray

    def unscaled(self, name):
        with np.errstate(over="ignore"):
            return getattr(self, name) * np.exp(self.log_weight)

    def log_positive(self, scaled):
        """``log`` of ``scaled * weight`` where positive, ``-inf`` elsewhere."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(scaled > 0, np.log(np.where(scaled > 0, scaled, 1.0)) + self.log_weight, -np.inf)


def _gauss(lo, hi, integrand, rule):
    nodes, weights = rule
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    y = mid[:, None] + half[:, None] * nodes[None, :]
    values = integrand(y)
    return [(v * weights[None, :]).sum(axis=1) * half for v in values]


def _signed_cumulative(scaled, log_scale):
    # running sum of scaled * exp(log_scale), returned divided by exp(log_scale)
    with np.errstate(divide="ignore"):
        pos = np.logaddexp.accumulate(np.log(np.maximum(scaled, 0.0)) + log_scale)
        neg = np.logaddexp.accumulate(np.log(np.maximum(-scaled, 0.0)) + log_scale)
    return np.exp(pos - log_scale) - np.exp(neg - log_scale)


def evaluate_family(spec: PotentialSpec, family: LyapunovFamily, t, x, tol=QUADRATURE_TOL) -> FamilyValues:
    """Family value and both chain-rule parts at time ``t`` for the points ``x``.

    ``spatial`` is ``A_t F = exp(E_Delta) (g' - E_W' g - a x g) / 2`` and
    ``time`` is ``d_t F = exp(E_Delta) x g / 2 - (F - 1)/2
    - int_0^x exp(E_Delta) (y g'/2 + beta E_Delta g) dy``. At a knot the
    right-hand piece of ``W`` is used for ``E_W'``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    view = spec.environment_at(t)
    amplitude, factor = view.amplitude, view.factor
    beta = spec.beta
    reach = float(np.max(np.abs(x))) if x.size else 0.0
    extra = np.concatenate((x, [0.0], family._smoothness_knots()))
    if view.is_zero or family.env.is_zero:
        step = 1.0 / 64.0
        span = math.ceil(reach / step) + 1
        knots_y = np.unique(np.concatenate((np.arange(-span, span + 1) * step, extra)))
        delta_y = np.zeros(knots_y.size)
        w_y = np.zeros(knots_y.size)
        w_slope_scale = 0.0
    else:
        u, theta_u, w_u = _model_knots(family, factor * reach + 1.0)
        y_model = u / factor
        knots_y = np.unique(np.concatenate((y_model, extra)))
        theta_y = np.interp(knots_y, y_model, theta_u)
        w_y = np.interp(knots_y, y_model, w_u)
        delta_y = theta_y - w_y
        w_slope_scale = amplitude
    keep = np.abs(knots_y) <= reach
    knots_y, delta_y, w_y = knots_y[keep], delta_y[keep], w_y[keep]
    e_delta = amplitude * delta_y
    lo, hi = knots_y[:-1], knots_y[1:]
    width = hi - lo
    with np.errstate(divide="ignore", invalid="ignore"):
        e_slope = np.where(width > 0, np.diff(e_delta) / width, 0.0)
        w_slope = np.where(width > 0, np.diff(w_y) / width, 0.0)
    weight = family.weight
    outer = np.where(np.abs(hi) > np.abs(lo), hi, lo)
    log_scale = weight.log(outer)

    def integrand(y):
        ed = e_delta[:-1, None] + e_slope[:, None] * (y - lo[:, None])
        rel = np.exp(ed + weight.log(y) - log_scale[:, None])
        g = family._g_over_w(y) * rel
        dg = family._dg_over_w(y) * rel
        return g, 0.5 * y * dg + beta * ed * g, np.abs(g) + np.abs(0.5 * y * dg) + np.abs(beta * ed * g)

    i1_7, i2_7, mag = _gauss(lo, hi, integrand, _GL7)
    i1_5, i2_5, _ = _gauss(lo, hi, integrand, _GL5)
    err = np.maximum(np.abs(i1_7 - i1_5), np.abs(i2_7 - i2_5))
    if np.any(err > tol * mag + 1e-300):
        worst = int(np.argmax(err - tol * mag))
        raise QuadratureNotConverged(f"cell [{lo[worst]}, {hi[worst]}]: error {err[worst]:.3e} over tolerance")

    origin = int(np.searchsorted(knots_y, 0.0))
    i1 = np.zeros(knots_y.size)
    i2 = np.zeros(knots_y.size)
    # outward from 0 on each side; cells left of the origin integrate towards it
    if origin < knots_y.size - 1:
        i1[origin + 1 :] = _signed_cumulative(i1_7[origin:], log_scale[origin:])
        i2[origin + 1 :] = _signed_cumulative(i2_7[origin:], log_scale[origin:])
    if origin > 0:
        i1[:origin] = -_signed_cumulative(i1_7[:origin][::-1], log_scale[:origin][::-1])[::-1]
        i2[:origin] = -_signed_cumulative(i2_7[:origin][::-1], log_scale[:origin][::-1])[::-1]
    # cumulative values were scaled by the outer cell end, i.e. by the knot itself
    idx = np.searchsorted(knots_y, x)
    lw = weight.log(x)
    i1_x, i2_x = i1[idx], i2[idx]
    ed_x = e_delta[idx]
    right_slope = w_slope[np.minimum(idx, lo.size - 1)] if lo.size else np.zeros_like(x)
    # E_W' = amplitude * factor * W'(factor y); w_slope is already per unit y
    ew_slope = w_slope_scale * right_slope
    g, dg = family._g_over_w(x), family._dg_over_w(x)
    e = np.exp(ed_x)
    value = np.exp(-lw) + i1_x
    spatial = 0.5 * e * (dg - ew_slope * g - spec.a * x * g)
    time_part = 0.5 * e * x * g - 0.5 * i1_x - i2_x
    return FamilyValues(x, lw, value, spatial, time_part)


def family_values(spec: PotentialSpec, family: LyapunovFamily, t, x):
    """``F(t, x)`` (or ``G(t, x)``)."""
    return evaluate_family(spec, family, t, x).unscaled("value")


def chain_rule_apply(spec: PotentialSpec, family: LyapunovFamily, t, x):
    """``(A_t F, d_t F)`` at ``(t, x)``."""
    values = evaluate_family(spec, family, t, x)
    spatial, time_part = values.unscaled("spatial"), values.unscaled("time")
    if np.ndim(x) == 0:
        return float(spatial[0]), float(time_part[0])
    return spatial, time_part


# generator-level drift -----------------------------------------------------------------


@dataclass
class DriftReport:
    """Outcome of a generator-level drift check.

    ``B_realized`` is the grid supremum of ``L F + lambda F`` (``log_B_realized``
    keeps it representable when it overflows).
    """

    lam: float
    times: np.ndarray
    extent: float
    n_points: int
    B_realized: float
    log_B_realized: float
    max_violation: float
    argmax: tuple
    hgamma: float
    unbounded: bool
    family_kind: str
    alpha: float
    gamma: float
    epsilon: float
    env_seed: int
    B_bound: float | None = None
    log_B_bound: float | None = None
    bound: "BoundFit | None" = None

    def with_bound(self, fit: "BoundFit") -> "DriftReport":
        self.bound = fit
        self.log_B_bound = fit.log_bound(self.hgamma)
        with np.errstate(over="ignore"):
            self.B_bound = float(np.exp(self.log_B_bound))
        return self

    @property
    def within_bound(self) -> bool:
        return self.log_B_bound is not None and self.log_B_realized <= self.log_B_bound

    def dumps(self) -> str:
        rows = [
            ("family", self.family_kind), ("alpha", self.alpha), ("gamma", self.gamma), ("epsilon", self.epsilon),
            ("env_seed", self.env_seed), ("lambda", self.lam), ("times", " ".join(f"{t:g}" for t in self.times)),
            ("extent", self.extent), ("points_per_time", self.n_points), ("hgamma", self.hgamma),
            ("B_realized", self.B_realized), ("log_B_realized", self.log_B_realized),
            ("max_violation", self.max_violation), ("argmax_t", self.argmax[0]), ("argmax_x", self.argmax[1]),
            ("unbounded", self.unbounded),
        ]
        if self.bound is not None:
            rows += [("log_k", self.bound.log_k), ("c", self.bound.c), ("p", self.bound.p),
                     ("log_B_bound", self.log_B_bound), ("within_bound", self.within_bound)]
        return "key\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in rows)


def _default_grid(spec, family, t, extent):
    # midpoints of the model cells as seen at time t, so every slope of W is sampled
    view = spec.environment_at(t)
    if view.is_zero or family.env.is_zero:
        step = 1.0 / 256.0
    else:
        step = 2.0 ** -family.level / view.factor
    count = int(extent / step)
    return (np.arange(-count, count) + 0.5) * step


def _generator_on_grid(spec, family, lam, times, extent, x_grid):
    best_log, best_raw, best_at = -math.inf, -math.inf, (0.0, 0.0)
    shell_positive = False
    n_points = 0
    for t in times:
        x = _default_grid(spec, family, t, extent) if x_grid is None else np.asarray(x_grid, dtype=float)
        n_points = x.size
        vals = evaluate_family(spec, family, t, x)
        scaled = vals.spatial + vals.time + lam * vals.value
        logs = vals.log_positive(scaled)
        k = int(np.argmax(logs))
        if logs[k] > best_log:
            best_log, best_at = float(logs[k]), (float(t), float(x[k]))
        if best_log == -math.inf:
            with np.errstate(over="ignore"):
                raw = scaled * np.exp(vals.log_weight)
            k = int(np.argmax(raw))
            if raw[k] > best_raw:
                best_raw, best_at = float(raw[k]), (float(t), float(x[k]))
        shell = np.abs(x) >= SHELL_FRACTION * np.max(np.abs(x))
        shell_positive |= bool(np.any(scaled[shell] > 0))
    if best_log > -math.inf:
        value = math.exp(best_log) if best_log < 709.0 else math.inf
    else:
        value = best_raw
    return value, best_log, best_at, shell_positive, n_points


def lyapunov_generator_check(
    spec: PotentialSpec,
    family: LyapunovFamily,
    lam: float,
    T: float = 1.0,
    extent: float = 6.0,
    t_points: int = 5,
    x_grid=None,
    adaptive: bool = False,
    max_extent: float = 400.0,
    report_only: bool = False,
) -> DriftReport:
    """Evaluate ``L F + lambda F`` on ``[0, T] x [-extent, extent]``.

    Positive values on the outer tenth of the grid mean the supremum is not yet
    attained. With ``adaptive`` the grid is widened by half until that shell is
    clear (up to ``max_extent``); otherwise, or when the cap is hit,
    :class:`ViolationUnbounded` is raised unless ``report_only`` is set.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    times = np.linspace(0.0, T, t_points) if t_points > 1 else np.array([0.0])
    while True:
        value, log_value, at, shell_positive, n_points = _generator_on_grid(spec, family, lam, times, extent, x_grid)
        if not shell_positive or not adaptive or x_grid is not None or extent >= max_extent:
            break
        extent = min(extent * 1.5, max_extent)
    if shell_positive and not report_only:
        raise ViolationUnbounded(f"L F + lambda F is positive on the grid boundary |x| ~ {extent:g}")
    return DriftReport(
        lam, times, extent, n_points, value, log_value, 0.0, at, family.hgamma, shell_positive,
        family.kind, family.alpha, family.gamma, family.epsilon, family.env.seed,
    )


@dataclass(frozen=True)
class BoundFit:
    """``log B <= log_k + c * H^p`` fitted on calibration seeds."""

    log_k: float
    c: float
    p: float
    calibration_seeds: tuple = ()
    margin: float = 0.0

    def log_bound(self, hgamma):
        return self.log_k + self.c * float(hgamma) ** self.p


def fit_bound(hgammas, log_b, p_grid=(0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0), margin=None,
              seeds=()) -> BoundFit:
    """Least-squares fit of ``log B`` against ``H^p`` (``c >= 0``) with the intercept raised to cover every point.

    On top of the largest residual the intercept gets ``margin``; the default
    is three residual standard deviations, since fresh seeds scatter about as
    much as the calibration ones.
    """
    h = np.asarray(hgammas, dtype=float)
    y = np.asarray(log_b, dtype=float)
    if h.size < 2:
        raise ValueError("need at least two calibration points")
    best = None
    for p in p_grid:
        z = h**p
        design = np.column_stack((np.ones_like(z), z))
        (intercept, slope), *_ = np.linalg.lstsq(design, y, rcond=None)
        if slope < 0:
            slope, intercept = 0.0, float(np.mean(y))
        residual = y - intercept - slope * z
        score = float(np.sum(residual**2))
        if best is None or score < best[0]:
            extra = 3.0 * float(np.std(residual, ddof=1)) if margin is None else float(margin)
            best = (score, p, intercept + float(np.max(residual)) + extra, slope, extra)
    _, p, log_k, c, extra = best
    return BoundFit(float(log_k), float(c), float(p), tuple(seeds), extra)


# kernel-level drift ---------------------------------------------------------------


@dataclass
class KernelDriftReport:
    x_grid: np.ndarray
    mean: np.ndarray
    standard_error: np.ndarray
    upper: np.ndarray
    weight_values: np.ndarray
    coefficient: float
    B: float
    set_level: float
    tail_dominated: np.ndarray
    s: float
    t: float
    n_replicas: int
    noise_seed: int
    weight: WeightFunction

    @property
    def rejected(self) -> bool:
        return bool(np.any(self.tail_dominated))

    @property
    def ratio(self):
        return self.mean / self.weight_values

    def in_set(self, x):
        """Membership of ``x`` in ``{weight <= B / kappa}``."""
        return self.weight(x) <= self.set_level

    def dumps(self) -> str:
        head = f"# s={self.s} t={self.t} n={self.n_replicas} seed={self.noise_seed} B={self.B} c_t={self.coefficient}\n"
        lines = ["x\tmean\tse\tupper\tweight\ttail_dominated"]
        for row in zip(self.x_grid, self.mean, self.standard_error, self.upper, self.weight_values, self.tail_dominated):
            lines.append("\t".join(str(v) for v in row))
        return head + "\n".join(lines) + "\n"


def tail_share(values, fraction=0.1):
    """Share of the total carried by the largest ``fraction`` of the values."""
    values = np.sort(np.asarray(values, dtype=float))
    top = max(1, int(math.ceil(fraction * values.size)))
    total = values.sum()
    return float(values[-top:].sum() / total) if total > 0 else 0.0


def kernel_drift_check(
    spec: PotentialSpec,
    alpha: float,
    eta: float,
    kappa: float,
    tau: float,
    T: float,
    x_grid,
    n_replicas: int,
    s: float = 0.0,
    weight: str = "U",
    dt: float = DEFAULT_DT,
    noise_seed: int = 1,
) -> KernelDriftReport:
    """Monte Carlo check of ``P_{s,s+T} W <= (eta + kappa + 1{T <= tau}) W + B 1{W <= B/kappa}``.

    ``B`` is the smallest value (at least 1) making the inequality hold at the
    upper confidence bound ``mean + 3 SE`` for every grid point.
    """
    w = U(alpha) if weight == "U" else V(alpha)
    x_grid = np.atleast_1d(np.asarray(x_grid, dtype=float))
    coefficient = eta + kappa + (1.0 if T <= tau else 0.0)
    means, ses, tails = [], [], []
    ids = np.arange(n_replicas)
    for i, x in enumerate(x_grid):
        z, gone, _ = propagate(spec, s, x, s + T, dt, rng.derive_seed(noise_seed, i), ids)
        values = w(z[~gone])
        means.append(values.mean())
        ses.append(values.std(ddof=1) / math.sqrt(values.size))
        dominated = tail_share(values) > 0.5
        if dominated:
            warnings.warn(f"tail-dominated weighted average at x={x}", TailDominated, stacklevel=2)
        tails.append(dominated)
    mean, se = np.array(means), np.array(ses)
    upper = mean + 3.0 * se
    wx = w(x_grid)
    excess = upper - coefficient * wx
    violating = excess > 0
    B = 1.0
    if np.any(violating):
        B = max(B, float(np.max(np.maximum(excess[violating], kappa * wx[violating]))))
    return KernelDriftReport(
        x_grid, mean, se, upper, wx, coefficient, B, B / kappa, np.array(tails), s, s + T, n_replicas, noise_seed, w
    )


# discretised kernel and coupling ------------------------------------------------------


@dataclass
class DiscreteKernel:
    """One-unit transition probabilities between cells centred on ``states``."""

    states: np.ndarray
    rows: np.ndarray
    edges: np.ndarray
    env_seed: int
    t0: float
    n_per_state: int
    noise_seed: int

    def __post_init__(self):
        sums = self.rows.sum(axis=1)
        if np.any(self.rows < 0) or np.max(np.abs(sums - 1.0)) > 1e-9:
            raise ValueError("kernel rows must be probability vectors")

    @property
    def size(self):
        return self.states.size

    def dumps(self) -> str:
        head = f"# env_seed={self.env_seed} t0={self.t0} n_per_state={self.n_per_state} noise_seed={self.noise_seed}\n"
        return head + _matrix_block("state", self.states, self.rows)


def state_cells(states):
    """Cell edges halfway between states; the outer cells absorb the tails."""
    states = np.asarray(states, dtype=float)
    inner = 0.5 * (states[1:] + states[:-1])
    return np.concatenate(([-np.inf], inner, [np.inf]))


def estimate_kernel(
    spec: PotentialSpec,
    states=None,
    n_per_state: int = 4000,
    t0: float = 0.0,
    dt: float = DEFAULT_DT,
    noise_seed: int = 1,
    workers: int = 1,
) -> DiscreteKernel:
    """Histogram estimate of ``P_{t0, t0+1}`` on the cells around ``states`` (default 41 points on [-4, 4]).

    Far from the origin the equivalent SDE has a steep diffusion coefficient
    and the Euler bias is ``O(dt)``; at ``dt = 0.01`` it exceeds the Monte Carlo
    noise of the outer rows, hence the finer default.
    """
    states = np.linspace(-4.0, 4.0, 41) if states is None else np.asarray(states, dtype=float)
    edges = state_cells(states)

    def row(i):
        ids = np.arange(n_per_state)
        z, gone, _ = propagate(spec, t0, states[i], t0 + 1.0, dt, rng.derive_seed(noise_seed, i), ids)
        z = z[~gone]
        counts = np.histogram(z, bins=edges)[0].astype(float)
        return counts / counts.sum()

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(row, range(states.size)))
    else:
        rows = [row(i) for i in range(states.size)]
    seed = spec.env.seed if not spec.env.is_zero else 0
    return DiscreteKernel(states, np.array(rows), edges, seed, t0, n_per_state, noise_seed)


@dataclass
class CouplingEstimate:
    coupling_set: tuple
    epsilon_theta: float
    nu: np.ndarray
    residual_R: np.ndarray | None = None
    coupled_P: np.ndarray | None = None
    star_P: np.ndarray | None = None

    def dumps(self) -> str:
        lo, hi = self.coupling_set
        out = [f"# coupling_set={lo}:{hi} epsilon={self.epsilon_theta!r}\n", "cell\tnu\n"]
        out += [f"{i}\t{v!r}\n" for i, v in enumerate(self.nu)]
        for name in ("residual_R", "coupled_P", "star_P"):
            matrix = getattr(self, name)
            if matrix is not None:
                out.append(f"# {name}\n")
                out.append(_matrix_block("pair", np.arange(matrix.shape[0]), matrix))
        return "".join(out)


def _matrix_block(label, index, matrix):
    lines = [label + "\t" + "\t".join(f"c{j}" for j in range(matrix.shape[1]))]
    for i, row in zip(index, matrix):
        lines.append(f"{i}\t" + "\t".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def _set_indices(kernel: DiscreteKernel, c_range):
    lo, hi = c_range
    inside = np.flatnonzero((kernel.states >= lo - 1e-12) & (kernel.states <= hi + 1e-12))
    if inside.size == 0:
        raise ValueError("the coupling range contains no grid state")
    return int(inside[0]), int(inside[-1])


def coupling_set(kernel: DiscreteKernel, c_range) -> CouplingEstimate:
    """Minorisation on the states inside ``c_range = (lo, hi)``: ``epsilon = min(sum of cellwise infima, 1/2)``."""
    i, j = _set_indices(kernel, c_range)
    infima = kernel.rows[i : j + 1].min(axis=0)
    total = float(infima.sum())
    if total <= 0.0:
        raise NotACouplingSet("rows indexed by the set have disjoint supports")
    return CouplingEstimate((i, j), min(total, 0.5), infima / total)


def build_coupling(kernel: DiscreteKernel, estimate: CouplingEstimate) -> CouplingEstimate:
    """Fill in the residual, coupled and star kernels on the product grid.

    Product state ``(x, y)`` is row ``x * n + y``; the column for cell pair
    ``(A, B)`` is ``A * n + B``.
    """
    eps = estimate.epsilon_theta
    if not 0.0 < eps <= 0.5:
        raise ValueError("epsilon must lie in (0, 1/2]")
    n = kernel.size
    lo, hi = estimate.coupling_set
    P = kernel.rows
    residual = (P - eps * estimate.nu[None, :]) / (1.0 - eps)
    in_set = np.zeros(n, dtype=bool)
    in_set[lo : hi + 1] = True
    worst = float(residual[in_set].min())
    if worst < -1e-12:
        raise NegativeResidual(f"residual entry {worst:.3e} below zero; shrink the coupling set")
    residual = np.where(residual < 0, 0.0, residual)
    diagonal = np.zeros(n * n)
    diagonal[np.arange(n) * (n + 1)] = estimate.nu
    R = np.empty((n * n, n * n))
    Pbar = np.empty_like(R)
    star = np.empty_like(R)
    for x in range(n):
        for y in range(n):
            r = x * n + y
            if in_set[x] and in_set[y]:
                R[r] = np.outer(residual[x], residual[y]).ravel()
                Pbar[r] = (1.0 - eps) * R[r] + eps * diagonal
                star[r] = R[r]
            else:
                R[r] = np.outer(P[x], P[y]).ravel()
                Pbar[r] = R[r]
                star[r] = Pbar[r]
    estimate.residual_R, estimate.coupled_P, estimate.star_P = R, Pbar, star
    return estimate


def marginal_defect(kernel: DiscreteKernel, estimate: CouplingEstimate) -> float:
    """Largest deviation of the coupled kernel's marginals from the kernel rows."""
    n = kernel.size
    blocks = estimate.coupled_P.reshape(n, n, n, n)
    first = blocks.sum(axis=3)
    second = blocks.sum(axis=2)
    target_first = np.broadcast_to(kernel.rows[:, None, :], first.shape)
    target_second = np.broadcast_to(kernel.rows[None, :, :], second.shape)
    return float(max(np.max(np.abs(first - target_first)), np.max(np.abs(second - target_second))))


# coupling bound --------------------------------------------------------------------------


def product_max(values, j):
    """Largest product of ``j`` entries with distinct indices (``1`` for ``j = 0``)."""
    values = np.asarray(values, dtype=float)
    if j < 0 or j > values.size:
        raise ValueError("j out of range")
    if np.any(values <= 0):
        raise ValueError("values must be positive")
    if j == 0:
        return 1.0
    return float(np.prod(np.sort(values)[-j:]))


def dm_bound(n, j, rho, eps_seq, B_seq, norm1, norm2):
    """Coupling bound on ``||nu1 P_n - nu2 P_n||`` after ``n`` unit steps.

    ``eps_seq[k]`` and ``B_seq[k]`` belong to the environment after ``k`` steps.
    """
    eps_seq = np.asarray(eps_seq, dtype=float)
    B_seq = np.asarray(B_seq, dtype=float)
    if n < 1 or not 1 <= j <= n + 1:
        raise ValueError("need n >= 1 and 1 <= j <= n + 1")
    if eps_seq.size != n or B_seq.size != n:
        raise ValueError("sequences must have length n")
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    coupled = product_max(1.0 - eps_seq, j) if j <= n else 0.0
    first = 2.0 * rho**n * (coupled + product_max(B_seq, j - 1)) * norm1 * norm2
    tail = sum(rho**k * B_seq[n - k - 1] for k in range(n))
    return float(first + 2.0 * coupled * tail)


def best_dm_bound(n, rho, eps_seq, B_seq, norm1, norm2):
    """Smallest bound over the admissible ``j``, with the minimising ``j``."""
    bounds = [dm_bound(n, j, rho, eps_seq, B_seq, norm1, norm2) for j in range(1, n + 2)]
    j = int(np.argmin(bounds))
    return bounds[j], j + 1


def coupling_constant(B_tilde, rho, kappa):
    """``max((rho B/kappa + B) / rho, B)``: the constant entering the bound given a kernel drift constant."""
    return max((rho * B_tilde / kappa + B_tilde) / rho, B_tilde)
