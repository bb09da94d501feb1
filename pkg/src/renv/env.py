"""Two-sided Brownian environments on dyadic grids.

A random path is stored as its values on the base dyadic grid of step
``2**-base_level`` and refined on demand by Brownian-bridge midpoints. Every
Gaussian used for a base increment or a midpoint is drawn from a
counter-based stream keyed by ``(seed, level, dyadic index)``, so values do
not depend on the order of queries or on how far the window has been
widened.

Besides random paths the module knows three analytic environments (zero,
the square-root cusp and straight lines), lazy scaling/flow views, the
weighted Hölder seminorm and the piecewise-linear approximation built from
it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from ._accel import njit, pick
from .errors import DegenerateEnvironment, OutOfWindow

KINDS = ("random-wiener", "deterministic-sqrt", "zero", "synthetic-linear")
DEFAULT_HALF_WIDTH = 64.0
DEFAULT_BASE_LEVEL = 4
DEFAULT_MAX_LEVEL = 24
DEFAULT_WINDOW_CAP = 2.0**16
DEFAULT_HOLDER_LEVEL = 8


def log_weight(x):
    """The slowly growing weight ``sqrt(1 + log(1 + |x|))``."""
    return np.sqrt(1.0 + np.log1p(np.abs(x)))


class Environment:
    """Common interface of paths and their lazy views."""

    base: "EnvironmentPath"
    amplitude: float = 1.0
    factor: float = 1.0

    @property
    def kind(self) -> str:
        return self.base.kind

    @property
    def seed(self) -> int:
        return self.base.seed

    @property
    def half_width(self) -> float:
        return self.base.half_width / self.factor

    @property
    def is_zero(self) -> bool:
        return self.base.kind == "zero" or self.amplitude == 0.0

    def evaluate(self, x, level=None):
        """Environment value at ``x``.

        Random paths snap ``x`` to the nearest dyadic point of the maximum
        refinement level; passing ``level`` switches to linear interpolation
        between the dyadic points of that level instead.
        """
        scaled = np.multiply(self.factor, x)
        return self.amplitude * self.base._raw(scaled, level)

    def scaled(self, amplitude, factor) -> "EnvironmentView":
        """View ``x -> amplitude * self(factor * x)``."""
        return EnvironmentView(self.base, self.amplitude * amplitude, self.factor * factor)

    def rebased(self, rate, shift) -> "EnvironmentView":
        """The environment seen from time ``shift``: ``exp(-rate*shift) * T_shift``."""
        return self.scaled(math.exp(-(rate + 0.25) * shift), math.exp(0.5 * shift))


@dataclass(eq=False)
class EnvironmentPath(Environment):
    """A realisation of the environment on ``[-half_width, half_width]``."""

    seed: int = 0
    half_width: float = DEFAULT_HALF_WIDTH
    base_level: int = DEFAULT_BASE_LEVEL
    kind: str = "random-wiener"
    slope: float = 0.0
    max_level: int = DEFAULT_MAX_LEVEL
    window_cap: float = DEFAULT_WINDOW_CAP
    _positive: np.ndarray = field(default=None, repr=False)
    _negative: np.ndarray = field(default=None, repr=False)
    _levels: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.half_width <= 0 or self.base_level < 0:
            raise ValueError("half_width must be positive and base_level non-negative")
        self.seed = int(self.seed)
        self._key = rng.seed_key(self.seed)
        if self.kind == "random-wiener" and self._positive is None:
            self._positive = np.zeros(1)
            self._negative = np.zeros(1)
            self._extend_base(self._base_count(self.half_width))

    # views -----------------------------------------------------------------
    @property
    def base(self):
        return self

    @property
    def amplitude(self):
        return 1.0

    @property
    def factor(self):
        return 1.0

    # base grid ---------------------------------------------------------------
    def _base_count(self, extent):
        return int(math.ceil(extent * 2**self.base_level))

    def _extend_base(self, count):
        have = self._positive.shape[0] - 1
        if count <= have:
            return
        scale = 2.0 ** (-0.5 * self.base_level)
        index = np.arange(1, count + 1, dtype=np.int64)
        steps_pos = rng.keyed_normals(self.seed, index, self.base_level, rng.TAG_ENV_POSITIVE) * scale
        steps_neg = rng.keyed_normals(self.seed, index, self.base_level, rng.TAG_ENV_NEGATIVE) * scale
        self._positive = np.concatenate(([0.0], np.cumsum(steps_pos)))
        self._negative = np.concatenate(([0.0], np.cumsum(steps_neg)))

    def widen_to(self, extent):
        """Double the window until it covers ``extent``; values never change."""
        extent = abs(float(extent))
        if extent <= self.half_width:
            return self
        width = self.half_width
        while width < extent:
            width *= 2.0
        if width > self.window_cap:
            raise OutOfWindow(extent, self.window_cap)
        self.half_width = width
        if self.kind == "random-wiener":
            self._extend_base(self._base_count(width))
        return self

    def base_grid(self):
        """Abscissas and values on the stored base grid."""
        if self.kind != "random-wiener":
            count = self._base_count(self.half_width)
            xs = np.arange(-count, count + 1) * 2.0**-self.base_level
            return xs, self._raw(xs, None)
        count = self._base_count(self.half_width)
        xs = np.arange(-count, count + 1) * 2.0**-self.base_level
        values = np.concatenate((self._negative[count:0:-1], self._positive[: count + 1]))
        return xs, values

    def _base_lookup(self, k):
        limit = self._base_count(self.half_width)
        if k.size and np.max(np.abs(k)) > limit:
            bad = k[np.argmax(np.abs(k))] * 2.0**-self.base_level
            raise OutOfWindow(float(bad), self.half_width)
        out = np.where(k >= 0, self._positive[np.abs(k)], self._negative[np.abs(k)])
        return out

    # dyadic values -----------------------------------------------------------
    def _bridge_std(self, level):
        return math.sqrt(2.0 ** (-level - 1))

    def dyadic_values(self, level, k):
        """Path values at the dyadic points ``k * 2**-level``."""
        k = np.asarray(k, dtype=np.int64)
        if level <= self.base_level:
            stride = 1 << (self.base_level - level)
            return self._base_lookup(k * stride)
        even = (k & 1) == 0
        parents = np.concatenate((k[even] >> 1, (k[~even] - 1) >> 1, (k[~even] + 1) >> 1))
        unique, inverse = np.unique(parents, return_inverse=True)
        parent_values = self.dyadic_values(level - 1, unique)[inverse]
        n_even = int(even.sum())
        n_odd = k.size - n_even
        out = np.empty(k.shape)
        out[even] = parent_values[:n_even]
        left = parent_values[n_even : n_even + n_odd]
        right = parent_values[n_even + n_odd :]
        noise = rng.keyed_normals(self.seed, k[~even], level, rng.TAG_ENV_BRIDGE)
        out[~even] = 0.5 * (left + right) + self._bridge_std(level) * noise
        return out

    def level_slice(self, level, k_lo, k_hi):
        """Values at ``k * 2**-level`` for every integer ``k`` in ``[k_lo, k_hi]``.

        Bit-identical to :meth:`dyadic_values`; cached per level because the
        pseudo-scale tables request overlapping contiguous ranges repeatedly.
        """
        k_lo, k_hi = int(k_lo), int(k_hi)
        if self.kind != "random-wiener":
            return self._raw(np.arange(k_lo, k_hi + 1) * 2.0**-level, None)
        if level <= self.base_level:
            stride = 1 << (self.base_level - level)
            return self._base_lookup(np.arange(k_lo, k_hi + 1, dtype=np.int64) * stride)
        cached = self._levels.get(level)
        if cached is not None and cached[0] <= k_lo and k_hi <= cached[0] + cached[1].size - 1:
            start = k_lo - cached[0]
            return cached[1][start : start + k_hi - k_lo + 1]
        lo, hi = k_lo, k_hi
        if cached is not None:
            span = cached[1].size
            lo = min(lo, cached[0] - span // 2)
            hi = max(hi, cached[0] + span - 1 + span // 2)
        limit = int(math.floor(self.half_width * 2**level))
        lo = max(lo, -limit)
        hi = min(hi, limit)
        lo -= lo & 1
        hi += hi & 1
        parent = self.level_slice(level - 1, lo >> 1, hi >> 1)
        values = np.empty(hi - lo + 1)
        values[0::2] = parent
        odd = np.arange(lo + 1, hi, 2, dtype=np.int64)
        noise = rng.keyed_normals(self.seed, odd, level, rng.TAG_ENV_BRIDGE)
        values[1::2] = 0.5 * (parent[:-1] + parent[1:]) + self._bridge_std(level) * noise
        self._levels[level] = (lo, values)
        start = k_lo - lo
        return values[start : start + k_hi - k_lo + 1]

    def refine(self, level):
        """Materialise the whole window at ``level`` (purely a cache warm-up)."""
        count = int(math.floor(self.half_width * 2**level))
        self.level_slice(level, -count, count)
        return self

    # evaluation --------------------------------------------------------------
    def _raw(self, x, level):
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x) if x.ndim else 0.0
        if self.kind == "synthetic-linear":
            return self.slope * x
        if self.kind == "deterministic-sqrt":
            return np.sqrt(np.abs(x))
        if x.size and np.max(np.abs(x)) > self.half_width:
            raise OutOfWindow(float(x.flat[np.argmax(np.abs(x))]), self.half_width)
        flat = x.ravel()
        if level is None:
            k = np.rint(flat * 2.0**self.max_level).astype(np.int64)
            out = self.dyadic_values(self.max_level, k)
        else:
            u = flat * 2.0**level
            edge = int(math.floor(self.half_width * 2**level))
            k = np.clip(np.floor(u).astype(np.int64), -edge, edge - 1)
            w = u - k
            both = self.dyadic_values(level, np.concatenate((k, k + 1)))
            out = (1.0 - w) * both[: k.size] + w * both[k.size :]
        return out.reshape(x.shape) if x.ndim else float(out[0])


@dataclass(eq=False)
class EnvironmentView(Environment):
    """Lazy view ``x -> amplitude * base(factor * x)``."""

    base: EnvironmentPath
    amplitude: float = 1.0
    factor: float = 1.0

    def __post_init__(self):
        if self.factor <= 0:
            raise ValueError("view factor must be positive")


def sample_path(seed, half_width=DEFAULT_HALF_WIDTH, base_level=DEFAULT_BASE_LEVEL, **options):
    """Random Wiener path keyed by ``seed`` on ``[-half_width, half_width]``."""
    return EnvironmentPath(seed=seed, half_width=half_width, base_level=base_level, **options)


def analytic_path(kind, slope=0.0, half_width=DEFAULT_HALF_WIDTH):
    """One of the closed-form environments (``zero``, ``deterministic-sqrt``, ``synthetic-linear``)."""
    if kind == "random-wiener":
        raise ValueError("use sample_path for random environments")
    return EnvironmentPath(seed=0, half_width=half_width, kind=kind, slope=slope, window_cap=math.inf)


def evaluate(env, x, level=None):
    return env.evaluate(x, level)


def scale(env, lam):
    """Brownian scaling view ``x -> env(lam * x) / sqrt(lam)``."""
    if lam <= 0:
        raise ValueError("scaling factor must be positive")
    return env.scaled(1.0 / math.sqrt(lam), lam)


def flow(env, t):
    """Flow view ``x -> exp(-t/4) * env(exp(t/2) * x)``."""
    return env.scaled(math.exp(-0.25 * t), math.exp(0.5 * t))


def ou_section(env, x, t_grid):
    """The stationary Ornstein-Uhlenbeck section ``t -> T_t env(x)``."""
    t_grid = np.asarray(t_grid, dtype=float)
    points = np.exp(0.5 * t_grid) * x
    return np.exp(-0.25 * t_grid) * env.evaluate(points)


# Hölder machinery ----------------------------------------------------------


@njit
def _cell_holder_compiled(values, step, gamma):
    best = 0.0
    m = values.shape[0]
    for i in range(m - 1):
        for j in range(i + 1, m):
            ratio = abs(values[j] - values[i]) / ((j - i) * step) ** gamma
            if ratio > best:
                best = ratio
    return best


def _cell_holder_numpy(values, step, gamma):
    best = 0.0
    m = values.shape[0]
    for lag in range(1, m):
        diffs = np.abs(values[lag:] - values[:-lag])
        best = max(best, float(diffs.max()) / (lag * step) ** gamma)
    return best


_cell_holder = pick(_cell_holder_compiled, _cell_holder_numpy)


def _grid_values(env, lo, hi, level):
    """Values at the level-``level`` dyadic points of ``[lo, hi]`` (integers)."""
    base = env.base
    scale_ = 2**level
    if env.factor == 1.0 and env.amplitude == 1.0 and base.kind == "random-wiener":
        return base.level_slice(level, lo * scale_, hi * scale_)
    xs = np.arange(lo * scale_, hi * scale_ + 1) / scale_
    return np.asarray(env.evaluate(xs, level if base.kind == "random-wiener" else None), dtype=float)


def holder_profile(env, gamma, n_max, level=DEFAULT_HOLDER_LEVEL):
    """Per-cell seminorms ``(positive side, negative side)`` for ``n = 0..n_max``.

    Only pairs of dyadic points of ``level`` inside ``[n, n+1]`` are compared,
    so the result is a lower bound for the continuum seminorm that increases
    towards it as ``level`` grows.
    """
    if not 0.0 < gamma < 0.5:
        raise ValueError("gamma must lie in (0, 1/2)")
    if n_max + 1 > env.half_width:
        env.base.widen_to((n_max + 1) * env.factor)
    step = 2.0**-level
    positive = np.empty(n_max + 1)
    negative = np.empty(n_max + 1)
    for n in range(n_max + 1):
        positive[n] = _cell_holder(np.ascontiguousarray(_grid_values(env, n, n + 1, level)), step, gamma)
        negative[n] = _cell_holder(np.ascontiguousarray(_grid_values(env, -n - 1, -n, level)), step, gamma)
    return positive, negative


def holder_seminorm(env, gamma, n_max, level=DEFAULT_HOLDER_LEVEL):
    """Weighted Hölder seminorm truncated at ``n_max`` (discrete evaluation)."""
    positive, negative = holder_profile(env, gamma, n_max, level)
    n = np.arange(n_max + 1)
    return float(np.max((positive + negative) / log_weight(n)))


def piece_count(n, gamma, eta):
    """Number of equal pieces used on the unit cell ``[n, n+1]``."""
    return int(math.floor(float(log_weight(n)) ** (1.0 / gamma) / eta)) + 1


@dataclass(eq=False)
class AffineApproximation:
    """Piecewise-linear interpolant of an environment on a subdivision adapted to its roughness."""

    gamma: float
    epsilon: float
    eta: float
    breakpoints: np.ndarray
    node_values: np.ndarray
    hgamma: float
    n_max: int
    level: int
    slopes: np.ndarray = field(init=False, repr=False)
    cell_starts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.slopes = np.diff(self.node_values) / np.diff(self.breakpoints)
        # index of each integer within the non-negative breakpoints, for O(1) lookup
        positive = self.breakpoints[(self.breakpoints.size - 1) // 2 :]
        self.cell_starts = np.searchsorted(positive, np.arange(self.n_max + 2, dtype=float))

    @property
    def half_width(self):
        return float(self.breakpoints[-1])

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if x.size and np.max(np.abs(x)) > self.half_width:
            raise OutOfWindow(float(np.max(np.abs(x))), self.half_width)
        return np.interp(x, self.breakpoints, self.node_values)

    def slope(self, x):
        """Derivative of the interpolant; at a breakpoint the right-hand piece wins."""
        x = np.asarray(x, dtype=float)
        if x.size and np.max(np.abs(x)) > self.half_width:
            raise OutOfWindow(float(np.max(np.abs(x))), self.half_width)
        idx = np.searchsorted(self.breakpoints, x, side="right") - 1
        idx = np.clip(idx, 0, self.slopes.size - 1)
        return self.slopes[idx]

    def slope_bound(self):
        """The a-priori bound ``eps * (1 + (H/eps)**(1/gamma))`` on the weighted slope."""
        return self.epsilon * (1.0 + (self.hgamma / self.epsilon) ** (1.0 / self.gamma))

    def weighted_max_slope(self):
        """Largest ``|slope| / L(x)**(1/gamma)`` over the pieces (sup at the inner end)."""
        inner = np.minimum(np.abs(self.breakpoints[:-1]), np.abs(self.breakpoints[1:]))
        steep = np.abs(self.slopes)
        power = 1.0 / self.gamma
        # the weight is monotone in |x|, so its values at the unit-cell ends bracket every ratio;
        # the exact weight is only needed where the upper bracket can beat the best lower one
        ends = log_weight(np.arange(self.n_max + 2, dtype=float)) ** power
        cell = np.minimum(inner.astype(np.int64), self.n_max)
        upper = steep / ends[cell]
        floor = float(np.max(steep / ends[cell + 1]))
        candidates = upper >= floor
        return float(np.max(steep[candidates] / log_weight(inner[candidates]) ** power))


def affine_approx(env, gamma, epsilon, n_max=None, level=DEFAULT_HOLDER_LEVEL):
    """Build the approximation with sup-error at most ``epsilon`` on ``[-(n_max+1), n_max+1]``.

    Breakpoint values come from the level-``level`` linear interpolant of the
    path, the same resolution used for the seminorm, which keeps both a-priori
    bounds exact on the discrete model.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if n_max is None:
        n_max = int(env.half_width) - 1
    hgamma = holder_seminorm(env, gamma, n_max, level)
    if hgamma == 0.0:
        raise DegenerateEnvironment("Hölder seminorm vanishes; use the path directly")
    eta = (epsilon / hgamma) ** (1.0 / gamma)
    pieces = []
    for n in range(n_max + 1):
        m = piece_count(n, gamma, eta)
        pieces.append(n + np.arange(m) / m)
    positive = np.concatenate(pieces + [np.array([n_max + 1.0])])
    breakpoints = np.concatenate((-positive[:0:-1], positive))
    if env.base.kind == "random-wiener":
        grid = np.arange(-(n_max + 1) * 2**level, (n_max + 1) * 2**level + 1) * 2.0**-level
        node_values = np.interp(breakpoints, grid, _grid_values(env, -(n_max + 1), n_max + 1, level))
    else:
        node_values = np.asarray(env.evaluate(breakpoints), dtype=float)
    return AffineApproximation(gamma, epsilon, eta, breakpoints, node_values, hgamma, n_max, level)


# export / import -------------------------------------------------------------


def export_path(path: EnvironmentPath, file):
    """Write the base grid as ``abscissa<TAB>value`` lines after a header."""
    xs, values = path.base_grid()
    lines = [
        "# renv environment path",
        f"# seed: {path.seed}",
        f"# kind: {path.kind}",
        f"# half_width: {path.half_width!r}",
        f"# base_level: {path.base_level}",
        f"# slope: {path.slope!r}",
        f"# max_level: {path.max_level}",
        "abscissa\tvalue",
    ]
    lines += [f"{x!r}\t{v!r}" for x, v in zip(xs.tolist(), values.tolist())]
    text = "\n".join(lines) + "\n"
    if hasattr(file, "write"):
        file.write(text)
    else:
        with open(file, "w") as handle:
            handle.write(text)


def import_path(file) -> EnvironmentPath:
    """Inverse of :func:`export_path`; base values are restored bit for bit."""
    if hasattr(file, "read"):
        text = file.read()
    else:
        with open(file) as handle:
            text = handle.read()
    header = {}
    rows = []
    for line in text.splitlines():
        if line.startswith("#"):
            if ":" in line:
                key, value = line[1:].split(":", 1)
                header[key.strip()] = value.strip()
        elif line and not line.startswith("abscissa"):
            x, v = line.split("\t")
            rows.append((float(x), float(v)))
    kind = header["kind"]
    half_width = float(header["half_width"])
    base_level = int(header["base_level"])
    common = dict(
        seed=int(header["seed"]),
        half_width=half_width,
        base_level=base_level,
        kind=kind,
        slope=float(header.get("slope", "0.0")),
        max_level=int(header.get("max_level", DEFAULT_MAX_LEVEL)),
    )
    if kind != "random-wiener":
        return EnvironmentPath(**common, window_cap=math.inf)
    values = np.array([v for _, v in rows])
    count = (values.size - 1) // 2
    positive = values[count:].copy()
    negative = values[count::-1].copy()
    return EnvironmentPath(**common, _positive=positive, _negative=negative)


def approximation_error(env, approx: AffineApproximation):
    """Sup distance between ``approx`` and the level-``approx.level`` interpolant of ``env``.

    Both are piecewise linear and ``approx`` matches the interpolant at its
    breakpoints, so the maximum over the dyadic knots is the exact supremum.
    """
    reach = approx.n_max + 1
    grid = np.arange(-reach * 2**approx.level, reach * 2**approx.level + 1) * 2.0**-approx.level
    values = _grid_values(env, -reach, reach, approx.level)
    return float(np.max(np.abs(approx.value(grid) - values)))


def approximation_report(env, gamma, epsilon, n_max, level=DEFAULT_HOLDER_LEVEL):
    """Sup error, weighted slope and their a-priori bounds for one ``(gamma, epsilon)``."""
    approx = affine_approx(env, gamma, epsilon, n_max=n_max, level=level)
    sup_error = approximation_error(env, approx)
    slope = approx.weighted_max_slope()
    bound = approx.slope_bound()
    return {
        "hgamma": approx.hgamma,
        "pieces": int(approx.breakpoints.size - 1),
        "sup_error": sup_error,
        "weighted_slope": slope,
        "slope_bound": bound,
        "violations": int(sup_error > epsilon) + int(slope > bound),
    }
