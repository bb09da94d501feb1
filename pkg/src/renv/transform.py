"""Potentials, the pseudo-scale map, its inverse and the equivalent-SDE coefficients.

At time ``t`` the potential is ``Q(t, y) = a*y**2/2 + E(t, y)`` where
``E(t, .) = exp(-r t) T_t(env)``. A :class:`PseudoScale` tabulates
``S(t, x) = int_0^x exp(Q(t, y)) dy`` on a uniform grid whose knots coincide
with the dyadic knots of the environment as seen at time ``t``; between knots
the environment is linear, so each cell integral is a closed-form combination
of exponential moments (see :mod:`renv.kernels`). The environment is resolved
at the dyadic level whose knot spacing in ``y`` is closest to ``resolution``.

The time derivative uses the representation obtained by integrating the
``y``-derivative of ``E`` by parts::

    d_t S = x/2 * exp(Q(x)) - S(x)/2 - int_0^x exp(Q) * (a y**2/2 + (r + 1/4) E) dy

which is exact for the tabulated potential, so no finite differences enter
the integrator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .env import Environment
from .errors import BadTimeOrigin, BracketExhausted, NonConfining, OutOfWindow

DEFAULT_RESOLUTION = 2.0**-9
DEFAULT_EXTENT = 8.0
MAX_EXTENT = 24.0
MIN_LEVEL = -40


@dataclass(frozen=True)
class PotentialSpec:
    """Quadratic confinement ``a``, decay rate ``r`` and an environment (path or view)."""

    a: float
    r: float
    env: Environment

    @property
    def beta(self) -> float:
        """The Brox time exponent ``r + 1/4``."""
        return self.r + 0.25

    def environment_at(self, t) -> Environment:
        """The environment term ``exp(-r t) T_t(env)`` as a lazy view."""
        return self.env.rebased(self.r, t)

    def rebased(self, s) -> "PotentialSpec":
        """Same dynamics seen from time ``s``: the environment becomes ``exp(-r s) T_s(env)``."""
        return PotentialSpec(self.a, self.r, self.environment_at(s))

    def require_confining(self):
        if not self.a > 0:
            raise NonConfining(f"quadratic coefficient must be positive, got {self.a}")


def potential(spec: PotentialSpec, t, x):
    """``a x^2/2 + exp(-r t) T_t(env)(x)``."""
    x = np.asarray(x, dtype=float)
    value = 0.5 * spec.a * x * x + spec.environment_at(t).evaluate(x)
    return float(value) if np.ndim(value) == 0 else value


def resolution_level(factor, resolution=DEFAULT_RESOLUTION, max_level=24):
    """Dyadic level whose knot spacing, mapped back by ``factor``, is closest to ``resolution``."""
    level = int(round(math.log2(1.0 / (resolution * factor))))
    return min(max(level, MIN_LEVEL), max_level)


class PseudoScale:
    """Tabulated ``x -> S(t, x)`` with inverse and coefficients.

    The table covers ``[-extent, extent]`` (rounded out to knots) and can be
    widened in place with :meth:`extend`. The attributes read by the kernels
    are ``y0, width, half_a, q, eq, c, w0, w1, w2, s_nodes, j_nodes, with_drift``.
    """

    def __init__(
        self,
        spec: PotentialSpec,
        t: float,
        extent: float = DEFAULT_EXTENT,
        resolution: float = DEFAULT_RESOLUTION,
        level: int | None = None,
        quadrature_tol: float = 1e-9,
        max_extent: float = MAX_EXTENT,
    ):
        self.spec = spec
        self.t = float(t)
        self.resolution = resolution
        self.quadrature_tol = quadrature_tol
        self.max_extent = max_extent
        view = spec.environment_at(self.t)
        self._base = view.base
        self._amplitude = view.amplitude
        self._factor = view.factor
        self.random = self._base.kind == "random-wiener"
        if view.is_zero:
            self.level = None
            self.width = resolution
        else:
            # knots sit at dyadic points of the unscaled path, so they move with the flow
            self.level = resolution_level(self._factor, resolution, self._base.max_level) if level is None else level
            self.width = 2.0**-self.level / self._factor
        self.half_a = 0.5 * spec.a
        self.with_drift = not view.is_zero
        self._build(extent)

    # construction -----------------------------------------------------------
    def _environment_nodes(self, count):
        if self.level is None:
            return np.zeros(2 * count + 1)
        if self.random:
            self._base.widen_to(count * 2.0**-self.level)
        return self._amplitude * self._base.level_slice(self.level, -count, count)

    def _build(self, extent):
        count = int(math.ceil(extent / self.width))
        e = self._environment_nodes(count)  # may raise before any state changes
        self.count = count
        self.extent = count * self.width
        y = np.arange(-count, count + 1) * self.width
        a = self.spec.a
        y_left = y[:-1]
        e_left = e[:-1]
        env_slope = np.diff(e) / self.width
        self.y0 = float(y[0])
        self.q = 0.5 * a * y_left * y_left + e_left
        self.c = a * y_left + env_slope
        beta = self.spec.beta
        self.w0 = 0.5 * a * y_left * y_left + beta * e_left
        self.w1 = a * y_left + beta * env_slope
        self.w2 = 0.5 * a
        mass, weighted = kernels.cell_integrals(self.c, self.width, self.half_a, self.w0, self.w1, self.w2)
        self.eq = np.exp(self.q)
        self.s_nodes = _accumulate_from_origin(self.eq * mass, count)
        self.j_nodes = _accumulate_from_origin(self.eq * weighted, count) if self.with_drift else np.zeros(y.size)

    def extend(self, x_needed=None):
        """Grow the table geometrically (to cover ``x_needed`` in original coordinates if given)."""
        target = self.extent * 1.5
        if x_needed is not None:
            target = max(target, abs(float(x_needed)) * 1.05)
        target = min(target, self.max_extent)
        if target <= self.extent:
            return False
        self._build(target)
        return True

    def extend_to_value(self, xt):
        """Grow until tilde-space values ``xt`` are bracketed; False if the cap is hit."""
        xt = np.asarray(xt, dtype=float)
        if xt.size == 0:
            return True
        lo, hi = float(np.min(xt)), float(np.max(xt))
        while not (self.s_nodes[0] < lo and hi < self.s_nodes[-1]):
            try:
                grown = self.extend()
            except OutOfWindow:
                grown = False
            if not grown:
                return False
        return True

    # views ---------------------------------------------------------------------
    @property
    def grid(self):
        return np.arange(-self.count, self.count + 1) * self.width

    @property
    def s_values(self):
        return self.s_nodes

    @property
    def value_range(self):
        return float(self.s_nodes[0]), float(self.s_nodes[-1])

    # evaluation ------------------------------------------------------------------
    def _ensure_covers(self, x):
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            return
        far = float(np.max(np.abs(x)))
        if far > self.extent:
            try:
                self.extend(far)
            except OutOfWindow:
                pass
            if far > self.extent:
                raise BracketExhausted(f"|x|={far} beyond the tabulation cap {self.max_extent}")

    def scale(self, x):
        """``S(t, x)``."""
        self._ensure_covers(x)
        out = kernels.forward_numpy(self, np.atleast_1d(x), with_drift=False)[0]
        return _shape_like(out, x)

    def log_density(self, x):
        """The tabulated potential ``Q(t, x)`` (log of ``d S / d x``)."""
        self._ensure_covers(x)
        return _shape_like(np.log(kernels.forward_numpy(self, np.atleast_1d(x), with_drift=False)[1]), x)

    def derivatives(self, x):
        """``(S, d_x S, d_t S)`` at original coordinates ``x``."""
        self._ensure_covers(x)
        s, sigma, drift = kernels.forward_numpy(self, np.atleast_1d(x))
        return _shape_like(s, x), _shape_like(sigma, x), _shape_like(drift, x)

    def _bracket(self, xt):
        xt = np.asarray(xt, dtype=float)
        if xt.size and not (self.s_nodes[0] <= np.min(xt) and np.max(xt) <= self.s_nodes[-1]):
            try:
                self.extend()
            except OutOfWindow:
                pass
            if not (self.s_nodes[0] <= np.min(xt) and np.max(xt) <= self.s_nodes[-1]):
                raise BracketExhausted(f"value outside tabulated range {self.value_range}")

    def inverse(self, xt):
        """``H(t, xt)``, the inverse of ``x -> S(t, x)``."""
        self.spec.require_confining()
        self._bracket(xt)
        h = kernels.invert(self, np.atleast_1d(np.asarray(xt, dtype=float)), False)[0]
        return _shape_like(h, xt)

    def coefficients(self, xt):
        """``(sigma, d)`` of the equivalent SDE at tilde-space values ``xt``."""
        self.spec.require_confining()
        self._bracket(xt)
        _, sigma, drift = kernels.invert(self, np.atleast_1d(np.asarray(xt, dtype=float)), True)
        return _shape_like(sigma, xt), _shape_like(drift, xt)


def _accumulate_from_origin(cells, origin):
    # separate sums on each side keep values near 0 free of cancellation
    nodes = np.zeros(cells.size + 1)
    nodes[origin + 1 :] = np.cumsum(cells[origin:])
    nodes[:origin] = -np.cumsum(cells[:origin][::-1])[::-1]
    return nodes


def _shape_like(values, like):
    if np.ndim(like) == 0:
        return float(values[0])
    return values.reshape(np.shape(like))


def _table_for(spec, t, x=None, **options):
    extent = DEFAULT_EXTENT if x is None else max(1.0, 1.05 * float(np.max(np.abs(x))))
    return PseudoScale(spec, t, extent=extent, **options)


def pseudo_scale(spec: PotentialSpec, t, x, **options):
    """``S(t, x) = int_0^x exp(Q(t, y)) dy``."""
    return _table_for(spec, t, x, **options).scale(x)


def inverse_scale(spec: PotentialSpec, t, xt, **options):
    """``H(t, xt)`` with ``S(t, H(t, xt)) = xt``."""
    spec.require_confining()
    table = PseudoScale(spec, t, **options)
    table.extend_to_value(xt)
    return table.inverse(xt)


def coefficients(spec: PotentialSpec, t, xt, **options):
    """``(sigma, d)`` with ``sigma = d_x S(t, H)`` and ``d = d_t S(t, H)`` where ``H = H(t, xt)``."""
    spec.require_confining()
    table = PseudoScale(spec, t, **options)
    table.extend_to_value(xt)
    return table.coefficients(xt)


# Brox time change ---------------------------------------------------------------


def brox_to_z(times, values):
    """Map a trajectory ``(t, y)`` with ``t >= 1`` to ``(log t, y / sqrt(t))``."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.any(times < 1.0):
        raise BadTimeOrigin("Brox-time samples must satisfy t >= 1")
    return np.log(times), values / np.sqrt(times)


def z_to_brox(times, values):
    """Inverse of :func:`brox_to_z`."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    return np.exp(times), values * np.exp(0.5 * times)
