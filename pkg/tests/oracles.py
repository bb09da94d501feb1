"""Independent reference values, computed with mpmath and frozen below.

``test_oracles.py`` recomputes every entry so the frozen numbers cannot drift
from their derivation.
"""

import mpmath as mp

mp.mp.dps = 40

def scale_at_one():
    """``int_0^1 exp(y^2/2) dy`` by its power series."""
    return mp.nsum(lambda k: mp.mpf(1) / (mp.factorial(k) * 2**k * (2 * k + 1)), [0, mp.inf])


def exp_moment(alpha=mp.mpf("0.5"), t=2):
    """``E exp(alpha X^2 / 2)`` for ``X ~ N(0, 1 - e^{-t})`` by direct integration."""
    v = 1 - mp.e ** (-t)
    density = lambda x: mp.e ** (-x * x / (2 * v)) / mp.sqrt(2 * mp.pi * v)
    return mp.quad(lambda x: mp.e ** (alpha * x * x / 2) * density(x), [-mp.inf, 0, mp.inf])


def gaussian_weighted_norm(alpha=mp.mpf("0.5")):
    """``int exp(alpha x^2/2) phi(x) dx`` by quadrature."""
    return mp.quad(lambda x: mp.e ** (alpha * x * x / 2 - x * x / 2) / mp.sqrt(2 * mp.pi), [-mp.inf, 0, mp.inf])


def binomial_mad(n, p):
    """Exact ``E|X - n p|`` for ``X ~ Bin(n, p)`` (de Moivre's closed form)."""
    n, p = int(n), mp.mpf(p)
    k = int(mp.floor(n * p))
    return 2 * (k + 1) * mp.binomial(n, k + 1) * p ** (k + 1) * (1 - p) ** (n - k)


def binned_gaussian_tv(n=100_000, bins=64, lo=-6, hi=6, alpha=mp.mpf("0.5")):
    """Expected ``sum U(mid) |p_hat - p|`` for ``n`` N(0,1) draws binned on ``[lo, hi]`` (tails folded)."""
    width = mp.mpf(hi - lo) / bins
    edges = [lo + i * width for i in range(bins + 1)]
    cdf = [mp.ncdf(e) for e in edges]
    total = 0
    for i in range(bins):
        p = cdf[i + 1] - cdf[i]
        if i == 0:
            p += cdf[0]
        if i == bins - 1:
            p += 1 - cdf[-1]
        mid = (edges[i] + edges[i + 1]) / 2
        total += mp.e ** (alpha * mid * mid / 2) * binomial_mad(n, p) / n
    return total


def piece_count_hand(n, gamma, eta):
    """``floor(L(n)^(1/gamma) / eta) + 1`` with ``L(n) = sqrt(1 + log(1 + n))``."""
    weight = mp.sqrt(1 + mp.log(1 + n))
    return int(mp.floor(weight ** (1 / mp.mpf(gamma)) / mp.mpf(eta))) + 1


FROZEN = {
    "scale_at_one": 1.1949576619102276,
    "exp_moment": 1.3272506002845751,
    "gaussian_weighted_norm": 1.4142135623730951,
    "binned_gaussian_tv": 0.036761339955846890,
    "piece_count_n0": 3,
    "piece_count_n3": 6,
}
