import math

import numpy as np
import pytest

from nmg.quadrature import build_rule, gauss_legendre


def _f(g):
    """Wrap a plain integrand into the ``f(anchor, offset)`` form."""
    return lambda anchor, offset: g(np.asarray(anchor) + np.asarray(offset))


def test_gauss_legendre_polynomial_exactness():
    x, w = gauss_legendre(-1.0, 3.0)
    assert np.sum(w * x**31) == pytest.approx((3.0**32 - 1.0) / 32, rel=1e-12)


def test_semi_infinite_with_square_root_edge():
    rule = build_rule(_f(lambda x: np.sqrt(x) * np.exp(-x)), [(0.0, math.inf)], scale=1.0)
    assert rule.integrate() == pytest.approx(math.gamma(1.5), rel=1e-9)


def test_inverse_square_root_edge_singularity():
    rule = build_rule(lambda a, o: 1.0 / np.sqrt(np.asarray(o) + (np.asarray(a) - 1.0)),
                      [(1.0, 2.0)], scale=0.5)
    assert rule.integrate() == pytest.approx(2.0, rel=1e-9)


def test_peak_feature_and_breakpoint():
    d = 1e-3
    rule = build_rule(_f(lambda x: d / (x**2 + d**2) + (x > 0.5)), [(-1.0, 1.0)], scale=0.1,
                      points=[0.5], features=[(0.0, d)])
    assert rule.integrate() == pytest.approx(2 * math.atan(1.0 / d) + 0.5, rel=1e-9)


@pytest.mark.parametrize("t", [0.0, 0.5, 3.0, 40.0])
def test_fourier_transform_of_exponential(t):
    rule = build_rule(_f(lambda x: np.exp(-x)), [(0.0, math.inf)], scale=1.0, t_max=40.0)
    got = rule.fourier(np.array([t]))[0]
    assert got == pytest.approx(1.0 / (1.0 + 1j * t), rel=1e-8, abs=1e-12)


def test_fourier_of_box_uses_filon_at_large_time():
    rule = build_rule(_f(lambda x: np.ones_like(x)), [(-1.0, 1.0)], scale=1.0, t_max=500.0)
    t = np.array([1.0, 77.0, 500.0])
    assert np.allclose(rule.fourier(t), 2 * np.sin(t) / t, rtol=1e-9, atol=1e-13)
