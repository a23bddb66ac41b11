"""Self-energies and memory kernels against independent quadrature oracles.

The oracles use mpmath at 30 digits.  Principal values are formed by
subtracting the pole,
``PV int_0^inf f(x)/(y-x) dx = int_0^{2y} (f(x)-f(y))/(y-x) dx + int_{2y}^inf f(x)/(y-x) dx``
for ``y > 0`` (the odd part of ``1/(y-x)`` integrates to zero on ``[0, 2y]``).
"""
import math

import mpmath as mp
import numpy as np
import pytest

from nmg import (
    Environment,
    LorentzianCutoff,
    OhmicFamily,
    OnBandError,
    PhotonicBandEdge,
    Reservoir,
    SelfEnergyEvaluator,
    kernel_g,
    kernel_g_tilde,
    sigma_prime,
    sigma_real,
)

mp.mp.dps = 30


def _pv(f, y, lo, hi, peaks=()):
    """``PV int_lo^hi f(x) / (y - x) dx / (2 pi)`` with mpmath (``lo`` finite)."""
    y = mp.mpf(y)
    two_pi = 2 * mp.pi
    if y <= lo or y >= hi:
        pts = sorted({mp.mpf(lo), *[mp.mpf(p) for p in peaks if lo < p < hi], mp.mpf(hi)})
        return mp.quad(lambda x: f(x) / (y - x), pts) / two_pi
    r = min(y - lo, hi - y)
    fy = f(y)
    inner = mp.quad(lambda x: (f(x) - fy) / (y - x), [y - r, y, y + r])
    outer = mp.mpf(0)
    if y - r > lo:
        outer += mp.quad(lambda x: f(x) / (y - x), [lo, y - r])
    if y + r < hi:
        pts = [y + r] + [mp.mpf(p) for p in peaks if y + r < p < hi] + [mp.mpf(hi)]
        outer += mp.quad(lambda x: f(x) / (y - x), pts)
    return (inner + outer) / two_pi


def _ohmic_mp(eta, s, wc):
    return lambda x: 2 * mp.pi * eta * wc * (x / wc) ** s * mp.exp(-x / wc) if x > 0 else mp.mpf(0)


# --- special-function oracles written out -------------------------------

def ei_series(x):
    """Exponential integral Ei(x) from its power series (moderate |x|)."""
    total, term = 0.0, 1.0
    for k in range(1, 200):
        term *= x / k
        total += term / k
        if abs(term / k) < 1e-17 * abs(total):
            break
    return 0.57721566490153286061 + math.log(abs(x)) + total


def erfc_oracle(x, terms=200):
    """erfc(x) for x > 0: Maclaurin series of erf below 2, Laplace continued fraction above."""
    if x < 2.0:
        total, term, n = 0.0, x, 0
        while abs(term) > 1e-18:
            total += term / (2 * n + 1)
            n += 1
            term *= -x * x / n
        return 1.0 - 2.0 / math.sqrt(math.pi) * total
    f = 0.0
    for k in range(terms, 0, -1):
        f = (k / 2.0) / (x + f)
    return math.exp(-x * x) / math.sqrt(math.pi) / (x + f)


def test_special_function_oracles_agree_with_mpmath():
    for x in (-3.0, -0.5, 0.7, 2.0, 6.0):
        assert ei_series(x) == pytest.approx(float(mp.ei(x)), rel=1e-13)
    for x in (0.5, 1.0, 3.0, 6.0):
        assert erfc_oracle(x) == pytest.approx(float(mp.erfc(x)), rel=1e-12)


def test_ohmic_s1_closed_form_matches_ei_expression():
    # PV int_0^inf x e^{-x} / (y - x) dx = -1 + y e^{-y} Ei(y)
    eta, wc = 0.2, 1.5
    env = Environment.single(OhmicFamily(eta, 1.0, wc))
    y = np.array([-3.0, -0.5, 0.7, 2.0, 6.0])
    got = sigma_real(env, y * wc)
    want = [eta * wc * (-1.0 + x * math.exp(-x) * ei_series(x)) for x in y]
    assert np.allclose(got, want, rtol=1e-12, atol=0)


def test_ohmic_s_half_below_band_matches_erfc_expression():
    # for y = -a < 0: int_0^inf x^{1/2} e^{-x} / (-a - x) dx = -(sqrt(pi) - pi sqrt(a) e^a erfc(sqrt(a)))
    eta, wc = 0.3, 1.0
    env = Environment.single(OhmicFamily(eta, 0.5, wc))
    a = np.array([0.25, 1.0, 9.0, 36.0])
    got = sigma_real(env, -a)
    want = [-eta * (math.sqrt(math.pi) - math.pi * math.sqrt(x) * math.exp(x) * erfc_oracle(math.sqrt(x)))
            for x in a]
    assert np.allclose(got, want, rtol=1e-11, atol=0)


@pytest.mark.parametrize("s", [0.5, 1.0, 3.0, 2.0])
@pytest.mark.parametrize("method", ["auto", "numerical"])
def test_ohmic_sigma_against_pv_oracle(s, method):
    eta, wc = 0.25, 1.0
    env = Environment.single(OhmicFamily(eta, s, wc))
    omegas = [-2.0, -0.1, 0.3, 1.0, 4.0]
    got = sigma_real(env, np.array(omegas), method=method)
    f = _ohmic_mp(eta, s, wc)
    want = [float(_pv(f, w, 0, mp.inf)) for w in omegas]
    assert np.allclose(got, want, rtol=1e-8, atol=1e-12)


@pytest.mark.parametrize("method", ["auto", "numerical"])
def test_lorentzian_sigma_against_pv_oracle(method):
    m = LorentzianCutoff(gamma=0.5, d=1.0, omega_c=0.3, omega_cap=6.0)
    env = Environment.single(m)
    omegas = [-9.0, -5.0, 0.0, 0.3, 2.5, 5.9, 7.0]
    f = lambda x: m.gamma * m.d**2 / ((x - m.omega_c) ** 2 + m.d**2)
    want = [float(_pv(f, w, m.omega_c - m.omega_cap, m.omega_c + m.omega_cap, peaks=[m.omega_c])) for w in omegas]
    got = sigma_real(env, np.array(omegas), method=method)
    assert np.allclose(got, want, rtol=1e-8, atol=1e-13)


def test_photonic_sigma_closed_form():
    C, we = 0.05, 1.0
    env = Environment.single(PhotonicBandEdge(C, we))
    w = np.array([0.0, 0.5, 0.99])
    assert np.allclose(sigma_real(env, w), -C / np.sqrt(we - w), rtol=1e-12)
    # the level shift vanishes inside the band
    assert np.allclose(sigma_real(env, np.array([1.5, 3.0])), 0.0, atol=1e-12)
    assert np.allclose(sigma_prime(env, w), -0.5 * C / (we - w) ** 1.5, rtol=1e-10)


def test_sigma_at_ohmic_edge_limit():
    # Sigma(0-) = -int J / (2 pi w) = -eta wc Gamma(s)
    for s in (0.5, 1.0, 3.0):
        env = Environment.single(OhmicFamily(0.4, s, 2.0))
        assert sigma_real(env, np.array([-1e-13]))[0] == pytest.approx(-0.4 * 2.0 * math.gamma(s), rel=1e-6)


def test_sigma_prime_matches_finite_difference():
    env = Environment.single(OhmicFamily(0.3, 0.5, 1.0))
    w = np.array([-3.0, -1.0, -0.2])
    h = 1e-5
    fd = (sigma_real(env, w + h) - sigma_real(env, w - h)) / (2 * h)
    assert np.allclose(sigma_prime(env, w), fd, rtol=1e-7)
    # Sigma decreases monotonically off band
    assert np.all(sigma_prime(env, np.linspace(-10, -0.01, 40)) < 0)


def test_sigma_prime_on_band_raises():
    env = Environment.single(OhmicFamily(0.3, 0.5, 1.0))
    with pytest.raises(OnBandError):
        sigma_prime(env, np.array([0.5]))


def test_complex_self_energy_against_oracle():
    m = OhmicFamily(0.3, 1.0, 1.0)
    ev = SelfEnergyEvaluator(Environment.single(m))
    z = np.array([2.0 + 0.5j, -1.0 + 1.0j])
    f = _ohmic_mp(0.3, 1.0, 1.0)
    want = [complex(mp.quad(lambda x: f(x) / (mp.mpc(zz) - x), [0, 1, mp.inf]) / (2 * mp.pi)) for zz in z]
    got = ev.sigma_complex(z)[:, 0, 0]
    assert np.allclose(got, want, rtol=1e-8)


@pytest.mark.parametrize("s", [0.5, 1.0, 3.0, 1.7])
def test_ohmic_kernel_closed_form(s):
    # g(tau) = int J e^{-i w tau} / 2 pi = eta wc^2 Gamma(s + 1) / (1 + i wc tau)^(s + 1)
    eta, wc = 0.2, 1.3
    env = Environment.single(OhmicFamily(eta, s, wc))
    tau = np.array([0.0, 0.3, 2.0, 10.0])
    want = eta * wc**2 * math.gamma(s + 1) / (1 + 1j * wc * tau) ** (s + 1)
    assert np.allclose(kernel_g(env, tau), want, rtol=1e-9, atol=1e-14)
    assert np.allclose(kernel_g(env, tau, method="numerical"), want, rtol=1e-7, atol=1e-12)


@pytest.mark.parametrize("statistics,model,beta,mu", [
    ("bosonic", OhmicFamily(0.3, 0.5, 1.0), 1.0, 0.0),
    ("bosonic", OhmicFamily(0.1, 3.0, 1.0), 0.5, -0.2),
    ("fermionic", LorentzianCutoff(0.5, 1.0, 0.0, 10.0), 20.0, 0.5),
])
def test_thermal_kernel_against_oracle(statistics, model, beta, mu):
    res = Reservoir(model, beta=beta, mu=mu, statistics=statistics)
    env = Environment((res,))
    tau = np.array([0.0, 0.7, 2.5])
    lo, hi = model.support()[0]
    sign = -1 if statistics == "bosonic" else 1

    def jf(x):
        if model.kind == "ohmic":
            j = _ohmic_mp(model.eta, model.s, model.omega_c)(x)
        else:
            j = model.gamma * model.d**2 / ((x - model.omega_c) ** 2 + model.d**2)
        return j / (mp.exp(beta * (x - mu)) + sign)

    pts = [lo, mu, hi] if lo < mu < hi else [lo, 1, hi]
    want = [complex(mp.quad(lambda x: jf(x) * mp.expj(-x * t), pts) / (2 * mp.pi)) for t in tau]
    got = kernel_g_tilde(env, tau)
    assert np.allclose(got, want, rtol=1e-7, atol=1e-11)


def test_zero_coupling_kernels_vanish():
    env = Environment(())
    ev = SelfEnergyEvaluator(env)
    assert np.all(ev.kernel_g(np.array([0.0, 1.0])) == 0)
    assert np.all(ev.kernel_g_tilde(np.array([0.0, 1.0])) == 0)
    assert np.all(ev.sigma_real(np.array([0.5])) == 0)


def test_zero_temperature_bosonic_thermal_kernel_vanishes():
    env = Environment.single(OhmicFamily(0.3, 1.0, 1.0))
    assert np.all(kernel_g_tilde(env, np.array([0.0, 1.0, 5.0])) == 0)
