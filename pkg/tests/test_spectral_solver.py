import math

import numpy as np
import pytest
from scipy import integrate

from nmg import (
    Environment,
    LorentzianCutoff,
    OhmicFamily,
    PhotonicBandEdge,
    Reservoir,
    SpectralSolver,
    SystemSpec,
    TimeGrid,
    decompose,
    dos,
    find_localized_modes,
    sigma_prime,
    sigma_real,
    solve_u,
    u_spectral,
)

from conftest import subohmic_env


def _threshold(s, wc, eps=1.0):
    # a mode below the ohmic band exists once eps + Sigma(0-) = eps - eta wc Gamma(s) < 0
    return eps / (wc * math.gamma(s))


@pytest.mark.parametrize("s,wc", [(0.5, 1.0), (1.0, 1.0), (3.0, 0.5), (0.5, 2.0)])
def test_mode_threshold(s, wc):
    eta_c = _threshold(s, wc)
    system = SystemSpec.scalar(1.0)
    below = find_localized_modes(system, Environment.single(OhmicFamily(0.95 * eta_c, s, wc)))
    above = find_localized_modes(system, Environment.single(OhmicFamily(1.05 * eta_c, s, wc)))
    assert len(below) == 0
    assert len(above) == 1
    assert above[0].omega_prime < 0


def test_mode_satisfies_pole_condition_and_residue():
    env = subohmic_env(0.8)
    (mode,) = find_localized_modes(SystemSpec.scalar(1.0), env)
    w = np.array([mode.omega_prime])
    assert mode.omega_prime - 1.0 - sigma_real(env, w)[0] == pytest.approx(0.0, abs=1e-12)
    assert mode.weight == pytest.approx(1.0 / (1.0 - sigma_prime(env, w)[0]), rel=1e-10)
    assert mode.log_residue == pytest.approx(math.log(mode.weight), rel=1e-12)
    assert 0 < mode.weight < 1


def test_uncoupled_level_is_a_unit_mode():
    (mode,) = find_localized_modes(SystemSpec.scalar(1.0), Environment(()))
    assert mode.omega_prime == 1.0 and mode.weight == 1.0
    t = np.array([0.0, 2.0])
    assert np.allclose(u_spectral(SystemSpec.scalar(1.0), Environment(()), t), np.exp(-1j * t))


@pytest.mark.parametrize("C,delta", [(0.05, -0.05), (0.2, 0.3), (0.01, -0.4)])
def test_photonic_mode_condition(C, delta):
    we = 1.0
    eps = we + delta
    (mode,) = find_localized_modes(SystemSpec.scalar(eps), Environment.single(PhotonicBandEdge(C, we)))
    x = we - mode.omega_prime
    # (x + eps - we) sqrt(x) = C and Z = 1 / (1 + C / (2 x^{3/2}))
    assert (x + delta) * math.sqrt(x) == pytest.approx(C, rel=1e-10)
    assert mode.weight == pytest.approx(1.0 / (1.0 + 0.5 * C / x**1.5), rel=1e-8)


@pytest.mark.parametrize("delta", [-0.3, 0.2])
def test_photonic_u_against_closed_form_integral(delta):
    # u(t) = Z e^{-i w' t} + (C/pi) int_{we}^inf sqrt(w - we) e^{-iwt} / ((w - eps)^2 (w - we) + C^2) dw
    C, we = 0.05, 1.0
    eps = we + delta
    system = SystemSpec.scalar(eps)
    env = Environment.single(PhotonicBandEdge(C, we))
    (mode,) = find_localized_modes(system, env)
    f = lambda w: math.sqrt(w - we) / ((w - eps) ** 2 * (w - we) + C * C)
    for t in (0.0, 3.0, 17.0):
        if t == 0.0:
            cont = integrate.quad(f, we, np.inf, limit=400, epsabs=1e-13)[0]
        else:
            # oscillatory Fourier integrals on [we, inf) via QAWF, shifted so the lower limit is 0
            g = lambda y: f(we + y)
            c = integrate.quad(g, 0, np.inf, weight="cos", wvar=t, limlst=200)[0]
            s = integrate.quad(g, 0, np.inf, weight="sin", wvar=t, limlst=200)[0]
            cont = np.exp(-1j * we * t) * (c - 1j * s)
        want = mode.weight * np.exp(-1j * mode.omega_prime * t) + C / math.pi * cont
        assert u_spectral(system, env, np.array([t]))[0] == pytest.approx(want, abs=1e-7)


def _lorentzian_log_distance(gamma, d, omega_cap, eps, side):
    """Log distance of the mode beyond the edge from the log-singular part of Sigma."""
    J = lambda w: gamma * d * d / (w * w + d * d)
    Je = J(omega_cap)
    edge = side * omega_cap
    inner = integrate.quad(lambda x: (J(edge - side * x) - Je) / x, 0, 2 * omega_cap,
                           epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    return math.log(2 * omega_cap) + (inner - 2 * math.pi * (omega_cap - side * eps)) / Je


def test_lorentzian_modes_hug_the_band_edges():
    gamma, d, cap, eps = 0.5, 1.0, 10.0, 0.2
    env = Environment((Reservoir(LorentzianCutoff(gamma, d, 0.0, cap), statistics="fermionic"),))
    modes = find_localized_modes(SystemSpec.scalar(eps, "fermionic"), env)
    assert len(modes) == 2
    lo, hi = modes
    assert lo.edge == -cap and hi.edge == cap
    Je = gamma * d * d / (cap * cap + d * d)
    for m, side in ((lo, -1), (hi, 1)):
        lam = _lorentzian_log_distance(gamma, d, cap, eps, side)
        assert m.log_distance == pytest.approx(lam, rel=1e-9)
        # Z = 1/(1 - Sigma') with Sigma' ~ -J_e / (2 pi delta)
        assert m.log_residue == pytest.approx(lam + math.log(2 * math.pi / Je), rel=1e-9)


def test_sum_rule_and_initial_value():
    for env in (subohmic_env(0.3), subohmic_env(0.8), Environment.single(PhotonicBandEdge(0.05, 0.95))):
        solver = SpectralSolver(SystemSpec.scalar(1.0), env)
        assert abs(solver.sum_rule()[0, 0] - 1.0) < 1e-8
        assert abs(solver.u(np.array([0.0]))[0, 0, 0] - 1.0) < 1e-8


def test_continuum_density_formula():
    env = Environment.single(OhmicFamily(0.1, 1.0, 1.0))
    w = np.array([0.1, 0.9, 1.0, 2.5])
    D, deltas = dos(SystemSpec.scalar(1.0), env, w)
    J = env.J(w)[:, 0, 0].real
    S = sigma_real(env, w)
    # u(t) = int D(w) e^{-iwt} dw / 2 pi, so D carries no 1 / 2 pi
    want = J / ((w - 1.0 - S) ** 2 + (J / 2) ** 2)
    assert np.allclose(D, want, rtol=1e-9)
    assert deltas == []
    D_off, _ = dos(SystemSpec.scalar(1.0), env, np.array([-2.0, -0.1]))
    assert np.all(D_off == 0)


def test_dos_reports_mode_weights():
    env = subohmic_env(0.8)
    _, deltas = dos(SystemSpec.scalar(1.0), env, np.array([0.5]))
    (mode,) = find_localized_modes(SystemSpec.scalar(1.0), env)
    assert deltas[0][0] == mode.omega_prime
    assert deltas[0][1] == pytest.approx(2 * math.pi * mode.weight)


def test_u_from_dense_continuum_integral():
    env = Environment.single(OhmicFamily(0.1, 1.0, 1.0))
    system = SystemSpec.scalar(1.0)
    w = np.linspace(0.0, 45.0, 450_001)
    D, _ = dos(system, env, w)
    t = np.array([0.5, 2.0, 6.0])
    dense = np.array([integrate.simpson(D * np.exp(-1j * w * tt), x=w) for tt in t]) / (2 * math.pi)
    assert np.allclose(u_spectral(system, env, t), dense, atol=1e-7)


def test_decompose_weights_add_up():
    dec = decompose(SystemSpec.scalar(1.0), subohmic_env(0.8))
    assert len(dec.modes) == 1
    assert dec.total_weight[0, 0].real == pytest.approx(1.0, abs=1e-8)
    assert dec.continuum(np.array([-1.0]))[0, 0, 0].real == 0.0


def test_spectral_and_volterra_agree():
    env = subohmic_env(0.6)
    system = SystemSpec.scalar(1.0)
    grid = TimeGrid(0.0, 10.0, 0.01)
    uv = solve_u(system, env, grid).u[:, 0, 0]
    us = u_spectral(system, env, grid.times)
    assert np.max(np.abs(uv - us)) < 1e-3
