"""Frequency-domain solution: localized modes, continuum and density of states.

The resolvent ``U(z) = [z - eps - Sigma(z)]^-1`` has real poles outside the
bands (localized modes) and a branch cut on them.  Hence

    u(t) = sum_j Z_j exp(-i w_j t) + int dw/2pi D_c(w) exp(-i w t),
    D_c(w) = U(w + i0) J(w) U(w - i0),

which for one level reduces to ``J / ([w - eps - Delta]^2 + J^2/4)``.

Mode search uses the fact that ``h(w) = w - eps - Delta(w)`` is strictly
increasing off band (``Sigma' < 0``).  Near a band edge ``e`` the frequency
is parametrised as ``w = e -/+ exp(lam)``; modes of sharply cut bands sit
exponentially close to the edge, far below double resolution, and the
logarithmic coordinate keeps them (and their residues) representable.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import RootSearchInconclusive
from .quadrature import build_rule
from .self_energy import SelfEnergyEvaluator, as_environment
from .volterra_engine import SystemSpec

__all__ = [
    "LocalizedMode",
    "SpectralDecomposition",
    "SpectralSolver",
    "decompose",
    "find_localized_modes",
    "u_spectral",
    "dos",
]

log = logging.getLogger(__name__)

LAM_FLOOR = -1e15


@dataclass
class LocalizedMode:
    """Real pole of the resolvent outside every band.

    ``residue`` is the N x N residue matrix; ``log_residue`` is the natural
    log of its scalar weight (finite even when the weight underflows).
    """

    omega_prime: float
    residue: np.ndarray
    log_residue: float
    edge: float | None = None
    log_distance: float | None = None  # log of |omega_prime - edge|

    @property
    def weight(self) -> float:
        """Scalar spectral weight (trace of the residue)."""
        return float(np.real(np.trace(self.residue)))


def _regions(support):
    """Off-band regions as (lo, hi) pairs (either may be infinite)."""
    if not support:
        return [(-math.inf, math.inf)]
    out = []
    prev = -math.inf
    for a, b in support:
        if a > prev:
            out.append((prev, a))
        prev = b
    if math.isfinite(prev):
        out.append((prev, math.inf))
    return out


class SpectralSolver:
    """Modes, continuum density and ``u(t)`` of one system/environment pair."""

    def __init__(self, system: SystemSpec, env, evaluator: SelfEnergyEvaluator | None = None,
                 rtol: float = 1e-10, atol: float = 1e-12, max_nodes: int = 400_000, **kwargs):
        self.system = system
        self.evaluator = evaluator if evaluator is not None else SelfEnergyEvaluator(as_environment(env), **kwargs)
        self.env = self.evaluator.environment
        self.N = system.dimension
        if self.evaluator.dimension != self.N:
            raise ValueError("environment and system dimensions differ")
        self.rtol, self.atol, self.max_nodes = rtol, atol, max_nodes
        self._modes = None
        self._rules = {}

    # ------------------------------------------------------------------
    # localized modes
    # ------------------------------------------------------------------
    def _branch(self, edge, side, lam, i):
        """``(h_i, omega, Sigma, A, R, phi)`` at ``omega = edge + side*exp(lam)``."""
        S, A, R = self.evaluator.log_edge(edge, side, lam)
        delta = math.exp(lam) if lam > -745 else 0.0
        omega = edge + side * delta
        M = self.system.epsilon_s + S
        if self.N == 1:
            return omega - float(np.real(M[0, 0])), omega, S, A, R, np.ones((1, 1))
        w, vec = np.linalg.eigh(M)
        return omega - w[i], omega, S, A, R, vec[:, i:i + 1]

    def _piece_roots(self, edge, side, lam_max):
        """Roots on one side of ``edge`` with ``lam`` in ``(-inf, lam_max]``."""
        modes = []
        scale = self.evaluator.scale
        for i in range(self.N):
            def H(lam, i=i):
                return self._branch(edge, side, lam, i)[0]

            # sign far from the edge
            if math.isinf(lam_max):
                lam_hi = math.log(scale)
                for _ in range(200):
                    if side * H(lam_hi) > 0:
                        break
                    lam_hi += max(1.0, abs(lam_hi))
                else:
                    raise RootSearchInconclusive("no sign change far from the band")
            else:
                lam_hi = lam_max
            s_hi = np.sign(H(lam_hi))
            # walk toward the edge until the sign flips
            lam_lo = min(lam_hi, math.log(scale)) - 1.0
            found = False
            step = 1.0
            while lam_lo > LAM_FLOOR:
                val = H(lam_lo)
                if np.sign(val) != s_hi and val != 0:
                    found = True
                    break
                if val == 0:
                    found = True
                    break
                if lam_lo < -760 and not self._edge_diverges(edge):
                    break  # Sigma has a finite edge limit, already reached
                lam_lo -= step
                step *= 2.0
            if not found:
                continue
            if H(lam_lo) == 0:
                root = lam_lo
            else:
                try:
                    root = optimize.brentq(H, lam_lo, lam_hi, xtol=1e-14, rtol=1e-15, maxiter=500)
                except (ValueError, RuntimeError) as exc:
                    raise RootSearchInconclusive(f"root polish failed near edge {edge}: {exc}") from exc
            modes.append(self._make_mode(edge, side, root, i))
        return modes

    def _edge_diverges(self, edge) -> bool:
        return any(p.model.edge_limit(edge) != 0.0 for p in self.evaluator.parts
                   if any(edge in iv for iv in p.model.support()))

    def _make_mode(self, edge, side, lam, i):
        hval, omega, S, A, R, phi = self._branch(edge, side, lam, i)
        a = float(np.real(phi.conj().T @ A @ phi)[0, 0])
        r = float(np.real(phi.conj().T @ R @ phi)[0, 0])
        tol = 1e-9 * max(1.0, abs(omega), float(np.max(np.abs(self.system.epsilon_s))))
        if abs(hval) > tol and not (lam <= -745):
            raise RootSearchInconclusive(f"residual {hval:.3g} after polishing root at {omega}")
        if a > 0:
            logz = lam - math.log(a + math.exp(lam) * (1.0 - r)) if lam < 700 else -math.log1p(-r)
        else:
            logz = -math.log(1.0 - r)
        weight = math.exp(logz)
        return LocalizedMode(omega, weight * (phi @ phi.conj().T), logz, edge=edge, log_distance=lam)

    def find_modes(self):
        if self._modes is not None:
            return self._modes
        support = self.env.support()
        modes = []
        if not support:
            w, vec = np.linalg.eigh(self.system.epsilon_s)
            for k in range(self.N):
                P = vec[:, k:k + 1] @ vec[:, k:k + 1].conj().T
                modes.append(LocalizedMode(float(w[k]), P, 0.0))
            self._modes = modes
            return modes
        for lo, hi in _regions(support):
            if math.isinf(lo):
                modes += self._piece_roots(hi, -1, math.inf)
            elif math.isinf(hi):
                modes += self._piece_roots(lo, +1, math.inf)
            else:
                half = math.log(0.5 * (hi - lo))
                modes += self._piece_roots(lo, +1, half)
                # skip a root at the shared midpoint counted from the lower side
                upper = self._piece_roots(hi, -1, half)
                modes += [m for m in upper if not any(abs(m.omega_prime - q.omega_prime) < 1e-12 * max(1.0, abs(q.omega_prime)) for q in modes)]
        modes.sort(key=lambda m: m.omega_prime)
        self._modes = modes
        return modes

    # ------------------------------------------------------------------
    # continuum
    # ------------------------------------------------------------------
    def continuum_values(self, anchor, offset):
        """``D_c`` at ``anchor + offset`` (shape ``(n, N, N)``)."""
        anchor = np.atleast_1d(np.asarray(anchor, dtype=float))
        offset = np.atleast_1d(np.asarray(offset, dtype=float))
        omega = anchor + offset
        J = np.real(self.env.J_split(anchor, offset))
        D = self.evaluator.sigma_split(anchor, offset)
        eps = self.system.epsilon_s
        if self.N == 1:
            x = omega - np.real(eps[0, 0]) - D[:, 0, 0]
            j = J[:, 0, 0]
            with np.errstate(invalid="ignore", over="ignore"):
                val = j / (x * x + 0.25 * j * j)
            val = np.where(j > 0, np.where(np.isfinite(j), val, 0.0), 0.0)
            return val.reshape(-1, 1, 1).astype(complex)
        Id = np.eye(self.N)
        Up = np.linalg.inv(omega[:, None, None] * Id - eps - D + 0.5j * J)
        Dc = Up @ J @ np.conj(np.swapaxes(Up, 1, 2))
        return 0.5 * (Dc + np.conj(np.swapaxes(Dc, 1, 2)))

    def _features(self):
        feats = []
        for p in self.evaluator.parts:
            feats += p.model.features()
        w = np.linalg.eigvalsh(self.system.epsilon_s)
        for e in w:
            if np.any(self.env.on_band(np.array([e]))):
                jj = float(np.max(np.real(np.linalg.eigvalsh(self.env.J(np.array([e]))[0]))))
                feats.append((float(e), max(0.5 * jj, 1e-6 * self.evaluator.scale)))
        return feats

    def continuum_rule(self, t_max: float = 0.0):
        key = float(t_max)
        if key not in self._rules:
            points = sorted({x for p in self.evaluator.parts for x in p.model.breakpoints()})
            rule = build_rule(self.continuum_values, self.env.support(), scale=self.evaluator.scale,
                              points=points, features=self._features(), rtol=self.rtol,
                              atol=self.atol, max_nodes=self.max_nodes, t_max=key)
            self._rules[key] = rule
        return self._rules[key]

    def continuum_weight(self):
        """``int D_c dw / 2pi`` (N x N)."""
        return self.continuum_rule().integrate() / (2.0 * math.pi)

    def sum_rule(self):
        """``sum_j Z_j + int D_c dw/2pi``; equals the identity."""
        z = sum((m.residue for m in self.find_modes()), np.zeros((self.N, self.N), dtype=complex))
        return z + self.continuum_weight()

    def u(self, t):
        """``u(t)`` from modes plus branch-cut integral, shape ``t.shape + (N, N)``."""
        t = np.asarray(t, dtype=float)
        tmax = float(np.max(np.abs(t))) if t.size else 0.0
        # reuse an existing rule that resolves the requested times
        key = next((k for k in sorted(self._rules) if k >= tmax), None)
        rule = self.continuum_rule(tmax if key is None else key)
        out = rule.fourier(t) / (2.0 * math.pi) if len(rule) else np.zeros(t.shape + (self.N, self.N), complex)
        for m in self.find_modes():
            out = out + np.exp(-1j * m.omega_prime * t)[..., None, None] * m.residue
        return out

    def dos(self, omega):
        """Continuum density on ``omega`` (zero off band) and the mode list.

        Delta-function parts are returned as ``(omega_prime, 2 pi Z)`` pairs.
        """
        w = np.atleast_1d(np.asarray(omega, dtype=float))
        vals = np.zeros((len(w), self.N, self.N), dtype=complex)
        on = self.env.on_band(w)
        if np.any(on):
            vals[on] = self.continuum_values(w[on], np.zeros(int(on.sum())))
        deltas = [(m.omega_prime, 2.0 * math.pi * m.residue) for m in self.find_modes()]
        return vals.reshape(np.shape(omega) + (self.N, self.N)), deltas


def _scalarize(N, arr):
    return arr[..., 0, 0] if N == 1 else arr


def find_localized_modes(system: SystemSpec, env, **kwargs):
    """All localized modes with their residues, sorted by frequency."""
    return SpectralSolver(system, env, **kwargs).find_modes()


def u_spectral(system: SystemSpec, env, t, modes=None, **kwargs):
    """``u(t)`` from the spectral representation (scalar-shaped for N = 1)."""
    solver = SpectralSolver(system, env, **kwargs)
    if modes is not None:
        solver._modes = list(modes)
    return _scalarize(system.dimension, solver.u(t))


def dos(system: SystemSpec, env, omega, **kwargs):
    """``(D_c(omega), [(omega_prime, 2 pi Z), ...])``; scalar-shaped for N = 1."""
    solver = SpectralSolver(system, env, **kwargs)
    vals, deltas = solver.dos(omega)
    if system.dimension == 1:
        return np.real(vals[..., 0, 0]), [(w, float(np.real(z[0, 0]))) for w, z in deltas]
    return vals, deltas


@dataclass
class SpectralDecomposition:
    """Localized modes plus the continuum density on each band interval."""

    modes: list
    continuum: object  # callable omega -> D_c(omega), shape (..., N, N)
    bands: list
    continuum_weight: np.ndarray

    @property
    def total_weight(self) -> np.ndarray:
        return sum((m.residue for m in self.modes), np.zeros_like(self.continuum_weight)) \
            + self.continuum_weight


def decompose(system: SystemSpec, env, **kwargs) -> SpectralDecomposition:
    """Spectral decomposition of ``u``: modes, continuum density and weights."""
    solver = SpectralSolver(system, env, **kwargs)

    def continuum(omega):
        return solver.dos(omega)[0]

    return SpectralDecomposition(solver.find_modes(), continuum, solver.env.support(),
                                 solver.continuum_weight())
