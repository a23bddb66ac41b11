"""Coefficients of the exact master equation and density-matrix propagation.

With ``M = udot u^-1`` the renormalised energy, dissipation and fluctuation
coefficients are

    eps~  = (i/2) (M - M^dagger),
    gamma = -(1/2) (M + M^dagger),
    gamma~ = vdot - (M v + v M^dagger).

For a single level the generator

    L rho = -i[eps~ n, rho] + gamma (2 a rho a+ - a+a rho - rho a+a)
            + gamma~ (a+ rho a +/- a rho a+ -/+ a+a rho - rho a a+)

(upper signs bosonic) preserves the trace and gives
``d<n>/dt = -2 gamma <n> + gamma~`` for both statistics.
"""
from __future__ import annotations

import cmath
import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from .errors import SingularU, StepTooLarge, TruncationOverflow
from .spectral_models import Statistics
from .volterra_engine import GreenFunctionGrid, TimeGrid

__all__ = [
    "CoefficientTrajectory",
    "RhoTrajectory",
    "coefficients",
    "reconstruct_u",
    "propagate_rho",
    "initial_state",
    "matched_integrals",
]

log = logging.getLogger(__name__)

SINGULAR_DET = 1e-12
TAIL_TOL = 1e-8  # occupation carried beyond the Fock truncation
STIFF_STEP = 0.1  # explicit steps with h (|gamma| + |gamma~|) above this are bridged


def _dag(x):
    return np.conj(np.swapaxes(x, -1, -2))


@dataclass
class CoefficientTrajectory:
    """Master-equation coefficients on a time grid.

    Entries at steps flagged in ``singular`` are NaN (undefined, never
    interpolated).  For one-level systems ``u`` and ``v`` are kept so the
    density matrix can be propagated with step channels matched to the
    Green functions.
    """

    times: np.ndarray
    eps_tilde: np.ndarray
    gamma: np.ndarray
    gamma_tilde: np.ndarray
    singular: np.ndarray
    generator: np.ndarray  # M = udot u^-1
    u: np.ndarray | None = None
    v: np.ndarray | None = None

    @property
    def h(self) -> float:
        return float(self.times[1] - self.times[0])

    def __len__(self):
        return len(self.times)


def coefficients(u, v_diag=None, grid: TimeGrid | None = None, *, udot=None, vdot=None,
                 raise_on_singular: bool = False) -> CoefficientTrajectory:
    """Assemble eps~, gamma and gamma~ from ``u``, ``udot``, ``v`` and ``vdot``.

    ``u`` may be a :class:`GreenFunctionGrid` carrying all four arrays.
    """
    if isinstance(u, GreenFunctionGrid):
        res = u
        grid = res.grid if grid is None else grid
        uu, udot = res.u, res.udot
        v_diag = res.v if v_diag is None else v_diag
        vdot = res.vdot if vdot is None else vdot
    else:
        uu = np.asarray(u)
    if udot is None:
        raise ValueError("udot is required (take it from the Volterra right-hand side)")
    n1, N, _ = uu.shape
    if v_diag is None:
        v_diag = np.zeros_like(uu)
        vdot = np.zeros_like(uu)
    det = np.abs(np.linalg.det(uu))
    singular = det < SINGULAR_DET
    if raise_on_singular and np.any(singular):
        raise SingularU(f"|det u| < {SINGULAR_DET} at t = {grid.times[singular][0]}")
    M = np.full_like(uu, np.nan)
    ok = ~singular
    M[ok] = np.linalg.solve(np.swapaxes(uu[ok], 1, 2), np.swapaxes(udot[ok], 1, 2)).swapaxes(1, 2)
    Md = _dag(M)
    eps_t = 0.5j * (M - Md)
    gam = -0.5 * (M + Md)
    gt = vdot - (M @ v_diag + v_diag @ Md)
    eps_t = 0.5 * (eps_t + _dag(eps_t))
    gam = 0.5 * (gam + _dag(gam))
    gt = 0.5 * (gt + _dag(gt))
    times = grid.times if grid is not None else np.arange(n1, dtype=float)
    return CoefficientTrajectory(times, eps_t, gam, gt, singular, M, uu.copy(), np.asarray(v_diag).copy())


def reconstruct_u(coeffs: CoefficientTrajectory, grid: TimeGrid | None = None):
    """Time-ordered exponential of ``-(i eps~ + gamma)`` on the grid.

    Uses ``u_{n+1} = expm(h (M_n + M_{n+1}) / 2) u_n``, second order in ``h``.

    Raises
    ------
    SingularU
        If any step has undefined coefficients.
    """
    if np.any(coeffs.singular):
        raise SingularU("coefficients are undefined at some steps; cannot reconstruct u")
    h = coeffs.h if grid is None else grid.h
    M = -1j * coeffs.eps_tilde - coeffs.gamma
    n1, N, _ = M.shape
    out = np.empty((n1, N, N), dtype=complex)
    out[0] = np.eye(N)
    for k in range(n1 - 1):
        out[k + 1] = linalg.expm(0.5 * h * (M[k] + M[k + 1])) @ out[k]
    return out


# ----------------------------------------------------------------------------
# single-level density matrices
# ----------------------------------------------------------------------------

@dataclass
class RhoTrajectory:
    """Density-matrix trajectory of one level.

    Populations, the first superdiagonal ``rho_{m, m+1}``, the trace and
    the smallest eigenvalue are kept at every step.  Full matrices are kept
    in ``rho`` only when requested (or when ``D`` is small); the final
    matrix is always available as ``rho_final``.
    """

    times: np.ndarray
    populations: np.ndarray
    coherences: np.ndarray
    trace: np.ndarray
    min_eigenvalue: np.ndarray
    rho_final: np.ndarray
    statistics: Statistics
    n_max: int
    rho: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def occupation(self) -> np.ndarray:
        return self.populations @ np.arange(self.populations.shape[1], dtype=float)

    @property
    def dimension(self) -> int:
        return self.populations.shape[1]


def initial_state(statistics, kind="fock", *, n=0, nbar=0.0, alpha=0.0, n_max=30, matrix=None,
                  tail: float = 1e-14, max_levels: int = 4096):
    """Initial density matrix of one level.

    ``kind`` is ``"fock"`` (``n``), ``"thermal"`` (``nbar``), ``"coherent"``
    (``alpha``), ``"mixed"`` (fermions only: ``1/2``) or ``"matrix"``
    (explicit ``matrix``, zero padded to the truncation).  For bosonic
    thermal and coherent states ``n_max`` is doubled until the omitted
    probability is below ``tail``.
    """
    stats = Statistics.parse(statistics)
    fermionic = stats is Statistics.FERMIONIC
    if fermionic:
        if kind == "fock":
            if n not in (0, 1):
                raise ValueError("a fermionic level has occupation 0 or 1")
            rho = np.zeros((2, 2), dtype=complex)
            rho[n, n] = 1.0
        elif kind == "thermal":
            if not 0.0 <= nbar <= 1.0:
                raise ValueError("fermionic occupation must lie in [0, 1]")
            rho = np.diag([1.0 - nbar, nbar]).astype(complex)
        elif kind == "mixed":
            rho = 0.5 * np.eye(2, dtype=complex)
        elif kind == "matrix":
            rho = np.asarray(matrix, dtype=complex)
            if rho.shape != (2, 2):
                raise ValueError("a fermionic density matrix is 2 x 2")
        elif kind == "coherent":
            raise ValueError("coherent states are bosonic")
        else:
            raise ValueError(f"unknown initial state kind {kind!r}")
        return rho
    if kind == "mixed":
        raise ValueError("the maximally mixed state is defined for a fermionic level only")
    if kind == "fock":
        if n < 0:
            raise ValueError("Fock level must be non-negative")
        D = max(n_max, n) + 1
        rho = np.zeros((D, D), dtype=complex)
        rho[n, n] = 1.0
        return rho
    if kind == "matrix":
        m = np.asarray(matrix, dtype=complex)
        D = max(n_max + 1, m.shape[0])
        rho = np.zeros((D, D), dtype=complex)
        rho[:m.shape[0], :m.shape[1]] = m
        return rho
    if kind not in ("thermal", "coherent"):
        raise ValueError(f"unknown initial state kind {kind!r}")
    D = n_max + 1
    while True:
        k = np.arange(D)
        if kind == "thermal":
            q = nbar / (1.0 + nbar)
            p = q ** k * (1.0 - q)
            omitted = q ** D
        else:
            lg = gammaln(k + 1.0)
            a2 = abs(alpha) ** 2
            logp = k * math.log(a2) - lg - a2 if alpha != 0 else np.where(k == 0, 0.0, -np.inf)
            p = np.exp(logp)
            omitted = max(0.0, 1.0 - p.sum())
        if omitted <= tail or D > max_levels:
            break
        D = 2 * (D - 1) + 1
    if omitted > tail:
        raise TruncationOverflow(f"initial state needs more than {max_levels} Fock levels")
    if kind == "thermal":
        return np.diag(p / p.sum()).astype(complex)
    psi = np.sqrt(p) * np.exp(1j * k * cmath.phase(alpha))
    psi /= np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


def _band_generators(D, k, fermionic):
    """Dissipation and fluctuation blocks acting on ``x_m = rho_{m, m+k}``."""
    m = np.arange(D - k)
    mp = m + k
    top = D - 1
    L = D - k
    Sd = np.zeros((L, L))
    Sf = np.zeros((L, L))
    aat = np.where(mp < top, mp + 1.0, 0.0)  # (a a^dagger)_{m'm'} with truncated a
    sub = np.sqrt(m[1:] * mp[1:].astype(float))
    sup = np.sqrt((m[:-1] + 1.0) * (mp[:-1] + 1.0))
    Sd[m, m] = -(m + mp)
    Sd[m[:-1], m[:-1] + 1] = 2.0 * sup
    sign = -1.0 if fermionic else 1.0
    Sf[m, m] = -sign * m - aat
    Sf[m[1:], m[1:] - 1] = sub
    Sf[m[:-1], m[:-1] + 1] = sign * sup
    return Sd, Sf


class _Liouvillian:
    """Band-decomposed action of the one-level master-equation generator."""

    def __init__(self, D, fermionic):
        self.D = D
        self.fermionic = fermionic
        self.blocks = [_band_generators(D, k, fermionic) for k in range(D)]
        a = np.diag(np.sqrt(np.arange(1, D, dtype=float)), 1)
        self.a = a
        self.ad = a.T.copy()
        self.n = np.diag(np.arange(D, dtype=float))
        self.aad = a @ self.ad

    def channel(self, rho, e_int, g_int, gt_int, bands):
        """``exp`` of the generator with time-integrated coefficients
        ``e_int``, ``g_int`` and ``gt_int`` applied to ``rho``."""
        out = np.zeros_like(rho)
        for k in bands:
            Sd, Sf = self.blocks[k]
            G = g_int * Sd + gt_int * Sf
            idx = np.arange(self.D - k)
            x = rho[idx, idx + k]
            out[idx, idx + k] = (linalg.expm(G) @ x) * np.exp(1j * e_int * k)
            if k > 0:
                out[idx + k, idx] = np.conj(out[idx, idx + k])
        return out

    def action(self, rho, e, g, gt):
        a, ad, n, aad = self.a, self.ad, self.n, self.aad
        out = -1j * e * (n @ rho - rho @ n)
        out += g * (2 * a @ rho @ ad - n @ rho - rho @ n)
        if self.fermionic:
            out += gt * (ad @ rho @ a - a @ rho @ ad + n @ rho - rho @ aad)
        else:
            out += gt * (ad @ rho @ a + a @ rho @ ad - n @ rho - rho @ aad)
        return out


def matched_integrals(u0, u1, v0, v1):
    """Integrated coefficients of the constant one-level generator that maps
    the Green functions ``(u0, v0)`` to ``(u1, v1)``.

    Returns ``(int eps~, int gamma, int gamma~)`` over the interval, fixed by
    ``u1 / u0 = exp(-i int eps~ - int gamma)`` and
    ``v1 = |u1/u0|^2 v0 + int gamma~ (1 - |u1/u0|^2) / (2 int gamma)``.
    """
    r = u1 / u0
    g_int = -math.log(abs(r))
    e_int = -cmath.phase(r)
    x = abs(r) ** 2
    if abs(g_int) < 1e-8:
        gt_int = (v1 - x * v0) * (1.0 + g_int)
    else:
        gt_int = (v1 - x * v0) * 2.0 * g_int / (1.0 - x)
    return e_int, g_int, gt_int


def _log_binom(n, j):
    return gammaln(n + 1.0) - gammaln(j + 1.0) - gammaln(n - j + 1.0)


@functools.lru_cache(maxsize=256)
def _kraus_tables(L, k):
    """Index and log-binomial tables of the loss and amplifier sums on band ``k``."""
    m = np.arange(L)[:, None]
    c = np.arange(L)[None, :]
    jl = c - m  # loss: x'_m <- x_{m+j}
    ja = m - c  # amplifier: x'_m <- x_{m-j}
    jl0, ja0 = np.maximum(jl, 0), np.maximum(ja, 0)
    lb_loss = np.where(jl >= 0, 0.5 * (_log_binom(m + jl0, jl0) + _log_binom(m + k + jl0, jl0)), -np.inf)
    lb_amp = np.where(ja >= 0, 0.5 * (_log_binom(m, ja0) + _log_binom(m + k, ja0)), -np.inf)
    return jl0, ja0, lb_loss, lb_amp


def _xlogy(j, y):
    """``j * log(y)`` with ``0 * log(0) = 0``."""
    if y > 0.0:
        return j * math.log(y)
    return np.where(j > 0, -np.inf, 0.0)


def _gaussian_channel(rho, u, v, bands):
    """Phase-insensitive Gaussian channel ``<a> -> u <a>``,
    ``<n> -> |u|^2 <n> + v`` on a truncated bosonic density matrix.

    The map is a pure loss of transmissivity ``tau = |u|^2 / (1 + v)``,

        x'_m = sum_j sqrt(C(m+j, j) C(m+k+j, j)) tau^(m + k/2) (1 - tau)^j x_{m+j},

    followed by a quantum-limited amplifier of gain ``G = 1 + v``,

        x'_m = sum_j sqrt(C(m, j) C(m+k, j)) G^(-1 - m - k/2) (G - 1)^j x_{m-j},

    acting on each band ``x_m = rho_{m, m+k}``, and a phase ``arg u``.
    """
    D = rho.shape[0]
    G = 1.0 + v
    tau = abs(u) ** 2 / G
    phase = cmath.phase(u) if u != 0 else 0.0
    out = np.zeros_like(rho)
    for k in bands:
        L = D - k
        idx = np.arange(L)
        x = rho[idx, idx + k]
        nz = np.flatnonzero(x)
        if nz.size == 0:
            continue
        top = nz[-1] + 1
        jl, ja, lb_loss, lb_amp = _kraus_tables(L, k)
        mcol = idx[:top, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            wl = lb_loss[:top][:, nz] + _xlogy(mcol + 0.5 * k, tau) + _xlogy(jl[:top][:, nz], 1.0 - tau)
            y = np.exp(wl) @ x[nz]
            wa = lb_amp[:, :top] + (-1.0 - idx[:, None] - 0.5 * k) * math.log(G) + _xlogy(ja[:, :top], G - 1.0)
            z = np.exp(wa) @ y
        out[idx, idx + k] = z * np.exp(-1j * k * phase)
        if k > 0:
            out[idx + k, idx] = np.conj(out[idx, idx + k])
    return out


def _initial_truncation(coeffs, rho0, D, tail_tol, max_n_max):
    """Smallest doubling of ``D - 1`` whose geometric tail is acceptable for
    a thermal state at the largest occupation reached by ``|u|^2 <n>_0 + v``."""
    p0 = np.real(np.diagonal(rho0))
    n0 = float(p0 @ np.arange(len(p0)))
    nbar = float(np.max(np.abs(coeffs.u[:, 0, 0]) ** 2 * n0 + np.real(coeffs.v[:, 0, 0])))
    q = nbar / (1.0 + nbar)
    while 2 * (D - 1) <= max_n_max:
        k = np.arange(D)
        if _tail_occupation(q ** k * (1.0 - q)) <= tail_tol:
            break
        D = 2 * (D - 1) + 1
    return D


def _tail_occupation(p):
    """Occupation ``sum_{n >= n_max} n p_n`` with the populations beyond the
    truncation extrapolated geometrically from the last two levels."""
    top = len(p) - 1
    pt = max(p[-1], 0.0)
    q = min(max(p[-1], 0.0) / p[-2], 0.999) if p[-2] > 0 else 0.0
    if pt == 0.0:
        return 0.0
    # sum_{j>=0} (top + j) pt q^j
    return pt * (top / (1.0 - q) + q / (1.0 - q) ** 2)


def _reservoir_state(vv, fermionic, D):
    """State reached when ``u = 0`` exactly (all memory of rho0 lost)."""
    k = np.arange(D)
    if fermionic:
        p = np.array([1.0 - vv, vv])
    else:
        p = (vv / (1.0 + vv)) ** k / (1.0 + vv)
    rho = np.zeros((D, D), dtype=complex)
    rho[k, k] = p
    return rho


def propagate_rho(coeffs: CoefficientTrajectory, rho0, statistics, grid: TimeGrid | None = None,
                  *, n_max: int | None = None, method: str = "exact", auto_extend: bool = True,
                  tail_tol: float = TAIL_TOL, max_n_max: int = 960, keep: str = "auto",
                  channel: str = "kraus") -> RhoTrajectory:
    """Propagate a one-level density matrix with the exact master equation.

    Parameters
    ----------
    method : {"exact", "heun"}
        ``exact`` applies at each grid time the exponential of the generator
        whose coefficients are averaged over ``[t0, t]``.  For a quadratic
        model the averages are fixed by ``u(t)`` and ``v(t, t)``, so the
        result is the exact solution of the master equation and quadratic
        observables hold to round-off.  ``heun`` integrates the master
        equation step by step with the explicit second-order Runge-Kutta
        scheme on the node coefficients (error ``O(h^2)``); steps touching
        a node with undefined coefficients, or with
        ``h (|gamma| + |gamma~|) > 0.1`` (next to a zero of ``u``), are
        bridged with the exact map from the last regular node.
    n_max : int, optional
        Smallest Fock truncation for bosons (default 30); with
        ``auto_extend`` the start value is doubled until a thermal state at
        the largest occupation reached fits.  If the occupation carried
        by the top level and its geometric extrapolation exceeds
        ``tail_tol`` the run is repeated with ``n_max``
        doubled (``auto_extend``), otherwise :class:`TruncationOverflow`.
    channel : {"kraus", "matched"}
        How the exact bosonic map is applied: closed-form Kraus sums of the
        Gaussian channel, or the matrix exponential of the matched
        generator in the truncated space (small ``n_max`` only).
        Fermionic levels always use the matched generator.
    keep : {"auto", "all", "final"}
        Whether full matrices are stored at every step (``auto``: only for
        ``D <= 64``).
    """
    stats = Statistics.parse(statistics)
    if coeffs.u is None or coeffs.u.shape[1] != 1:
        raise ValueError("density-matrix propagation supports one-level systems only")
    if method not in ("exact", "heun"):
        raise ValueError(f"unknown method {method!r}")
    fermionic = stats is Statistics.FERMIONIC
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.ndim != 2 or rho0.shape[0] != rho0.shape[1]:
        raise ValueError("rho0 must be a square matrix")
    if abs(np.trace(rho0) - 1.0) > 1e-9 or not np.allclose(rho0, rho0.conj().T, atol=1e-12):
        raise ValueError("rho0 must be Hermitian with unit trace")
    if fermionic:
        if rho0.shape[0] != 2:
            raise ValueError("a fermionic level has D = 2")
        D = 2
    else:
        D = max(n_max if n_max is not None else 30, rho0.shape[0] - 1) + 1
        if auto_extend:
            D = _initial_truncation(coeffs, rho0, D, tail_tol, max_n_max)
    while True:
        try:
            return _propagate(coeffs, rho0, stats, D, method, tail_tol, keep, channel)
        except TruncationOverflow:
            if fermionic or not auto_extend or 2 * (D - 1) > max_n_max:
                raise
            log.info("Fock truncation %d too small, doubling", D - 1)
            D = 2 * (D - 1) + 1


def _propagate(coeffs, rho0, stats, D, method, tail_tol, keep, channel):
    fermionic = stats is Statistics.FERMIONIC
    rho = np.zeros((D, D), dtype=complex)
    m0 = min(D, rho0.shape[0])
    rho[:m0, :m0] = rho0[:m0, :m0]
    L = _Liouvillian(D, fermionic)
    bands = [k for k in range(D) if np.any(np.abs(np.diagonal(rho, k)) > 0)]
    diagonal_only = bands == [0]
    u = coeffs.u[:, 0, 0]
    v = np.real(coeffs.v[:, 0, 0])
    e = np.real(coeffs.eps_tilde[:, 0, 0])
    g = np.real(coeffs.gamma[:, 0, 0])
    gt = np.real(coeffs.gamma_tilde[:, 0, 0])
    h = coeffs.h
    sing = coeffs.singular
    if method == "heun":
        with np.errstate(invalid="ignore"):
            rate = h * (np.abs(g) + np.abs(gt))
            sing = sing | ~(rate <= STIFF_STEP)
        # the fastest decay rate in the truncated space is about 2 (D - 1) (|gamma| + |gamma~|)
        # and explicit RK2 needs h * rate < 2
        worst = float(np.max(rate[~sing], initial=0.0)) * (D - 1)
        if worst > 1.0:
            raise StepTooLarge(
                f"explicit step unstable for D = {D}: h (D - 1) (|gamma| + |gamma~|) = {worst:.3g} > 1; "
                "reduce h or n_max, or use method='exact'")
    n1 = len(u)
    store = keep == "all" or (keep == "auto" and D <= 64)
    full = np.empty((n1, D, D), dtype=complex) if store else None
    pops = np.empty((n1, D))
    coh = np.empty((n1, D - 1), dtype=complex)
    trace = np.empty(n1)
    mineig = np.empty(n1)
    bridged = []

    def exact_from(base_rho, i, j):
        if u[j] == 0:
            return _reservoir_state(v[j], fermionic, D)
        if fermionic or channel == "matched":
            return L.channel(base_rho, *matched_integrals(u[i], u[j], v[i], v[j]), bands)
        # Gaussian map from t_i to t_j: <a> -> (u_j/u_i) <a>, <n> -> |u_j/u_i|^2 <n> + w
        r = u[j] / u[i]
        return _gaussian_channel(base_rho, r, v[j] - abs(r) ** 2 * v[i], bands)

    def record(k, r):
        r = 0.5 * (r + r.conj().T)
        if full is not None:
            full[k] = r
        pops[k] = np.real(np.diagonal(r))
        coh[k] = np.diagonal(r, 1)
        trace[k] = pops[k].sum()
        mineig[k] = pops[k].min() if diagonal_only else np.linalg.eigvalsh(r)[0]
        if not fermionic:
            tail = _tail_occupation(pops[k])
            if tail > tail_tol:
                raise TruncationOverflow(
                    f"occupation {tail:.3g} beyond Fock level {D - 1} at t = {coeffs.times[k]:.6g}")
        return r

    cur = record(0, rho)
    base, base_rho = 0, cur
    for k in range(n1 - 1):
        if method == "exact":
            new = exact_from(rho, 0, k + 1)
        elif not sing[k] and not sing[k + 1]:
            k1 = L.action(cur, e[k], g[k], gt[k])
            k2 = L.action(cur + h * k1, e[k + 1], g[k + 1], gt[k + 1])
            new = cur + 0.5 * h * (k1 + k2)
            # |rho_ij| <= 1 for any density matrix; growth well beyond it is the instability
            if (not np.all(np.isfinite(new)) or abs(np.trace(new) - 1.0) > 1e-6
                    or np.max(np.abs(new)) > 1.0 + 1e-2):
                raise StepTooLarge(
                    f"explicit step unstable at t = {coeffs.times[k + 1]:.6g} (h = {h}, D = {D}); "
                    "reduce h or n_max, or use method='exact'")
        else:
            new = exact_from(base_rho, base, k + 1)
            bridged.append((base, k + 1))
        cur = record(k + 1, new)
        if not sing[k + 1]:
            base, base_rho = k + 1, cur
    info = {"method": method, "bridged": bridged}
    return RhoTrajectory(coeffs.times, pops, coh, trace, mineig, cur, stats, D - 1, full, info)
