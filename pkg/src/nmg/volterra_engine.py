"""Time-domain solution of the Dyson equations for ``u`` and ``v``.

``u`` obeys the Volterra integro-differential equation

    du/dt + i eps u(t) + int_0^t g(t - s) u(s) ds = 0,   u(0) = 1,

which is stepped with an implicit trapezoidal rule combined with product
integration of the memory term (``u`` linear on each step).  ``v(t, t)`` is
obtained either from the double-integral representation

    v(t, t) = int_0^t int_0^t u(a) g~(b - a) u(b)^dagger da db

(``method="fdt"``, O(n^2) for the whole trajectory) or by solving the
inhomogeneous Volterra equation for ``v(tau, t)`` column by column
(``method="dyson"``, O(n^3), mainly a cross-check).

:func:`discrete_bath_oracle` gives an independent reference by replacing each
reservoir with a finite set of modes and diagonalising the one-particle
Hamiltonian.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import StepTooLarge
from .quadrature import GL_W, GL_X
from .self_energy import SelfEnergyEvaluator, as_environment
from .spectral_models import Statistics, occupation, truncation_point

__all__ = [
    "SystemSpec",
    "TimeGrid",
    "KernelTable",
    "GreenFunctionGrid",
    "solve_u",
    "solve_v_diag",
    "solve_v_volterra",
    "solve",
    "discrete_bath_oracle",
]

log = logging.getLogger(__name__)

CONTRACTION_BOUND = 1.0 + 1e-6


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """Bare single-particle energies ``eps`` (N x N Hermitian) and statistics."""

    epsilon_s: np.ndarray
    statistics: Statistics = Statistics.BOSONIC

    def __post_init__(self):
        eps = np.atleast_2d(np.asarray(self.epsilon_s, dtype=complex))
        if eps.shape[0] != eps.shape[1]:
            raise ValueError("epsilon_s must be square")
        if not np.allclose(eps, eps.conj().T, atol=1e-12, rtol=0):
            raise ValueError("epsilon_s must be Hermitian")
        object.__setattr__(self, "epsilon_s", eps)
        object.__setattr__(self, "statistics", Statistics.parse(self.statistics))

    @property
    def dimension(self) -> int:
        return self.epsilon_s.shape[0]

    @classmethod
    def scalar(cls, eps: float, statistics=Statistics.BOSONIC) -> "SystemSpec":
        return cls(np.array([[eps]]), statistics)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0, t0 + h, ..., t_end``."""

    t0: float
    t_end: float
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("time step h must be positive")
        if not self.t_end > self.t0:
            raise ValueError("t_end must exceed t0")
        n = (self.t_end - self.t0) / self.h
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"(t_end - t0)/h = {n} is not an integer")

    @property
    def n_steps(self) -> int:
        return int(round((self.t_end - self.t0) / self.h))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.n_steps + 1)

    @property
    def lags(self) -> np.ndarray:
        return self.h * np.arange(self.n_steps + 1)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t0, self.t_end, self.h / factor)


@dataclass
class KernelTable:
    """Kernel samples and product-integration moments on a lag grid.

    ``A[q] = int_{qh}^{(q+1)h} g(r) ((q+1)h - r)/h dr`` and
    ``B[q] = int_{qh}^{(q+1)h} g(r) (r - qh)/h dr``; the memory integral at
    ``t_m`` is ``sum_j W_{m,j} u_j`` with ``W_{m,m} = A[0]``,
    ``W_{m,m-k} = A[k] + B[k-1]`` and ``W_{m,0} = B[m-1]``.
    """

    h: float
    A: np.ndarray  # (n+1, N, N)
    B: np.ndarray
    samples: np.ndarray | None = None

    @property
    def C(self) -> np.ndarray:
        c = np.empty_like(self.A)
        c[0] = self.A[0]
        c[1:] = self.A[1:] + self.B[:-1]
        return c

    @classmethod
    def trapezoid(cls, samples, h):
        """Moments from lag samples ``g(kh)``, ``k = 0..n+1``."""
        s = np.asarray(samples)
        return cls(h, 0.5 * h * s[:-1], 0.5 * h * s[1:], s)

    @classmethod
    def product(cls, kernel, h, n, dimension):
        """Exact moments of a kernel that may be integrably singular at 0."""
        x = 0.5 * (GL_X + 1.0)
        w = 0.5 * GL_W
        # q = 0 with r = h y**2 removes a 1/sqrt(r) singularity
        r0 = h * x * x
        g0 = np.asarray(kernel(r0)).reshape(len(x), dimension, dimension)
        jac0 = 2.0 * h * x * w
        A = np.empty((n + 1, dimension, dimension), dtype=complex)
        B = np.empty_like(A)
        A[0] = np.einsum("i,iab->ab", jac0 * (1.0 - x * x), g0)
        B[0] = np.einsum("i,iab->ab", jac0 * x * x, g0)
        if n >= 1:
            q = np.arange(1, n + 1)
            r = (q[:, None] + x[None, :]) * h
            g = np.asarray(kernel(r.ravel())).reshape(n, len(x), dimension, dimension)
            A[1:] = h * np.einsum("i,qiab->qab", w * (1.0 - x), g)
            B[1:] = h * np.einsum("i,qiab->qab", w * x, g)
        return cls(h, A, B, None)


@dataclass
class GreenFunctionGrid:
    """Solution arrays on a :class:`TimeGrid` (all of shape ``(n+1, N, N)``)."""

    grid: TimeGrid
    u: np.ndarray
    udot: np.ndarray
    v: np.ndarray | None = None
    vdot: np.ndarray | None = None
    v_full: np.ndarray | None = None  # (tau, t, N, N) from the Dyson path
    info: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times


def _evaluator(env, evaluator=None, **kwargs) -> SelfEnergyEvaluator:
    if evaluator is not None:
        return evaluator
    if isinstance(env, SelfEnergyEvaluator):
        return env
    return SelfEnergyEvaluator(as_environment(env), **kwargs)


def kernel_table(evaluator: SelfEnergyEvaluator, grid: TimeGrid, moments: str = "auto") -> KernelTable:
    n = grid.n_steps
    if moments == "auto":
        moments = "product" if evaluator.singular_kernel else "trapezoid"
    if moments == "product":
        return KernelTable.product(evaluator.kernel_g, grid.h, n, evaluator.dimension)
    lags = grid.h * np.arange(n + 2)
    return KernelTable.trapezoid(evaluator.kernel_g(lags), grid.h)


def _volterra_march(eps, table: KernelTable, n, x0, source=None, check=True):
    """March ``x' = -i eps x - int g x + source`` with the implicit trapezoid rule.

    ``x0`` has shape ``(N, P)`` (P right-hand-side columns); ``source`` is
    ``None`` or an array ``(n+1, N, P)``.  Returns ``x`` and ``x'`` with shape
    ``(n+1, N, P)``.
    """
    N = eps.shape[0]
    P = x0.shape[1]
    h = table.h
    A, B, C = table.A, table.B, table.C
    x = np.zeros((n + 1, N, P), dtype=complex)
    F = np.zeros_like(x)
    x[0] = x0
    src = source if source is not None else np.zeros((n + 1, N, P), dtype=complex)
    F[0] = -1j * eps @ x0 + src[0]
    lhs = np.eye(N) + 0.5 * h * (1j * eps + A[0])
    lu = linalg.lu_factor(lhs)
    scalar = N == 1 and P == 1
    if scalar:
        c1 = C[:, 0, 0]
        xs = x[:, 0, 0]
        piv = lhs[0, 0]
    for m in range(n):
        if scalar:
            Ip = B[m, 0, 0] * xs[0]
            if m >= 1:
                Ip = Ip + np.dot(c1[m:0:-1], xs[1:m + 1])
            rhs = xs[m] + 0.5 * h * (F[m, 0, 0] - Ip + src[m + 1, 0, 0])
            xs[m + 1] = rhs / piv
            x[m + 1, 0, 0] = xs[m + 1]
            F[m + 1, 0, 0] = -1j * eps[0, 0] * xs[m + 1] - (Ip + A[0, 0, 0] * xs[m + 1]) + src[m + 1, 0, 0]
            if check and abs(xs[m + 1]) > CONTRACTION_BOUND:
                raise StepTooLarge(f"|u| = {abs(xs[m + 1]):.8f} exceeds 1 at step {m + 1}; reduce h")
            continue
        Ip = B[m] @ x[0]
        if m >= 1:
            Ip = Ip + np.einsum("kab,kbp->ap", C[m:0:-1], x[1:m + 1])
        rhs = x[m] + 0.5 * h * (F[m] - Ip + src[m + 1])
        x[m + 1] = linalg.lu_solve(lu, rhs)
        F[m + 1] = -1j * eps @ x[m + 1] - (Ip + A[0] @ x[m + 1]) + src[m + 1]
        if check:
            smax = np.linalg.norm(x[m + 1], 2) if P == N else 0.0
            if smax > CONTRACTION_BOUND:
                raise StepTooLarge(f"largest singular value of u is {smax:.8f} at step {m + 1}; reduce h")
    return x, F


def solve_u(system: SystemSpec, env, grid: TimeGrid, *, evaluator=None, table=None,
            moments: str = "auto", **kwargs) -> GreenFunctionGrid:
    """Solve the Dyson equation for ``u(t, t0)`` on ``grid``.

    Returns a :class:`GreenFunctionGrid` holding ``u`` and ``udot`` (the
    right-hand side of the equation at each grid point).

    Raises
    ------
    StepTooLarge
        If a singular value of ``u`` exceeds ``1 + 1e-6``.
    """
    ev = _evaluator(env, evaluator, **kwargs)
    if table is None:
        table = kernel_table(ev, grid, moments)
    eps = system.epsilon_s
    N = system.dimension
    if ev.dimension != N:
        raise ValueError(f"environment dimension {ev.dimension} != system dimension {N}")
    u, F = _volterra_march(eps, table, grid.n_steps, np.eye(N, dtype=complex))
    return GreenFunctionGrid(grid, u, F, info={"kernel_table": table, "evaluator": ev})


def _tilde_samples(ev: SelfEnergyEvaluator, grid: TimeGrid):
    return ev.kernel_g_tilde(grid.h * np.arange(grid.n_steps + 1))


def solve_v_diag(system: SystemSpec, env, grid: TimeGrid, u, *, evaluator=None,
                 gt=None, **kwargs):
    """``v(t, t)`` and its time derivative from the double-integral formula.

    ``u`` is a :class:`GreenFunctionGrid` (or an ``(n+1, N, N)`` array).
    Returns ``(v, vdot)``.
    """
    ev = _evaluator(env, evaluator, **kwargs)
    uu = u.u if isinstance(u, GreenFunctionGrid) else np.asarray(u)
    n = grid.n_steps
    h = grid.h
    if gt is None:
        gt = _tilde_samples(ev, grid)
    gt = np.asarray(gt)
    N = uu.shape[1]
    v = np.zeros((n + 1, N, N), dtype=complex)
    vdot = np.zeros_like(v)
    if not np.any(gt):
        return v, vdot
    ud = np.conj(np.swapaxes(uu, 1, 2))  # u^dagger
    gtd = np.conj(np.swapaxes(gt, 1, 2))  # g~^dagger
    c = np.ones(n + 1)
    c[0] = 0.5
    Fsum = np.zeros((N, N), dtype=complex)
    for k in range(n + 1):
        # Y_k = sum_{b<=k} c_b g~_{k-b}^dagger u_b^dagger
        Y = np.einsum("b,bij,bjk->ik", c[:k + 1], gtd[k::-1], ud[:k + 1])
        R = uu[k] @ Y
        X = uu[k] @ gt[0] @ ud[k]
        Fsum = Fsum + c[k] * (R + R.conj().T) - c[k] ** 2 * X
        if k == 0:
            continue
        v[k] = h * h * (Fsum - 0.5 * (R + R.conj().T) + 0.25 * X)
        Bm = h * uu[k] @ (Y - 0.5 * gtd[0] @ ud[k])
        vdot[k] = Bm + Bm.conj().T
    # v(0, 0) = 0; the derivative at t = 0 vanishes as well
    v = 0.5 * (v + np.conj(np.swapaxes(v, 1, 2)))
    return v, vdot


def solve_v_volterra(system: SystemSpec, env, grid: TimeGrid, u, *, evaluator=None,
                     table=None, gt=None, **kwargs):
    """``v(tau, t)`` on the full grid from the inhomogeneous Dyson equation.

    For each column ``t_n`` the equation

        d/dtau v + i eps v + int_0^tau g(tau - s) v(s, t) ds = S(tau, t),
        S(tau, t) = int_0^t g~(tau - s) u(t - s)^dagger ds,

    is stepped in ``tau`` from ``v(0, t) = 0``.  All columns are marched
    together.  Returns ``(v_full, v_diag, vdot_diag)`` where ``v_full`` has
    shape ``(n+1, n+1, N, N)`` indexed ``[tau, t]``.
    """
    ev = _evaluator(env, evaluator, **kwargs)
    uu = u.u if isinstance(u, GreenFunctionGrid) else np.asarray(u)
    n = grid.n_steps
    h = grid.h
    N = uu.shape[1]
    if table is None:
        table = (u.info.get("kernel_table") if isinstance(u, GreenFunctionGrid) else None) \
            or kernel_table(ev, grid)
    if gt is None:
        gt = _tilde_samples(ev, grid)
    gt = np.asarray(gt)
    ud = np.conj(np.swapaxes(uu, 1, 2))
    # trapezoid weights e^{(n)}_b for the source integral over [0, t_n]
    # S[m, n] = h sum_b e_b g~_{m-b} u^dagger_{n-b}
    S = np.zeros((n + 1, n + 1, N, N), dtype=complex)
    lagm = np.arange(n + 1)
    for i in range(N):
        for k in range(N):
            col = gt[:, i, k]
            row = np.conj(gt[:, k, i])
            G = linalg.toeplitz(col, row)  # G[m, b] = g~_{ik}(m - b)
            for j in range(N):
                U = np.zeros((n + 1, n + 1), dtype=complex)
                for nn in range(1, n + 1):
                    w = np.ones(nn + 1)
                    w[0] = w[-1] = 0.5
                    U[:nn + 1, nn] = w * ud[nn - lagm[:nn + 1], k, j]
                S[:, :, i, j] += h * (G @ U)
    # march all columns together: state (N, (n+1)*N)
    src = S.transpose(0, 2, 1, 3).reshape(n + 1, N, (n + 1) * N)
    x0 = np.zeros((N, (n + 1) * N), dtype=complex)
    x, F = _volterra_march(system.epsilon_s, table, n, x0, source=src, check=False)
    vfull = x.reshape(n + 1, N, n + 1, N).transpose(0, 2, 1, 3)
    Ffull = F.reshape(n + 1, N, n + 1, N).transpose(0, 2, 1, 3)
    idx = np.arange(n + 1)
    vdiag = vfull[idx, idx]
    A = Ffull[idx, idx]
    vdot = A + np.conj(np.swapaxes(A, 1, 2))
    vdot[0] = 0.0
    return vfull, vdiag, vdot


def solve(system: SystemSpec, env, grid: TimeGrid, *, v_method: str = "fdt",
          evaluator=None, **kwargs) -> GreenFunctionGrid:
    """Solve for ``u`` and ``v(t, t)`` in one call."""
    ev = _evaluator(env, evaluator, **kwargs)
    res = solve_u(system, ev, grid)
    if v_method == "fdt":
        res.v, res.vdot = solve_v_diag(system, ev, grid, res)
    elif v_method == "dyson":
        res.v_full, res.v, res.vdot = solve_v_volterra(system, ev, grid, res)
    else:
        raise ValueError(f"unknown v_method {v_method!r}")
    return res


# ----------------------------------------------------------------------------
# discretised-bath oracle
# ----------------------------------------------------------------------------

def _sample_interval(a, b, m, semi_infinite, rng):
    """Midpoint samples of ``[a, b]``; square-root spacing on semi-infinite bands."""
    y = (np.arange(m) + (0.5 if rng is None else rng.uniform(0.05, 0.95, m))) / m
    if semi_infinite:
        omega = a + (b - a) * y * y
        dw = 2.0 * (b - a) * y / m
        offset = (b - a) * y * y
    else:
        omega = a + (b - a) * y
        dw = np.full(m, (b - a) / m)
        offset = (b - a) * y
    return omega, dw, offset


def discrete_bath_oracle(system: SystemSpec, env, modes: int, t_points, *,
                         truncation_ratio: float = 1e-12, seed=None, omega_max=None):
    """Reference ``u(t)`` and ``v(t, t)`` from a discretised bath.

    Each reservoir band is sampled with ``modes`` frequencies in total
    (shared equally among its support pieces; zero-temperature fermionic
    reservoirs are split at ``mu``).  Semi-infinite bands are truncated
    where ``J`` falls below ``truncation_ratio`` of its maximum and sampled
    as ``omega = a + (W - a) y**2`` so that edge singularities of ``J f``
    are integrated accurately.  The one-particle Hamiltonian
    ``[[eps, V], [V^dagger, diag(omega)]]`` is diagonalised exactly.

    Returns ``(u, v)`` arrays of shape ``(len(t_points), N, N)``.
    """
    env = as_environment(env)
    rng = None if seed is None else np.random.default_rng(seed)
    N = system.dimension
    freqs, cols, occs = [], [], []
    for idx, res in enumerate(env.reservoirs):
        K = env.coupling(idx)
        lam, vec = np.linalg.eigh(K)
        keep = lam > 1e-14 * max(lam.max(), 1e-300)
        Lcols = vec[:, keep] * np.sqrt(lam[keep])[None, :]
        pieces = []
        for a, b in res.model.support():
            semi = not math.isfinite(b)
            if semi:
                b = omega_max if omega_max is not None else truncation_point(res.model, a, truncation_ratio)[0]
            cuts = [a, b]
            if (res.statistics is Statistics.FERMIONIC and math.isinf(res.beta) and a < res.mu < b):
                cuts = [a, res.mu, b]
            for p, q in zip(cuts[:-1], cuts[1:]):
                pieces.append((p, q, semi and q == b))
        total_len = sum(math.sqrt(q - p) if s else (q - p) for p, q, s in pieces)
        for p, q, s in pieces:
            share = (math.sqrt(q - p) if s else (q - p)) / total_len
            m = max(8, int(round(modes * share)))
            om, dw, off = _sample_interval(p, q, m, s and p == res.model.support()[0][0], rng)
            Jv = res.model.J_split(np.full(m, p), off)
            f = occupation(res, np.full(m, p), off)
            amp = np.sqrt(Jv * dw / (2.0 * math.pi))
            for c in range(Lcols.shape[1]):
                freqs.append(om)
                cols.append(amp[None, :] * Lcols[:, c][:, None])
                occs.append(f)
    if freqs:
        om = np.concatenate(freqs)
        V = np.concatenate(cols, axis=1)
        f = np.concatenate(occs)
    else:
        om = np.zeros(0)
        V = np.zeros((N, 0))
        f = np.zeros(0)
    D = N + len(om)
    H = np.zeros((D, D), dtype=complex)
    H[:N, :N] = system.epsilon_s
    H[:N, N:] = V
    H[N:, :N] = V.conj().T
    H[np.arange(N, D), np.arange(N, D)] = om
    if not np.any(H.imag):
        lam, Q = np.linalg.eigh(H.real)
    else:
        lam, Q = np.linalg.eigh(H)
    QS = Q[:N]
    QBf = Q[N:] * np.sqrt(f)[:, None]
    t = np.atleast_1d(np.asarray(t_points, dtype=float))
    u = np.empty((len(t), N, N), dtype=complex)
    v = np.empty_like(u)
    for i, tt in enumerate(t):
        ph = np.exp(-1j * lam * tt)
        QSP = QS * ph[None, :]
        u[i] = QSP @ QS.conj().T
        Fw = QSP @ QBf.conj().T  # u-like block weighted by sqrt(f)
        v[i] = Fw @ Fw.conj().T
    return u, v
