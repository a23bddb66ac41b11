"""Memory kernels and self-energies of an environment.

For a reservoir with spectral density ``J`` the retarded kernel is
``g(tau) = int dw/2pi J(w) exp(-i w tau)``, the thermal kernel ``g~`` carries
an extra occupation factor, and the Laplace transform of ``g`` is the
self-energy ``Sigma(z) = int dw/2pi J(w) / (z - w)``.  On the real axis the
level shift ``Delta(w)`` is the principal value of that integral; off band it
is ``Sigma(w)`` itself.

Every reservoir couples through a constant matrix ``K``, so all matrix
quantities are sums of scalar reservoir functions times ``K``.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import OnBandError
from .quadrature import DEFAULT_ATOL, DEFAULT_RTOL, build_rule
from .spectral_models import (
    Environment,
    LorentzianCutoff,
    OhmicFamily,
    PhotonicBandEdge,
    Reservoir,
    SpectralModel,
    Statistics,
    occupation,
)

__all__ = [
    "SelfEnergyEvaluator",
    "as_environment",
    "kernel_g",
    "kernel_g_tilde",
    "sigma_real",
    "sigma_prime",
    "closed_form_available",
]

TWO_PI = 2.0 * math.pi
SQRT_PI = math.sqrt(math.pi)
_ASYMPTOTIC_X = 50.0
_FACT = np.array([math.factorial(k) for k in range(40)], dtype=float)


def as_environment(env) -> Environment:
    """Accept an Environment, a Reservoir, a model or a list of reservoirs."""
    if isinstance(env, Environment):
        return env
    if isinstance(env, Reservoir):
        return Environment((env,))
    if isinstance(env, SpectralModel):
        return Environment((Reservoir(env),))
    return Environment(tuple(env))


# ----------------------------------------------------------------------------
# closed forms (scalar, one reservoir, coupling K = 1)
# ----------------------------------------------------------------------------

@functools.singledispatch
def _closed_sigma(model, omega):
    return None


@functools.singledispatch
def _closed_dsigma(model, omega):
    return None


def closed_form_available(model) -> bool:
    if isinstance(model, OhmicFamily):
        return model.s in (0.5, 1.0, 3.0)
    return isinstance(model, (LorentzianCutoff, PhotonicBandEdge))


def _e_scaled(x):
    """``exp(-x) Ei(x)`` for moderate ``|x|`` (``x != 0``)."""
    return np.exp(-x) * special.expi(x)


def _asym_sum(x, first, power_shift, weight=None, nterms=30):
    """``sum_{k >= first} c_k k! / x**(k - power_shift)`` for large ``|x|``."""
    k = np.arange(first, first + nterms)
    c = _FACT[k] if weight is None else weight(k) * _FACT[k]
    return np.sum(c[None, :] / x[:, None] ** (k - power_shift)[None, :], axis=1)


@_closed_sigma.register
def _(model: OhmicFamily, omega):
    x = np.atleast_1d(np.asarray(omega, dtype=float)) / model.omega_c
    pref = model.eta * model.omega_c
    out = np.empty_like(x)
    big = np.abs(x) > _ASYMPTOTIC_X
    zero = x == 0
    mid = ~big & ~zero
    s = model.s
    if s == 1.0:
        out[mid] = pref * (x[mid] * _e_scaled(x[mid]) - 1.0)
        out[big] = pref * _asym_sum(x[big], 1, 0)
        out[zero] = -pref
    elif s == 3.0:
        xm = x[mid]
        out[mid] = pref * (xm**3 * _e_scaled(xm) - xm**2 - xm - 2.0)
        out[big] = pref * _asym_sum(x[big], 3, 2)
        out[zero] = -2.0 * pref
    elif s == 0.5:
        neg = x < 0
        y = np.sqrt(np.abs(x))
        out[neg] = pref * (math.pi * y[neg] * special.erfcx(y[neg]) - SQRT_PI)
        pos = ~neg
        out[pos] = pref * (2.0 * SQRT_PI * y[pos] * special.dawsn(y[pos]) - SQRT_PI)
    else:
        return None
    return out.reshape(np.shape(omega))


@_closed_dsigma.register
def _(model: OhmicFamily, omega):
    x = np.atleast_1d(np.asarray(omega, dtype=float)) / model.omega_c
    eta = model.eta
    out = np.empty_like(x)
    big = np.abs(x) > _ASYMPTOTIC_X
    zero = x == 0
    mid = ~big & ~zero
    s = model.s
    if s == 1.0:
        xm = x[mid]
        out[mid] = eta * ((1.0 - xm) * _e_scaled(xm) + 1.0)
        out[big] = -eta * _asym_sum(x[big], 1, -1, weight=lambda k: k)
        out[zero] = -math.inf
    elif s == 3.0:
        xm = x[mid]
        out[mid] = eta * ((3.0 * xm**2 - xm**3) * _e_scaled(xm) + xm**2 - 2.0 * xm - 1.0)
        out[big] = -eta * _asym_sum(x[big], 3, 1, weight=lambda k: k - 2)
        out[zero] = -eta
    elif s == 0.5:
        if np.any(x >= 0):
            raise OnBandError("derivative requested on band")
        y = np.sqrt(-x)
        ex = special.erfcx(y)
        out = -eta * math.pi * (ex / (2.0 * y) + y * ex - 1.0 / SQRT_PI)
    else:
        return None
    return out.reshape(np.shape(omega))


def _lorentz_parts(model: LorentzianCutoff, w):
    d, g, om = model.d, model.gamma, model.omega_cap
    L = g * d * d / (w * w + d * d)
    dL = -2.0 * w * g * d * d / (w * w + d * d) ** 2
    at = math.atan(om / d)
    return L, dL, at


@_closed_sigma.register
def _(model: LorentzianCutoff, omega):
    w = np.asarray(omega, dtype=float) - model.omega_c
    om = model.omega_cap
    L, _, at = _lorentz_parts(model, w)
    with np.errstate(divide="ignore"):
        lg = np.log(np.abs(w + om)) - np.log(np.abs(w - om))
    return L / TWO_PI * (lg + 2.0 * w / model.d * at)


@_closed_dsigma.register
def _(model: LorentzianCutoff, omega):
    w = np.asarray(omega, dtype=float) - model.omega_c
    om = model.omega_cap
    L, dL, at = _lorentz_parts(model, w)
    with np.errstate(divide="ignore"):
        lg = np.log(np.abs(w + om)) - np.log(np.abs(w - om))
        br = 1.0 / (w + om) - 1.0 / (w - om)
    return dL / TWO_PI * (lg + 2.0 * w / model.d * at) + L / TWO_PI * (br + 2.0 * at / model.d)


@_closed_sigma.register
def _(model: PhotonicBandEdge, omega):
    y = model.omega_e - np.asarray(omega, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(y > 0, -model.c / np.sqrt(np.where(y > 0, y, 1.0)), np.where(y == 0, -np.inf, 0.0))


@_closed_dsigma.register
def _(model: PhotonicBandEdge, omega):
    y = model.omega_e - np.asarray(omega, dtype=float)
    if np.any(y <= 0):
        raise OnBandError("derivative requested on band")
    return -0.5 * model.c * y**-1.5


def _closed_kernel(model, tau):
    tau = np.asarray(tau, dtype=float)
    if isinstance(model, OhmicFamily):
        wc = model.omega_c
        return model.eta * wc * wc * special.gamma(model.s + 1.0) * (1.0 + 1j * wc * tau) ** (-(model.s + 1.0))
    if isinstance(model, PhotonicBandEdge):
        with np.errstate(divide="ignore", invalid="ignore"):
            val = model.c * np.exp(-1j * model.omega_e * tau) / np.sqrt(1j * math.pi * tau + 0j)
        return np.where(tau == 0, np.inf + 0j, val)
    return None


# ----------------------------------------------------------------------------
# per-reservoir evaluator
# ----------------------------------------------------------------------------

@dataclass
class _IntervalRule:
    a: float
    b: float  # effective (truncated) upper limit
    rule: object
    J: np.ndarray
    J_lo: float  # J limit at a from inside (0 if infinite)
    J_hi: float
    scale: float


class _ReservoirSE:
    """Scalar self-energy machinery of one reservoir (coupling K = 1)."""

    def __init__(self, reservoir: Reservoir, closed: bool, rtol, atol, max_nodes, analytic_kernel=True):
        self.reservoir = reservoir
        self.analytic_kernel = analytic_kernel
        self.model = reservoir.model
        self.closed = closed
        self.rtol, self.atol, self.max_nodes = rtol, atol, max_nodes
        self._pv_rules = None

    # ---- principal-value machinery ------------------------------------
    def pv_rules(self):
        if self._pv_rules is None:
            model = self.model
            rules = []
            for a, b in model.support():
                scale = min(model.scale, (b - a) / 4) if math.isfinite(b) else model.scale

                def proxy(anc, off, a=a, scale=scale):
                    J = model.J_split(anc, off)
                    return J / (scale + np.abs((anc - a) + off))

                rule = build_rule(proxy, [(a, b)], scale=scale, features=model.features(),
                                  points=model.breakpoints(), rtol=min(self.rtol, 1e-11) * 1e-2,
                                  atol=self.atol * 1e-3, max_nodes=self.max_nodes)
                J = model.J_split(rule.anchor, rule.offset)
                b_eff = b if math.isfinite(b) else rule.upper
                lo = model.edge_limit(a)
                hi = model.edge_limit(b) if math.isfinite(b) else 0.0
                rules.append(_IntervalRule(a, b_eff, rule, J,
                                           lo if math.isfinite(lo) else 0.0,
                                           hi if math.isfinite(hi) else 0.0, scale))
            self._pv_rules = rules
        return self._pv_rules

    def _numeric(self, anchor, offset, order: int, log_edge=None):
        """Numerical ``Delta`` (order 0) or ``Sigma'`` (order 1).

        ``log_edge = (edge, lam)`` evaluates at ``edge -/+ exp(lam)`` where
        offsets below double range are handled through ``lam``.
        """
        anchor = np.atleast_1d(np.asarray(anchor, dtype=float))
        offset = np.atleast_1d(np.asarray(offset, dtype=float))
        omega = anchor + offset
        total = np.zeros(omega.shape)
        for ir in self.pv_rules():
            r = ir.rule
            on = (omega > ir.a) & (omega < ir.b)
            if order == 1 and np.any(on & (omega < ir.b)):
                raise OnBandError("Sigma' is only defined off band")
            Jref = np.where(omega <= ir.a, ir.J_lo, ir.J_hi)
            if np.any(on):
                Jref = Jref.astype(float)
                Jref[on] = self.model.J_split(anchor[on], offset[on])
            for s in range(0, len(omega), 256):
                sl = slice(s, s + 256)
                d = (anchor[sl, None] - r.anchor[None, :]) + (offset[sl, None] - r.offset[None, :])
                diff = ir.J[None, :] - Jref[sl, None]
                tiny = np.abs(d) < 1e-8 * ir.scale
                if order == 0:
                    with np.errstate(divide="ignore", invalid="ignore"):
                        term = diff / d
                    if np.any(tiny):
                        rows = np.nonzero(tiny.any(axis=1))[0]
                        for i in rows:
                            step = 1e-6 * ir.scale
                            w0 = omega[sl][i]
                            jp = (self.model.J(np.array([w0 + step]))[0] - self.model.J(np.array([w0 - step]))[0]) / (2 * step)
                            term[i, tiny[i]] = -jp
                    total[sl] += (term @ r.weight) / TWO_PI
                else:
                    total[sl] -= ((diff / d**2) @ r.weight) / TWO_PI
            # analytic part of the subtraction
            da = (anchor - ir.a) + offset
            db = (anchor - ir.b) + offset
            with np.errstate(divide="ignore", invalid="ignore"):
                if order == 0:
                    la = np.log(np.abs(da))
                    lb = np.log(np.abs(db))
                    if log_edge is not None:
                        edge, lam = log_edge
                        if edge == ir.a:
                            la = np.full_like(la, lam)
                        elif edge == ir.b:
                            lb = np.full_like(lb, lam)
                    part = np.where(Jref != 0, Jref * (la - lb), 0.0)
                else:
                    part = np.where(Jref != 0, Jref * (1.0 / db - 1.0 / da), 0.0)
            total += part / TWO_PI * (-1.0 if order == 1 else 1.0)
        return total

    # ---- public scalar API -------------------------------------------
    def sigma(self, omega):
        if self.closed:
            return _closed_sigma(self.model, omega)
        w = np.asarray(omega, dtype=float)
        return self._numeric(w, np.zeros_like(w), 0).reshape(w.shape)

    def sigma_split(self, anchor, offset):
        if self.closed:
            if isinstance(self.model, PhotonicBandEdge):
                y = (self.model.omega_e - np.asarray(anchor, dtype=float)) - np.asarray(offset, dtype=float)
                with np.errstate(divide="ignore"):
                    return np.where(y > 0, -self.model.c / np.sqrt(np.where(y > 0, y, 1.0)), 0.0)
            return _closed_sigma(self.model, np.asarray(anchor) + np.asarray(offset))
        return self._numeric(anchor, offset, 0)

    def dsigma(self, omega):
        w = np.asarray(omega, dtype=float)
        for a, b in self.model.support():
            if np.any((w > a) & (w < b)):
                raise OnBandError(f"Sigma' requested on band ({a}, {b})")
        if self.closed:
            return _closed_dsigma(self.model, w)
        return self._numeric(w, np.zeros_like(w), 1).reshape(w.shape)

    def log_edge(self, edge, side, lam):
        """``(Sigma, A, R)`` at ``omega = edge + side * exp(lam)`` off band,
        with ``Sigma' = -A exp(-lam) + R``."""
        delta = math.exp(lam) if lam > -745 else 0.0
        omega = edge + side * delta
        touches = any(edge in (a, b) for a, b in self.model.support())
        if not touches:
            return float(self.sigma(np.array([omega]))[0]), 0.0, float(self.dsigma(np.array([omega]))[0])
        model = self.model
        if self.closed and isinstance(model, LorentzianCutoff):
            w = omega - model.omega_c
            L, dL, at = _lorentz_parts(model, w)
            far = 2.0 * model.omega_cap + delta
            lg = (lam - math.log(far)) if side < 0 else (math.log(far) - lam)
            sig = L / TWO_PI * (lg + 2.0 * w / model.d * at)
            # remaining (regular) part of the 1/(w +- Omega) bracket
            other = -1.0 / (w - model.omega_cap) if side < 0 else 1.0 / (w + model.omega_cap)
            R = dL / TWO_PI * (lg + 2.0 * w / model.d * at) + L / TWO_PI * (other + 2.0 * at / model.d)
            A = L / TWO_PI
            return float(sig), float(A), float(R)
        if self.closed and isinstance(model, PhotonicBandEdge):
            if side > 0:
                return 0.0, 0.0, 0.0
            with np.errstate(over="ignore"):
                return -model.c * math.exp(-0.5 * lam), 0.0, -0.5 * model.c * np.exp(-1.5 * lam)
        if self.closed:
            ds = float(self.dsigma(np.array([omega]))[0]) if delta > 0 else -math.inf
            return float(self.sigma_split(np.array([edge]), np.array([side * delta]))[0]), 0.0, ds
        Je = model.edge_limit(edge)
        if not math.isfinite(Je):
            Je = 0.0
        sig = float(self._numeric(np.array([edge]), np.array([side * delta]), 0, log_edge=(edge, lam))[0])
        if delta > 0:
            ds = float(self._numeric(np.array([edge]), np.array([side * delta]), 1)[0])
            return sig, Je / TWO_PI, ds + Je / TWO_PI / delta
        return sig, Je / TWO_PI, 0.0

    def edge_sigma_limit(self, edge, side):
        """Limit of ``Sigma`` approaching a band edge from off band."""
        Je = self.model.edge_limit(edge)
        if Je != 0.0:
            return -math.inf if side < 0 else math.inf
        return float(self.sigma_split(np.array([edge]), np.array([0.0]))[0])

    def kernel(self, tau, tilde: bool):
        tau = np.asarray(tau, dtype=float)
        res = self.reservoir
        model = self.model
        if tilde:
            f_all = self._thermal_trivial()
            if f_all == 0.0:
                return np.zeros(tau.shape, dtype=complex)
            if f_all == 1.0:
                return self.kernel(tau, False)
        else:
            ck = _closed_kernel(model, tau) if self.analytic_kernel else None
            if ck is not None:
                return ck
        points = list(model.breakpoints())
        feats = list(model.features())
        if tilde and math.isinf(res.beta):
            points.append(res.mu)
        elif tilde:
            feats.append((res.mu, 1.0 / res.beta))

        def integrand(anc, off):
            J = model.J_split(anc, off)
            if tilde:
                # occupation distance to mu formed with the exact offset
                J = J * occupation(res, anc, off)
            return J / TWO_PI

        tmax = float(np.max(np.abs(tau))) if tau.size else 0.0
        rule = build_rule(integrand, model.support(), scale=model.scale, points=points,
                          features=feats, rtol=self.rtol, atol=self.atol,
                          max_nodes=self.max_nodes, t_max=tmax)
        return rule.fourier(tau)

    def _thermal_trivial(self):
        """1.0 / 0.0 when the occupation is identically 1 / 0 on the band."""
        res = self.reservoir
        if not math.isinf(res.beta):
            return None
        if res.statistics is Statistics.BOSONIC:
            return 0.0
        sup = self.model.support()
        if res.mu <= sup[0][0]:
            return 0.0
        if res.mu >= sup[-1][1]:
            return 1.0
        return None

    def sigma_complex(self, z):
        """``Sigma(z)`` off the real axis by adaptive quadrature."""
        model = self.model
        out = []
        for zz in np.atleast_1d(z):
            zz = complex(zz)

            def integrand(anc, off, zz=zz):
                return model.J_split(anc, off) / (zz - (anc + off)) / TWO_PI

            feats = list(model.features())
            if abs(zz.imag) > 0:
                feats.append((zz.real, abs(zz.imag)))
            rule = build_rule(integrand, model.support(), scale=model.scale, points=model.breakpoints(),
                              features=feats, rtol=min(self.rtol, 1e-10), atol=self.atol * 1e-2,
                              max_nodes=self.max_nodes)
            out.append(rule.integrate())
        return np.array(out).reshape(np.shape(z))


# ----------------------------------------------------------------------------
# matrix-level evaluator
# ----------------------------------------------------------------------------

class SelfEnergyEvaluator:
    """Kernels and self-energies of an environment.

    Parameters
    ----------
    environment : Environment (or Reservoir / SpectralModel)
    method : {"auto", "closed_form", "numerical"}
        ``auto`` uses closed forms for every reservoir that has one.
    rtol, atol : float
        Quadrature tolerances.
    max_nodes : int
        Node budget of one adaptive rule.

    All matrix-valued methods return arrays of shape ``x.shape + (N, N)``.
    """

    def __init__(self, environment, method: str = "auto", rtol: float = DEFAULT_RTOL,
                 atol: float = DEFAULT_ATOL, max_nodes: int = 400_000):
        self.environment = as_environment(environment)
        if method not in ("auto", "closed_form", "numerical"):
            raise ValueError(f"unknown method {method!r}")
        avail = [closed_form_available(r.model) for r in self.environment.reservoirs]
        if method == "closed_form" and not all(avail):
            raise ValueError("closed form requested but not available for every reservoir")
        self.method = method
        self.parts = [
            _ReservoirSE(r, (method != "numerical") and ok, rtol, atol, max_nodes,
                         analytic_kernel=method != "numerical")
            for r, ok in zip(self.environment.reservoirs, avail)
        ]
        self.couplings = [self.environment.coupling(i) for i in range(len(self.parts))]
        self.dimension = self.environment.dimension
        self.rtol, self.atol = rtol, atol

    # helpers --------------------------------------------------------------
    def _combine(self, scalars, like=None):
        if not self.parts:
            shape = np.shape(like) if like is not None else ()
            return np.zeros(shape + (self.dimension, self.dimension), dtype=complex)
        out = 0
        for s, k in zip(scalars, self.couplings):
            # real couplings keep infinite edge values free of inf * 0j
            kk = k.real if not np.any(k.imag) else k
            out = out + np.asarray(s)[..., None, None] * kk
        return out

    def support(self):
        return self.environment.support()

    def J(self, omega):
        return self.environment.J(omega)

    def on_band(self, omega):
        return self.environment.on_band(omega)

    # kernels --------------------------------------------------------------
    def kernel_g(self, tau):
        return self._combine([p.kernel(tau, False) for p in self.parts], tau)

    def kernel_g_tilde(self, tau):
        return self._combine([p.kernel(tau, True) for p in self.parts], tau)

    @property
    def singular_kernel(self) -> bool:
        return any(isinstance(p.model, PhotonicBandEdge) for p in self.parts)

    # self-energies ------------------------------------------------------
    def sigma_real(self, omega):
        return self._combine([p.sigma(omega) for p in self.parts], omega).real

    def sigma_split(self, anchor, offset):
        return self._combine([p.sigma_split(anchor, offset) for p in self.parts], anchor).real

    def sigma_prime(self, omega):
        w = np.asarray(omega, dtype=float)
        if np.any(self.on_band(w)):
            raise OnBandError("Sigma' is only defined off band")
        return self._combine([p.dsigma(w) for p in self.parts], w).real

    def sigma_prime_fd(self, omega, step=None):
        """Central finite difference of ``Delta`` with one Richardson level."""
        w = np.asarray(omega, dtype=float)
        if np.any(self.on_band(w)):
            raise OnBandError("Sigma' is only defined off band")
        if step is None:
            dist = self.distance_to_band(w)
            step = np.minimum(1e-2 * self.scale, 0.1 * dist)
        step = np.asarray(step, dtype=float)

        def cd(hh):
            return (self.sigma_real(w + hh) - self.sigma_real(w - hh)) / (2 * hh[..., None, None])

        d1 = cd(step)
        d2 = cd(step / 2)
        return (4 * d2 - d1) / 3

    def sigma_complex(self, z):
        z = np.asarray(z, dtype=complex)
        return self._combine([p.sigma_complex(z) for p in self.parts], z)

    def log_edge(self, edge, side, lam):
        """Matrix ``(Sigma, A, R)`` near a band edge; see ``_ReservoirSE.log_edge``."""
        parts = [p.log_edge(edge, side, lam) for p in self.parts]
        if not parts:
            z = np.zeros((self.dimension, self.dimension))
            return z, z, z
        with np.errstate(invalid="ignore"):
            S, A, R = (sum(x[j] * k.real for x, k in zip(parts, self.couplings)) for j in range(3))
        return np.real(S), np.real(A), np.real(R)

    def edge_sigma_limit(self, edge, side):
        vals = []
        for p, k in zip(self.parts, self.couplings):
            touches = any(edge in (a, b) for a, b in p.model.support())
            if touches:
                vals.append((p.edge_sigma_limit(edge, side), k))
            else:
                vals.append((float(p.sigma(np.array([edge]))[0]), k))
        return vals

    # misc ---------------------------------------------------------------
    @property
    def scale(self) -> float:
        return min((p.model.scale for p in self.parts), default=1.0)

    def distance_to_band(self, omega):
        w = np.asarray(omega, dtype=float)
        dist = np.full(w.shape, np.inf)
        for a, b in self.support():
            inside = (w >= a) & (w <= b)
            d = np.minimum(np.abs(w - a), np.abs(w - b) if math.isfinite(b) else np.inf)
            dist = np.where(inside, 0.0, np.minimum(dist, d))
        return dist


def _squeeze(evaluator, arr):
    arr = np.asarray(arr)
    if evaluator.dimension == 1:
        return arr[..., 0, 0]
    return arr


def kernel_g(env, tau, **kwargs):
    """Memory kernel ``g(tau)``; scalar-shaped for one-level environments."""
    ev = SelfEnergyEvaluator(env, **kwargs)
    return _squeeze(ev, ev.kernel_g(tau))


def kernel_g_tilde(env, tau, **kwargs):
    """Thermal kernel ``g~(tau)``; scalar-shaped for one-level environments."""
    ev = SelfEnergyEvaluator(env, **kwargs)
    return _squeeze(ev, ev.kernel_g_tilde(tau))


def sigma_real(env, omega, **kwargs):
    """Level shift ``Delta(omega)`` (equal to ``Sigma`` off band)."""
    ev = SelfEnergyEvaluator(env, **kwargs)
    return _squeeze(ev, ev.sigma_real(omega))


def sigma_prime(env, omega, **kwargs):
    """``dSigma/domega`` off band; raises :class:`OnBandError` on band."""
    ev = SelfEnergyEvaluator(env, **kwargs)
    return _squeeze(ev, ev.sigma_prime(omega))
