"""Reservoir spectral densities, band supports and initial occupations.

All energies share one user-chosen unit (hbar = 1); nothing in here
converts units.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from .errors import DivergentOccupation

__all__ = [
    "Statistics",
    "SpectralModel",
    "OhmicFamily",
    "LorentzianCutoff",
    "PhotonicBandEdge",
    "Tabulated",
    "Reservoir",
    "Environment",
    "evaluate_J",
    "band_support",
    "occupation",
    "truncation_point",
    "merge_intervals",
]

TWO_PI = 2.0 * math.pi


class Statistics(str, enum.Enum):
    BOSONIC = "bosonic"
    FERMIONIC = "fermionic"

    @classmethod
    def parse(cls, value) -> "Statistics":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown statistics {value!r}; expected 'bosonic' or 'fermionic'") from None


class SpectralModel:
    """Base class of the spectral-density models.

    Subclasses implement :meth:`J` and :meth:`support`.  The remaining hooks
    feed the quadrature builder: ``scale`` is the natural frequency scale of
    the model, :meth:`features` lists ``(center, width)`` pairs around which
    panels are graded, and :meth:`breakpoints` lists points where ``J`` is not
    smooth.
    """

    kind = "abstract"

    def J(self, omega):
        raise NotImplementedError

    def support(self) -> list[tuple[float, float]]:
        raise NotImplementedError

    def J_split(self, anchor, offset):
        """``J(anchor + offset)``; models singular at an edge override this
        to use the exact ``offset`` when ``anchor`` is that edge."""
        return self.J(np.asarray(anchor, dtype=float) + np.asarray(offset, dtype=float))

    @property
    def scale(self) -> float:
        raise NotImplementedError

    def features(self) -> list[tuple[float, float]]:
        return []

    def breakpoints(self) -> list[float]:
        return []

    def edge_limit(self, edge: float) -> float:
        """Limit of ``J`` at a finite band edge, approached from inside."""
        for lo, hi in self.support():
            if edge == lo:
                return float(self._inside_limit(lo, +1))
            if edge == hi:
                return float(self._inside_limit(hi, -1))
        raise ValueError(f"{edge} is not a band edge of {self!r}")

    def _inside_limit(self, edge, direction):
        return self.J(np.array([edge]))[0]

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class OhmicFamily(SpectralModel):
    """``J(w) = 2 pi eta w (w/wc)^(s-1) exp(-w/wc)`` for ``w > 0``."""

    eta: float
    s: float
    omega_c: float
    kind = "ohmic"

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("OhmicFamily requires eta > 0")
        if not self.s > 0:
            raise ValueError("OhmicFamily requires s > 0")
        if not self.omega_c > 0:
            raise ValueError("OhmicFamily requires omega_c > 0")

    def J(self, omega):
        w = np.asarray(omega, dtype=float)
        x = np.where(w > 0, w, 1.0) / self.omega_c
        val = TWO_PI * self.eta * self.omega_c * x**self.s * np.exp(-x)
        return np.where(w > 0, val, 0.0)

    def support(self):
        return [(0.0, math.inf)]

    @property
    def scale(self):
        return self.omega_c

    def _inside_limit(self, edge, direction):
        return 0.0

    @property
    def closed_form(self) -> bool:
        return self.s in (0.5, 1.0, 3.0)

    def to_dict(self):
        return {"type": self.kind, "eta": self.eta, "s": self.s, "omega_c": self.omega_c}


@dataclass(frozen=True)
class LorentzianCutoff(SpectralModel):
    """Lorentzian of halfwidth ``d`` centred at ``omega_c``, cut at ``|w - omega_c| = Omega``."""

    gamma: float
    d: float
    omega_c: float
    omega_cap: float
    kind = "lorentzian_cutoff"

    def __post_init__(self):
        for name in ("gamma", "d", "omega_cap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"LorentzianCutoff requires {name} > 0")

    def uncut(self, omega):
        w = np.asarray(omega, dtype=float) - self.omega_c
        return self.gamma * self.d**2 / (w**2 + self.d**2)

    def J(self, omega):
        w = np.asarray(omega, dtype=float)
        return np.where(np.abs(w - self.omega_c) <= self.omega_cap, self.uncut(w), 0.0)

    def support(self):
        return [(self.omega_c - self.omega_cap, self.omega_c + self.omega_cap)]

    @property
    def scale(self):
        return self.d

    def features(self):
        return [(self.omega_c, self.d)]

    def _inside_limit(self, edge, direction):
        return float(self.uncut(edge))

    def to_dict(self):
        return {"type": self.kind, "gamma": self.gamma, "d": self.d,
                "omega_c": self.omega_c, "omega_cap": self.omega_cap}


@dataclass(frozen=True)
class PhotonicBandEdge(SpectralModel):
    """Isotropic photonic band edge, ``J(w) = 2C / sqrt(w - omega_e)`` above the edge."""

    c: float
    omega_e: float
    kind = "photonic"

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("PhotonicBandEdge requires C > 0")

    def J(self, omega):
        y = np.asarray(omega, dtype=float) - self.omega_e
        with np.errstate(divide="ignore"):
            val = 2.0 * self.c / np.sqrt(np.where(y > 0, y, 1.0))
        return np.where(y > 0, val, np.where(y == 0, np.inf, 0.0))

    def J_split(self, anchor, offset):
        y = (np.asarray(anchor, dtype=float) - self.omega_e) + np.asarray(offset, dtype=float)
        with np.errstate(divide="ignore"):
            val = 2.0 * self.c / np.sqrt(np.where(y > 0, y, 1.0))
        return np.where(y > 0, val, np.where(y == 0, np.inf, 0.0))

    def support(self):
        return [(self.omega_e, math.inf)]

    @property
    def scale(self):
        return self.c ** (2.0 / 3.0)

    def _inside_limit(self, edge, direction):
        return math.inf

    def to_dict(self):
        return {"type": self.kind, "c": self.c, "omega_e": self.omega_e}


@dataclass(frozen=True, eq=False)
class Tabulated(SpectralModel):
    """Piecewise-linear spectral density through ``(omega, J)`` samples.

    ``J`` vanishes outside ``support`` (default: the sampled range).
    """

    samples: Sequence[tuple[float, float]]
    support_intervals: Sequence[tuple[float, float]] | None = None
    kind = "tabulated"
    omega: np.ndarray = field(init=False, repr=False)
    values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 2:
            raise ValueError("Tabulated needs at least two (omega, J) pairs")
        if np.any(np.diff(arr[:, 0]) <= 0):
            raise ValueError("Tabulated samples must be strictly increasing in omega")
        if np.any(arr[:, 1] < 0) or not np.all(np.isfinite(arr)):
            raise ValueError("Tabulated J values must be finite and non-negative")
        object.__setattr__(self, "omega", arr[:, 0].copy())
        object.__setattr__(self, "values", arr[:, 1].copy())
        sup = self.support_intervals
        if sup is None:
            sup = [(arr[0, 0], arr[-1, 0])]
        sup = [(float(a), float(b)) for a, b in sup]
        for a, b in sup:
            if not (b > a and a >= arr[0, 0] and b <= arr[-1, 0]):
                raise ValueError(f"support interval ({a}, {b}) must lie inside the sampled range")
        if any(sup[i][1] > sup[i + 1][0] for i in range(len(sup) - 1)):
            raise ValueError("support intervals must be sorted and disjoint")
        object.__setattr__(self, "support_intervals", tuple(sup))

    def J(self, omega):
        w = np.asarray(omega, dtype=float)
        inside = np.zeros(w.shape, dtype=bool)
        for a, b in self.support_intervals:
            inside |= (w >= a) & (w <= b)
        return np.where(inside, np.interp(w, self.omega, self.values), 0.0)

    def support(self):
        return list(self.support_intervals)

    @property
    def scale(self):
        return float(np.median(np.diff(self.omega)))

    def breakpoints(self):
        return [float(w) for w in self.omega]

    def to_dict(self):
        d = {"type": self.kind, "samples": [[float(a), float(b)] for a, b in zip(self.omega, self.values)]}
        d["support"] = [list(iv) for iv in self.support_intervals]
        return d


def evaluate_J(model: SpectralModel, omega):
    """Spectral density of ``model`` at ``omega`` (exactly 0 off support)."""
    return model.J(omega)


def band_support(model: SpectralModel) -> list[tuple[float, float]]:
    return model.support()


def merge_intervals(intervals) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def truncation_point(model: SpectralModel, lo: float, ratio: float = 1e-12):
    """Upper cutoff ``W`` of a semi-infinite band starting at ``lo``.

    ``W`` is the first point where ``J(W) / max J < ratio``.  Returns
    ``(W, tail)`` where ``tail`` estimates the neglected ``int_W^inf J``
    from the local decay exponent (``inf`` if the tail is not integrable).
    """
    scale = model.scale
    probe = lo + scale * np.geomspace(1e-6, 1e30, 1200)
    vals = model.J(probe)
    jmax = float(np.max(vals[np.isfinite(vals)]))
    imax = int(np.argmax(np.where(np.isfinite(vals), vals, -1.0)))
    below = np.nonzero((vals < ratio * jmax) & (np.arange(len(probe)) > imax))[0]
    if len(below) == 0:
        return math.inf, math.inf
    k = below[0]
    a, b = probe[k - 1], probe[k]
    for _ in range(60):
        m = math.sqrt((a - lo) * (b - lo)) + lo
        if model.J(np.array([m]))[0] < ratio * jmax:
            b = m
        else:
            a = m
    W = float(b)
    f1, f2 = model.J(np.array([W, lo + 2 * (W - lo)]))
    if f2 <= 0:
        return W, 0.0
    p = math.log(f1 / f2) / math.log(2.0)
    tail = f1 * (W - lo) / (p - 1.0) if p > 1.0 else math.inf
    return W, float(tail)


@dataclass(frozen=True, eq=False)
class Reservoir:
    """One reservoir: spectral model, initial temperature / chemical potential, statistics.

    ``coupling`` is the constant positive-semidefinite matrix ``K`` with
    ``J_ij(w) = J(w) K_ij``; ``None`` means the identity.
    """

    model: SpectralModel
    beta: float = math.inf
    mu: float = 0.0
    statistics: Statistics = Statistics.BOSONIC
    coupling: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "statistics", Statistics.parse(self.statistics))
        beta = float(self.beta)
        if not beta > 0:
            raise ValueError("beta must be positive (use inf for zero temperature)")
        object.__setattr__(self, "beta", beta)
        if self.coupling is not None:
            k = np.atleast_2d(np.asarray(self.coupling, dtype=complex))
            if k.shape[0] != k.shape[1]:
                raise ValueError("coupling matrix must be square")
            if not np.allclose(k, k.conj().T, atol=1e-12):
                raise ValueError("coupling matrix must be Hermitian")
            if np.min(np.linalg.eigvalsh(k)) < -1e-12:
                raise ValueError("coupling matrix must be positive semidefinite")
            object.__setattr__(self, "coupling", k)
        if self.statistics is Statistics.BOSONIC and math.isfinite(beta):
            lo = self.model.support()[0][0]
            if self.mu > lo or (self.mu == lo and self.model.edge_limit(lo) != 0.0):
                raise DivergentOccupation(
                    f"bosonic chemical potential {self.mu} must lie below the band edge {lo}")

    def occupation(self, omega, offset=None):
        return occupation(self, omega, offset)


def occupation(reservoir: Reservoir, omega, offset=None):
    """Bose-Einstein or Fermi-Dirac occupation of ``reservoir`` at ``omega``.

    If ``offset`` is given the energy is ``omega + offset`` and the distance
    to ``mu`` is formed as ``(omega - mu) + offset`` to keep precision next
    to a band edge.
    """
    w = np.asarray(omega, dtype=float)
    x = w - reservoir.mu
    if offset is not None:
        x = x + np.asarray(offset, dtype=float)
    if reservoir.statistics is Statistics.BOSONIC:
        if np.any(x <= 0):
            raise DivergentOccupation(
                f"bosonic occupation diverges for omega <= mu = {reservoir.mu}")
        if math.isinf(reservoir.beta):
            return np.zeros_like(x)
        return 1.0 / np.expm1(reservoir.beta * x)
    if math.isinf(reservoir.beta):
        return np.where(x < 0, 1.0, 0.0)
    return special.expit(-reservoir.beta * x)


@dataclass(frozen=True, eq=False)
class Environment:
    """Collection of reservoirs coupled to an ``N``-level system."""

    reservoirs: tuple
    dimension: int = 0

    def __post_init__(self):
        res = tuple(self.reservoirs)
        object.__setattr__(self, "reservoirs", res)
        dims = {r.coupling.shape[0] for r in res if r.coupling is not None}
        if len(dims) > 1:
            raise ValueError("all coupling matrices must have the same size")
        n = self.dimension or (dims.pop() if dims else 1)
        if dims and n not in dims:
            raise ValueError("coupling matrices do not match the environment dimension")
        object.__setattr__(self, "dimension", int(n))

    @classmethod
    def single(cls, model, **kwargs) -> "Environment":
        return cls((Reservoir(model, **kwargs),))

    def coupling(self, index: int) -> np.ndarray:
        k = self.reservoirs[index].coupling
        return np.eye(self.dimension, dtype=complex) if k is None else k

    def support(self) -> list[tuple[float, float]]:
        return merge_intervals(iv for r in self.reservoirs for iv in r.model.support())

    def J(self, omega) -> np.ndarray:
        """Total ``sum_a J_a(w)`` as an array of shape ``omega.shape + (N, N)``."""
        w = np.asarray(omega, dtype=float)
        out = np.zeros(w.shape + (self.dimension, self.dimension), dtype=complex)
        for i, r in enumerate(self.reservoirs):
            out += r.model.J(w)[..., None, None] * self.coupling(i)
        return out

    def J_split(self, anchor, offset) -> np.ndarray:
        """Like :meth:`J` but evaluated at ``anchor + offset`` without cancellation."""
        a = np.asarray(anchor, dtype=float)
        out = np.zeros(a.shape + (self.dimension, self.dimension), dtype=complex)
        for i, r in enumerate(self.reservoirs):
            out += r.model.J_split(a, offset)[..., None, None] * self.coupling(i)
        return out

    def on_band(self, omega) -> np.ndarray:
        w = np.asarray(omega, dtype=float)
        inside = np.zeros(w.shape, dtype=bool)
        for a, b in self.support():
            inside |= (w > a) & (w < b)
        return inside
