"""Composite Gauss-Legendre rules adapted to band-structured integrands.

A :class:`Rule` is a fixed set of nodes and weights on the real axis built
for one integrand.  Three panel types appear:

* square-root panels next to a finite band edge ``e``, parametrised as
  ``omega = e + x**2`` (or ``e - x**2``) and graded geometrically in ``x``,
  which turns ``1/sqrt`` edge singularities into smooth integrands;
* linear panels between edges, breakpoints and feature centres;
* geometrically growing linear panels on a semi-infinite tail, stopped once
  the integrand is negligible.

Every node stores an ``anchor`` and an exact ``offset`` (``omega = anchor +
offset``) so integrands that are singular at an edge can be evaluated
without cancellation.  Panels are refined adaptively from the decay of the
Legendre coefficients of the integrand.  Fourier integrals over a rule use
direct sums on square-root panels and a Filon-type Legendre expansion on the
linear ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre
from scipy import special

from .errors import QuadratureNotConverged

__all__ = ["Rule", "build_rule", "gauss_legendre", "DEFAULT_RTOL", "DEFAULT_ATOL"]

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10

NGL = 16
GL_X, GL_W = legendre.leggauss(NGL)
_VANDER = legendre.legvander(GL_X, NGL - 1)
# Legendre coefficients c = _TO_COEF @ f for samples f at the GL nodes.
_TO_COEF = ((np.arange(NGL) + 0.5)[:, None] * _VANDER.T) * GL_W[None, :]
_FILON_PHASE = 2.0 * (-1j) ** np.arange(NGL)

EDGE_LEVELS = 36
DIRECT_PHASE = 4.0


def gauss_legendre(a: float, b: float, n: int = NGL):
    """Nodes and weights of the ``n``-point Gauss-Legendre rule on ``[a, b]``."""
    x, w = (GL_X, GL_W) if n == NGL else legendre.leggauss(n)
    r = 0.5 * (b - a)
    return a + r * (x + 1.0), r * w


@dataclass
class _Panel:
    kind: str  # "lin" or "sqrt"
    anchor: float
    side: int  # +1: omega = anchor + x**2, -1: omega = anchor - x**2 (sqrt panels)
    lo: float
    hi: float
    tail: bool = False

    def nodes(self):
        r = 0.5 * (self.hi - self.lo)
        y = self.lo + r * (GL_X + 1.0)
        if self.kind == "lin":
            offset = y
            weight = r * GL_W
        else:
            offset = self.side * y * y
            weight = r * GL_W * 2.0 * y
        return offset, weight

    def split(self):
        m = 0.5 * (self.lo + self.hi)
        return (_Panel(self.kind, self.anchor, self.side, self.lo, m, self.tail),
                _Panel(self.kind, self.anchor, self.side, m, self.hi, self.tail))

    @property
    def omega_extent(self):
        if self.kind == "lin":
            return self.hi - self.lo
        return self.hi**2 - self.lo**2


class Rule:
    """Fixed quadrature rule; see the module docstring.

    Attributes
    ----------
    anchor, offset, omega, weight : ndarray
        Node data; ``omega = anchor + offset``.
    values : ndarray or None
        Integrand samples the rule was adapted to (``(n, ...)``).
    """

    def __init__(self, panels, values=None):
        self.panels = list(panels)
        anchors, offsets, weights = [], [], []
        for p in self.panels:
            off, w = p.nodes()
            anchors.append(np.full(NGL, p.anchor))
            offsets.append(off)
            weights.append(w)
        if self.panels:
            self.anchor = np.concatenate(anchors)
            self.offset = np.concatenate(offsets)
            self.weight = np.concatenate(weights)
        else:
            self.anchor = self.offset = self.weight = np.zeros(0)
        self.omega = self.anchor + self.offset
        self.values = values
        lin = np.array([p.kind == "lin" for p in self.panels], dtype=bool)
        self._lin = lin
        if self.panels:
            self._lin_center = np.array([0.5 * (p.lo + p.hi) + p.anchor if p.kind == "lin" else 0.0
                                         for p in self.panels])
            self._lin_radius = np.array([0.5 * (p.hi - p.lo) if p.kind == "lin" else 0.0
                                         for p in self.panels])

    def __len__(self):
        return len(self.omega)

    @property
    def upper(self) -> float:
        return float(max((p.anchor + (p.hi if p.kind == "lin" else p.side * p.hi**2)
                          for p in self.panels), default=-math.inf))

    def integrate(self, values=None):
        """``sum_i w_i f_i`` over the leading axis of ``values``."""
        f = self.values if values is None else np.asarray(values)
        return np.tensordot(self.weight, f, axes=(0, 0))

    def fourier(self, t, values=None, chunk: int = 128):
        """``int f(omega) exp(-i omega t) d omega`` for each ``t``.

        Returns an array of shape ``t.shape + values.shape[1:]``.
        """
        f = self.values if values is None else np.asarray(values)
        t = np.asarray(t, dtype=float)
        tail_shape = f.shape[1:]
        f2 = f.reshape(len(self.omega), -1).astype(complex)
        npan = len(self.panels)
        f3 = f2.reshape(npan, NGL, -1)
        lin = self._lin
        # direct part: square-root panels
        idx_direct = np.repeat(~lin, NGL)
        om_d = self.omega[idx_direct]
        wf_d = self.weight[idx_direct, None] * f2[idx_direct]
        # Filon part: Legendre coefficients of f on each linear panel
        coef = np.einsum("kj,pjm->pkm", _TO_COEF, f3[lin])
        cen = self._lin_center[lin]
        rad = self._lin_radius[lin]
        tt = t.ravel()
        out = np.empty((len(tt), f2.shape[1]), dtype=complex)
        for s in range(0, len(tt), chunk):
            tc = tt[s:s + chunk]
            acc = np.zeros((len(tc), f2.shape[1]), dtype=complex)
            if len(om_d):
                acc += np.exp(-1j * np.outer(tc, om_d)) @ wf_d
            if len(rad):
                rt = np.outer(tc, rad)  # (nt, np)
                ks = np.arange(NGL)[None, None, :]
                jk = special.spherical_jn(ks, np.abs(rt)[..., None])
                jk = jk * np.sign(rt)[..., None] ** ks * _FILON_PHASE[None, None, :]
                pref = rad[None, :] * np.exp(-1j * np.outer(tc, cen))
                acc += np.einsum("tp,tpk,pkm->tm", pref, jk, coef)
            out[s:s + chunk] = acc
        return out.reshape(t.shape + tail_shape)


def _panel_values(f, panels):
    offs, anchors = [], []
    for p in panels:
        off, _ = p.nodes()
        offs.append(off)
        anchors.append(np.full(NGL, p.anchor))
    if not panels:
        return np.zeros((0,))
    vals = np.asarray(f(np.concatenate(anchors), np.concatenate(offs)))
    return vals


def _panel_error(p, fv):
    """Integral contribution and pessimistic error of one panel.

    ``fv`` holds integrand samples (already flattened to (NGL, m)).
    """
    off, w = p.nodes()
    jac = w / (0.5 * (p.hi - p.lo) * GL_W)
    g = fv * jac[:, None]
    coef = _TO_COEF[-2:] @ g
    r = 0.5 * (p.hi - p.lo)
    err = r * float(np.max(np.abs(coef[0]) + np.abs(coef[1]))) if g.size else 0.0
    val = w @ fv
    return val, err


def _edge_zone(edge, side, extent):
    """Square-root panels graded toward ``edge`` covering an omega-extent ``extent``."""
    xm = math.sqrt(extent)
    panels = []
    hi = xm
    for _ in range(EDGE_LEVELS):
        lo = 0.5 * hi
        panels.append(_Panel("sqrt", edge, side, lo, hi))
        hi = lo
    panels.append(_Panel("sqrt", edge, side, 0.0, hi))
    return panels


def _graded_linear(p, q, h_left, h_right):
    """Linear panels over ``[p, q]`` growing geometrically away from both ends."""
    length = q - p
    if length <= 0:
        return []
    cuts_l, cuts_r = [p], [q]
    x, h = p, min(h_left, length / 2)
    while x + h < p + length / 2:
        x += h
        cuts_l.append(x)
        h *= 2.0
    x, h = q, min(h_right, length / 2)
    while x - h > p + length / 2:
        x -= h
        cuts_r.append(x)
        h *= 2.0
    cuts = sorted(set(cuts_l + cuts_r))
    return [_Panel("lin", a, 0, 0.0, b - a) for a, b in zip(cuts[:-1], cuts[1:])]


def build_rule(f, intervals, *, scale: float, points=(), features=(),
               rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
               max_nodes: int = 400_000, t_max: float = 0.0,
               tail_ratio: float = 1e-13, truncate: float | None = None,
               edge_zones: bool = True) -> Rule:
    """Build a rule adapted to ``f`` over a union of intervals.

    Parameters
    ----------
    f : callable
        ``f(anchor, offset)`` returning samples of shape ``(n, ...)``.
    intervals : list of (a, b)
        Disjoint integration intervals; ``b`` may be ``inf``.
    scale : float
        Natural width used for the first panels and the edge zones.
    points : sequence of float
        Interior breakpoints (kinks, jumps).
    features : sequence of (center, width)
        Peaks; the centre becomes a breakpoint and panels near it have
        roughly the given width.
    t_max : float
        Largest time for which :meth:`Rule.fourier` will be requested;
        square-root panels are split until ``extent * t_max / 2 <= 4``.
    truncate : float, optional
        Hard upper cutoff for semi-infinite intervals.
    """
    panels: list[_Panel] = []
    tails: list[float] = []
    for a, b in intervals:
        inner = sorted({float(x) for x in points if a < x < b}
                       | {float(c) for c, _ in features if a < c < b})
        widths = {}
        for c, w in features:
            if a < c < b:
                widths[float(c)] = min(widths.get(float(c), math.inf), float(w))
        fin = [a] + inner + ([b] if math.isfinite(b) else [])
        if truncate is not None and not math.isfinite(b):
            fin = [x for x in fin if x < truncate] + [float(truncate)]
            b_eff = float(truncate)
        else:
            b_eff = b

        def local_width(x):
            return widths.get(x, scale)

        for i, (p, q) in enumerate(zip(fin[:-1], fin[1:])):
            length = q - p
            zl = min(scale, length / 4) if (edge_zones and p == a) else 0.0
            zr = min(scale, length / 4) if (edge_zones and q == b_eff and math.isfinite(b)) else 0.0
            if zl > 0:
                panels += _edge_zone(p, +1, zl)
            if zr > 0:
                panels += _edge_zone(q, -1, zr)
            panels += _graded_linear(p + zl, q - zr, local_width(p), local_width(q))
        if not math.isfinite(b_eff):
            start = fin[-1]
            if len(fin) == 1 and edge_zones:
                panels += _edge_zone(start, +1, scale)
                start = start + scale
            tails.append(start)

    state = _refine(f, panels, rtol, atol, max_nodes)
    if tails:
        state = _extend_tails(f, state, tails, scale, rtol, atol, max_nodes, tail_ratio)
    if t_max > 0:
        state = _split_for_time(f, state, t_max, max_nodes)
    pans, vals = state
    order = np.argsort([p.anchor + (p.lo if p.kind == "lin" else p.side * p.lo * p.lo)
                        for p in pans], kind="stable")
    pans = [pans[i] for i in order]
    vals = [vals[i] for i in order]
    shape = vals[0].shape[1:] if vals else ()
    values = np.concatenate(vals).reshape((len(pans) * NGL,) + shape) if vals else None
    return Rule(pans, values)


def _evaluate(f, panels):
    if not panels:
        return []
    v = _panel_values(f, panels)
    v = np.asarray(v)
    n = len(panels)
    return list(v.reshape((n, NGL) + v.shape[1:]))


def _flat(v):
    return v.reshape(NGL, -1)


def _refine(f, panels, rtol, atol, max_nodes, floor=0.0):
    vals = _evaluate(f, panels)
    entries = []
    total = 0.0
    for p, v in zip(panels, vals):
        val, err = _panel_error(p, _flat(v))
        entries.append([p, v, val, err])
        total = total + val
    for _ in range(200):
        tot_norm = float(np.max(np.abs(total))) if np.size(total) else 0.0
        tol = max(atol, rtol * tot_norm, floor)
        errs = np.array([e[3] for e in entries])
        if errs.sum() <= tol:
            break
        if len(entries) * NGL > max_nodes:
            raise QuadratureNotConverged(
                f"node budget {max_nodes} exhausted; error estimate {errs.sum():.3g} > tolerance {tol:.3g}")
        order = np.argsort(errs)[::-1]
        csum = np.cumsum(errs[order])
        # split the largest contributors until what remains is below tol/2
        nsplit = int(np.searchsorted(errs.sum() - csum, 0.5 * tol, side="right")) + 1
        nsplit = max(1, min(nsplit, len(order)))
        chosen = set(order[:nsplit].tolist())
        keep, new_panels = [], []
        for i, e in enumerate(entries):
            if i in chosen:
                new_panels.extend(e[0].split())
            else:
                keep.append(e)
        new_vals = _evaluate(f, new_panels)
        for p, v in zip(new_panels, new_vals):
            val, err = _panel_error(p, _flat(v))
            keep.append([p, v, val, err])
        entries = keep
        total = sum(e[2] for e in entries)
    else:
        raise QuadratureNotConverged("adaptive refinement did not converge in 200 sweeps")
    return [e[0] for e in entries], [e[1] for e in entries]


def _extend_tails(f, state, starts, scale, rtol, atol, max_nodes, tail_ratio):
    pans, vals = state
    total = sum((_panel_error(p, _flat(v))[0] for p, v in zip(pans, vals)), start=0.0)
    for start in starts:
        width = scale
        lo = start
        quiet = 0
        for k in range(400):
            p = _Panel("lin", lo, 0, 0.0, width, tail=True)
            floor = 0.1 * rtol * float(np.max(np.abs(total)))
            sub_p, sub_v = _refine(f, [p], rtol, atol, max_nodes, floor)
            fmax = max(float(np.max(np.abs(v))) for v in sub_v)
            contrib = sum(_panel_error(q, _flat(v))[0] for q, v in zip(sub_p, sub_v))
            pans += sub_p
            vals += sub_v
            total = total + contrib
            tot_norm = float(np.max(np.abs(total)))
            if fmax * width < tail_ratio * max(tot_norm, atol):
                quiet += 1
                if quiet >= 2:
                    break
            else:
                quiet = 0
            lo += width
            width *= 2.0
            if not math.isfinite(lo) or width > 1e300:
                break
        else:
            raise QuadratureNotConverged("integrand tail does not decay")
        if quiet < 2:
            raise QuadratureNotConverged(
                f"integrand tail does not decay; last panel contributes up to {fmax * width:.3g}")
    return pans, vals


def _split_for_time(f, state, t_max, max_nodes):
    pans, vals = state
    out_p, out_v, todo = [], [], []
    for p, v in zip(pans, vals):
        if p.kind == "sqrt" and 0.5 * p.omega_extent * t_max > DIRECT_PHASE:
            todo.append(p)
        else:
            out_p.append(p)
            out_v.append(v)
    while todo:
        pieces = []
        for p in todo:
            n = int(math.ceil(0.5 * p.omega_extent * t_max / DIRECT_PHASE))
            # equal omega extent pieces: uniform in x**2
            edges = np.sqrt(np.linspace(p.lo**2, p.hi**2, n + 1))
            for a, b in zip(edges[:-1], edges[1:]):
                pieces.append(_Panel("sqrt", p.anchor, p.side, float(a), float(b), p.tail))
        if (len(out_p) + len(pieces)) * NGL > max_nodes:
            raise QuadratureNotConverged("node budget exhausted while resolving oscillations")
        vv = _evaluate(f, pieces)
        todo = []
        for p, v in zip(pieces, vv):
            if 0.5 * p.omega_extent * t_max > DIRECT_PHASE * 1.0001:
                todo.append(p)
            else:
                out_p.append(p)
                out_v.append(v)
    return out_p, out_v
