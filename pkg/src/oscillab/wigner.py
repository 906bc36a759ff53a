"""Wigner functions of the stochastic oscillator states.

Convention: ``W(x, p) = (1/2pi) int exp(i p v) Psi(x - v/2) conj(Psi(x + v/2)) dv``,
which integrates to 1 over the plane.  For the chirped Hermite state of level
``m`` this is

    W_m = ((-1)**m / pi) exp(-Z) L_m(2 Z),   Z = (p - u1 x)**2 / u2 + u2 x**2

:func:`wigner_partial_stochastic` evaluates the transform numerically
(Gauss-Hermite in ``v``), independent of the closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit
from scipy.special import eval_laguerre, roots_hermite

from .errors import NonPositiveU2, QuadratureNotConverged, UnsupportedOperator
from .quantum import OscState, hermite_h, psi_stc, trapezoid_weights

GH_START = 64
GH_MAX = 4096


def _percentile(a: np.ndarray, q: float, w: Optional[np.ndarray]) -> float:
    if w is None:
        return float(np.percentile(a, q))
    order = np.argsort(a)
    cw = np.cumsum(w[order])
    k = int(np.searchsorted(cw, q / 100.0 * cw[-1]))
    return float(a[order][min(k, a.size - 1)])


@dataclass(frozen=True)
class PhaseGrid:
    """Tensor grid in ``(x, q)`` with ``p = q + shear * x``.

    The shear map has unit Jacobian, so trapezoid weights in ``(x, q)`` give
    phase-space integrals and ``x``-marginals directly.  A sheared grid can
    follow a strongly chirped state whose Wigner function is a thin tilted
    ellipse; with ``shear == 0`` ``p_nodes`` are plain momenta.
    """

    x_nodes: np.ndarray
    p_nodes: np.ndarray
    shear: float = 0.0

    def __post_init__(self):
        for a in (self.x_nodes, self.p_nodes):
            if not np.allclose(a, -a[::-1], atol=1e-12 * max(1.0, np.abs(a).max())):
                raise ValueError("phase grid must be symmetric about the origin")

    @classmethod
    def uniform(cls, x_max: float, p_max: float, nx: int = 129, np_: int = 129) -> "PhaseGrid":
        return cls(np.linspace(-x_max, x_max, nx), np.linspace(-p_max, p_max, np_))

    @classmethod
    def auto(cls, u1: np.ndarray, u2: np.ndarray, n: int = 129,
             weights: Optional[np.ndarray] = None) -> "PhaseGrid":
        """Extents from the 1-99 percentiles of ``(u1, u2)`` (weighted by
        ``|weights|`` when given)."""
        w = None if weights is None else np.abs(np.asarray(weights, dtype=float))
        u2lo = _percentile(u2, 1, w)
        u2hi = _percentile(u2, 99, w)
        u1hi = _percentile(np.abs(u1), 99, w)
        return cls.uniform(6.0 / math.sqrt(u2lo), 6.0 * math.sqrt(u2hi + u1hi**2 / u2lo), n, n)

    @classmethod
    def for_state(cls, state: OscState, m: int = 0, n: int = 129,
                  z_max: float = 60.0) -> "PhaseGrid":
        """Grid sheared by ``u1`` holding ``Z <= z_max`` (plus the level's extra spread)."""
        z = z_max + 4.0 * m
        xm = math.sqrt(z / state.u2)
        qm = math.sqrt(z * state.u2)
        return cls(np.linspace(-xm, xm, n), np.linspace(-qm, qm, n), float(state.u1))

    @property
    def dx(self) -> float:
        return float(self.x_nodes[1] - self.x_nodes[0])

    @property
    def dp(self) -> float:
        return float(self.p_nodes[1] - self.p_nodes[0])

    def mesh(self):
        """``(X, P)`` at every node (``P`` includes the shear)."""
        X, Q = np.meshgrid(self.x_nodes, self.p_nodes, indexing="ij")
        return X, Q + self.shear * X

    def weights(self) -> np.ndarray:
        return np.outer(trapezoid_weights(self.x_nodes), trapezoid_weights(self.p_nodes))


@dataclass(frozen=True)
class WignerField:
    """``values[i, j] = W(x_i, p_j)``; ``raw_norm`` is the integral before any
    renormalisation."""

    grid: PhaseGrid
    values: np.ndarray
    t: float
    provenance: str
    raw_norm: float = 1.0
    meta: dict = field(default_factory=dict)

    def integral(self) -> float:
        return float(np.sum(self.grid.weights() * self.values))

    def x_marginal(self) -> np.ndarray:
        return self.values @ trapezoid_weights(self.grid.p_nodes)

    def p_marginal(self) -> np.ndarray:
        if self.grid.shear:
            raise ValueError("p-marginal needs an unsheared grid")
        return trapezoid_weights(self.grid.x_nodes) @ self.values


def wigner_kernel_ground(x, p, u1, u2):
    """Ground-state Wigner function of the chirped Gaussian ``(u1, u2)``."""
    if np.any(np.asarray(u2) <= 0):
        raise NonPositiveU2("u2 must be positive")
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    return np.exp(-((p - u1 * x) ** 2 + (u2 * x) ** 2) / u2) / math.pi


def wigner_closed_form(m: int, x, p, state: OscState):
    """``((-1)**m / pi) exp(-Z) L_m(2Z)`` for level ``m``."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    u1, u2 = state.u1, state.u2
    Z = (p - u1 * x) ** 2 / u2 + u2 * x * x
    return (-1) ** m / math.pi * np.exp(-Z) * eval_laguerre(m, 2.0 * Z)


def _gh_transform(m: int, x, p, u1: float, u2: float, n_nodes: int):
    z, w = roots_hermite(n_nodes)
    su = math.sqrt(u2)
    y = su * x[:, None]
    omega = 2.0 * (p[:, None] - u1 * x[:, None]) / su
    # imaginary part is odd in z and integrates to zero
    s = np.sum(w * np.cos(omega * z) * hermite_h(m, y - z) * hermite_h(m, y + z), axis=1)
    amp2 = su / math.sqrt(math.pi) / (2.0**m * math.factorial(m))
    return amp2 * np.exp(-(y[:, 0] ** 2)) * (2.0 / su) * s / (2.0 * math.pi)


def wigner_partial_stochastic(m: int, x, p, state: OscState, tol: float = 1e-12,
                              return_nodes: bool = False, chunk: int = 2048):
    """Numeric Wigner transform of ``Psi_m`` by Gauss-Hermite quadrature.

    The node count doubles from 64 until two successive results differ by
    less than ``tol`` (checked per block of points).
    """
    if not 0 <= m <= 8:
        raise ValueError("m must be in [0, 8]")
    x, p = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(p, dtype=float))
    shape = x.shape
    xf, pf = x.ravel(), p.ravel()
    out = np.empty(xf.size)
    n_used = GH_START
    for lo in range(0, xf.size, chunk):
        xs, ps = xf[lo:lo + chunk], pf[lo:lo + chunk]
        n = GH_START
        prev = _gh_transform(m, xs, ps, state.u1, state.u2, n)
        while True:
            n *= 2
            if n > GH_MAX:
                raise QuadratureNotConverged(
                    f"Gauss-Hermite transform not converged at {n // 2} nodes")
            cur = _gh_transform(m, xs, ps, state.u1, state.u2, n)
            if np.max(np.abs(cur - prev)) < tol:
                break
            prev = cur
        out[lo:lo + chunk] = cur
        n_used = max(n_used, n)
    out = out.reshape(shape)
    if not shape:
        out = float(out)
    return (out, n_used) if return_nodes else out


def wigner_field_state(m: int, state: OscState, grid: Optional[PhaseGrid] = None,
                       numeric: bool = True) -> WignerField:
    """Per-realisation Wigner function of level ``m`` on a grid."""
    grid = PhaseGrid.for_state(state, m) if grid is None else grid
    X, P = grid.mesh()
    if numeric:
        vals = wigner_partial_stochastic(m, X, P, state)
    else:
        vals = wigner_closed_form(m, X, P, state)
    f = WignerField(grid, vals, state.t, f"per-trajectory m={m}")
    return f


# ---------------------------------------------------------------- averages


GL_MAX = 48
_GL_NODES, _GL_WEIGHTS, _GL_OFFSETS = [], [], [0]
for _k in range(1, GL_MAX + 1):
    _n, _w = np.polynomial.legendre.leggauss(_k)
    _GL_NODES.extend(_n)
    _GL_WEIGHTS.extend(_w)
    _GL_OFFSETS.append(len(_GL_NODES))
_GL_NODES = np.array(_GL_NODES)
_GL_WEIGHTS = np.array(_GL_WEIGHTS)
_GL_OFFSETS = np.array(_GL_OFFSETS, dtype=np.int64)
_ZCUT = 40.0


@njit(cache=True)
def _accumulate(xs, ps, u1, u2, wt, gx, gw, goff, out):
    """Adds cell averages of ``wt[k] W(u1[k], u2[k])`` over the cells centred
    on the nodes.  The ``p`` integral is exact (erf); ``x`` uses Gauss-Legendre
    with a node count set by the kernel's width and tilt."""
    nx = xs.shape[0]
    npn = ps.shape[0]
    dx = xs[1] - xs[0]
    dp = ps[1] - ps[0]
    p0 = ps[0] - 0.5 * dp
    erfs = np.empty(npn + 1)
    for k in range(u1.shape[0]):
        a = u1[k]
        b = u2[k]
        sb = math.sqrt(b)
        reach = math.sqrt(_ZCUT / b)
        m = int(math.ceil(4.0 + 3.0 * dx * (sb + abs(a) / sb)))
        if m > GL_MAX:
            m = GL_MAX
        o = goff[m - 1]
        # (1/pi) * sqrt(pi b)/2 / (dx dp), times dx/2 from the GL map
        pref = wt[k] * sb / (2.0 * math.sqrt(math.pi)) / dp * 0.5
        for i in range(nx):
            if abs(xs[i]) - 0.5 * dx > reach:
                continue
            for q in range(m):
                x = xs[i] + 0.5 * dx * gx[o + q]
                bx = b * x * x
                if bx > _ZCUT:
                    continue
                g = pref * gw[o + q] * math.exp(-bx)
                c = a * x
                jlo = int(math.floor((c - 7.0 * sb - p0) / dp))
                jhi = int(math.floor((c + 7.0 * sb - p0) / dp)) + 1
                if jhi < 0 or jlo > npn - 1:
                    continue
                if jlo < 0:
                    jlo = 0
                if jhi > npn:
                    jhi = npn
                for j in range(jlo, jhi + 1):
                    erfs[j] = math.erf((p0 + j * dp - c) / sb)
                for j in range(jlo, jhi):
                    out[i, j] += g * (erfs[j + 1] - erfs[j])


def _average_kernels(grid: PhaseGrid, u1, u2, wt) -> np.ndarray:
    if grid.shear:
        raise ValueError("averaged Wigner functions need an unsheared grid")
    out = np.zeros((grid.x_nodes.size, grid.p_nodes.size))
    _accumulate(grid.x_nodes, grid.p_nodes, np.ascontiguousarray(u1, dtype=float),
                np.ascontiguousarray(u2, dtype=float), np.ascontiguousarray(wt, dtype=float),
                _GL_NODES, _GL_WEIGHTS, _GL_OFFSETS, out)
    return out


def wigner_ground_averaged(source, grid: Optional[PhaseGrid] = None, t: Optional[float] = None,
                           normalize: bool = True, rel_cut: float = 1e-14,
                           n: int = 129) -> WignerField:
    """Noise-averaged ground-state Wigner function.

    ``source`` is a ``Q_0`` :class:`~oscillab.fpe.Field2D` (field route, cells
    weighted by ``u2**-1/2 Q_0``) or an ensemble plus save time ``t`` (MC
    route, trajectories weighted by ``I_0``).  Weights are normalised to sum
    to 1, so the result integrates to 1 up to grid truncation; ``raw_norm``
    keeps the weight total (``N_0``).  Values are averages over the cell
    around each node, so kernels narrower than a cell keep their mass.
    Without ``grid`` an ``n x n`` grid is sized from the sources' ``(u1, u2)``
    spread.
    """
    from .fpe import Field2D
    if isinstance(source, Field2D):
        g = source.grid
        U1, U2 = g.mesh()
        wt = (g.weights * U2**-0.5 * source.values).ravel()
        u1 = U1.ravel()
        u2 = U2.ravel()
        keep = np.abs(wt) > rel_cut * np.abs(wt).max()
        u1, u2, wt = u1[keep], u2[keep], wt[keep]
        tt = source.t
        prov = "Q-quadrature"
    else:
        if t is None:
            raise ValueError("an ensemble source needs the save time t")
        u1, u2, i1, _ = source.at(t)
        wt = u2**-0.5 * np.exp(-i1)
        tt = t
        prov = "MC-averaged"
        wt_raw = wt
        wt = wt / wt.size
    raw = float(np.sum(wt)) if isinstance(source, Field2D) else float(np.mean(wt_raw))
    if grid is None:
        grid = PhaseGrid.auto(u1, u2, n, wt)
    vals = _average_kernels(grid, u1, u2, wt)
    if normalize:
        vals = vals / float(np.sum(wt))
    return WignerField(grid, vals, float(tt), prov, raw)


def relative_l1(a: WignerField, b: WignerField) -> float:
    """``int |W_a - W_b| / int |W_b|`` on a shared grid."""
    w = b.grid.weights()
    return float(np.sum(w * np.abs(a.values - b.values)) / np.sum(w * np.abs(b.values)))


# ---------------------------------------------------------------- Weyl symbols


SUPPORTED_OPS = ("X", "P", "X2", "P2", "XP_sym", "H0")


def weyl_symbol_quadratic(op: str, x, p, omega0: float = 1.0):
    """Weyl symbol of a quadratic operator (``XP_sym = (XP + PX)/2``)."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if op == "X":
        return x + 0.0 * p
    if op == "P":
        return p + 0.0 * x
    if op == "X2":
        return x * x + 0.0 * p
    if op == "P2":
        return p * p + 0.0 * x
    if op == "XP_sym":
        return x * p
    if op == "H0":
        return 0.5 * p * p + 0.5 * omega0**2 * x * x
    raise UnsupportedOperator(f"no Weyl symbol for {op!r}; supported: {SUPPORTED_OPS}")


def wigner_expectation(op: str, state: OscState, m: int = 0,
                       grid: Optional[PhaseGrid] = None) -> float:
    """``int int symbol * W_m dx dp`` on a phase grid (closed-form ``W_m``)."""
    grid = PhaseGrid.for_state(state, m, n=401) if grid is None else grid
    X, P = grid.mesh()
    W = wigner_closed_form(m, X, P, state)
    return float(np.sum(grid.weights() * weyl_symbol_quadratic(op, X, P, state.omega0) * W))


def _dpsi(m: int, x: np.ndarray, state: OscState) -> np.ndarray:
    """Analytic derivative of ``psi_stc``."""
    u1, u2 = state.u1, state.u2
    psi = psi_stc(m, x, state)
    out = psi * (1j * u1 - u2) * x
    if m > 0:
        su = math.sqrt(u2)
        # H_m' = 2 m H_{m-1}
        lower = psi_stc(m - 1, x, state) * np.exp(-1j * state.gamma)
        out = out + lower * su * 2.0 * m * math.sqrt(2.0**(m - 1) * math.factorial(m - 1)) \
            / math.sqrt(2.0**m * math.factorial(m))
    return out


def density_expectation(op: str, state: OscState, m: int = 0, n_nodes: int = 4001) -> float:
    """``<Psi_m| A |Psi_m>`` by x-quadrature with the analytic derivative."""
    if op not in SUPPORTED_OPS:
        raise UnsupportedOperator(f"unsupported operator {op!r}")
    X = (math.sqrt(2 * m + 1) + 9.0) / math.sqrt(state.u2)
    x = np.linspace(-X, X, n_nodes)
    w = trapezoid_weights(x)
    psi = psi_stc(m, x, state)
    dpsi = _dpsi(m, x, state)
    rho = np.abs(psi) ** 2
    vals = {
        "X": lambda: np.sum(w * x * rho),
        "X2": lambda: np.sum(w * x * x * rho),
        "P": lambda: np.real(np.sum(w * np.conj(psi) * (-1j) * dpsi)),
        "P2": lambda: np.sum(w * np.abs(dpsi) ** 2),
        # (XP + PX)/2 = x p - i/2
        "XP_sym": lambda: np.real(np.sum(w * np.conj(psi) * x * (-1j) * dpsi)),
    }
    if op == "H0":
        return float(0.5 * vals["P2"]() + 0.5 * state.omega0**2 * vals["X2"]())
    return float(vals[op]())


# ---------------------------------------------------------------- checks


@dataclass(frozen=True)
class WignerReport:
    """``p_marginal`` is None on a sheared grid."""

    normalization: float
    x_marginal: np.ndarray
    p_marginal: np.ndarray
    marginal_sup_error: Optional[float] = None
    marginal_l1_error: Optional[float] = None

    def to_dict(self) -> dict:
        return {"normalization": self.normalization,
                "marginal_sup_error": self.marginal_sup_error,
                "marginal_l1_error": self.marginal_l1_error}


def wigner_checks(field: WignerField, reference_density=None) -> WignerReport:
    """Normalisation and marginals; the x-marginal is compared with
    ``reference_density`` (values on ``field.grid.x_nodes``) when given."""
    xm = field.x_marginal()
    pm = None if field.grid.shear else field.p_marginal()
    norm = field.integral()
    sup = l1 = None
    if reference_density is not None:
        ref = np.asarray(reference_density, dtype=float)
        diff = xm - ref
        sup = float(np.max(np.abs(diff)))
        wx = trapezoid_weights(field.grid.x_nodes)
        l1 = float(np.sum(wx * np.abs(diff)) / np.sum(wx * np.abs(ref)))
    return WignerReport(norm, xm, pm, sup, l1)
