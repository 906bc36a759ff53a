"""Fokker-Planck solver for the Riccati-pair density and its Feynman-Kac weights.

All fields live on the scaled plane ``(u1, u2)`` (rates divided by
``eps**(1/3)``) where the diffusion coefficient is 1 and the only parameter is
``lam``.  The equation solved is

    dF/dt = d1(d1 F - a1 F) - d2(a2 F) - c u1 F - source

with ``a1 = -u1**2 + u2**2 - lam`` and ``a2 = -2 u1 u2``.  ``c = 0`` is the
probability density ``P0``; ``c = alpha + 1`` gives ``Q_alpha``; a ``D``-kind
field is the alpha-derivative of ``Q_alpha`` and is driven by ``-u1 Q``.

Discretisation (finite volumes, Lie splitting per step):

* ``u2`` direction: cells uniform in ``s = ln u2``, explicit upwind fluxes
  with zero flux through the outer faces.  The ``-c u1 F`` term is folded in
  by advecting ``F / u2**(c/2)``, which leaves a constant factor
  ``exp(-+c hs / 2)`` on the inflow term.  For ``c = 1`` this keeps
  ``int u2**-1/2 F`` exactly constant, as it is for the continuous problem;
  the price is an ``O(dt hs)`` change of the plain mass per step.
* ``u1`` direction: implicit Scharfetter-Gummel fluxes (an M-matrix, so the
  step is positivity preserving and conservative), zero flux at both ends.

The ``D`` update is the exact derivative of the ``Q`` update with respect to
``c``, so a finite difference of ``Q`` in alpha reproduces it to O(delta**2).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np
from numba import njit

from .errors import (CenterOutOfDomain, HistoryMismatch, InvalidDomain, NonFinite,
                     StabilityViolation)

DEFAULT_U1_MAX = 12.0
DEFAULT_U2_MIN = 1e-3
DEFAULT_U2_MAX = 40.0
DEFAULT_N = 256
#: fraction of the extent counted as the boundary band
BOUNDARY_BAND = 0.1
BOUNDARY_MASS_TOL = 1e-4
ENLARGE_FACTOR = 1.5


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Tensor grid: uniform nodes in ``u1``, cells uniform in ``ln u2``.

    ``u2_nodes`` are the geometric cell centres; ``v2`` the exact cell
    lengths in ``u2``, so the weights integrate constants exactly.
    """

    u1_max: float
    u2_min: float
    u2_max: float
    n1: int
    n2: int
    u1_nodes: np.ndarray = field(repr=False)
    s_edges: np.ndarray = field(repr=False)
    u2_nodes: np.ndarray = field(repr=False)
    w1: np.ndarray = field(repr=False)
    v2: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n1, self.n2)

    @property
    def h1(self) -> float:
        return 2.0 * self.u1_max / (self.n1 - 1)

    @property
    def hs(self) -> float:
        return float(self.s_edges[1] - self.s_edges[0])

    @property
    def weights(self) -> np.ndarray:
        return np.outer(self.w1, self.v2)

    @property
    def area(self) -> float:
        return 2.0 * self.u1_max * (self.u2_max - self.u2_min)

    def mesh(self):
        return np.meshgrid(self.u1_nodes, self.u2_nodes, indexing="ij")

    def nearest(self, u1: float, u2: float) -> tuple[int, int]:
        i = int(np.argmin(np.abs(self.u1_nodes - u1)))
        j = int(np.argmin(np.abs(np.log(self.u2_nodes) - math.log(u2))))
        return i, j

    def contains(self, u1: float, u2: float) -> bool:
        return abs(u1) <= self.u1_max and self.u2_min <= u2 <= self.u2_max

    def same_as(self, other: "Grid2D") -> bool:
        return (self.n1, self.n2) == (other.n1, other.n2) and np.allclose(
            (self.u1_max, self.u2_min, self.u2_max),
            (other.u1_max, other.u2_min, other.u2_max), rtol=1e-14, atol=0)

    def enlarged(self, factor: float = ENLARGE_FACTOR, refine: int = 1) -> "Grid2D":
        """Grid with every extent grown by ``factor`` and node counts times ``refine``."""
        return build_grid(self.u1_max * factor, self.u2_min / factor, self.u2_max * factor,
                          self.n1 * refine, self.n2 * refine)


def build_grid(u1_max: float = DEFAULT_U1_MAX, u2_min: float = DEFAULT_U2_MIN,
               u2_max: float = DEFAULT_U2_MAX, n1: int = DEFAULT_N,
               n2: int = DEFAULT_N) -> Grid2D:
    if not (u1_max > 0 and u2_min > 0 and u2_max > u2_min):
        raise InvalidDomain(
            f"need u1_max > 0 and 0 < u2_min < u2_max, got {u1_max}, {u2_min}, {u2_max}")
    if n1 < 16 or n2 < 16:
        raise InvalidDomain(f"need at least 16 nodes per axis, got {n1}x{n2}")
    u1 = np.linspace(-u1_max, u1_max, n1)
    h1 = u1[1] - u1[0]
    w1 = np.full(n1, h1)
    w1[0] = w1[-1] = 0.5 * h1
    s_edges = np.linspace(math.log(u2_min), math.log(u2_max), n2 + 1)
    u2 = np.exp(0.5 * (s_edges[:-1] + s_edges[1:]))
    v2 = np.diff(np.exp(s_edges))
    return Grid2D(float(u1_max), float(u2_min), float(u2_max), int(n1), int(n2),
                  u1, s_edges, u2, w1, v2)


@dataclass(frozen=True, eq=False)
class Field2D:
    """Nodal values ``values[i, j]`` at ``(u1_nodes[i], u2_nodes[j])``.

    ``kind`` is ``"P0"``, ``"Q"`` or ``"D"``; ``alpha`` is meaningful for the
    latter two.
    """

    grid: Grid2D
    values: np.ndarray
    t: float = 0.0
    kind: str = "P0"
    alpha: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def c(self) -> float:
        return 0.0 if self.kind == "P0" else self.alpha + 1.0

    def mass(self) -> float:
        return mass(self)

    def scaled(self, factor: float) -> "Field2D":
        return replace(self, values=self.values * factor)

    def l1(self) -> float:
        return float(np.sum(self.grid.weights * np.abs(self.values)))


def mass(field: Field2D) -> float:
    """Grid quadrature of the field."""
    g = field.grid
    return float(g.w1 @ field.values @ g.v2)


def init_delta(grid: Grid2D, center: tuple[float, float], sigma0=None,
               kind: str = "P0", alpha: float = 0.0) -> Field2D:
    """Unit-mass Gaussian standing in for a point mass at ``center``.

    ``sigma0`` is a width or a ``(sigma_u1, sigma_u2)`` pair; an explicit
    value gives a field at ``t = 0``.  By default the field is the short-time
    transition density of a point mass instead: width two ``u1`` cells in
    the diffusive direction, half a cell in ``u2`` (which has no noise of its
    own), and time stamp ``t = sigma_u1**2 / 2``, the time unit diffusion
    needs to build that width.
    """
    u1c, u2c = float(center[0]), float(center[1])
    if not grid.contains(u1c, u2c):
        raise CenterOutOfDomain(f"center {center} outside the grid")
    t0 = 0.0
    if sigma0 is None:
        _, j = grid.nearest(u1c, u2c)
        sigma0 = (2.0 * grid.h1, 0.5 * grid.v2[j])
        t0 = 0.5 * sigma0[0] ** 2
    s1, s2 = np.broadcast_to(np.asarray(sigma0, dtype=float), (2,))
    if not (s1 > 0 and s2 > 0):
        raise ValueError(f"sigma0 must be positive, got {sigma0}")
    U1, U2 = grid.mesh()
    vals = np.exp(-0.5 * ((U1 - u1c) / s1) ** 2 - 0.5 * ((U2 - u2c) / s2) ** 2)
    f = Field2D(grid, vals, t0, kind, alpha)
    return f.scaled(1.0 / mass(f))


def scaled_center(lam: float) -> tuple[float, float]:
    """Scaled image of the noiseless state ``(0, omega0)``."""
    return (0.0, math.sqrt(lam))


# ---------------------------------------------------------------- kernels


@njit(cache=True, nogil=True)
def _bern(x):
    # x / (exp(x) - 1), the Scharfetter-Gummel weight
    if abs(x) < 1e-10:
        return 1.0 - 0.5 * x
    if x > 700.0:
        return 0.0
    return x / math.expm1(x)


@njit(cache=True, nogil=True)
def _sg_factor(u1, u2, w1, lam, dt):
    """Thomas factors of the implicit u1 operator, one row per u2 cell."""
    n1 = u1.shape[0]
    n2 = u2.shape[0]
    h = u1[1] - u1[0]
    low = np.zeros((n2, n1))
    cp = np.zeros((n2, n1))
    inv = np.zeros((n2, n1))
    for j in range(n2):
        q = u2[j] * u2[j] - lam
        diag = w1.copy()
        up = np.zeros(n1)
        lo = np.zeros(n1)
        for i in range(n1 - 1):
            um = 0.5 * (u1[i] + u1[i + 1])
            p = (-um * um + q) * h
            bp = _bern(p)
            bm = _bern(-p)
            # flux F_i -> F_{i+1}: (B(-p) F_i - B(p) F_{i+1}) / h
            diag[i] += dt / h * bm
            up[i] = -dt / h * bp
            diag[i + 1] += dt / h * bp
            lo[i + 1] = -dt / h * bm
        den = diag[0]
        inv[j, 0] = 1.0 / den
        cp[j, 0] = up[0] / den
        for i in range(1, n1):
            den = diag[i] - lo[i] * cp[j, i - 1]
            inv[j, i] = 1.0 / den
            cp[j, i] = up[i] / den
            low[j, i] = lo[i]
    return low, cp, inv


@njit(cache=True, nogil=True)
def _sg_solve(F, w1, low, cp, inv, z):
    n2, n1 = F.shape
    for j in range(n2):
        z[0] = w1[0] * F[j, 0] * inv[j, 0]
        for i in range(1, n1):
            z[i] = (w1[i] * F[j, i] - low[j, i] * z[i - 1]) * inv[j, i]
        F[j, n1 - 1] = z[n1 - 1]
        for i in range(n1 - 2, -1, -1):
            F[j, i] = z[i] - cp[j, i] * F[j, i + 1]


@njit(cache=True, nogil=True)
def _s_step(F, S, has_src, out, stay, inflow, up, rho, drho):
    """Upwind update in ln u2.  ``up[i]`` is +1 when column ``i`` flows down
    (inflow from j+1), -1 when it flows up, 0 when at rest."""
    n2, n1 = F.shape
    for i in range(n1):
        d = up[i]
        r = rho[i]
        for j in range(n2):
            v = stay[j, i] * F[j, i]
            nb = j + d
            if d != 0 and 0 <= nb < n2:
                v += inflow[j, i] * r * F[nb, i]
                if has_src:
                    v += inflow[j, i] * drho[i] * S[nb, i]
            out[j, i] = v


@njit(cache=True, nogil=True)
def _advance(Q, D, with_d, nsteps, w1, low, cp, inv, stay, inflow, up, rho, drho):
    n2, n1 = Q.shape
    bufq = np.empty_like(Q)
    bufd = np.empty_like(D)
    z = np.empty(n1)
    for _ in range(nsteps):
        if with_d:
            _s_step(D, Q, True, bufd, stay, inflow, up, rho, drho)
        _s_step(Q, Q, False, bufq, stay, inflow, up, rho, drho)
        Q[:, :] = bufq
        _sg_solve(Q, w1, low, cp, inv, z)
        if with_d:
            D[:, :] = bufd
            _sg_solve(D, w1, low, cp, inv, z)


# ---------------------------------------------------------------- stepper


def cfl_bound(grid: Grid2D) -> float:
    """Largest stable explicit step for the ``ln u2`` advection."""
    return (1.0 - math.exp(-grid.hs)) / (2.0 * grid.u1_max)


def default_dt(grid: Grid2D) -> float:
    """Half the CFL bound, rounded down so integer times are hit exactly."""
    return 1.0 / math.ceil(1.0 / (0.5 * cfl_bound(grid)))


class Stepper:
    """Precomputed operators for fixed ``(grid, lam, c, dt)``."""

    def __init__(self, grid: Grid2D, lam: float, c: float, dt: Optional[float] = None):
        if not lam > 0:
            raise ValueError(f"lambda must be positive, got {lam}")
        dt = default_dt(grid) if dt is None else float(dt)
        if not dt > 0:
            raise StabilityViolation(f"dt must be positive, got {dt}")
        if dt > cfl_bound(grid) * (1 + 1e-12):
            raise StabilityViolation(
                f"dt={dt:.3e} exceeds the u2-advection bound {cfl_bound(grid):.3e}")
        self.grid, self.lam, self.c, self.dt = grid, float(lam), float(c), dt
        u1 = grid.u1_nodes
        e = np.exp(grid.s_edges)
        # stay/inflow coefficients, arrays shaped (n2, n1)
        speed = 2.0 * np.abs(u1)[None, :]
        down = u1 > 0
        out_edge = np.where(down[None, :], e[:-1, None], e[1:, None])
        in_edge = np.where(down[None, :], e[1:, None], e[:-1, None])
        out_coef = dt * speed * out_edge / grid.v2[:, None]
        in_coef = dt * speed * in_edge / grid.v2[:, None]
        # zero-flux outer faces: no outflow through them
        out_coef[0, down] = 0.0
        out_coef[-1, ~down] = 0.0
        self.stay = np.ascontiguousarray(1.0 - out_coef)
        self.inflow = np.ascontiguousarray(in_coef)
        self.up = np.sign(u1).astype(np.int64)
        # inflow factor (u2_j / u2_nb)**(c/2) and its c-derivative
        self.rho = np.exp(-self.up * self.c * grid.hs / 2.0)
        self.drho = -self.up * grid.hs / 2.0 * self.rho
        self.low, self.cp, self.inv = _sg_factor(u1, grid.u2_nodes, grid.w1, self.lam, dt)

    def advance(self, q: np.ndarray, d: Optional[np.ndarray], nsteps: int) -> None:
        """Advance transposed arrays ``(n2, n1)`` in place by ``nsteps``."""
        with_d = d is not None
        if d is None:
            d = np.zeros((1, 1))
        _advance(q, d, with_d, int(nsteps), self.grid.w1, self.low, self.cp, self.inv,
                 self.stay, self.inflow, self.up, self.rho, self.drho)


def step_forward(field: Field2D, lam: float, c_potential: float,
                 source: Optional[Field2D] = None, dt: Optional[float] = None) -> Field2D:
    """One split step of the equation in the module docstring.

    ``source`` is the ``Q`` field whose ``-u1 * Q`` term drives a ``D``-kind
    equation; the update then is the exact ``c``-derivative of the ``Q``
    update (``source`` must be taken at the start of the step).
    """
    st = Stepper(field.grid, lam, c_potential, dt)
    q = np.ascontiguousarray(field.values.T)
    if source is None:
        st.advance(q, None, 1)
        out = q
    else:
        if not source.grid.same_as(field.grid):
            raise HistoryMismatch("source lives on a different grid")
        s = np.ascontiguousarray(source.values.T)
        st.advance(s, q, 1)
        out = q
    if not np.all(np.isfinite(out)):
        raise NonFinite("non-finite values after step")
    return replace(field, values=out.T.copy(), t=field.t + st.dt)


# ---------------------------------------------------------------- time marching


@dataclass(frozen=True)
class QHistory:
    """Replayable record of a ``Q_alpha`` run: initial field plus the stepping
    recipe.  Replaying reproduces every intermediate field bit for bit."""

    grid: Grid2D
    lam: float
    alpha: float
    dt: float
    initial: Field2D

    @classmethod
    def start(cls, grid: Grid2D, lam: float, alpha: float = 0.0, dt: Optional[float] = None,
              sigma0: Optional[float] = None) -> "QHistory":
        dt = default_dt(grid) if dt is None else dt
        q0 = init_delta(grid, scaled_center(lam), sigma0, kind="Q", alpha=alpha)
        return cls(grid, float(lam), float(alpha), float(dt), q0)


@dataclass(frozen=True)
class StationaryResult:
    field: Field2D
    converged: bool
    residual_history: list
    t_star: float
    growth_rate: float = 0.0
    boundary_mass: float = 0.0
    enlarged: bool = False
    companion: Optional[Field2D] = None
    ratio_history: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    #: ``|F|_1`` at the start and after each unit of time (the mass for ``P0``)
    norm_history: list = field(default_factory=list)


def boundary_mass_fraction(field: Field2D, band: float = BOUNDARY_BAND) -> float:
    """Share of ``|F|`` lying within ``band`` of any face (``ln u2`` for the
    ``u2`` faces)."""
    g = field.grid
    a = g.weights * np.abs(field.values)
    tot = a.sum()
    if tot == 0:
        return 0.0
    near1 = np.abs(g.u1_nodes) > (1.0 - band) * g.u1_max
    s = np.log(g.u2_nodes)
    s0, s1 = g.s_edges[0], g.s_edges[-1]
    near2 = (s < s0 + band * (s1 - s0)) | (s > s1 - band * (s1 - s0))
    mask = near1[:, None] | near2[None, :]
    return float(a[mask].sum() / tot)


def _ratio(num: float, den: float) -> float:
    # an identically zero Q makes D zero too
    if den == 0:
        return 0.0 if num == 0 else math.copysign(math.inf, num)
    return float(num / den)


def _shape_l1(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> float:
    na = np.sum(w * np.abs(a))
    nb = np.sum(w * np.abs(b))
    if na == 0 or nb == 0:
        return 0.0 if na == nb else math.inf
    return float(np.sum(w * np.abs(a / na - b / nb)))


def evolve(lam: float, alpha: float = 0.0, grid: Optional[Grid2D] = None,
           times: Iterable[float] = (1.0,), with_d: bool = False, kind: str = "Q",
           dt: Optional[float] = None, sigma0: Optional[float] = None):
    """Snapshots of ``Q_alpha`` (and ``D_alpha``) at ``times`` from the
    regularised point mass at ``(0, sqrt(lam))``.

    ``kind="P0"`` evolves the probability density instead.  Returns a list of
    ``(Q, D)`` pairs (``D`` is None without ``with_d``).
    """
    grid = build_grid() if grid is None else grid
    c = 0.0 if kind == "P0" else alpha + 1.0
    st = Stepper(grid, lam, c, dt)
    f0 = init_delta(grid, scaled_center(lam), sigma0, kind=kind, alpha=alpha)
    q = np.ascontiguousarray(f0.values.T)
    d = np.zeros_like(q) if with_d else None
    out = []
    n_done = 0
    for t in sorted(float(x) for x in times):
        n = max(0, int(round((t - f0.t) / st.dt)))
        st.advance(q, d, n - n_done)
        n_done = n
        tq = f0.t + n * st.dt
        if not np.all(np.isfinite(q)):
            raise NonFinite(f"non-finite field at t={tq}")
        fq = Field2D(grid, q.T.copy(), tq, kind, alpha)
        fd = Field2D(grid, d.T.copy(), tq, "D", alpha) if with_d else None
        out.append((fq, fd))
    return out


def _march(st: Stepper, q: np.ndarray, d: Optional[np.ndarray], tol: float, t_max: float,
           criterion, t0: float = 0.0):
    """Advance by unit time until ``criterion`` drops to ``tol``."""
    steps_per_unit = int(round(1.0 / st.dt))
    hist = []
    t = t0
    prev = criterion(q, d, None)
    while True:
        if t + 1.0 > t_max + 1e-9:
            return False, hist, t
        st.advance(q, d, steps_per_unit)
        t += 1.0
        if not np.all(np.isfinite(q)) or (d is not None and not np.all(np.isfinite(d))):
            raise NonFinite(f"non-finite field at t={t}")
        r, prev = criterion(q, d, prev)
        hist.append((t, r))
        if r <= tol:
            return True, hist, t


def _solve(lam, alpha, grid, tol, t_max, with_d, kind, auto_enlarge, sigma0):
    c = 0.0 if kind == "P0" else alpha + 1.0
    st = Stepper(grid, lam, c)
    f0 = init_delta(grid, scaled_center(lam), sigma0, kind=kind, alpha=alpha)
    q = np.ascontiguousarray(f0.values.T)
    w = np.ascontiguousarray(grid.weights.T)
    inv_sqrt = (1.0 / np.sqrt(grid.u2_nodes))[:, None]
    norms = [np.sum(w * np.abs(q))]

    if with_d:
        d = np.zeros_like(q)

        def criterion(q, d, prev):
            ratio = _ratio(np.sum(w * inv_sqrt * d), np.sum(w * inv_sqrt * q))
            norms.append(np.sum(w * np.abs(q)))
            if prev is None:
                return ratio
            return abs(ratio - prev), ratio
    else:
        d = None
        snap = [q.copy()]

        def criterion(q, d, prev):
            if prev is None:
                return "started"
            r = _shape_l1(q, snap[0], w)
            snap[0] = q.copy()
            norms.append(np.sum(w * np.abs(q)))
            return r, "started"

    if math.isinf(tol):
        conv, hist, t = True, [(f0.t, 0.0)], f0.t
    else:
        conv, hist, t = _march(st, q, d, tol, t_max, criterion, f0.t)
    growth = math.log(norms[-1] / norms[-2]) if len(norms) > 1 and norms[-2] > 0 else 0.0
    fq = Field2D(grid, q.T.copy(), t, kind, alpha)
    fd = Field2D(grid, d.T.copy(), t, "D", alpha) if with_d else None
    bm = boundary_mass_fraction(fq)
    return conv, hist, t, growth, fq, fd, bm, norms


def _stationary(lam, alpha, grid, tol, t_max, with_d, kind, auto_enlarge, sigma0):
    grid = build_grid() if grid is None else grid
    conv, hist, t, growth, fq, fd, bm, norms = _solve(lam, alpha, grid, tol, t_max, with_d,
                                                       kind, auto_enlarge, sigma0)
    notes = []
    enlarged = False
    if bm >= BOUNDARY_MASS_TOL and auto_enlarge:
        msg = (f"boundary mass {bm:.2e} >= {BOUNDARY_MASS_TOL:.0e} on "
               f"u1_max={grid.u1_max}, u2 in [{grid.u2_min}, {grid.u2_max}]; "
               f"enlarging the domain by {ENLARGE_FACTOR}")
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        notes.append(msg)
        enlarged = True
        conv, hist, t, growth, fq, fd, bm, norms = _solve(lam, alpha, grid.enlarged(), tol,
                                                           t_max, with_d, kind, False, sigma0)
        if bm >= BOUNDARY_MASS_TOL:
            msg = f"boundary mass still {bm:.2e} after enlarging; truncation error likely"
            warnings.warn(msg, RuntimeWarning, stacklevel=3)
            notes.append(msg)
    if with_d:
        return StationaryResult(fd, conv, hist, t, growth, bm, enlarged, companion=fq,
                                ratio_history=hist, warnings=notes, norm_history=norms)
    return StationaryResult(fq, conv, hist, t, growth, bm, enlarged, warnings=notes,
                            norm_history=norms)


def solve_to_stationary(lam: float, alpha: float = 0.0, grid: Optional[Grid2D] = None,
                        tol: float = 1e-8, t_max: float = 200.0, kind: str = "Q",
                        auto_enlarge: bool = True, sigma0: Optional[float] = None
                        ) -> StationaryResult:
    """March ``Q_alpha`` (or ``P0``) until the normalised shape stops changing.

    The residual, checked once per unit time, is the weighted L1 distance
    between successive shapes ``F / |F|_1``.  ``growth_rate`` is the log-rate
    of ``|F|_1`` over the last unit.  If more than ``1e-4`` of the mass ends
    within 10% of a face, the domain is enlarged once and the solve repeated.
    """
    return _stationary(lam, alpha, grid, tol, t_max, False, kind, auto_enlarge, sigma0)


def solve_D0(lam: float, q_history: QHistory, grid: Optional[Grid2D] = None,
             tol: float = 1e-8, t_max: float = 200.0) -> StationaryResult:
    """Co-evolve ``D_alpha`` with a replay of ``q_history`` (zero initial data).

    Convergence is declared when ``N_{a;a} / N_a`` changes by at most ``tol``
    per unit time.  The returned ``companion`` is the replayed ``Q`` field.
    """
    grid = q_history.grid if grid is None else grid
    if not grid.same_as(q_history.grid):
        raise HistoryMismatch("q_history was recorded on a different grid")
    st = Stepper(grid, q_history.lam, q_history.alpha + 1.0)
    if abs(st.dt - q_history.dt) > 1e-15:
        raise HistoryMismatch(f"q_history step {q_history.dt} != solver step {st.dt}")
    q = np.ascontiguousarray(q_history.initial.values.T)
    d = np.zeros_like(q)
    w = np.ascontiguousarray(grid.weights.T)
    inv_sqrt = (1.0 / np.sqrt(grid.u2_nodes))[:, None]

    def criterion(q, d, prev):
        ratio = _ratio(np.sum(w * inv_sqrt * d), np.sum(w * inv_sqrt * q))
        if prev is None:
            return ratio
        return abs(ratio - prev), ratio

    t0 = q_history.initial.t
    if math.isinf(tol):
        conv, hist, t = True, [(t0, 0.0)], t0
    else:
        conv, hist, t = _march(st, q, d, tol, t_max, criterion, t0)
    fq = Field2D(grid, q.T.copy(), t, "Q", q_history.alpha)
    fd = Field2D(grid, d.T.copy(), t, "D", q_history.alpha)
    return StationaryResult(fd, conv, hist, t, 0.0, boundary_mass_fraction(fq),
                            companion=fq, ratio_history=hist)


def solve_Q_and_D(lam: float, alpha: float = 0.0, grid: Optional[Grid2D] = None,
                  tol: float = 1e-8, t_max: float = 200.0, auto_enlarge: bool = True,
                  sigma0: Optional[float] = None) -> StationaryResult:
    """``Q_alpha`` and ``D_alpha`` in lockstep, stopping on the ratio criterion
    of :func:`solve_D0`; ``field`` is ``D``, ``companion`` is ``Q``."""
    return _stationary(lam, alpha, grid, tol, t_max, True, "Q", auto_enlarge, sigma0)


def max_gradient(field: Field2D) -> float:
    """Largest finite-difference gradient magnitude of the normalised field."""
    g = field.grid
    f = field.values / max(field.l1(), 1e-300)
    d1 = np.diff(f, axis=0) / g.h1
    d2 = np.diff(f, axis=1) / np.diff(g.u2_nodes)[None, :]
    return float(max(np.abs(d1).max(), np.abs(d2).max()))
