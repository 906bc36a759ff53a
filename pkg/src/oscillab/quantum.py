"""Stochastic oscillator wavefunctions, density kernels and entropy.

Along one noise realisation the ``n``-th state is a dilated, chirped
Hermite function

    Psi_n(x) = (2**n n!)**-1/2 (u2/pi)**1/4
               exp(-i (n + 1/2) gamma + (i u1 - u2) x**2 / 2) H_n(sqrt(u2) x)

with ``u2 = omega0 / r**2`` and ``u1 = r'/r`` taken from the Riccati pair.
For every realisation these states are orthonormal, so each trajectory's
density kernel has unit trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate

from .errors import NonPositiveTrace, NotHermitian, QuadratureNotConverged

MAX_HERMITE = 60
#: eigenvalues below this fraction of the largest are treated as zero
EIG_CLIP = 1e-14


@dataclass(frozen=True)
class OscState:
    """Classical-solution data ``(r, u1 = r'/r, gamma)`` at time ``t``."""

    omega0: float
    r: float
    u1: float
    gamma: float
    t: float = 0.0
    n: int = 0

    def __post_init__(self):
        if not (self.r > 0 and math.isfinite(self.r)):
            raise ValueError(f"r must be positive, got {self.r}")
        if not self.omega0 > 0:
            raise ValueError("omega0 must be positive")

    @property
    def u2(self) -> float:
        return self.omega0 / self.r**2

    @classmethod
    def from_riccati(cls, omega0: float, u1: float, u2: float, gamma: float, t: float = 0.0,
                     n: int = 0) -> "OscState":
        return cls(omega0, math.sqrt(omega0 / u2), u1, gamma, t, n)

    @classmethod
    def from_trajectory(cls, traj, t: float, n: int = 0) -> "OscState":
        from .sde import reconstruct_xi
        j = traj.index_of(t)
        r, gamma = reconstruct_xi(traj)
        return cls(traj.params.omega0, float(r[j]), float(traj.u1[j]), float(gamma[j]),
                   float(traj.save_times[j]), n)

    @classmethod
    def noiseless(cls, omega0: float, t: float = 0.0, n: int = 0) -> "OscState":
        return cls(omega0, 1.0, 0.0, omega0 * t, t, n)


def hermite_h(n: int, y):
    """Physicists' Hermite polynomial by the three-term recurrence."""
    if not 0 <= n <= MAX_HERMITE:
        raise ValueError(f"n must be in [0, {MAX_HERMITE}], got {n}")
    y = np.asarray(y, dtype=float)
    h_prev = np.ones_like(y)
    if n == 0:
        return h_prev if h_prev.ndim else float(h_prev)
    h = 2.0 * y
    for k in range(1, n):
        h_prev, h = h, 2.0 * y * h - 2.0 * k * h_prev
    return h if h.ndim else float(h)


def _norm_const(n: int, u2: float) -> float:
    return (u2 / math.pi) ** 0.25 / math.sqrt(2.0**n * math.factorial(n))


def psi_stc(n: int, x, state: OscState):
    """``Psi_n(x)`` along the realisation described by ``state``."""
    x = np.asarray(x, dtype=float)
    u2 = state.u2
    phase = np.exp(-1j * (n + 0.5) * state.gamma + (0.5j * state.u1 - 0.5 * u2) * x * x)
    out = _norm_const(n, u2) * phase * hermite_h(n, math.sqrt(u2) * x)
    return out if out.ndim else complex(out)


def gram_matrix(state: OscState, n_max: int, extent: Optional[float] = None,
                tol: float = 1e-12) -> np.ndarray:
    """``G[n, m] = int Psi_n conj(Psi_m) dx`` by adaptive quadrature.

    The chirp cancels in the product, leaving a real integrand times the
    phase ``exp(-i (n - m) gamma)``.  All even-parity pairs are integrated
    together as one vector-valued integral.  The default half-width is
    ``sqrt(2 n_max + 1) + 7`` natural widths, where the heaviest Hermite
    tail has dropped below ``1e-15``.
    """
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    if n_max > MAX_HERMITE:
        raise ValueError(f"n_max must be <= {MAX_HERMITE}")
    u2 = state.u2
    su = math.sqrt(u2)
    if extent is None:
        extent = (math.sqrt(2 * n_max + 1) + 7.0) / su
    pairs = [(n, m) for n in range(n_max + 1) for m in range(n, n_max + 1) if (n + m) % 2 == 0]
    ni = np.array([p[0] for p in pairs])
    mi = np.array([p[1] for p in pairs])
    c = np.array([_norm_const(n, u2) * _norm_const(m, u2) for n, m in pairs])

    def f(x):
        y = su * x
        h = np.empty(n_max + 1)
        h[0] = 1.0
        if n_max:
            h[1] = 2.0 * y
        for k in range(1, n_max):
            h[k + 1] = 2.0 * y * h[k] - 2.0 * k * h[k - 1]
        return c * math.exp(-y * y) * h[ni] * h[mi]

    # odd-parity pairs vanish; the even integrand is symmetric, so use [0, X]
    val, err = integrate.quad_vec(f, 0.0, extent, epsabs=tol * 1e-2, epsrel=tol, limit=400)
    val = 2.0 * val
    if 2.0 * err > tol:
        raise QuadratureNotConverged(f"Gram quadrature error estimate {2 * err:.2e} > {tol:.0e}")
    G = np.zeros((n_max + 1, n_max + 1), dtype=complex)
    for k, (n, m) in enumerate(pairs):
        G[n, m] = val[k] * np.exp(-1j * (n - m) * state.gamma)
        G[m, n] = np.conj(G[n, m])
    return G


def density_kernel_partial(m: int, x, x_prime, state: OscState,
                           state_prime: Optional[OscState] = None):
    """``Psi_m(x; state) * conj(Psi_m(x'; state'))`` (same realisation)."""
    sp = state if state_prime is None else state_prime
    return psi_stc(m, x, state) * np.conj(psi_stc(m, x_prime, sp))


def density_kernel_closed_form(m: int, x, x_prime, state: OscState,
                               state_prime: Optional[OscState] = None):
    """The same kernel written out in ``r, r'/r, gamma`` form, evaluated
    independently of :func:`psi_stc`."""
    sp = state if state_prime is None else state_prime
    x = np.asarray(x, dtype=float)
    xp = np.asarray(x_prime, dtype=float)
    om = state.omega0
    r, rp = state.r, sp.r
    pref = math.sqrt(om / (math.pi * r * rp)) / (2.0**m * math.factorial(m))
    expo = (-1j * (m + 0.5) * (state.gamma - sp.gamma)
            + 0.5j * (state.u1 * x**2 - sp.u1 * xp**2)
            - 0.5 * om * (x**2 / r**2 + xp**2 / rp**2))
    return (pref * np.exp(expo) * hermite_h(m, math.sqrt(om) * x / r)
            * hermite_h(m, math.sqrt(om) * xp / rp))


@dataclass(frozen=True)
class DensityKernel:
    """Noise-averaged kernel ``K(x_i, x_j)`` on a uniform grid.

    ``trace`` is the quadrature trace (not forced to 1).
    """

    x_nodes: np.ndarray
    values: np.ndarray
    quad_weights: np.ndarray
    t: float
    m: int = 0
    n_traj: int = 1

    @property
    def trace(self) -> float:
        return float(np.real(np.sum(self.quad_weights * np.diag(self.values))))

    @property
    def diagonal(self) -> np.ndarray:
        return np.real(np.diag(self.values))

    def symmetrized(self) -> np.ndarray:
        """``W**1/2 K W**1/2``: same spectrum as the integral operator."""
        s = np.sqrt(self.quad_weights)
        return s[:, None] * self.values * s[None, :]

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.symmetrized())


def trapezoid_weights(x: np.ndarray) -> np.ndarray:
    h = np.diff(x)
    w = np.zeros_like(x)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def kernel_grid(ensemble, t: float, n_nodes: int = 257, width: float = 6.0) -> np.ndarray:
    """Uniform grid on ``[-X, X]`` with ``X = width * max r / sqrt(omega0)``."""
    _, u2, _, _ = ensemble.at(t)
    rmax = float(np.max(np.sqrt(ensemble.params.omega0 / u2)))
    X = width * rmax / math.sqrt(ensemble.params.omega0)
    return np.linspace(-X, X, n_nodes)


def averaged_density(ensemble, m: int, x_nodes: Optional[np.ndarray], t: float,
                     chunk: int = 1024) -> DensityKernel:
    """Monte-Carlo mean of the per-realisation kernels at save time ``t``.

    Chunks are summed in a fixed order so the result does not depend on how
    the ensemble was computed.
    """
    if x_nodes is None:
        x_nodes = kernel_grid(ensemble, t)
    x = np.asarray(x_nodes, dtype=float)
    u1, u2, _, gamma = ensemble.at(t)
    n = u1.size
    if n == 0:
        raise ValueError("ensemble has no accepted trajectories")
    acc = np.zeros((x.size, x.size), dtype=complex)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        # rows: trajectories, columns: x nodes
        U2 = u2[lo:hi, None]
        psi = (_norm_vec(m, u2[lo:hi])[:, None]
               * np.exp(-1j * (m + 0.5) * gamma[lo:hi, None]
                        + (0.5j * u1[lo:hi, None] - 0.5 * U2) * x[None, :] ** 2)
               * hermite_h(m, np.sqrt(U2) * x[None, :]))
        acc += psi.T @ psi.conj()
    K = acc / n
    K = 0.5 * (K + K.conj().T)
    return DensityKernel(x, K, trapezoid_weights(x), float(t), m, n)


def _norm_vec(n: int, u2: np.ndarray) -> np.ndarray:
    return (u2 / math.pi) ** 0.25 / math.sqrt(2.0**n * math.factorial(n))


def mixed_density(kernels: Sequence[DensityKernel], weights: Sequence[float]) -> DensityKernel:
    """``sum_m w_m K_m`` for an initial mixture over levels; weights must sum to 1."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be non-negative and sum to 1")
    k0 = kernels[0]
    vals = sum(wi * k.values for wi, k in zip(w, kernels))
    return DensityKernel(k0.x_nodes, vals, k0.quad_weights, k0.t, -1, k0.n_traj)


@dataclass(frozen=True)
class EntropyResult:
    raw: float
    normalized: float
    trace: float
    eigenvalues: np.ndarray


def von_neumann_entropy(kernel: DensityKernel, herm_tol: float = 1e-10) -> EntropyResult:
    """Entropy of the kernel's integral operator.

    ``raw = -(1/N) sum p ln p`` and ``normalized = -sum (p/N) ln(p/N)`` with
    ``N = sum p``; eigenvalues below ``1e-14`` of the largest are dropped.
    """
    K = kernel.values
    scale = max(float(np.max(np.abs(K))), 1e-300)
    if np.max(np.abs(K - K.conj().T)) > herm_tol * scale:
        raise NotHermitian("kernel is not Hermitian")
    p = kernel.eigenvalues()
    p = np.where(p > EIG_CLIP * max(p.max(), 0.0), p, 0.0)
    N = float(p.sum())
    if not N > 0:
        raise NonPositiveTrace(f"trace {N} <= 0")
    q = p[p > 0]
    raw = float(-np.sum(q * np.log(q)) / N)
    qn = q / N
    normalized = float(-np.sum(qn * np.log(qn)))
    return EntropyResult(raw, normalized, N, p)
