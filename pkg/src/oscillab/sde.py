"""Riccati-pair ensembles for the white-noise-driven oscillator frequency.

The complex logarithmic derivative of the classical solution, split as
``u1 + i*u2``, obeys

    du1 = (-u1**2 + u2**2 - omega0**2) dt - sqrt(2*eps) dW
    du2 = -2 u1 u2 dt

with ``(u1, u2) = (0, omega0)`` before the noise is switched on.  ``u2`` is
carried as ``log(u2)`` so it stays positive by construction.  Each trajectory
also accumulates ``int u1 dt`` and ``int u2 dt`` (the latter is the phase
``gamma``).

The default stepper integrates the linear equation behind the pair,
``xi'' = -Omega(t)**2 xi`` with ``u1 + i u2 = xi'/xi``, by a symplectic
split step.  It passes through the caustics where ``u1`` blows up without
any step control.  Plain Euler-Maruyama with step halving is available as
``scheme="euler"`` (or ``"euler-reject"``, which drops paths that need a
step below ``dt / 1024``).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numba import njit

from .errors import InvalidParameters, NonFinite, RejectionRateExceeded, StepFailure

#: |u1| * h above this triggers step halving.
HALVING_THRESHOLD = 0.1
#: dt_min = dt / 2**MAX_HALVINGS.
MAX_HALVINGS = 10

#: Caustic handling / stepping schemes.
SCHEMES = {"euler": 0, "linear": 1, "euler-reject": 2}

STATUS_OK = 0
STATUS_STEP_FAILURE = 1
STATUS_NONFINITE = 2
_REASONS = {
    STATUS_OK: "",
    STATUS_STEP_FAILURE: "step halving reached dt_min",
    STATUS_NONFINITE: "non-finite state at dt_min",
}


@dataclass(frozen=True)
class SystemParams:
    """Physical and numerical parameters of one run.

    ``lam`` is the dimensionless coupling ``(omega0 / eps**(1/3))**2``; it is
    infinite for the noiseless case ``epsilon == 0``.
    """

    omega0: float
    epsilon: float
    t0: float = 0.0
    t_end: float = 10.0
    dt: float = 1e-3
    n_traj: int = 1000
    seed: int = 42
    lam: float = field(init=False, repr=False)

    def __post_init__(self):
        if not (self.omega0 > 0 and math.isfinite(self.omega0)):
            raise InvalidParameters(f"omega0 must be positive, got {self.omega0}")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise InvalidParameters(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.dt > 0:
            raise InvalidParameters(f"dt must be positive, got {self.dt}")
        if not self.t_end > self.t0:
            raise InvalidParameters("t_end must exceed t0")
        if int(self.n_traj) < 1:
            raise InvalidParameters("n_traj must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParameters("seed must fit in 64 bits")
        lam = math.inf if self.epsilon == 0 else self.omega0**2 / self.epsilon ** (2.0 / 3.0)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def from_lambda(cls, lam: float, **kwargs) -> "SystemParams":
        """Parameters in scaled units: ``epsilon = 1`` and ``omega0 = sqrt(lam)``.

        With ``epsilon = 1`` physical and scaled variables coincide, so MC
        output can be compared with the Fokker-Planck solver directly.
        """
        if not lam > 0:
            raise InvalidParameters(f"lambda must be positive, got {lam}")
        p = cls(omega0=math.sqrt(lam), epsilon=1.0, **kwargs)
        object.__setattr__(p, "lam", float(lam))  # not the rounded omega0**2
        return p

    @property
    def noise_amplitude(self) -> float:
        return math.sqrt(2.0 * self.epsilon)

    @property
    def u_scale(self) -> float:
        """Factor ``eps**(1/3)`` mapping scaled rates to physical ones."""
        return self.epsilon ** (1.0 / 3.0)


@dataclass(frozen=True)
class RiccatiState:
    u1: float
    log_u2: float
    t: float

    @property
    def u2(self) -> float:
        return math.exp(self.log_u2)


@dataclass(frozen=True)
class Trajectory:
    """One realisation sampled at ``save_times``.

    ``status`` is 0 for an accepted path; rejected paths carry NaN after the
    failure point and a human-readable ``reason``.
    """

    params: SystemParams
    save_times: np.ndarray
    u1: np.ndarray
    log_u2: np.ndarray
    int_u1: np.ndarray
    int_u2: np.ndarray
    seed_used: tuple
    status: int = STATUS_OK
    n_substeps: int = 0

    @property
    def u2(self) -> np.ndarray:
        return np.exp(self.log_u2)

    @property
    def rejected(self) -> bool:
        return self.status != STATUS_OK

    @property
    def reason(self) -> str:
        return _REASONS[self.status]

    @property
    def states(self) -> list[RiccatiState]:
        return [RiccatiState(float(a), float(b), float(t))
                for a, b, t in zip(self.u1, self.log_u2, self.save_times)]

    def index_of(self, t: float) -> int:
        return _time_index(self.save_times, t)


def _time_index(save_times: np.ndarray, t: float) -> int:
    i = int(np.argmin(np.abs(save_times - t)))
    if abs(save_times[i] - t) > 1e-9 * max(1.0, abs(t)):
        raise KeyError(f"t={t} is not a save time")
    return i


# ---------------------------------------------------------------- kernels


@njit(cache=True, nogil=True)
def _em_step(u1, log_u2, omega0_sq, noise_amp, h, dW):
    u2 = math.exp(log_u2)
    u1_new = u1 + (-u1 * u1 + u2 * u2 - omega0_sq) * h - noise_amp * dW
    log_u2_new = log_u2 - 2.0 * u1 * h
    return u1_new, log_u2_new


@njit(cache=True, nogil=True)
def _linear_step(u1, log_u2, omega0, noise_amp, h, dW):
    c = math.cos(0.5 * omega0 * h)
    s = math.sin(0.5 * omega0 * h)
    return _linear_step_cs(u1, log_u2, omega0, noise_amp, c, s, dW)


@njit(cache=True, nogil=True)
def _linear_step_cs(u1, log_u2, omega0, noise_amp, c, s, dW):
    """Step of the linear equation for ``xi`` started from ``xi = 1``.

    Strang splitting: exact harmonic rotation for h/2, noise kick, rotation
    for h/2.  The map has unit determinant, so ``u2 * |xi|**2`` is conserved
    exactly.  ``c, s`` are cos and sin of ``omega0 * h / 2``.  Returns
    ``(u1, log_u2, int_u1, int_u2)`` over the step.
    """
    u2 = math.exp(log_u2)
    # (xi, eta) = (1, u1 + i u2), real and imaginary parts carried separately
    xr = c + s * u1 / omega0
    xi_ = s * u2 / omega0
    er = -omega0 * s + c * u1
    ei = c * u2
    er -= noise_amp * dW * xr
    ei -= noise_amp * dW * xi_
    xr2 = c * xr + s * er / omega0
    xi2 = c * xi_ + s * ei / omega0
    er2 = -omega0 * s * xr + c * er
    ei2 = -omega0 * s * xi_ + c * ei
    mod2 = xr2 * xr2 + xi2 * xi2
    u1n = (er2 * xr2 + ei2 * xi2) / mod2
    d_int_u1 = 0.5 * math.log(mod2)
    d_int_u2 = math.atan2(xi2, xr2)
    return u1n, log_u2 - 2.0 * d_int_u1, d_int_u1, d_int_u2


@njit(cache=True, nogil=True)
def _integrate_kernel(gen, u1, log_u2, omega0, noise_amp, steps, save_at,
                      threshold, max_depth, scheme, out_u1, out_lu2, out_i1, out_i2):
    """Integrate one path over the coarse ``steps``.

    ``scheme`` 0: Euler-Maruyama on (u1, log u2) with step halving; a substep
    that would need halving below ``dt / 2**max_depth`` is taken with the
    linear ``xi`` step (``scheme`` 2 rejects the path instead).  ``scheme`` 1:
    linear ``xi`` step throughout.  ``save_at[k]`` is the output slot filled
    after coarse step ``k`` (or -1).  Returns ``(status, n_substeps)``.
    """
    i1 = 0.0
    i2 = 0.0
    n_sub = 0
    omega0_sq = omega0 * omega0
    cap = max_depth + 2
    st_h = np.empty(cap)
    st_dw = np.empty(cap)
    st_d = np.empty(cap, dtype=np.int64)
    h_cs = -1.0
    c_lin = 1.0
    s_lin = 0.0
    for k in range(steps.shape[0]):
        h0 = steps[k]
        st_h[0] = h0
        st_dw[0] = math.sqrt(h0) * gen.standard_normal()
        st_d[0] = 0
        top = 1
        while top > 0:
            top -= 1
            h = st_h[top]
            dw = st_dw[top]
            d = st_d[top]
            if scheme == 1:
                if h != h_cs:
                    h_cs = h
                    c_lin = math.cos(0.5 * omega0 * h)
                    s_lin = math.sin(0.5 * omega0 * h)
                u1, log_u2, a, b = _linear_step_cs(u1, log_u2, omega0, noise_amp,
                                                   c_lin, s_lin, dw)
                i1 += a
                i2 += b
                n_sub += 1
                continue
            split = abs(u1) * h > threshold
            u1n = u1
            lu2n = log_u2
            if not split:
                u1n, lu2n = _em_step(u1, log_u2, omega0_sq, noise_amp, h, dw)
                if not (math.isfinite(u1n) and math.isfinite(lu2n)
                        and math.isfinite(math.exp(lu2n))):
                    split = True
            if split:
                if d >= max_depth:
                    if scheme == 2:
                        status = 1 if math.isfinite(u1) else 2
                        return status, n_sub
                    u1, log_u2, a, b = _linear_step(u1, log_u2, omega0, noise_amp, h, dw)
                    if not (math.isfinite(u1) and math.isfinite(log_u2)):
                        return 2, n_sub
                    i1 += a
                    i2 += b
                    n_sub += 1
                    continue
                # Brownian bridge keeps the coarse increment fixed
                z = gen.standard_normal()
                dw_left = 0.5 * dw + 0.5 * math.sqrt(h) * z
                st_h[top] = 0.5 * h
                st_dw[top] = dw - dw_left
                st_d[top] = d + 1
                st_h[top + 1] = 0.5 * h
                st_dw[top + 1] = dw_left
                st_d[top + 1] = d + 1
                top += 2
                continue
            i1 += 0.5 * (u1 + u1n) * h
            i2 += 0.5 * (math.exp(log_u2) + math.exp(lu2n)) * h
            u1 = u1n
            log_u2 = lu2n
            n_sub += 1
        j = save_at[k]
        if j >= 0:
            out_u1[j] = u1
            out_lu2[j] = log_u2
            out_i1[j] = i1
            out_i2[j] = i2
    return 0, n_sub


# ---------------------------------------------------------------- helpers


def white_noise_increment(dt: float, rng: np.random.Generator) -> float:
    """One Wiener increment, distributed as Normal(0, dt)."""
    return float(rng.normal(0.0, math.sqrt(dt)))


def step_riccati(state: RiccatiState, params: SystemParams, dt: float, dW: float) -> RiccatiState:
    """Single Euler-Maruyama step; drift is evaluated at the step start.

    Raises NonFinite when the update overflows (dt too large near a caustic).
    """
    u1, lu2 = _em_step(state.u1, state.log_u2, params.omega0**2, params.noise_amplitude, dt, dW)
    if not (math.isfinite(u1) and math.isfinite(lu2)):
        raise NonFinite(f"Riccati step produced u1={u1}, log_u2={lu2} at t={state.t}")
    return RiccatiState(u1, lu2, state.t + dt)


def derive_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Seed of trajectory ``index``: the ``index``-th spawn of the master seed."""
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))


def _as_seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def _coarse_grid(params: SystemParams, save_times: np.ndarray):
    """Coarse step lengths and output slots for the union of the dt-grid and save times."""
    t0, dt = params.t0, params.dt
    t_last = float(save_times[-1])
    n = int(math.floor((t_last - t0) / dt + 1e-9))
    grid = t0 + dt * np.arange(n + 1)
    tol = 1e-9 * max(1.0, abs(t_last))
    merged = np.union1d(grid, save_times)
    # snap near-coincident points onto the save time
    keep = [merged[0]]
    for t in merged[1:]:
        if t - keep[-1] > tol:
            keep.append(t)
        elif np.any(np.abs(save_times - t) <= tol):
            keep[-1] = t
    nodes = np.asarray(keep)
    steps = np.diff(nodes)
    save_at = np.full(steps.shape[0], -1, dtype=np.int64)
    for j, ts in enumerate(save_times):
        k = int(np.argmin(np.abs(nodes - ts)))
        if k > 0:
            save_at[k - 1] = j
    return steps, save_at


def _check_save_times(params: SystemParams, save_times) -> np.ndarray:
    st = np.asarray(save_times, dtype=float).ravel()
    if st.size == 0:
        raise InvalidParameters("save_times is empty")
    if np.any(np.diff(st) <= 0):
        raise InvalidParameters("save_times must be strictly increasing")
    eps = 1e-12 * max(1.0, abs(params.t_end))
    if st[0] < params.t0 - eps or st[-1] > params.t_end + eps:
        raise InvalidParameters("save_times must lie in [t0, t_end]")
    return st


def _scheme_code(scheme: str) -> int:
    try:
        return SCHEMES[scheme]
    except KeyError:
        raise InvalidParameters(
            f"unknown scheme {scheme!r}; expected one of {sorted(SCHEMES)}") from None


def _run_one(params, seedseq, save_times, steps, save_at, out, row, scheme=0):
    u1_out, lu2_out, i1_out, i2_out = out
    gen = np.random.Generator(np.random.Philox(seedseq))
    lu2_0 = math.log(params.omega0)
    # slot for a save time equal to t0
    if abs(save_times[0] - params.t0) <= 1e-12 * max(1.0, abs(params.t0)):
        u1_out[row, 0] = 0.0
        lu2_out[row, 0] = lu2_0
        i1_out[row, 0] = 0.0
        i2_out[row, 0] = 0.0
    status, n_sub = _integrate_kernel(
        gen, 0.0, lu2_0, params.omega0, params.noise_amplitude, steps, save_at,
        HALVING_THRESHOLD, MAX_HALVINGS, scheme,
        u1_out[row], lu2_out[row], i1_out[row], i2_out[row])
    return status, n_sub


def integrate_trajectory(params: SystemParams, seed, save_times, strict: bool = True,
                         scheme: str = "linear") -> Trajectory:
    """Integrate one path from ``(0, omega0)`` at ``t0`` and sample it at ``save_times``.

    ``scheme``:

    ``"euler"``
        Euler-Maruyama on ``(u1, log u2)``, halving the step while
        ``|u1| h > 0.1``.  Below ``dt / 1024`` the substep is taken with the
        exact-Wronskian linear step instead of rejecting the path.
    ``"euler-reject"``
        Same, but a path that needs a step below ``dt / 1024`` is rejected.
    ``"linear"``
        (default) Split-step integration of the linear equation
        ``xi'' = -Omega(t)**2 xi`` with ``u1 + i u2 = xi'/xi``; no halving needed.

    With ``strict`` a rejected path raises :class:`StepFailure` (the partial
    trajectory is attached as ``exc.trajectory``); otherwise it is returned
    with ``status != 0``.
    """
    st = _check_save_times(params, save_times)
    steps, save_at = _coarse_grid(params, st)
    seedseq = _as_seedseq(seed)
    out = tuple(np.full((1, st.size), np.nan) for _ in range(4))
    status, n_sub = _run_one(params, seedseq, st, steps, save_at, out, 0, _scheme_code(scheme))
    traj = Trajectory(params, st, out[0][0], out[1][0], out[2][0], out[3][0],
                      (seedseq.entropy, tuple(seedseq.spawn_key)), int(status), int(n_sub))
    if strict and status != STATUS_OK:
        raise StepFailure(traj.reason, trajectory=traj)
    return traj


@dataclass(frozen=True)
class Ensemble:
    """Columnar storage of ``n_traj`` trajectories on a shared save-time grid.

    Arrays have shape ``(n_traj, n_save)``.  Iterating yields
    :class:`Trajectory` views.
    """

    params: SystemParams
    save_times: np.ndarray
    u1: np.ndarray
    log_u2: np.ndarray
    int_u1: np.ndarray
    int_u2: np.ndarray
    status: np.ndarray
    n_substeps: np.ndarray

    def __len__(self) -> int:
        return self.u1.shape[0]

    def __getitem__(self, i: int) -> Trajectory:
        ss = derive_seed(self.params.seed, i)
        return Trajectory(self.params, self.save_times, self.u1[i], self.log_u2[i],
                          self.int_u1[i], self.int_u2[i], (ss.entropy, tuple(ss.spawn_key)),
                          int(self.status[i]), int(self.n_substeps[i]))

    def __iter__(self) -> Iterator[Trajectory]:
        for i in range(len(self)):
            yield self[i]

    @property
    def u2(self) -> np.ndarray:
        return np.exp(self.log_u2)

    @property
    def accepted(self) -> np.ndarray:
        return self.status == STATUS_OK

    @property
    def n_rejected(self) -> int:
        return int(np.count_nonzero(self.status != STATUS_OK))

    @property
    def rejection_rate(self) -> float:
        return self.n_rejected / len(self)

    def index_of(self, t: float) -> int:
        return _time_index(self.save_times, t)

    def at(self, t: float, accepted_only: bool = True):
        """``(u1, u2, int_u1, int_u2)`` columns at save time ``t``."""
        j = self.index_of(t)
        sel = self.accepted if accepted_only else slice(None)
        return (self.u1[sel, j], np.exp(self.log_u2[sel, j]),
                self.int_u1[sel, j], self.int_u2[sel, j])


def ensemble_run(params: SystemParams, save_times, threads: int = 1,
                 max_reject_rate: float = 1e-3, scheme: str = "linear") -> Ensemble:
    """Integrate ``params.n_traj`` independent paths (``scheme`` as in
    :func:`integrate_trajectory`).

    Trajectory ``i`` uses :func:`derive_seed` ``(params.seed, i)``, so the
    result is independent of ``threads`` and of scheduling.  Raises
    :class:`RejectionRateExceeded` when more than ``max_reject_rate`` of the
    paths hit ``dt_min``.
    """
    st = _check_save_times(params, save_times)
    steps, save_at = _coarse_grid(params, st)
    n = int(params.n_traj)
    out = tuple(np.full((n, st.size), np.nan) for _ in range(4))
    status = np.zeros(n, dtype=np.int64)
    n_sub = np.zeros(n, dtype=np.int64)
    root = np.random.SeedSequence(int(params.seed))
    code = _scheme_code(scheme)

    def work(lo, hi):
        for i in range(lo, hi):
            ss = np.random.SeedSequence(root.entropy, spawn_key=(i,))
            status[i], n_sub[i] = _run_one(params, ss, st, steps, save_at, out, i, code)

    threads = _resolve_threads(threads)
    chunk = max(1, -(-n // (4 * threads)))
    bounds = [(lo, min(n, lo + chunk)) for lo in range(0, n, chunk)]
    if threads == 1:
        for lo, hi in bounds:
            work(lo, hi)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda b: work(*b), bounds))

    ens = Ensemble(params, st, out[0], out[1], out[2], out[3], status, n_sub)
    if ens.rejection_rate > max_reject_rate:
        raise RejectionRateExceeded(
            f"{ens.n_rejected}/{n} trajectories rejected "
            f"(rate {ens.rejection_rate:.2e} > {max_reject_rate:.1e})")
    return ens


def _resolve_threads(threads: int) -> int:
    import os
    threads = int(threads)
    if threads <= 0:
        threads = os.cpu_count() or 1
    return threads


def reconstruct_xi(traj: Trajectory):
    """Polar form ``xi = r exp(i gamma)`` of the classical solution.

    ``r = sqrt(omega0 / u2)`` follows from the conserved Wronskian
    ``r**2 * dgamma/dt = omega0``; ``gamma`` is the accumulated ``int u2 dt``.
    """
    r = np.sqrt(traj.params.omega0 / traj.u2)
    return r, np.asarray(traj.int_u2, dtype=float)


def functional_I_alpha(traj: Trajectory, alpha: float, t: float) -> float:
    """``u2(t)**-1/2 * exp(-(alpha+1) * int_t0^t u1 dt')``."""
    j = traj.index_of(t)
    u2 = math.exp(traj.log_u2[j])
    assert u2 > 0.0  # theta(u2) == 1 by construction
    return u2 ** -0.5 * math.exp(-(alpha + 1.0) * traj.int_u1[j])


def functional_I_alpha_derivative(traj: Trajectory, t: float) -> float:
    """Analytic d/d alpha of :func:`functional_I_alpha` at ``alpha = 0``."""
    j = traj.index_of(t)
    return -traj.int_u1[j] * functional_I_alpha(traj, 0.0, t)


def ensemble_table(ens: Ensemble) -> Sequence[dict]:
    """Flatten an ensemble into CSV-ready rows (one per trajectory and save time)."""
    rows = []
    for i in range(len(ens)):
        for j, t in enumerate(ens.save_times):
            rows.append({"traj": i, "t": float(t), "u1": float(ens.u1[i, j]),
                         "log_u2": float(ens.log_u2[i, j]), "int_u1": float(ens.int_u1[i, j]),
                         "int_u2": float(ens.int_u2[i, j]), "status": int(ens.status[i])})
    return rows
