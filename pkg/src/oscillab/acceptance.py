"""Acceptance checks, shared by the test suite (full scale) and ``oscillab validate``.

Each ``check_N`` returns a :class:`CheckResult` whose ``details`` are
deterministic for a given scale and seed; wall-clock time is kept apart in
``runtime`` so reports can be compared byte for byte.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import eval_hermite

from . import fpe
from .observables import (agree, level_energy, mc_estimate, n_alpha, observables_from_ensemble,
                          observables_from_fields, dispersion_x)
from .quantum import OscState, gram_matrix, psi_stc
from .sde import SystemParams, ensemble_run
from .wigner import (density_expectation, relative_l1, wigner_closed_form,
                     wigner_expectation, wigner_field_state, wigner_ground_averaged,
                     wigner_partial_stochastic)

NAMES = {
    1: "noiseless exactness",
    2: "orthonormality of stochastic states",
    3: "positivity and Wronskian invariants",
    4: "Feynman-Kac PDE vs MC cross-validation",
    5: "stationary observables PDE vs MC",
    6: "D0 vs alpha finite difference",
    7: "FPE conservation and grid convergence",
    8: "Wigner suite",
    9: "level equidistance",
    10: "reproducibility across thread counts",
}


@dataclass(frozen=True)
class Scale:
    """Problem sizes for one run of the checks."""

    name: str
    seed: int = 42
    threads: int = 1
    grams_per_lambda: int = 20
    n_traj: int = 100_000
    t_end: float = 20.0
    fk_times: tuple = (1.0, 5.0, 20.0)
    fk_lambdas: tuple = (0.5, 1.0, 2.0)
    grid_n: int = 256
    stationary_lambdas: tuple = (0.5, 1.0, 2.0)
    trend_lambdas: tuple = (10.0, 100.0)
    stationary_n_traj: int = 20_000
    fd_time: Optional[float] = None      # None: stationary
    mass_time: Optional[float] = None    # None: stationary horizon
    wigner_states: int = 5
    wigner_n_traj: int = 100_000
    enforce_runtime: bool = True

    @property
    def grid(self) -> fpe.Grid2D:
        return fpe.build_grid(n1=self.grid_n, n2=self.grid_n)


FULL = Scale("full")
DESK = Scale("desk", grams_per_lambda=3, n_traj=10_000, t_end=5.0, fk_times=(1.0,),
             fk_lambdas=(1.0,), grid_n=96, stationary_lambdas=(), trend_lambdas=(),
             fd_time=2.0, mass_time=5.0, wigner_states=2, wigner_n_traj=10_000,
             enforce_runtime=False)
SCALES = {"full": FULL, "desk": DESK}


@dataclass
class CheckResult:
    number: int
    passed: bool
    details: dict
    runtime: float = 0.0
    summary: str = ""

    @property
    def name(self) -> str:
        return NAMES[self.number]

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] criterion {self.number:2d} {self.name}: {self.summary}"

    def to_dict(self) -> dict:
        return {"number": self.number, "name": self.name, "passed": bool(self.passed),
                "summary": self.summary, "details": self.details}


class Context:
    """Caches ensembles and solves so checks can share them."""

    def __init__(self, scale: Scale):
        self.scale = scale
        self._ens = {}
        self.rejections = {}

    def ensemble(self, lam: float, n_traj: int, t_end: float, save_times):
        key = (lam, n_traj, t_end, tuple(save_times))
        if key not in self._ens:
            p = SystemParams.from_lambda(lam, t_end=t_end, n_traj=n_traj, seed=self.scale.seed)
            ens = ensemble_run(p, save_times, threads=self.scale.threads)
            self.rejections[f"lambda={lam} n={n_traj} T={t_end}"] = ens.n_rejected
            self._ens[key] = ens
        return self._ens[key]

    def standard(self, lam: float):
        """The ``n_traj`` ensemble saved at every integer time up to ``t_end``."""
        s = self.scale
        return self.ensemble(lam, s.n_traj, s.t_end, np.arange(0.0, s.t_end + 0.5, 1.0))


def _timed(number: int, fn: Callable[[Context], tuple], ctx: Context,
           limit: Optional[float] = None) -> CheckResult:
    t0 = time.perf_counter()
    try:
        passed, details, summary = fn(ctx)
    except Exception as exc:  # a crashed check is a failed check
        passed, details, summary = False, {"error": f"{type(exc).__name__}: {exc}"}, \
            f"raised {type(exc).__name__}: {exc}"
    dt = time.perf_counter() - t0
    if limit is not None and ctx.scale.enforce_runtime and dt > limit:
        passed = False
        summary += f"; runtime {dt:.1f}s over the {limit:.0f}s budget"
    return CheckResult(number, bool(passed), details, dt, summary)


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-300)


# ---------------------------------------------------------------- 1


def _c1(ctx):
    p = SystemParams(omega0=1.0, epsilon=0.0, t_end=2.0, n_traj=200, seed=ctx.scale.seed)
    ens = ensemble_run(p, [0.0, 1.0, 2.0])
    obs = observables_from_ensemble(ens, 2.0, levels=(0,), scaled=False)
    err = {"K": abs(obs.k_factor - 0.0), "E0": abs(obs.energy_levels[0] - 0.5),
           "product": abs(obs.uncertainty_product - 0.5),
           "entropy": abs(obs.entropy_ground + 0.5)}
    x = np.linspace(-6, 6, 241)
    psi_err = 0.0
    for t in (0.0, 1.0, 2.0):
        st = OscState.from_trajectory(ens[0], t)
        for n in range(9):
            norm = np.pi**-0.25 / math.sqrt(2.0**n * math.factorial(n))
            ref = (np.exp(-1j * (n + 0.5) * t) * norm
                   * np.exp(-0.5 * x * x) * eval_hermite(n, x))
            psi_err = max(psi_err, float(np.max(np.abs(psi_stc(n, x, st) - ref))))
    err["psi"] = psi_err
    worst = max(err.values())
    return worst <= 1e-10, err, f"max deviation {worst:.2e} (tol 1e-10)"


# ---------------------------------------------------------------- 2


def _c2(ctx):
    s = ctx.scale
    rng = np.random.default_rng(s.seed)
    worst = 0.0
    per = {}
    for lam in (0.5, 1.0, 2.0):
        p = SystemParams.from_lambda(lam, t_end=10.0, n_traj=s.grams_per_lambda, seed=s.seed)
        times = np.arange(0.0, 10.5, 0.5)
        ens = ensemble_run(p, times)
        e = 0.0
        for i in range(len(ens)):
            t = float(times[rng.integers(1, times.size)])
            G = gram_matrix(OscState.from_trajectory(ens[i], t), 8)
            e = max(e, float(np.max(np.abs(G - np.eye(9)))))
        per[str(lam)] = e
        worst = max(worst, e)
    n = 3 * s.grams_per_lambda
    return worst <= 1e-8, {"max_abs_error": per, "states": n}, \
        f"{n} states, max |G - I| = {worst:.2e} (tol 1e-8)"


# ---------------------------------------------------------------- 3


def _c3(ctx):
    ens = ctx.standard(1.0)
    om = ens.params.omega0
    acc = ens.accepted
    lu2 = ens.log_u2[acc]
    positive = bool(np.all(np.isfinite(lu2)) and np.all(np.exp(lu2) > 0))
    # r = exp(int u1) from the accumulated dilation rate, independent of u2
    wr = float(np.max(np.abs(lu2 + 2.0 * ens.int_u1[acc] - math.log(om))))
    rate = ens.rejection_rate
    ok = positive and wr <= 1e-8 and rate <= 1e-3
    return ok, {"u2_positive": positive, "max_log_wronskian_error": wr,
                "rejection_rate": rate, "n_traj": len(ens), "t_end": ens.params.t_end}, \
        f"n={len(ens)}, u2>0: {positive}, max|ln(r^2 u2/omega0)| = {wr:.1e}, rejected {rate:.2%}"


# ---------------------------------------------------------------- 4


def _c4(ctx):
    s = ctx.scale
    rows = {}
    ok = True
    worst = []
    for lam in s.fk_lambdas:
        ens = ctx.standard(lam)
        snaps = fpe.evolve(lam, 0.0, s.grid, s.fk_times, with_d=True)
        for t, (q, d) in zip(s.fk_times, snaps):
            pde = {"n0": n_alpha(q), "n00": n_alpha(d)}
            mc = {"n0": mc_estimate("n_alpha", ens, t), "n00": mc_estimate("n00", ens, t)}
            for k in pde:
                good = agree(pde[k], mc[k].value, mc[k].stderr)
                ok &= good
                rows[f"lambda={lam} t={t} {k}"] = {"pde": pde[k], "mc": mc[k].value,
                                                   "stderr": mc[k].stderr, "pass": good}
                if not good:
                    worst.append(f"{k}(lam={lam},t={t:g}) {pde[k]:.4g} vs {mc[k].value:.4g}")
    msg = "all agree" if ok else "disagree: " + "; ".join(worst)
    return ok, rows, msg


# ---------------------------------------------------------------- 5


_OBS_KEYS = ("k_factor", "entropy_ground", "delta_x", "delta_p", "uncertainty_product")


def _c5(ctx):
    s = ctx.scale
    rows = {}
    bad = []
    ok = True
    pde_k, pde_prod = {}, {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for lam in s.stationary_lambdas:
            res = fpe.solve_Q_and_D(lam, grid=s.grid)
            po = observables_from_fields(res.companion, res.field, lam, converged=res.converged)
            pde_k[lam], pde_prod[lam] = po.k_factor, po.uncertainty_product
            T = float(res.t_star)
            ens = ctx.ensemble(lam, s.stationary_n_traj, T, [T])
            try:
                mo = observables_from_ensemble(ens, T)
            except Exception as exc:
                ok = False
                rows[f"lambda={lam}"] = {"error": f"{type(exc).__name__}: {exc}"}
                bad.append(f"MC at lam={lam}: {type(exc).__name__}")
                continue
            entry = {"t_star": T, "boundary_mass": res.boundary_mass,
                     "enlarged": res.enlarged, "ess": mo.ess}
            for k in _OBS_KEYS:
                a, b, se = getattr(po, k), getattr(mo, k), mo.errors.get(k, 0.0)
                good = agree(a, b, se)
                ok &= good
                entry[k] = {"pde": a, "mc": b, "stderr": se, "pass": good}
                if not good:
                    bad.append(f"{k}(lam={lam}) {a:.4g} vs {b:.4g}")
            rows[f"lambda={lam}"] = entry
        for lam in s.trend_lambdas:
            res = fpe.solve_to_stationary(lam, grid=s.grid)
            po = observables_from_fields(res.field, None, lam, converged=res.converged)
            pde_k[lam], pde_prod[lam] = po.k_factor, po.uncertainty_product
    trend = {}
    if {1.0, 10.0, 100.0} <= set(pde_k):
        trend["K(100)<K(10)<K(1)"] = bool(pde_k[100.0] < pde_k[10.0] < pde_k[1.0])
    if {0.5, 10.0} <= set(pde_prod):
        trend["product(10)<product(0.5)"] = bool(pde_prod[10.0] < pde_prod[0.5])
    for k, v in trend.items():
        ok &= v
        if not v:
            bad.append(f"trend {k} violated")
    rows["trend"] = {"K": {str(k): v for k, v in pde_k.items()},
                     "product": {str(k): v for k, v in pde_prod.items()}, "holds": trend}
    if not s.stationary_lambdas and not s.trend_lambdas:
        return True, {"skipped": "no stationary lambdas at this scale"}, "not part of this scale"
    return ok, rows, "all agree" if ok else "; ".join(bad)


# ---------------------------------------------------------------- 6


def _c6(ctx):
    s = ctx.scale
    lam, delta = 1.0, 1e-3
    g = s.grid
    if s.fd_time is None:
        res = fpe.solve_Q_and_D(lam, grid=g, auto_enlarge=False)
        d0, t = res.field, res.t_star
    else:
        t = s.fd_time
        d0 = fpe.evolve(lam, 0.0, g, [t], with_d=True)[0][1]
    qp = fpe.evolve(lam, delta, g, [t])[0][0]
    qm = fpe.evolve(lam, -delta, g, [t])[0][0]
    fd = (qp.values - qm.values) / (2 * delta)
    w = g.weights
    err = float(np.sum(w * np.abs(d0.values - fd)) / np.sum(w * np.abs(d0.values)))
    return err <= 0.01, {"t": t, "weighted_l1": err}, \
        f"weighted L1 |D0 - FD| / |D0| = {err:.2e} at t={t:g} (tol 1e-2)"


# ---------------------------------------------------------------- 7


def _c7(ctx):
    s = ctx.scale
    g = s.grid
    lam = 1.0
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if s.mass_time is None:
            res = fpe.solve_to_stationary(lam, kind="P0", grid=g, auto_enlarge=False)
            masses = np.asarray(res.norm_history)
        else:
            snaps = fpe.evolve(lam, 0.0, g, np.arange(1.0, s.mass_time + 0.5), kind="P0")
            masses = np.array([q.mass() for q, _ in snaps])
        mass_err = float(np.max(np.abs(masses - 1.0)))
        out["mass_max_deviation"] = mass_err

        g2 = g.enlarged(1.5, refine=2)
        hs = g.hs
        g3 = fpe.build_grid(g.u1_max, g.u2_min / 2, g.u2_max, g.n1,
                            g.n2 + int(round(math.log(2.0) / hs)))
        if s.mass_time is None:
            a = fpe.solve_to_stationary(lam, grid=g, auto_enlarge=False).field
            b = fpe.solve_to_stationary(lam, grid=g2, auto_enlarge=False).field
            c = fpe.solve_to_stationary(lam, grid=g3, auto_enlarge=False).field
        else:
            a = fpe.evolve(lam, 0.0, g, [s.mass_time])[0][0]
            b = fpe.evolve(lam, 0.0, g2, [s.mass_time])[0][0]
            c = fpe.evolve(lam, 0.0, g3, [s.mass_time])[0][0]
    na, nb = n_alpha(a), n_alpha(b)
    dxa, dxc = dispersion_x(a, na), dispersion_x(c, n_alpha(c))
    out.update({"n0": na, "n0_refined": nb, "n0_rel_change": _rel(nb, na),
                "delta_x": dxa, "delta_x_half_u2min": dxc, "delta_x_rel_change": _rel(dxc, dxa),
                "t": [a.t, b.t, c.t]})
    parts = {"mass": mass_err <= 1e-3, "n0": out["n0_rel_change"] <= 0.01,
             "delta_x": out["delta_x_rel_change"] <= 0.02}
    out["pass"] = parts
    return all(parts.values()), out, (
        f"mass dev {mass_err:.1e} (tol 1e-3), N0 change {out['n0_rel_change']:.2%} (tol 1%), "
        f"dx change {out['delta_x_rel_change']:.2%} (tol 2%)")


# ---------------------------------------------------------------- 8


def _c8(ctx):
    s = ctx.scale
    ens = ctx.standard(1.0)
    rng = np.random.default_rng(s.seed + 8)
    idx = rng.choice(len(ens), size=s.wigner_states, replace=False)
    times = (1.0, min(5.0, s.t_end))
    norm_err = marg_err = cf_err = exp_err = 0.0
    for k, i in enumerate(sorted(int(j) for j in idx)):
        st = OscState.from_trajectory(ens[i], times[k % 2])
        for m in range(5):
            W = wigner_field_state(m, st)
            norm_err = max(norm_err, abs(W.integral() - 1.0))
            ref = np.abs(psi_stc(m, W.grid.x_nodes, st)) ** 2
            marg_err = max(marg_err, float(np.max(np.abs(W.x_marginal() - ref))))
        # points in the state's own frame: Z = y**2 + z**2
        y, z = 1.5 * rng.normal(size=(2, 200))
        px = y / math.sqrt(st.u2)
        pp = st.u1 * px + math.sqrt(st.u2) * z
        num = wigner_partial_stochastic(0, px, pp, st)
        cf_err = max(cf_err, float(np.max(np.abs(num - wigner_closed_form(0, px, pp, st)))))
        for op in ("X2", "P2", "H0"):
            a = wigner_expectation(op, st, 0)
            b = density_expectation(op, st, 0)
            exp_err = max(exp_err, abs(a - b) / max(1.0, abs(b)))
    t = 1.0
    q = fpe.evolve(1.0, 0.0, s.grid, [t])[0][0]
    ens_w = ens if s.wigner_n_traj == len(ens) else ctx.ensemble(1.0, s.wigner_n_traj, 1.0, [1.0])
    mc = wigner_ground_averaged(ens_w, t=t)
    pde = wigner_ground_averaged(q, grid=mc.grid)
    l1 = relative_l1(pde, mc)
    d = {"normalization": norm_err, "marginal": marg_err, "closed_vs_numeric": cf_err,
         "two_route_l1": l1, "expectations": exp_err}
    parts = {"normalization": norm_err <= 1e-6, "marginal": marg_err <= 1e-6,
             "closed_vs_numeric": cf_err <= 1e-8, "two_route_l1": l1 <= 0.05,
             "expectations": exp_err <= 1e-8}
    d["pass"] = parts
    return all(parts.values()), d, (
        f"norm {norm_err:.1e}, marginal {marg_err:.1e}, closed/numeric {cf_err:.1e}, "
        f"two-route L1 {l1:.2%}, expectations {exp_err:.1e}")


# ---------------------------------------------------------------- 9


def _c9(ctx):
    ens = ctx.standard(1.0)
    obs = observables_from_ensemble(ens, 1.0, levels=range(11))
    worst = 0.0
    for k in (0.0, obs.k_factor, 3.7):
        for n in range(11):
            r = level_energy(n, k, obs.omega0) / level_energy(0, k, obs.omega0)
            worst = max(worst, abs(r - (2 * n + 1)))
    return worst <= 1e-12, {"max_abs_error": worst}, \
        f"max |E_n/E_0 - (2n+1)| = {worst:.1e} for n <= 10"


CHECKS = {1: (_c1, 1.0), 2: (_c2, 10.0), 3: (_c3, None), 4: (_c4, 900.0), 5: (_c5, None),
          6: (_c6, 600.0), 7: (_c7, None), 8: (_c8, None), 9: (_c9, None)}


def run_check(number: int, ctx: Context) -> CheckResult:
    fn, limit = CHECKS[number]
    return _timed(number, fn, ctx, limit)


def run_checks(numbers, scale: Scale, report: Optional[Callable[[CheckResult], None]] = None):
    """Run checks in order, sharing ensembles; ``report`` sees each result as it lands."""
    ctx = Context(scale)
    out = []
    for n in numbers:
        r = run_check(n, ctx)
        out.append(r)
        if report is not None:
            report(r)
    return out, ctx


def with_threads(scale: Scale, threads: int) -> Scale:
    return replace(scale, threads=threads)
