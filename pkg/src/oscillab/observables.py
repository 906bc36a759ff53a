"""Physical observables from Feynman-Kac fields or from trajectory ensembles.

Field route: quadratures ``int int u1**a u2**b F du1 du2`` of ``Q_0`` and its
alpha-derivative ``D_0`` on the scaled grid.  Ensemble route: Monte-Carlo
means of the matching path functionals, with the ground-state weight
``I_0 = u2**-1/2 exp(-int u1 dt)``.

The two routes meet through

    int u1**a u2**b Q_0 = E[u1(t)**a u2(t)**b exp(-int_0^t u1)]

The constant trace prefactor ``sqrt(omega0 / pi)`` cancels in every ratio
and is left out.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (DegenerateNormalization, EffectiveSampleTooSmall, InvalidDomain,
                     NegativeVariance)
from .fpe import Field2D

MIN_ESS = 100.0

CSV_COLUMNS = ("lambda", "method", "t", "entropy_ground", "k_factor", "e0", "delta_x",
               "delta_p", "uncertainty_product", "n0", "n00", "err_entropy_ground",
               "err_k_factor", "err_delta_x", "err_delta_p", "err_uncertainty_product",
               "err_n0", "err_n00", "ess", "converged")


@dataclass
class ObservableSet:
    """Ground-state observables at one coupling ``lam``.

    ``t`` is None for stationary values.  ``errors`` holds quadrature
    refinement deltas (PDE) or standard errors (MC), keyed like the fields.
    """

    lam: float
    entropy_ground: float
    k_factor: float
    energy_levels: dict
    delta_x: float
    delta_p: float
    uncertainty_product: float
    n0: float
    n00: float
    method: str = "PDE"
    t: Optional[float] = None
    omega0: float = float("nan")
    errors: dict = field(default_factory=dict)
    ess: Optional[float] = None
    converged: Optional[bool] = None

    def __post_init__(self):
        if not (self.delta_x > 0 and self.delta_p > 0):
            raise NegativeVariance("dispersions must be positive")
        if not self.n0 > 0:
            raise DegenerateNormalization(f"N0 = {self.n0} <= 0")
        self.energy_levels = {int(k): float(v) for k, v in self.energy_levels.items()}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["energy_levels"] = {str(k): v for k, v in self.energy_levels.items()}
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(_finite_or_str(self.to_dict()), sort_keys=True, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ObservableSet":
        d = dict(d)
        d["energy_levels"] = {int(k): float(v) for k, v in d["energy_levels"].items()}
        return cls(**{k: _str_to_float(v) if k not in ("method",) else v for k, v in d.items()})

    @classmethod
    def from_json(cls, text: str) -> "ObservableSet":
        return cls.from_dict(json.loads(text))

    def csv_row(self) -> list:
        e = self.errors
        return [self.lam, self.method, "" if self.t is None else self.t, self.entropy_ground,
                self.k_factor, self.energy_levels.get(0, float("nan")), self.delta_x,
                self.delta_p, self.uncertainty_product, self.n0, self.n00,
                e.get("entropy_ground", ""), e.get("k_factor", ""), e.get("delta_x", ""),
                e.get("delta_p", ""), e.get("uncertainty_product", ""), e.get("n0", ""),
                e.get("n00", ""), "" if self.ess is None else self.ess,
                "" if self.converged is None else int(bool(self.converged))]


def _finite_or_str(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _finite_or_str(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_str(v) for v in obj]
    return obj


def _str_to_float(v):
    if isinstance(v, str) and v in ("nan", "inf", "-inf"):
        return float(v)
    if isinstance(v, dict):
        return {k: _str_to_float(x) for k, x in v.items()}
    return v


def write_csv(rows: Sequence[ObservableSet], fh=None) -> str:
    """Sweep table with the fixed column order ``CSV_COLUMNS``."""
    buf = io.StringIO() if fh is None else fh
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(x) for x in r.csv_row()])
    return buf.getvalue() if fh is None else ""


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


# ---------------------------------------------------------------- field route


def weighted_moment(field: Field2D, a: int, b: float) -> float:
    """``int int u1**a u2**b F du1 du2`` under the grid quadrature."""
    if b < -1.5:
        raise ValueError(f"exponent b={b} below -3/2 is not supported")
    g = field.grid
    return float((g.w1 * g.u1_nodes**a) @ field.values @ (g.v2 * g.u2_nodes**b))


def n_alpha(field_q: Field2D) -> float:
    """Normalisation ``N_alpha = int u2**-1/2 Q_alpha``."""
    return weighted_moment(field_q, 0, -0.5)


def entropy_ground(n0: float, n00: float) -> float:
    """``-1/2 + N_00 / N_0``; time-dependent when fed time-dependent values."""
    if not n0 > 0:
        raise DegenerateNormalization(f"N0 = {n0} <= 0")
    return -0.5 + n00 / n0


def energy_factor_K(field_q: Field2D, lam: float) -> float:
    """Ground-energy renormalisation ``K`` from a ``Q_0`` field."""
    g = field_q.grid
    n0 = n_alpha(field_q)
    if not n0 > 0:
        raise DegenerateNormalization(f"N0 = {n0} <= 0")
    U1, U2 = g.mesh()
    integrand = U2**-0.5 * (-1.0 + (U1**2 + U2**2 + lam) / (2.0 * math.sqrt(lam) * U2))
    return float(np.sum(g.weights * integrand * field_q.values) / n0)


def level_energy(n: int, k_factor: float, omega0: float) -> float:
    """``(n + 1/2)(1 + K) omega0``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return (n + 0.5) * (1.0 + k_factor) * omega0


def dispersion_x(field_q: Field2D, n0: float) -> float:
    v = weighted_moment(field_q, 0, -1.5) / (2.0 * n0)
    if not v > 0:
        raise NegativeVariance(f"Delta x**2 = {v}; u2 cutoff too coarse?")
    return math.sqrt(v)


def dispersion_p(field_q: Field2D, n0: float) -> float:
    v = (weighted_moment(field_q, 2, -1.5) + weighted_moment(field_q, 0, 0.5)) / (2.0 * n0)
    if not v > 0:
        raise NegativeVariance(f"Delta p**2 = {v}; u2 cutoff too coarse?")
    return math.sqrt(v)


def uncertainty_product_stationary(field_q: Field2D, lam: float) -> float:
    """``sqrt(A_x A_p) / (2 N_0)`` with ``A_x = int u2**-3/2 Q`` and
    ``A_p = int (u1**2 + u2**2) u2**-3/2 Q``.  Values below 1/2 are flagged
    with a warning, not raised."""
    n0 = n_alpha(field_q)
    if not n0 > 0:
        raise DegenerateNormalization(f"N0 = {n0} <= 0")
    ax = weighted_moment(field_q, 0, -1.5)
    ap = weighted_moment(field_q, 2, -1.5) + weighted_moment(field_q, 0, 0.5)
    if not (ax > 0 and ap > 0):
        raise NegativeVariance("non-positive dispersion integral")
    prod = 0.5 * math.sqrt(ax * ap) / n0
    if prod < 0.5 - 1e-6:
        import warnings
        warnings.warn(f"uncertainty product {prod:.8f} below 1/2 at lambda={lam}",
                      RuntimeWarning, stacklevel=2)
    return prod


def _coarsened(field: Field2D) -> Field2D:
    """The same values on every other ``u1`` node with doubled trapezoid
    weights; used only as a quadrature-error yardstick."""
    from .fpe import build_grid
    g = field.grid
    if g.n1 % 2 == 0:
        # keep an odd node count so both ends survive
        keep = np.r_[np.arange(0, g.n1 - 1, 2), g.n1 - 1]
    else:
        keep = np.arange(0, g.n1, 2)
    gc = build_grid(g.u1_max, g.u2_min, g.u2_max, len(keep), g.n2)
    vals = np.array([np.interp(gc.u1_nodes, g.u1_nodes, field.values[:, j])
                     for j in range(g.n2)]).T
    return Field2D(gc, vals, field.t, field.kind, field.alpha)


def _field_values(q: Field2D, d: Optional[Field2D], lam: float):
    n0 = n_alpha(q)
    n00 = n_alpha(d) if d is not None else float("nan")
    dx = dispersion_x(q, n0)
    dp = dispersion_p(q, n0)
    return {"n0": n0, "n00": n00,
            "entropy_ground": entropy_ground(n0, n00) if d is not None else float("nan"),
            "k_factor": energy_factor_K(q, lam), "delta_x": dx, "delta_p": dp,
            "uncertainty_product": dx * dp}


def observables_from_fields(q: Field2D, d: Optional[Field2D], lam: float,
                            levels: Sequence[int] = (0,), stationary: bool = True,
                            converged: Optional[bool] = None) -> ObservableSet:
    """Field-route :class:`ObservableSet` in scaled units (``omega0 = sqrt(lam)``)."""
    v = _field_values(q, d, lam)
    try:
        vc = _field_values(_coarsened(q), None if d is None else _coarsened(d), lam)
        errs = {k: abs(v[k] - vc[k]) for k in v}
    except (NegativeVariance, DegenerateNormalization, InvalidDomain):
        # too coarse to halve, or the coarse quadrature breaks down
        errs = {}
    om = math.sqrt(lam)
    return ObservableSet(lam, v["entropy_ground"], v["k_factor"],
                         {n: level_energy(n, v["k_factor"], om) for n in levels},
                         v["delta_x"], v["delta_p"], v["uncertainty_product"], v["n0"],
                         v["n00"], "PDE", None if stationary else q.t, om, errs,
                         converged=converged)


# ---------------------------------------------------------------- ensemble route


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float

    def __iter__(self):
        return iter((self.value, self.stderr))


def _mean(x: np.ndarray) -> Estimate:
    n = x.size
    if n < 2 or np.all(x == x[0]):
        return Estimate(float(np.mean(x)), 0.0)
    return Estimate(float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(n)))


def _ratio(num: np.ndarray, den: np.ndarray) -> Estimate:
    """``mean(num) / mean(den)`` with a delta-method standard error."""
    n = num.size
    md = float(np.mean(den))
    r = float(np.mean(num)) / md
    if n < 2:
        return Estimate(r, 0.0)
    infl = (num - r * den) / md
    return Estimate(r, float(np.std(infl, ddof=1) / math.sqrt(n)))


def effective_sample_size(w: np.ndarray) -> float:
    s2 = float(np.sum(w * w))
    return float(np.sum(w)) ** 2 / s2 if s2 > 0 else 0.0


def _columns(ens, t: float, scaled: bool):
    u1, u2, i1, _ = ens.at(t)
    if scaled:
        k = ens.params.u_scale
        if k == 0:
            raise DegenerateNormalization("scaled units are undefined for epsilon = 0")
        u1, u2 = u1 / k, u2 / k
    return u1, u2, i1


def mc_estimate(kind: str, ensemble, t: float, alpha: float = 0.0, a: int = 0,
                b: float = 0.0, scaled: bool = True, min_ess: float = MIN_ESS) -> Estimate:
    """Monte-Carlo counterpart of a field-route quantity at save time ``t``.

    ``kind``: ``n_alpha``, ``n00``, ``moment`` (uses ``a``, ``b``),
    ``entropy``, ``K``, ``delta_x``, ``delta_p`` or ``product``.  With
    ``scaled`` the rates are divided by ``eps**(1/3)``; the time integral
    ``int u1 dt`` is dimensionless either way.
    """
    u1, u2, i1 = _columns(ensemble, t, scaled)
    if u1.size == 0:
        raise EffectiveSampleTooSmall("no accepted trajectories", 0.0)
    ew = np.exp(-i1)
    if kind == "n_alpha":
        return _mean(u2**-0.5 * np.exp(-(alpha + 1.0) * i1))
    if kind == "n00":
        return _mean(-i1 * u2**-0.5 * ew)
    if kind == "moment":
        return _mean(u1**a * u2**b * ew)
    w = u2**-0.5 * ew
    ess = effective_sample_size(w)
    if ess < min_ess:
        raise EffectiveSampleTooSmall(f"effective sample size {ess:.1f} < {min_ess}", ess)
    om = _omega(ensemble, scaled)
    if kind == "entropy":
        r = _ratio(-i1 * w, w)
        return Estimate(-0.5 + r.value, r.stderr)
    if kind == "K":
        r = _ratio(w * (u1**2 + u2**2 + om**2) / (2.0 * om * u2), w)
        return Estimate(r.value - 1.0, r.stderr)
    gx = 1.0 / (2.0 * u2)
    gp = (u1**2 + u2**2) / (2.0 * u2)
    if kind == "delta_x":
        return _sqrt_est(_ratio(w * gx, w))
    if kind == "delta_p":
        return _sqrt_est(_ratio(w * gp, w))
    if kind == "product":
        sw = float(np.sum(w))
        X = float(np.sum(w * gx)) / sw
        Y = float(np.sum(w * gp)) / sw
        val = math.sqrt(X * Y)
        n = w.size
        md = sw / n
        infl = 0.5 * val * (w * (gx - X) / X + w * (gp - Y) / Y) / md
        se = float(np.std(infl, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return Estimate(val, se)
    raise ValueError(f"unknown estimate kind {kind!r}")


def _sqrt_est(e: Estimate) -> Estimate:
    if not e.value > 0:
        raise NegativeVariance(f"variance estimate {e.value} <= 0")
    v = math.sqrt(e.value)
    return Estimate(v, 0.5 * e.stderr / v)


def _omega(ensemble, scaled: bool) -> float:
    p = ensemble.params
    return math.sqrt(p.lam) if scaled else p.omega0


def observables_from_ensemble(ensemble, t: float, levels: Sequence[int] = (0,),
                              scaled: bool = True, min_ess: float = MIN_ESS) -> ObservableSet:
    """Ensemble-route :class:`ObservableSet` at save time ``t``."""
    est = {
        "n0": mc_estimate("n_alpha", ensemble, t, scaled=scaled),
        "n00": mc_estimate("n00", ensemble, t, scaled=scaled),
        "entropy_ground": mc_estimate("entropy", ensemble, t, scaled=scaled, min_ess=min_ess),
        "k_factor": mc_estimate("K", ensemble, t, scaled=scaled, min_ess=min_ess),
        "delta_x": mc_estimate("delta_x", ensemble, t, scaled=scaled, min_ess=min_ess),
        "delta_p": mc_estimate("delta_p", ensemble, t, scaled=scaled, min_ess=min_ess),
        "uncertainty_product": mc_estimate("product", ensemble, t, scaled=scaled,
                                           min_ess=min_ess),
    }
    u1, u2, i1 = _columns(ensemble, t, scaled)
    ess = effective_sample_size(u2**-0.5 * np.exp(-i1))
    om = _omega(ensemble, scaled)
    k = est["k_factor"].value
    return ObservableSet(ensemble.params.lam, est["entropy_ground"].value, k,
                         {n: level_energy(n, k, om) for n in levels}, est["delta_x"].value,
                         est["delta_p"].value, est["uncertainty_product"].value,
                         est["n0"].value, est["n00"].value, "MC", t, om,
                         {key: e.stderr for key, e in est.items()}, ess)


def agree(a: float, b: float, stderr: float, rel: float = 0.05, nsig: float = 3.0) -> bool:
    """``|a - b| <= max(rel * |b|, nsig * stderr)``."""
    return abs(a - b) <= max(rel * abs(b), nsig * stderr)


# rate exponents of eps for each field when leaving scaled units
_PHYSICAL_POWERS = {"delta_x": -1.0 / 6.0, "delta_p": 1.0 / 6.0, "n0": -1.0 / 6.0,
                    "n00": -1.0 / 6.0, "omega0": 1.0 / 3.0}


def to_physical(obs: ObservableSet, epsilon: float) -> ObservableSet:
    """Convert a scaled-unit set to physical units for noise strength ``epsilon``.

    Lengths scale as ``eps**-1/6``, momenta as ``eps**1/6`` and energies as
    ``eps**1/3``; ``S``, ``K`` and the uncertainty product are unchanged.
    """
    if not epsilon > 0:
        raise ValueError("physical units need epsilon > 0")
    f = {k: epsilon**p for k, p in _PHYSICAL_POWERS.items()}
    errs = {k: v * f.get(k, 1.0) for k, v in obs.errors.items()}
    e = epsilon ** (1.0 / 3.0)
    return replace(obs, delta_x=obs.delta_x * f["delta_x"], delta_p=obs.delta_p * f["delta_p"],
                   n0=obs.n0 * f["n0"], n00=obs.n00 * f["n00"],
                   omega0=obs.omega0 * f["omega0"],
                   energy_levels={n: v * e for n, v in obs.energy_levels.items()}, errors=errs)
