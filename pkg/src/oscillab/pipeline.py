"""Per-mode pipelines driven by a :class:`~oscillab.io.RunConfig`.

Each pipeline writes its result files into ``cfg.output_dir`` and fills a
:class:`~oscillab.io.RunManifest`.  Work is split into independent per-lambda
tasks; results are gathered in input order, so the files do not depend on
how many threads ran them.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import acceptance, fpe
from .errors import OscillabError, SchemaError
from .io import (RunConfig, RunManifest, csv_text, emit_heatmap, field_csv, json_text,
                 write_text_atomic)
from .observables import (CSV_COLUMNS, ObservableSet, observables_from_ensemble,
                          observables_from_fields, to_physical)
from .sde import SystemParams, ensemble_run, ensemble_table
from .wigner import wigner_checks, wigner_ground_averaged

SWEEP_COLUMNS = CSV_COLUMNS + ("status",)


class AcceptanceFailure(Exception):
    """``validate`` finished but at least one check failed."""


def _resolve_threads(n: int) -> int:
    import os
    return (os.cpu_count() or 1) if n <= 0 else n


def _grid(cfg: RunConfig) -> fpe.Grid2D:
    g = cfg.numerics["grid"]
    return fpe.build_grid(g["u1_max"], g["u2_min"], g["u2_max"], g["n1"], g["n2"])


def _tag(lam: float) -> str:
    return f"lambda={lam:g}"


def _params(cfg: RunConfig, lam: float, physical: bool, **over) -> SystemParams:
    s = cfg.system
    kw = dict(t_end=s["t_end"], dt=s["dt"], n_traj=s["n_traj"], seed=s["seed"])
    kw.update(over)
    if physical:
        eps = _epsilon(cfg)
        return SystemParams(omega0=math.sqrt(lam) * eps ** (1.0 / 3.0), epsilon=eps, **kw)
    return SystemParams.from_lambda(lam, **kw)


def _epsilon(cfg: RunConfig) -> float:
    eps = cfg.system.get("epsilon")
    if not eps:
        raise SchemaError("--physical needs a positive system.epsilon", field="system.epsilon")
    return float(eps)


class Runner:
    """Shared plumbing: output paths, manifest, timing, parallel map."""

    def __init__(self, cfg: RunConfig, physical: bool = False):
        self.cfg = cfg
        self.physical = physical
        self.out = Path(cfg.output_dir)
        self.hash = cfg.hash
        self.threads = _resolve_threads(cfg.threads)
        self.manifest = RunManifest(self.hash, int(cfg.system["seed"]))
        if physical:
            _epsilon(cfg)

    def write(self, name: str, text: str) -> None:
        write_text_atomic(self.out / name, text)
        self.manifest.outputs.append(name)

    def wants(self, fmt: str) -> bool:
        return fmt in self.cfg.formats

    def timed(self, task: str, fn, *args):
        t0 = time.perf_counter()
        try:
            return fn(*args)
        finally:
            self.manifest.timings[task] = round(time.perf_counter() - t0, 3)

    def map_lambdas(self, fn):
        lams = list(self.cfg.lambdas)
        if self.threads == 1 or len(lams) == 1:
            return [fn(lam) for lam in lams]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, lams))

    def finish(self) -> RunManifest:
        self.manifest.write(self.out / "manifest.json")
        return self.manifest

    def convert(self, obs: ObservableSet) -> ObservableSet:
        return to_physical(obs, _epsilon(self.cfg)) if self.physical else obs


# ---------------------------------------------------------------- sde


def run_sde(r: Runner) -> None:
    cfg = r.cfg
    save = cfg.system["save_times"]
    summary = {}
    for lam in cfg.lambdas:
        p = _params(cfg, lam, r.physical)
        ens = r.timed(f"sde {_tag(lam)}", ensemble_run, p, save, r.threads, 1e-3,
                      cfg.system["scheme"])
        r.manifest.rejections[_tag(lam)] = ens.n_rejected
        acc = ens.accepted
        summary[_tag(lam)] = {
            "omega0": p.omega0, "epsilon": p.epsilon, "n_traj": len(ens),
            "n_rejected": ens.n_rejected, "save_times": list(ens.save_times),
            "mean_u1": np.mean(ens.u1[acc], axis=0),
            "mean_log_u2": np.mean(ens.log_u2[acc], axis=0),
            "mean_int_u1": np.mean(ens.int_u1[acc], axis=0)}
        if r.wants("csv"):
            rows = ensemble_table(ens)
            cols = ("traj", "t", "u1", "log_u2", "int_u1", "int_u2", "status")
            r.write(f"sde_{_tag(lam)}.csv",
                    csv_text(cols, ([row[c] for c in cols] for row in rows), r.hash, "ensemble"))
    if r.wants("json"):
        r.write("sde_summary.json", json_text(summary, r.hash))


# ---------------------------------------------------------------- fpe


def _stationary(cfg: RunConfig, lam: float):
    n = cfg.numerics
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = fpe.solve_Q_and_D(lam, grid=_grid(cfg), tol=n["tol"], t_max=n["t_max"],
                                auto_enlarge=n["auto_enlarge"])
    return res, [str(w.message) for w in caught]


def _solve_info(res) -> dict:
    return {"t_star": res.t_star, "converged": res.converged, "growth_rate": res.growth_rate,
            "boundary_mass": res.boundary_mass, "enlarged": res.enlarged,
            "ratio_residuals": [h[1] for h in res.residual_history[-5:]]}


def run_fpe(r: Runner) -> None:
    cfg = r.cfg

    def task(lam):
        return lam, r.timed(f"fpe {_tag(lam)}", _stationary, cfg, lam)

    info = {}
    for lam, (res, notes) in r.map_lambdas(task):
        q, d = res.companion, res.field
        info[_tag(lam)] = dict(_solve_info(res), warnings=notes)
        r.manifest.tolerance_outcomes[f"fpe {_tag(lam)}"] = {
            "converged": res.converged, "boundary_mass": res.boundary_mass}
        if r.wants("csv"):
            r.write(f"fpe_Q_{_tag(lam)}.csv", field_csv(q, r.hash))
            r.write(f"fpe_D_{_tag(lam)}.csv", field_csv(d, r.hash))
        if r.wants("svg"):
            emit_heatmap(q, r.out / f"fpe_Q_{_tag(lam)}.svg", r.hash,
                         f"Q0 at t={res.t_star:.4g}, lambda={lam:g}")
            r.manifest.outputs.append(f"fpe_Q_{_tag(lam)}.svg")
    if r.wants("json"):
        r.write("fpe_summary.json", json_text(info, r.hash))


# ---------------------------------------------------------------- observables / sweep


def _observe(r: Runner, lam: float, mc: bool):
    """PDE (and optionally MC) observable sets for one coupling."""
    cfg = r.cfg
    levels = tuple(cfg.numerics["levels"])
    res, notes = _stationary(cfg, lam)
    out = [observables_from_fields(res.companion, res.field, lam, levels,
                                   converged=res.converged)]
    outcome = dict(_solve_info(res), warnings=notes)
    if mc:
        T = float(res.t_star)
        p = _params(cfg, lam, False, t_end=T)
        ens = ensemble_run(p, [T], 1, 1e-3, cfg.system["scheme"])
        outcome["mc_rejected"] = ens.n_rejected
        out.append(observables_from_ensemble(ens, T, levels))
    return [r.convert(o) for o in out], outcome


def _table(r: Runner, rows, name: str, statuses) -> None:
    if r.wants("csv"):
        lines = (o.csv_row() + [s] for o, s in zip(rows, statuses))
        r.write(f"{name}.csv", csv_text(SWEEP_COLUMNS, lines, r.hash, name))
    if r.wants("json"):
        r.write(f"{name}.json", json_text([o.to_dict() for o in rows], r.hash))


def run_observables(r: Runner, keep_going: bool = False) -> None:
    """One row per (lambda, method).  In a sweep a failing coupling is
    recorded as an ``error`` row and the others continue."""
    cfg = r.cfg
    mc = cfg.numerics["mc_check"]

    def task(lam):
        t0 = time.perf_counter()
        try:
            return lam, _observe(r, lam, mc), None
        except OscillabError as exc:
            if not keep_going:
                raise
            return lam, None, f"error: {type(exc).__name__}: {exc}"
        finally:
            r.manifest.timings[f"observables {_tag(lam)}"] = round(time.perf_counter() - t0, 3)

    rows, statuses, errors = [], [], []
    for lam, got, err in r.map_lambdas(task):
        if got is None:
            errors.append({"lambda": lam, "error": err})
            r.manifest.errors.append(f"{_tag(lam)}: {err}")
            continue
        sets, outcome = got
        r.manifest.tolerance_outcomes[f"observables {_tag(lam)}"] = outcome
        rows += sets
        statuses += ["ok"] * len(sets)
    name = "sweep" if keep_going else "observables"
    _table(r, rows, name, statuses)
    if errors and r.wants("csv"):
        lines = ([e["lambda"]] + [""] * (len(SWEEP_COLUMNS) - 2) + [e["error"]] for e in errors)
        r.write(f"{name}_errors.csv", csv_text(SWEEP_COLUMNS, lines, r.hash, f"{name}-errors"))


def run_sweep(r: Runner) -> None:
    run_observables(r, keep_going=True)


# ---------------------------------------------------------------- wigner


def run_wigner(r: Runner) -> None:
    cfg = r.cfg
    w = cfg.wigner
    t = float(w["t"])
    report = {}
    for lam in cfg.lambdas:
        if w["source"] == "fpe":
            q = r.timed(f"fpe {_tag(lam)}", fpe.evolve, lam, 0.0, _grid(cfg), [t])[0][0]
            W = wigner_ground_averaged(q, n=w["n_grid"])
        else:
            p = _params(cfg, lam, False, t_end=max(t, cfg.system["t_end"]))
            ens = r.timed(f"sde {_tag(lam)}", ensemble_run, p, [t], r.threads, 1e-3,
                          cfg.system["scheme"])
            r.manifest.rejections[_tag(lam)] = ens.n_rejected
            W = wigner_ground_averaged(ens, t=t, n=w["n_grid"])
        chk = wigner_checks(W)
        report[_tag(lam)] = {"t": W.t, "provenance": W.provenance, "raw_norm": W.raw_norm,
                             **chk.to_dict()}
        if r.wants("csv"):
            r.write(f"wigner_{_tag(lam)}.csv", field_csv(W, r.hash))
        if r.wants("svg"):
            emit_heatmap(W, r.out / f"wigner_{_tag(lam)}.svg", r.hash)
            r.manifest.outputs += [f"wigner_{_tag(lam)}.svg",
                                   f"wigner_{_tag(lam)}.marginals.csv"]
    if r.wants("json"):
        r.write("wigner_checks.json", json_text(report, r.hash))


# ---------------------------------------------------------------- validate


def run_validate(r: Runner) -> None:
    """Desk-scale acceptance checks; raises :class:`AcceptanceFailure` if any fail."""
    cfg = r.cfg
    scale = replace(acceptance.DESK, seed=int(cfg.system["seed"]), threads=r.threads)
    results, ctx = acceptance.run_checks(cfg.validate["checks"], scale)
    for res in results:
        r.manifest.timings[f"check {res.number}"] = round(res.runtime, 3)
        r.manifest.tolerance_outcomes[f"check {res.number}"] = res.passed
    r.manifest.rejections.update(ctx.rejections)
    write_validate_report(r, results)
    failed = [res.number for res in results if not res.passed]
    if failed:
        raise AcceptanceFailure(f"checks failed: {failed}")


def write_validate_report(r: Runner, results, error: dict = None) -> None:
    body = {"scale": "desk", "checks": [res.to_dict() for res in results],
            "passed": bool(results) and error is None and all(res.passed for res in results)}
    if error is not None:
        body["error"] = error
    r.write("validate_report.json", json_text(body, r.hash))
    rows = ((res.number, res.name, res.passed, res.summary) for res in results)
    r.write("validate_checks.csv",
            csv_text(("criterion", "name", "passed", "summary"), rows, r.hash, "validate"))


PIPELINES = {"sde": run_sde, "fpe": run_fpe, "observables": run_observables,
             "sweep": run_sweep, "wigner": run_wigner, "validate": run_validate}
