"""Run configuration, result files and SVG heatmaps.

Configs are JSON objects checked against :data:`CONFIG_SCHEMA` (unknown keys
are rejected).  Every file written here carries the SHA-256 of the effective
config so outputs can be matched to the run that produced them.  Timings go
only into the manifest; all other outputs are deterministic.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import __version__
from .errors import IoError, SchemaError

CSV_VERSION = 1
MODES = ("sde", "fpe", "observables", "wigner", "sweep", "validate")
FORMATS = ("csv", "json", "svg")

_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_INT_POS = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mode"],
    "properties": {
        "mode": {"enum": list(MODES)},
        "lambda": {"type": "array", "items": _POS, "minItems": 1},
        "system": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "omega0": _POS,
                "epsilon": _NONNEG,
                "t_end": _POS,
                "dt": _POS,
                "n_traj": _INT_POS,
                "seed": {"type": "integer", "minimum": 0, "maximum": 2**63 - 1},
                "save_times": {"type": "array", "items": _NONNEG, "minItems": 1},
                "scheme": {"enum": ["linear", "euler", "euler-reject"]},
            },
        },
        "numerics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "n1": {"type": "integer", "minimum": 16},
                        "n2": {"type": "integer", "minimum": 16},
                        "u1_max": _POS,
                        "u2_min": _POS,
                        "u2_max": _POS,
                    },
                },
                "tol": _POS,
                "t_max": _POS,
                "auto_enlarge": {"type": "boolean"},
                "mc_check": {"type": "boolean"},
                "levels": {"type": "array", "items": {"type": "integer", "minimum": 0,
                                                      "maximum": 60}},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda": {"type": "array", "items": _POS, "minItems": 1},
                "start": _POS,
                "stop": _POS,
                "num": _INT_POS,
                "log": {"type": "boolean"},
            },
        },
        "wigner": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t": _POS,
                "n_grid": {"type": "integer", "minimum": 3},
                "source": {"enum": ["fpe", "mc"]},
            },
        },
        "validate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "checks": {"type": "array", "items": {"type": "integer", "minimum": 1,
                                                      "maximum": 10}},
            },
        },
        "output_dir": {"type": "string", "minLength": 1},
        "formats": {"type": "array", "items": {"enum": list(FORMATS)}, "uniqueItems": True},
        "threads": {"type": "integer", "minimum": 0},
    },
}

DEFAULTS = {
    "system": {"t_end": 20.0, "dt": 1e-3, "n_traj": 100_000, "seed": 42,
               "save_times": [1.0, 5.0, 20.0], "scheme": "linear"},
    "numerics": {"grid": {"n1": 256, "n2": 256, "u1_max": 12.0, "u2_min": 1e-3,
                          "u2_max": 40.0},
                 "tol": 1e-8, "t_max": 200.0, "auto_enlarge": True, "mc_check": False,
                 "levels": [0]},
    "wigner": {"t": 1.0, "n_grid": 129, "source": "fpe"},
    "validate": {"checks": [1, 2, 3, 4, 6, 8, 9]},
    "output_dir": "out",
    "formats": ["csv", "json", "svg"],
    "threads": 1,
}


@dataclass(frozen=True)
class RunConfig:
    """Validated config with every default filled in."""

    mode: str
    lambdas: tuple
    system: dict
    numerics: dict
    wigner: dict
    validate: dict
    output_dir: str
    formats: tuple
    threads: int
    sweep: Optional[dict] = None

    def to_dict(self) -> dict:
        d = {"mode": self.mode, "lambda": list(self.lambdas),
             "system": copy.deepcopy(self.system), "numerics": copy.deepcopy(self.numerics),
             "wigner": dict(self.wigner), "validate": copy.deepcopy(self.validate),
             "output_dir": self.output_dir, "formats": list(self.formats),
             "threads": self.threads}
        if self.sweep is not None:
            d["sweep"] = copy.deepcopy(self.sweep)
        return d

    @property
    def hash(self) -> str:
        return config_hash(self)

    def with_overrides(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update(kw)
        return config_from_dict(d)


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the canonical config, ignoring ``threads`` and ``output_dir``,
    which do not change results."""
    d = cfg.to_dict()
    d.pop("threads")
    d.pop("output_dir")
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _key_line(text: Optional[str], path: Sequence) -> Optional[int]:
    """Line of the last string key in ``path`` (first match), if the raw text is known."""
    if not text:
        return None
    keys = [p for p in path if isinstance(p, str)]
    if not keys:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(keys[-1]), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _sweep_lambdas(sweep: dict) -> list:
    if "lambda" in sweep:
        return [float(x) for x in sweep["lambda"]]
    missing = [k for k in ("start", "stop", "num") if k not in sweep]
    if missing:
        raise SchemaError(f"sweep needs 'lambda' or start/stop/num (missing {missing})",
                          field="sweep")
    a, b, n = float(sweep["start"]), float(sweep["stop"]), int(sweep["num"])
    if sweep.get("log", False):
        return [float(x) for x in np.geomspace(a, b, n)]
    return [float(x) for x in np.linspace(a, b, n)]


def config_from_dict(raw: dict, text: Optional[str] = None) -> RunConfig:
    """Validate ``raw`` and fill defaults; ``text`` (the source) sharpens diagnostics."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = list(e.absolute_path)
        if e.validator == "additionalProperties":
            bad = sorted(set(e.instance) - set(e.schema.get("properties", {})))
            path = path + bad[:1]
            msg = f"unknown key(s) {bad}"
        else:
            msg = e.message
        name = ".".join(str(p) for p in path) or "<root>"
        raise SchemaError(f"{name}: {msg}", field=name, line=_key_line(text, path))
    d = _merge(DEFAULTS, raw)
    g = d["numerics"]["grid"]
    if not g["u2_min"] < g["u2_max"]:
        raise SchemaError("numerics.grid: u2_min must be below u2_max",
                          field="numerics.grid.u2_min", line=_key_line(text, ["u2_min"]))
    sys_ = d["system"]
    if any(t > sys_["t_end"] for t in sys_["save_times"]):
        raise SchemaError("system.save_times: every save time must be <= t_end",
                          field="system.save_times", line=_key_line(text, ["save_times"]))
    lams = d.get("lambda")
    if d.get("sweep") is not None and lams is None:
        lams = _sweep_lambdas(d["sweep"])
    if lams is None:
        om, eps = sys_.get("omega0"), sys_.get("epsilon")
        if om is not None and eps:
            lams = [om**2 / eps ** (2.0 / 3.0)]
        elif d["mode"] != "validate":
            raise SchemaError("lambda: give a lambda list, a sweep block, or "
                              "system.omega0 with a positive system.epsilon",
                              field="lambda", line=None)
        else:
            lams = [1.0]
    return RunConfig(d["mode"], tuple(float(x) for x in lams), sys_, d["numerics"],
                     d["wigner"], d["validate"], d["output_dir"], tuple(d["formats"]),
                     int(d["threads"]), d.get("sweep"))


def parse_config(path, echo: bool = True, output_dir: Optional[str] = None) -> RunConfig:
    """Read, validate and default-fill a JSON config.

    With ``echo`` the effective config is written to
    ``<output_dir>/config.effective.json``.
    """
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError as exc:
        raise SchemaError(f"config file {p} not found", field="<file>") from exc
    except OSError as exc:
        raise IoError(f"cannot read {p}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc.msg}", field="<syntax>", line=exc.lineno) from exc
    if not isinstance(raw, dict):
        raise SchemaError("config must be a JSON object", field="<root>", line=1)
    cfg = config_from_dict(raw, text)
    if output_dir is not None:
        cfg = cfg.with_overrides(output_dir=output_dir)
    if echo:
        emit_config(cfg, Path(cfg.output_dir) / "config.effective.json")
    return cfg


def emit_config(cfg: RunConfig, path) -> Path:
    return write_text_atomic(path, json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- files


def write_text_atomic(path, text: str) -> Path:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return "" if x is None else x


def csv_text(header: Sequence[str], rows, cfg_hash: str, kind: str) -> str:
    """CSV with a leading ``# oscillab-csv`` comment (format version, table kind, config hash)."""
    buf = io.StringIO()
    buf.write(f"# oscillab-csv v{CSV_VERSION} kind={kind} config_sha256={cfg_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(x) for x in r])
    return buf.getvalue()


def read_csv(path):
    """``(meta, header, rows)`` of a file written by :func:`csv_text`."""
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    meta = dict(kv.split("=", 1) for kv in head[3:])
    meta["version"] = head[2]
    reader = csv.reader(lines[1:])
    header = next(reader)
    return meta, header, list(reader)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def json_text(obj, cfg_hash: str) -> str:
    body = {"config_sha256": cfg_hash, "format_version": CSV_VERSION, "data": _jsonable(obj)}
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


def field_csv(field, cfg_hash: str) -> str:
    """``u1, u2, value`` rows of a Fokker-Planck field (or ``x, p, W`` of a Wigner field)."""
    if hasattr(field, "grid") and hasattr(field.grid, "u1_nodes"):
        a, b, names = field.grid.u1_nodes, field.grid.u2_nodes, ("u1", "u2", "value")
        kind = f"field-{field.kind}"
    else:
        a, b, names = field.grid.x_nodes, field.grid.p_nodes, ("x", "p", "W")
        kind = "wigner"
        if field.grid.shear:
            b = None
            P = field.grid.mesh()[1]
    v = np.asarray(field.values)
    if b is None:
        rows = ((a[i], P[i, j], v[i, j]) for i in range(a.size) for j in range(P.shape[1]))
    else:
        rows = ((a[i], b[j], v[i, j]) for i in range(a.size) for j in range(b.size))
    return csv_text(names, rows, cfg_hash, kind)


@dataclass
class RunManifest:
    """Everything needed to reproduce a run, plus how it went."""

    config_sha256: str
    seed: int
    code_version: str = __version__
    timings: dict = field(default_factory=dict)
    rejections: dict = field(default_factory=dict)
    tolerance_outcomes: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def write(self, path) -> Path:
        return write_text_atomic(path, json.dumps(_jsonable(self.__dict__), indent=2,
                                                  sort_keys=True) + "\n")


# ---------------------------------------------------------------- SVG


# viridis anchors
_CMAP = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]],
                 dtype=float)


def _color(v: float) -> str:
    v = min(max(v, 0.0), 1.0) * (len(_CMAP) - 1)
    i = min(int(v), len(_CMAP) - 2)
    f = v - i
    r, g, b = (1 - f) * _CMAP[i] + f * _CMAP[i + 1]
    return f"#{int(round(r)):02x}{int(round(g)):02x}{int(round(b)):02x}"


def _block_mean(values: np.ndarray, max_cells: int) -> np.ndarray:
    v = values
    for axis in (0, 1):
        n = v.shape[axis]
        if n > max_cells:
            k = -(-n // max_cells)
            edges = np.arange(0, n, k)
            v = np.add.reduceat(v, edges, axis=axis) / np.diff(np.r_[edges, n]).reshape(
                (-1, 1) if axis == 0 else (1, -1))
    return v


def _g(x: float) -> str:
    return f"{x:.6g}"


def heatmap_svg(values, x_edges, y_edges, x_label: str, y_label: str, title: str,
                cfg_hash: str, max_cells: int = 128) -> str:
    """SVG raster: ``values[i, j]`` fills ``[x_edges[i], x_edges[i+1]] x [y_edges[j], ...]``.

    Larger fields are block-averaged down to ``max_cells`` per axis.  A
    constant field gets the unit range ``[v, v + 1]`` so the scale is defined.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 2 or not np.all(np.isfinite(v)):
        raise IoError("heatmap needs a finite 2-D array")
    xe = np.asarray(x_edges, dtype=float)
    ye = np.asarray(y_edges, dtype=float)
    if v.shape[0] > max_cells or v.shape[1] > max_cells:
        nx, ny = v.shape
        v = _block_mean(v, max_cells)
        kx = -(-nx // max_cells) if nx > max_cells else 1
        ky = -(-ny // max_cells) if ny > max_cells else 1
        xe = np.r_[xe[:-1:kx], xe[-1]]
        ye = np.r_[ye[:-1:ky], ye[-1]]
    vmin, vmax = float(v.min()), float(v.max())
    if vmax == vmin:
        vmax = vmin + 1.0
    W, H, L, T = 400.0, 400.0, 70.0, 40.0
    sx = W / (xe[-1] - xe[0])
    sy = H / (ye[-1] - ye[0])
    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(L + W + 120)}" '
           f'height="{int(T + H + 60)}">',
           f"<!-- oscillab heatmap config_sha256={cfg_hash} -->",
           f'<text x="{L + W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           '<g id="cells" shape-rendering="crispEdges">']
    for i in range(v.shape[0]):
        x0 = L + (xe[i] - xe[0]) * sx
        w = (xe[i + 1] - xe[i]) * sx
        for j in range(v.shape[1]):
            y0 = T + H - (ye[j + 1] - ye[0]) * sy
            h = (ye[j + 1] - ye[j]) * sy
            c = _color((v[i, j] - vmin) / (vmax - vmin))
            out.append(f'<rect x="{x0:.3f}" y="{y0:.3f}" width="{w:.3f}" height="{h:.3f}" '
                       f'fill="{c}"/>')
    out.append("</g>")
    out += [f'<rect x="{L}" y="{T}" width="{W}" height="{H}" fill="none" stroke="black"/>',
            f'<text x="{L}" y="{T + H + 18}" font-size="11">{_g(xe[0])}</text>',
            f'<text x="{L + W}" y="{T + H + 18}" text-anchor="end" font-size="11">'
            f'{_g(xe[-1])}</text>',
            f'<text x="{L + W / 2}" y="{T + H + 40}" text-anchor="middle" font-size="12">'
            f'{x_label}</text>',
            f'<text x="{L - 6}" y="{T + H}" text-anchor="end" font-size="11">{_g(ye[0])}</text>',
            f'<text x="{L - 6}" y="{T + 10}" text-anchor="end" font-size="11">{_g(ye[-1])}</text>',
            f'<text x="18" y="{T + H / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 18 {T + H / 2})">{y_label}</text>']
    # legend
    lx = L + W + 30
    out.append('<g id="legend">')
    for k in range(50):
        out.append(f'<rect x="{lx}" y="{T + H - (k + 1) * H / 50:.3f}" width="20" '
                   f'height="{H / 50 + 0.5:.3f}" fill="{_color(k / 49)}"/>')
    out.append(f'<text id="legend-max" x="{lx + 24}" y="{T + 10}" font-size="11">'
               f'{_g(vmax)}</text>')
    out.append(f'<text id="legend-min" x="{lx + 24}" y="{T + H}" font-size="11">'
               f'{_g(vmin)}</text>')
    out += ["</g>", "</svg>"]
    return "\n".join(out) + "\n"


def _edges_from_nodes(nodes: np.ndarray) -> np.ndarray:
    mid = 0.5 * (nodes[1:] + nodes[:-1])
    if nodes.size == 1:
        return np.array([nodes[0] - 0.5, nodes[0] + 0.5])
    return np.r_[2 * nodes[0] - mid[0], mid, 2 * nodes[-1] - mid[-1]]


def emit_heatmap(field, path, cfg_hash: str = "", title: Optional[str] = None) -> Path:
    """Write an SVG heatmap of a Fokker-Planck or Wigner field.

    Fokker-Planck fields are drawn against ``ln u2`` (the solver's uniform
    coordinate).  For a Wigner field a ``.marginals.csv`` sidecar holds both
    marginals and the normalisation.
    """
    path = Path(path)
    if hasattr(field.grid, "u1_nodes"):
        g = field.grid
        svg = heatmap_svg(field.values, _edges_from_nodes(g.u1_nodes), g.s_edges, "u1",
                          "ln u2", title or f"{field.kind} at t={_g(field.t)}", cfg_hash)
    else:
        g = field.grid
        svg = heatmap_svg(field.values, _edges_from_nodes(g.x_nodes),
                          _edges_from_nodes(g.p_nodes), "x",
                          f"p - {_g(g.shear)} x" if g.shear else "p",
                          title or f"W at t={_g(field.t)} ({field.provenance})", cfg_hash)
        write_marginals(field, path.with_suffix(".marginals.csv"), cfg_hash)
    return write_text_atomic(path, svg)


def write_marginals(field, path, cfg_hash: str) -> Path:
    from .wigner import wigner_checks
    rep = wigner_checks(field)
    gx, gp = field.grid.x_nodes, field.grid.p_nodes
    pm = rep.p_marginal
    if pm is None:
        gp = pm = np.empty(0)
    n = max(gx.size, gp.size)
    rows = []
    for k in range(n):
        rows.append([gx[k] if k < gx.size else None, rep.x_marginal[k] if k < gx.size else None,
                     gp[k] if k < gp.size else None, pm[k] if k < gp.size else None])
    text = csv_text(("x", "x_marginal", "p", "p_marginal"), rows, cfg_hash,
                    f"wigner-marginals normalization={rep.normalization!r}")
    return write_text_atomic(path, text)


def svg_legend(svg: str) -> tuple:
    """``(min, max)`` printed in a heatmap legend."""
    lo = re.search(r'id="legend-min"[^>]*>([^<]+)<', svg).group(1)
    hi = re.search(r'id="legend-max"[^>]*>([^<]+)<', svg).group(1)
    return float(lo), float(hi)
