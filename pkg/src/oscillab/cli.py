"""``oscillab <mode> --config path [--threads N] [--physical] [--out dir]``.

Exit codes: 0 success, 1 file-system error, 2 config/schema error,
3 numerical failure, 4 failed acceptance checks (``validate``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import IoError, OscillabError, SchemaError
from .io import MODES, parse_config, write_text_atomic
from .pipeline import PIPELINES, AcceptanceFailure, Runner

EXIT_OK, EXIT_IO, EXIT_SCHEMA, EXIT_NUMERIC, EXIT_ACCEPTANCE = 0, 1, 2, 3, 4

log = logging.getLogger("oscillab")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oscillab",
                                 description="Stochastic oscillator ensembles, Fokker-Planck "
                                             "fields, observables and Wigner functions.")
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("--config", required=True, help="JSON run config")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads (0 = one per CPU); overrides the config")
    ap.add_argument("--physical", action="store_true",
                    help="report in physical units using system.epsilon")
    ap.add_argument("--out", default=None, help="output directory; overrides the config")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _schema_report(args, exc: SchemaError) -> None:
    """``validate`` still leaves a report behind when the config is bad."""
    out = Path(args.out or "out")
    body = {"scale": "desk", "checks": [], "passed": False,
            "error": {"type": "SchemaError", "message": str(exc), "field": exc.field,
                      "line": exc.line}}
    write_text_atomic(out / "validate_report.json", json.dumps(body, indent=2) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config, echo=False, output_dir=args.out)
        if cfg.mode != args.mode:
            cfg = cfg.with_overrides(mode=args.mode)
        if args.threads is not None:
            cfg = cfg.with_overrides(threads=args.threads)
        runner = Runner(cfg, physical=args.physical)
    except SchemaError as exc:
        where = f" (line {exc.line})" if exc.line else ""
        print(f"oscillab: schema error in {exc.field}{where}: {exc}", file=sys.stderr)
        if args.mode == "validate":
            try:
                _schema_report(args, exc)
            except IoError:
                pass
        return EXIT_SCHEMA
    except IoError as exc:
        print(f"oscillab: {exc}", file=sys.stderr)
        return EXIT_IO

    from .io import emit_config
    code = EXIT_OK
    try:
        emit_config(cfg, Path(cfg.output_dir) / "config.effective.json")
        log.info("mode=%s lambdas=%s config=%s", cfg.mode, list(cfg.lambdas), cfg.hash[:12])
        PIPELINES[cfg.mode](runner)
    except AcceptanceFailure as exc:
        print(f"oscillab: {exc}", file=sys.stderr)
        code = EXIT_ACCEPTANCE
    except SchemaError as exc:
        print(f"oscillab: schema error in {exc.field}: {exc}", file=sys.stderr)
        code = EXIT_SCHEMA
    except IoError as exc:
        print(f"oscillab: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OscillabError, FloatingPointError) as exc:
        print(f"oscillab: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        runner.manifest.errors.append(f"{type(exc).__name__}: {exc}")
        code = EXIT_NUMERIC
    try:
        runner.finish()
    except IoError as exc:
        print(f"oscillab: {exc}", file=sys.stderr)
        return EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
