"""Exit criteria at full scale.  Each test prints one PASS/FAIL line; the
lines are repeated together at the end of the run."""

import json

import pytest

from oscillab import acceptance, cli
from oscillab.acceptance import FULL, Context

from .conftest import ACCEPTANCE_LINES

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


@pytest.fixture(scope="module")
def ctx():
    return Context(FULL)


def _report(result):
    line = result.line()
    print(line)
    ACCEPTANCE_LINES.append(line)
    return result


@pytest.mark.parametrize("number", range(1, 10))
def test_criterion(number, ctx):
    r = _report(acceptance.run_check(number, ctx))
    assert r.passed, json.dumps(r.details, indent=1, default=str)[:4000]


def test_criterion_10_reproducible_validate(tmp_path):
    cfg = tmp_path / "validate.json"
    cfg.write_text(json.dumps({"mode": "validate"}))
    outs = []
    for threads in (1, 2):
        out = tmp_path / f"t{threads}"
        code = cli.main(["validate", "--config", str(cfg), "--threads", str(threads),
                         "--out", str(out)])
        outs.append((out, code))
    (a, ca), (b, cb) = outs
    skip = {"manifest.json", "config.effective.json"}
    names = sorted(p.name for p in a.iterdir() if p.name not in skip)
    assert names == sorted(p.name for p in b.iterdir() if p.name not in skip)
    differ = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    passed = ca == cb and not differ and bool(names)
    summary = (f"{len(names)} result files, exit codes {ca}/{cb}, "
               f"{'all byte-identical' if not differ else 'differ: ' + ', '.join(differ)}")
    _report(acceptance.CheckResult(10, passed, {}, 0.0, summary))
    assert passed
