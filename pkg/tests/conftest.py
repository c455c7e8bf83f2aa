from pathlib import Path

import pytest

from prismsurv import harness as h

TINY = Path(__file__).parent / "data" / "tiny.yaml"


@pytest.fixture(scope="session")
def tiny_cfg():
    return h.load_config(TINY, env={})


@pytest.fixture(scope="session")
def tiny_cohorts(tmp_path_factory, tiny_cfg):
    """Two small prepared cohorts sharing the default hazard model."""
    root = tmp_path_factory.mktemp("tiny")
    a = h.synth_and_prepare(tiny_cfg, root)
    b = h.synth_and_prepare(tiny_cfg, root, seed=6, cohort_id="tiny2")
    return h.load_prepared(a), h.load_prepared(b)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str = ""):
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
