from pathlib import Path

import pytest

MINI_CFG = Path(__file__).parent / "data" / "mini.cfg"


def run_cli(*argv):
    from steerlab.harness.cli import main
    return main([str(a) for a in argv])


@pytest.fixture(scope="session")
def mini_run(tmp_path_factory):
    """A complete small pipeline run, shared by the harness tests."""
    out = tmp_path_factory.mktemp("mini")
    assert run_cli("run", "--config", MINI_CFG, "--out", out) == 0
    return out


# one line per acceptance criterion, echoed in the terminal summary
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, title: str, detail: str) -> bool:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    CRITERIA[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
