from __future__ import annotations

import functools
import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

_acceptance: list[tuple[int, str, str, str]] = []


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    line = (number, title, "PASS" if passed else "FAIL", detail)
    _acceptance.append(line)
    print(f"criterion {number} [{line[2]}] {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, verdict, detail in sorted(_acceptance):
        terminalreporter.write_line(f"criterion {number} {verdict}: {title} ({detail})")


@functools.lru_cache(maxsize=1)
def ptrace_status() -> tuple[bool, str]:
    from syschaos.syscall.session import probe_capabilities

    report = probe_capabilities()
    return report.available, report.message


def requires_ptrace():
    ok, why = ptrace_status()
    if not ok:
        pytest.skip(f"ptrace unavailable here: {why}")


@pytest.fixture
def ptrace_ok():
    requires_ptrace()


@pytest.fixture
def toy(tmp_path):
    """Factory launching toy targets that are terminated after the test."""
    from syschaos.target import launch_toy

    started = []

    def start(script, **kw):
        kw.setdefault("workdir", tmp_path / f"toy{len(started)}")
        proc = launch_toy(script, **kw)
        started.append(proc)
        return proc

    yield start
    for proc in started:
        proc.terminate()


def load_fixture(name: str):
    return json.loads((FIXTURES / name).read_text())


def pytest_addoption(parser):
    parser.addoption("--update-golden", action="store_true", help="rewrite tests/golden from current output")


@pytest.fixture
def golden(request):
    """Compare text against a golden file (or rewrite it with --update-golden)."""
    update = request.config.getoption("--update-golden")

    def check(name: str, text: str) -> bool:
        path = GOLDEN / name
        if update or not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(text.encode("utf-8"))
        return path.read_bytes() == text.encode("utf-8")

    return check
