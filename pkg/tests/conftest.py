from pathlib import Path

import pytest

from gsbridge.cli import main


def tree_bytes(root: Path, skip=("timing.json",)) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


@pytest.fixture(scope="session")
def smoke_runs(tmp_path_factory):
    """Two independent ``run-all --preset desk-sphere`` trees with the same seed."""
    roots = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"smoke{i}")
        assert main(["run-all", "--preset", "desk-sphere", "--seed", "7", "--out", str(out)]) == 0
        roots.append(out)
    return roots


# (criterion number, summary line) recorded by tests/test_acceptance.py
ACCEPTANCE_LINES: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
