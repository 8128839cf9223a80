"""Shared test plumbing: the acceptance suite records one line per criterion
and this hook replays them as a summary block at the end of the run."""

import pytest

acceptance_lines = []


@pytest.fixture(scope="session")
def announce():
    def _announce(tag, ok, detail):
        line = f"CRITERION {tag}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line, flush=True)
        acceptance_lines.append(line)
        return ok

    return _announce


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance summary")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
