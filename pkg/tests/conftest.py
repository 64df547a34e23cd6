import pytest

# criterion number -> (passed, line); filled by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key][1])
    passed = sum(ok for ok, _ in ACCEPTANCE_LINES.values())
    terminalreporter.write_line(f"{passed}/{len(ACCEPTANCE_LINES)} criteria passed")


@pytest.fixture
def record_criterion():
    def record(number: int, title: str, passed: bool, detail: str, seconds: float, limit: float):
        ok = bool(passed) and seconds < limit
        line = f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail} ({seconds:.1f}s, limit {limit:.0f}s)"
        ACCEPTANCE_LINES[number] = (ok, line)
        print(line)
        assert passed, line
        assert seconds < limit, f"criterion {number} took {seconds:.1f}s, limit {limit:.0f}s"
    return record
