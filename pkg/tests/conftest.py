import pytest

# test name -> (criterion, passed, detail)
_ACCEPTANCE: dict[str, tuple[str, bool, str]] = {}


@pytest.fixture
def acceptance(request):
    """Record the pass/fail line of the acceptance criterion checked by this test."""

    def record(criterion: str, ok: bool, detail: str):
        _ACCEPTANCE[request.node.name] = (criterion, bool(ok), detail)
        return ok

    return record


def pytest_runtest_logreport(report):
    # a test that errors before recording still gets its line
    if report.failed and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        crit, _, detail = _ACCEPTANCE.get(name, (name, False, ""))
        msg = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else str(report.longrepr)
        _ACCEPTANCE[name] = (crit, False, detail or msg.splitlines()[0])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in _ACCEPTANCE.values():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {crit}: {detail}")
