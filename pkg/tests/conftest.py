import pytest

_LINES = []


@pytest.fixture
def report(request):
    """Write a one-line criterion verdict to the terminal, bypassing capture."""
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(k, ok, detail):
        line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
