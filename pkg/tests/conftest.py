"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_OUTCOMES: dict[int, list] = {}
_DETAILS: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


@pytest.fixture
def report(request):
    """``report(text)`` attaches a one-line summary to the criterion."""
    marker = request.node.get_closest_marker("criterion")

    def _report(text: str) -> None:
        if marker is not None:
            _DETAILS[marker.args[0]] = text
        print(text)

    return _report


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _OUTCOMES.setdefault(n, []).append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        outs = _OUTCOMES[n]
        if all(o == "passed" for o in outs):
            status = "PASS"
        elif all(o == "skipped" for o in outs):
            status = "SKIP"
        else:
            status = "FAIL"
        detail = _DETAILS.get(n, "")
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}".rstrip())
