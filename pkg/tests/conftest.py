from __future__ import annotations

import pytest

_RESULTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion test")


@pytest.fixture
def criterion(request):
    """Attach a one-line detail string to the current acceptance test."""
    marker = request.node.get_closest_marker("acceptance")
    details: list = []
    request.node.user_properties.append(("details", details))
    yield details.append
    if marker is None:  # pragma: no cover
        raise RuntimeError("criterion fixture used outside an acceptance test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    details = next((v for k, v in item.user_properties if k == "details"), [])
    prev = _RESULTS.get(number, (True, title, details))
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    _RESULTS[number] = (prev[0] and not failed, title, details)
    if rep.when == "call":
        status = "PASS" if _RESULTS[number][0] else "FAIL"
        print(f"\n[criterion {number}] {status}: {title}" + (f" ({'; '.join(details)})" if details else ""))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, title, details = _RESULTS[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if details:
            line += f"  [{'; '.join(details)}]"
        terminalreporter.write_line(line)
