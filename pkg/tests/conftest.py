"""Collects acceptance-criterion outcomes and prints one line per criterion."""
import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    props = dict(item.user_properties)
    status = "PASS" if rep.passed else "FAIL"
    if rep.passed and props.get("flag"):
        status = "PASS (soft; FLAGGED)"
    _RESULTS[number] = {"title": title, "status": status, "detail": props.get("detail", "")}


@pytest.fixture
def record(request):
    """``record(detail=..., flag=...)`` attaches measured values to the criterion line."""

    def _record(**kw):
        props = dict(request.node.user_properties)
        props.update(kw)
        request.node.user_properties[:] = list(props.items())

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        r = _RESULTS[number]
        line = f"criterion {number:>2}  {r['status']:<20} {r['title']}"
        if r["detail"]:
            line += f"  [{r['detail']}]"
        terminalreporter.write_line(line)
