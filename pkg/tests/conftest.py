import pytest

_RESULTS = {}


@pytest.fixture
def note(request):
    """Print a line and keep it for the acceptance summary."""

    def add(line):
        print(line)
        request.node.user_properties.append(("note", str(line)))

    return add


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        notes = [v for k, v in rep.user_properties if k == "note"]
        _RESULTS[number] = (title, "PASS" if rep.passed else "FAIL", notes)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, status, notes = _RESULTS[number]
        terminalreporter.write_line(f"{status} criterion {number}: {title}")
        for line in notes:
            terminalreporter.write_line(f"    {line}")
