import pytest

_RESULTS: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    n, title = mark.args
    entry = _RESULTS.setdefault(n, [title, True, []])
    entry[1] = entry[1] and report.passed
    entry[2] += [str(v) for k, v in item.user_properties if k == "detail"]
    item.user_properties[:] = [p for p in item.user_properties if p[0] != "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok, details = _RESULTS[n]
        line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}"
        if details:
            line += " | " + "; ".join(details)
        terminalreporter.write_line(line)
