import pytest

_results: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.fixture
def measured(request):
    """Attach a short measurement string to the criterion's summary line."""
    notes: list[str] = []
    request.node.stash[_notes_key] = notes
    return notes.append


_notes_key = pytest.StashKey[list]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = rep.failed
    if rep.when == "call" or (failed and rep.when == "setup"):
        notes = "; ".join(item.stash.get(_notes_key, []))
        _results[number] = ("FAIL" if failed else "PASS", title, notes)
        line = f"criterion {number:2d} {_results[number][0]}: {title}" + (f" ({notes})" if notes else "")
        print("\n" + line)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, title, notes = _results[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}" + (f" ({notes})" if notes else ""))
