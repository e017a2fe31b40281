"""Per-criterion PASS/FAIL summary for tests marked ``criterion(n)``."""
import pytest

_outcomes: dict[int, list[tuple[str, bool, list[str]]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        notes = [v for k, v in item.user_properties if k == "detail"]
        _outcomes.setdefault(marker.args[0], []).append((item.name, report.passed, notes))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        runs = _outcomes[n]
        ok = all(passed for _, passed, _ in runs)
        notes = "; ".join(note for _, _, ns in runs for note in ns)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}" + (f"  ({notes})" if notes else ""))
