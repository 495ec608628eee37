import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None)
settings.load_profile("repo")

# criterion number -> (title, outcome, detail)
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA.setdefault(m.args[0], [m.args[1], "not run", ""])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    entry = _CRITERIA.setdefault(m.args[0], [m.args[1], "not run", ""])
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry[1] = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        entry[2] = detail or (str(call.excinfo.value).splitlines()[0] if call.excinfo else "")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        tr.write_line(f"criterion {n:2d}  {status:4s}  {title}: {detail}".rstrip(": "))
