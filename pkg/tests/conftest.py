import pytest

from factories import tiny_gen_config
from mtgr.datagen import default_schema, generate


@pytest.fixture(scope="session")
def tiny_data():
    return generate(tiny_gen_config())


@pytest.fixture(scope="session")
def tiny_schema():
    return default_schema(8, tiny_gen_config())


# acceptance criteria report: one line per criterion in the terminal summary
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")
    config.addinivalue_line("markers", "slow: long-running training runs")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and not rep.passed):
        return
    n, title = mark.args
    prev = _criteria.get(n, (True, title, []))
    detail = [f"{k}={v}" for k, v in item.user_properties]
    _criteria[n] = (prev[0] and rep.passed, title, prev[2] + detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, title, detail = _criteria[n]
        extra = f" [{', '.join(detail)}]" if detail else ""
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}{extra}")
