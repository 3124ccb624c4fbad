import pytest

from sspe_vit.data import SyntheticConfig, generate_synthetic


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    """The default synthetic corpus, generated once per session."""
    root = tmp_path_factory.mktemp("default_data")
    return generate_synthetic(SyntheticConfig(), root)


_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _criteria[number] = (title, "PASS" if call.excinfo is None else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcome, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {outcome}  {title}  [{detail}]")
