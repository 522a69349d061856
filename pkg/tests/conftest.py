import numpy as np
import pytest

from causal_se.config import config_from_dict
from causal_se.gradcheck import tiny_model_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """T=6 / F=9 / width-8 geometry used across model tests (float64)."""
    return config_from_dict(tiny_model_config())


def tiny(**sections):
    base = tiny_model_config()
    for name, body in sections.items():
        base.setdefault(name, {}).update(body)
    return config_from_dict(base)


# -- acceptance reporting ----------------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, title)`` get one summary line each.

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.fixture
def measured(request):
    """Call with a short string describing what was measured; shown in the summary line."""
    marker = request.node.get_closest_marker("criterion")

    def note(text: str) -> None:
        if marker is not None:
            _CRITERIA.setdefault(marker.args[0], {})["detail"] = text

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = _CRITERIA.setdefault(marker.args[0], {})
    entry["title"] = marker.args[1]
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when in ("setup", "call"):
        # setup time counts too: shared fixtures (the desk training run) do the work there
        entry["seconds"] = entry.get("seconds", 0.0) + report.duration
    if report.when == "setup" and report.failed:
        entry["ok"] = False
    elif report.when == "call":
        entry["ok"] = not failed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry.get("ok") else "FAIL"
        seconds = entry.get("seconds")
        timing = f" ({seconds:.1f} s)" if seconds is not None else ""
        detail = f": {entry['detail']}" if entry.get("detail") else ""
        terminalreporter.write_line(f"{status}  criterion {number:>2}  {entry.get('title', '')}{timing}{detail}")
