import numpy as np
import pytest
import torch

_ACCEPTANCE: dict[str, str] = {}
_MEASURED: dict[str, list[str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def measure(request):
    """Record a measured value next to the test's criterion in the summary."""
    marker = request.node.get_closest_marker("criterion")
    label = marker.args[0] if marker else request.node.name

    def record(text: str) -> None:
        _MEASURED.setdefault(label, []).append(text)
        print(f"[{label}] {text}")

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if report.passed:
            status = "PASS"
        elif report.skipped:
            status = "SKIP"
        else:
            status = "FAIL"
        prev = _ACCEPTANCE.get(label)
        if prev in (None, "PASS") or status == "FAIL":
            _ACCEPTANCE[label] = status


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion covered by the test")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")

    def key(label):
        head = label.split()[0].rstrip(".")
        num = "".join(ch for ch in head if ch.isdigit())
        return (int(num) if num else 99, label)

    for label in sorted(_ACCEPTANCE, key=key):
        terminalreporter.write_line(f"{_ACCEPTANCE[label]:4}  {label}")
        for text in _MEASURED.get(label, []):
            terminalreporter.write_line(f"        {text}")
