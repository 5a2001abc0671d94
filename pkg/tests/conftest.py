import numpy as np
import pytest

from mixforge.signal import ToySpeakerSpec, gen_toy_utterance

VOICES = [
    ToySpeakerSpec(110.0, ((500.0, 80.0), (1500.0, 120.0), (2500.0, 150.0)), 0.01, 1),
    ToySpeakerSpec(220.0, ((800.0, 90.0), (1200.0, 110.0), (2900.0, 140.0)), 0.01, 2),
    ToySpeakerSpec(160.0, ((350.0, 70.0), (2100.0, 130.0), (3300.0, 160.0)), 0.01, 3),
    ToySpeakerSpec(280.0, ((650.0, 100.0), (1800.0, 100.0), (2700.0, 120.0)), 0.01, 4),
]


@pytest.fixture(scope="session")
def voices():
    return VOICES


@pytest.fixture(scope="session")
def toy_utts():
    """Two-second utterances: ``toy_utts[speaker][j]``."""
    return [[gen_toy_utterance(v, 2.0, j) for j in range(3)] for v in VOICES]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None or report.when == "teardown":
        return
    # setup time counts too: shared fixtures do the heavy lifting for some criteria
    _, spent = _criteria.get(marker, ("passed", 0.0))
    if report.when == "call" or report.failed or report.skipped:
        _criteria[marker] = (report.outcome, spent + report.duration)
    else:
        _criteria[marker] = ("passed", spent + report.duration)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        report.criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (outcome, duration) in sorted(_criteria.items()):
        status = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"criterion {number:>2}: {status:<6} {title} ({duration:.1f} s)")
