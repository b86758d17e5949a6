"""Shared fixtures: a small synthetic portfolio loaded through the CSV path."""
from dataclasses import replace

import numpy as np
import pytest

from fairprice.data import load_portfolio
from fairprice.models import fit_conversion
from fairprice.synth import SynthConfig, default_mapping, write_csv


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    cfg = SynthConfig(n=1500, seed=3)
    path = tmp_path_factory.mktemp("synth") / "small.csv"
    write_csv(path, cfg)
    portfolio, report = load_portfolio(path, default_mapping(cfg), seed=0)
    return cfg, path, portfolio, report


@pytest.fixture(scope="session")
def small_portfolio(small_synth):
    return small_synth[2]


@pytest.fixture(scope="session")
def small_fmodel(small_portfolio):
    return fit_conversion(small_portfolio.part("train"), small_portfolio.part("dev"))


@pytest.fixture(scope="session")
def age_portfolio(small_portfolio):
    """The small portfolio with age as the only sensitive column."""
    return replace(small_portfolio, sensitive=small_portfolio.sensitive[:, [0]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, in criterion order
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if call.when == "setup" and call.excinfo is not None:
        skipped = call.excinfo.errisinstance(pytest.skip.Exception)
        _CRITERIA[number] = (title, "SKIP" if skipped else "FAIL", None)
    elif call.when == "call":
        outcome = "PASS" if call.excinfo is None else (
            "SKIP" if call.excinfo.errisinstance(pytest.skip.Exception) else "FAIL")
        _CRITERIA[number] = (title, outcome, call.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcome, seconds = _CRITERIA[number]
        took = f" ({seconds:.1f} s)" if seconds is not None else ""
        terminalreporter.write_line(f"criterion {number:>2} {outcome}: {title}{took}")
