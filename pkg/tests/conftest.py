from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from eagle_iad.features import generate_synthetic_dataset  # noqa: E402


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Default synthetic dataset (seed 0, 100 train, 50 + 50 test, 8x12x12)."""
    d = tmp_path_factory.mktemp("synth")
    generate_synthetic_dataset(d, seed=0)
    return d


@pytest.fixture(scope="session")
def small_synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth_small")
    generate_synthetic_dataset(d, seed=3, n_train=20, n_test_normal=6, n_test_anom=6, grid_shape=(8, 8, 8))
    return d


_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"{status} [{number:2d}] {title}")
