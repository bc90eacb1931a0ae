import time

import numpy as np
import pytest

from idguide.cli import main

ACCEPTANCE = []


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The shipped toy task trained once through the command line with default config."""
    root = tmp_path_factory.mktemp("toy")
    start = time.perf_counter()
    assert main(["generate", "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "train")]) == 0
    return {"root": root, "data": root / "data", "train": root / "train",
            "model": root / "train" / "model.sanm", "seconds": time.perf_counter() - start}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("measured", "")
    ACCEPTANCE.append((number, title, report.passed, detail, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail, seconds in sorted(ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}: {detail} ({seconds:.1f} s)")
