import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")

from wavestack.em import SimGeometry  # noqa: E402

LAM = SimGeometry().wavelength


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_geometry():
    return SimGeometry(num_layers=3, nx=3, ny=3, thickness=4 * LAM,
                       num_input_ports=2, num_output_ports=2)


# -- acceptance reporting ------------------------------------------------------------
# Tests marked ``criterion(n)`` get one PASS/FAIL line in the terminal summary; a
# test can attach a short detail with ``record_property("detail", text)``.

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    if report.failed and call.excinfo is not None:
        msg = (str(call.excinfo.value).splitlines() or [call.excinfo.typename])[0]
        detail = f"{detail} | {msg}" if detail else msg
    _CRITERIA[marker.args[0]] = ("PASS" if report.passed else "FAIL", item.name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, name, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {name}  {detail}".rstrip())
