import os

import pytest

from pelletflow import kernels

DATA = os.path.join(os.path.dirname(__file__), "..", "src", "pelletflow", "data")


def data_path(name):
    return os.path.abspath(os.path.join(DATA, name))


@pytest.fixture(params=sorted(kernels.backends()))
def backend(request):
    return kernels.backends()[request.param]


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
