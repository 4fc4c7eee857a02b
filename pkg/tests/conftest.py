import numpy as np
import pytest
import torch

from vunet.checks import TINY_CONFIG as TINY
from vunet.checks import perturb_parameters as jitter
from vunet.model import VariationalUNet

__all__ = ["TINY", "jitter"]


@pytest.fixture
def tiny_model():
    return jitter(VariationalUNet(TINY, seed=1, dtype=torch.float64)).eval()


@pytest.fixture
def tiny_input():
    rng = np.random.default_rng(42)
    return torch.as_tensor(rng.random((2, TINY.in_channels, TINY.input_size, TINY.input_size)))


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE_DETAILS = {}   # criterion number -> detail string set by the test
_acceptance_outcomes = {}


def _criterion(nodeid: str):
    name = nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return None
    return int(name.split("_")[2])


def pytest_runtest_logreport(report):
    n = _criterion(report.nodeid)
    if n is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if _acceptance_outcomes.get(n) != "failed":
            _acceptance_outcomes[n] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance_outcomes):
        verdict = "PASS" if _acceptance_outcomes[n] == "passed" else "FAIL"
        detail = ACCEPTANCE_DETAILS.get(n, "")
        terminalreporter.write_line(f"CRITERION {n}: {verdict}  {detail}".rstrip())
