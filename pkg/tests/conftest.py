import numpy as np
import pytest

from aindnet.data import SyntheticNoiseDataset, make_pairs, synthetic_image_set
from aindnet.model import ModelConfig
from aindnet.noise import awgn_domain

# small enough that a few optimisation steps take well under a second
TINY = ModelConfig(base_channels=4, num_scales=2, blocks_per_scale=1, estimator_channels=4, ain_hidden=4)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def images():
    return synthetic_image_set(6, 32, seed=0)


@pytest.fixture(scope="session")
def sn_dataset(images):
    return SyntheticNoiseDataset(images, awgn_domain(25 / 255))


@pytest.fixture(scope="session")
def rn_pairs(images):
    return make_pairs(images, awgn_domain(25 / 255), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else "FAIL"
    if report.skipped:
        status = "SKIP"
    if number not in _CRITERIA or status != "PASS":
        _CRITERIA[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
