import re

import numpy as np
import pytest

from inpforge import tensor as T
from inpforge.config import DataConfig, ModelConfig


def tiny_config(**changes) -> ModelConfig:
    """Small model (16 px images, 16 tokens, C=16) for fast end-to-end checks."""
    base = dict(image_size=16, patch_size=4, embed_dim=16, heads=2, encoder_depth=4, decoder_depth=2,
                num_inps=3, encoder_group_ranges=((0, 1), (2, 3)), decoder_group_ranges=((0, 0), (1, 1)),
                epochs=2, batch_size=4, smoothing_sigma=1.0)
    base.update(changes)
    return ModelConfig(**base)


def tiny_data(**changes) -> DataConfig:
    base = dict(image_size=16, train_per_class=6, test_normal_per_class=3, test_anomalous_per_class=3)
    base.update(changes)
    return DataConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.precision("check-64bit"):
        yield


# -- acceptance verdicts ---------------------------------------------------------
# Tests named test_criterion_<n>_* report one PASS/FAIL line each in the
# terminal summary, with any ("detail", text) properties they recorded.

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_verdicts: dict[int, tuple[str, list[str]]] = {}


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    n = int(match.group(1))
    details = [str(v) for k, v in report.user_properties if k == "detail"]
    if report.when == "call" or report.failed:
        status = "PASS" if report.passed else "FAIL"
        if report.failed and report.when != "call":
            details.append(f"error during {report.when}")
        if _verdicts.get(n, ("PASS",))[0] != "FAIL":
            _verdicts[n] = (status, details)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        status, details = _verdicts[n]
        terminalreporter.write_line(f"criterion {n}: {status}" + (f"  ({'; '.join(details)})" if details else ""))
