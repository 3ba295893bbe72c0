import warnings

import numpy as np
import pytest
import torch
from PIL import Image

from earface.synthetic import make_synthetic_dataset

torch.set_num_threads(1)

_acceptance_results = {}


def save_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
    return path


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """40 synthetic 16x16 pairs, split 0.6/0.2/0.2."""
    root = tmp_path_factory.mktemp("toy")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return make_synthetic_dataset(root, 40, seed=3, size=16, ratios=(0.6, 0.2, 0.2))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    key = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _acceptance_results[key] = (marker.args[1], rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_acceptance_results, key=lambda k: (len(k), k)):
        label, outcome = _acceptance_results[key]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {key}: {label}")
