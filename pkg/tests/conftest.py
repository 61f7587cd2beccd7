import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fairgen.groups import ALIGNED, CONFLICTING, DatasetItem, GroupedDataset, GroupKey
from fairgen.toy import ShapeWorldConfig, generate_shapeworld

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
logging.getLogger("fairgen").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def small_cfg():
    return ShapeWorldConfig(n_train=400, n_val=40, n_test=80, bias_ratio=0.9, seed=3)


@pytest.fixture(scope="session")
def small_toy(small_cfg):
    return generate_shapeworld(small_cfg)


def make_pool(counts, alignment, img_shape=(2, 2, 3), seed=0):
    """Dataset with ``counts[g]`` random images per group ``g``."""
    rng = np.random.default_rng(seed)
    items = []
    for g, n in counts.items():
        g = GroupKey(*g)
        for i in range(n):
            items.append(DatasetItem(f"{g.class_label}-{g.bias_label}-{i:05d}",
                                     rng.random(img_shape).astype(np.float32), g.class_label, g.bias_label, "train"))
    classes = sorted({GroupKey(*g).class_label for g in counts})
    biases = sorted({GroupKey(*g).bias_label for g in counts})
    return GroupedDataset(items, classes, biases, {GroupKey(*g): v for g, v in alignment.items()})


UTK_ALIGNMENT = {
    ("male", "child"): ALIGNED, ("male", "adult"): CONFLICTING,
    ("female", "adult"): ALIGNED, ("female", "child"): CONFLICTING,
}
UTK_COUNTS = {("male", "adult"): 103, ("male", "child"): 934, ("female", "adult"): 5730, ("female", "child"): 636}


# -- acceptance reporting: one PASS/FAIL line per criterion-marked test ------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, name = mark.args
    # setup time (shared fixtures) counts toward the criterion; any failing phase fails it
    status, _, secs = _CRITERIA.get(number, ("PASS", name, 0.0))
    if report.failed:
        status = "FAIL"
    _CRITERIA[number] = (status, name, secs + report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, name, secs = _CRITERIA[number]
        terminalreporter.write_line(f"{status} criterion {number:>2}: {name} ({secs:.1f} s)")
