import numpy as np
import pytest

from dermxkit.ingest import Evaluation, ImageRecord
from dermxkit.synthetic import planted_blob_dataset


def make_record(image_id, gold, evaluations, shape=(4, 4), source="DermNetNZ", patient_id=None, pixels=None):
    if pixels is None:
        pixels = np.zeros((*shape, 3), dtype=np.uint8)
    return ImageRecord(image_id, source, gold, tuple(shape), tuple(evaluations), pixels, patient_id)


def ev(rater, diagnosis, masks=None, low_quality=False):
    return Evaluation(rater, diagnosis, low_quality, dict(masks or {}))


@pytest.fixture(scope="session")
def blobs():
    return planted_blob_dataset(16, size=32, n_raters=4, seed=3)


@pytest.fixture(scope="session")
def blob_labels(blobs):
    from dermxkit.fusion import build_label_set

    return build_label_set(blobs.records, blobs.characteristics)


# -- acceptance reporting: one PASS/FAIL line per criterion ------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        note = ""
        if report.skipped and isinstance(report.longrepr, tuple):
            note = f" ({report.longrepr[2].removeprefix('Skipped: ')})"
        _CRITERIA[number] = f"{status} criterion {number:>2}: {title}{note}"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
