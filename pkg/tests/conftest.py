import numpy as np
import pytest

from facevad.dataset import IMAGE_HEADER, LABEL_HEADER


def image_row(pixels, usage="Training", emotion=0):
    return f"{emotion},{' '.join(str(int(p)) for p in np.asarray(pixels).reshape(-1))},{usage}"


def label_row(name, usage="Training", **votes):
    vals = [votes.get(c, 0) for c in LABEL_HEADER[2:]]
    return ",".join([usage, name, *(str(v) for v in vals)])


@pytest.fixture
def write_images(tmp_path):
    def _write(rows, name="images.csv"):
        p = tmp_path / name
        p.write_text("\n".join([",".join(IMAGE_HEADER), *rows]) + "\n", encoding="utf-8")
        return p

    return _write


@pytest.fixture
def write_labels(tmp_path):
    def _write(rows, name="labels.csv", header=LABEL_HEADER):
        p = tmp_path / name
        p.write_text("\n".join([",".join(header), *rows]) + "\n", encoding="utf-8")
        return p

    return _write


# ---- acceptance summary: one line per criterion, derived from test outcomes

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1][len("test_criterion_"):]
    if report.when == "call" or (report.when == "setup" and report.skipped):
        if report.skipped:
            outcome = "SKIP"
        else:
            outcome = "PASS" if report.passed else "FAIL"
        detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        _CRITERIA[name] = (outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[0])):
        outcome, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{outcome:4s} criterion {name}" + (f"  [{detail}]" if detail else ""))
