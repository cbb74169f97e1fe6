import numpy as np
import pytest

from fusc.data import UNLABELED, VIEW_LABELS, DatasetManifest, ImageRecord


def pytest_runtest_logreport(report):
    """One pass/fail line per acceptance criterion."""
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1].replace("test_", "").replace("_", "-")
    if report.when == "call":
        outcome = "PASS" if report.passed else "FAIL"
        print(f"\nACCEPTANCE {name}: {outcome}")
    elif report.when == "setup" and report.failed:
        print(f"\nACCEPTANCE {name}: FAIL (setup)")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_manifest(labels_by_patient, root=None, vocabulary=VIEW_LABELS):
    """Build an in-memory manifest: {patient_id: [label, ...]}."""
    records = []
    counter = 0
    for pid in sorted(labels_by_patient):
        for label in labels_by_patient[pid]:
            records.append(
                ImageRecord(
                    image_id=f"img{counter:05d}",
                    patient_id=pid,
                    pixel_path=f"images/img{counter:05d}.png",
                    pseudo_label=label if label is not None else UNLABELED,
                    machine="synth",
                )
            )
            counter += 1
    return DatasetManifest(records=records, label_vocabulary=tuple(vocabulary), root=root)


@pytest.fixture
def small_manifest():
    return make_manifest(
        {
            "p1": ["Brain", "Brain", "Femur"],
            "p2": ["Spine", "Abdomen"],
            "p3": ["Brain", "RVOT", "RVOT"],
            "p4": ["Femur"],
        }
    )
