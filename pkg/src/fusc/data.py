"""Corpus schema: view vocabulary, superclasses, manifests, patient-level splits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Canonical second-trimester view vocabulary (15 views).
VIEW_LABELS: tuple[str, ...] = (
    "Brain",
    "Profile",
    "Orbit",
    "LipsNose",
    "RVOT",
    "LVOT",
    "FourChamber",
    "ThreeVesselView",
    "Abdomen",
    "Kidney",
    "Diaphragm",
    "CordInsertion",
    "Spine",
    "Feet",
    "Femur",
)

UNLABELED = "Unlabeled"

# The 4 anatomical superclasses partition the 15 views (4/4/4/3).
SUPERCLASS_MEMBERS: dict[str, tuple[str, ...]] = {
    "Heart": ("RVOT", "LVOT", "FourChamber", "ThreeVesselView"),
    "Head": ("Brain", "Profile", "Orbit", "LipsNose"),
    "Abdomen": ("Abdomen", "Kidney", "Diaphragm", "CordInsertion"),
    "Bone": ("Spine", "Feet", "Femur"),
}

MANIFEST_FIELDS = ("image_id", "patient_id", "pixel_path", "pseudo_label", "machine")


class ManifestError(Exception):
    """Base error for manifest loading/validation failures."""


class MalformedManifest(ManifestError):
    """A manifest row is missing fields or is not valid JSON."""


class DuplicateId(ManifestError):
    """Two manifest rows share an image_id."""


class UnknownLabel(ManifestError):
    """A pseudo_label is neither in the vocabulary nor Unlabeled."""


class MissingPixels(ManifestError):
    """A referenced pixel_path does not exist on disk."""


class InfeasibleSplit(ManifestError):
    """A patient-level split cannot be constructed."""


@dataclass(frozen=True)
class SuperClass:
    name: str
    members: tuple[str, ...]


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    patient_id: str
    pixel_path: str
    pseudo_label: str = UNLABELED
    machine: str = ""
    width: int | None = None
    height: int | None = None


@dataclass
class DatasetManifest:
    """An image corpus: records plus the label vocabulary they are drawn from."""

    records: list[ImageRecord]
    label_vocabulary: tuple[str, ...] = VIEW_LABELS
    provenance: dict = field(default_factory=dict)
    root: Path | None = None  # base dir for relative pixel_paths

    def __post_init__(self) -> None:
        if not self.records:
            raise MalformedManifest("manifest must contain at least one record")
        seen: set[str] = set()
        vocab = set(self.label_vocabulary)
        for rec in self.records:
            if rec.image_id in seen:
                raise DuplicateId(f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            if rec.pseudo_label != UNLABELED and rec.pseudo_label not in vocab:
                raise UnknownLabel(
                    f"label {rec.pseudo_label!r} for {rec.image_id!r} not in vocabulary"
                )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def by_id(self, image_id: str) -> ImageRecord:
        try:
            return self._index[image_id]
        except AttributeError:
            self._index = {r.image_id: r for r in self.records}
            return self._index[image_id]

    def resolve_pixel_path(self, record: ImageRecord) -> Path:
        p = Path(record.pixel_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def patients(self) -> dict[str, list[ImageRecord]]:
        groups: dict[str, list[ImageRecord]] = {}
        for rec in self.records:
            groups.setdefault(rec.patient_id, []).append(rec)
        return groups

    def subset(self, image_ids: Iterable[str]) -> "DatasetManifest":
        wanted = set(image_ids)
        kept = [r for r in self.records if r.image_id in wanted]
        return DatasetManifest(
            records=kept,
            label_vocabulary=self.label_vocabulary,
            provenance=dict(self.provenance),
            root=self.root,
        )

    def labeled_records(self) -> list[ImageRecord]:
        return [r for r in self.records if r.pseudo_label != UNLABELED]


@dataclass(frozen=True)
class Split:
    train_ids: frozenset[str]
    test_ids: frozenset[str]
    seed: int


def load_manifest(
    path: str | Path,
    vocabulary: Sequence[str] = VIEW_LABELS,
    require_pixels: bool = True,
) -> DatasetManifest:
    """Load and validate a line-delimited JSON manifest.

    Each line is an object with fields image_id, patient_id, pixel_path,
    pseudo_label, machine (width/height optional). Relative pixel paths are
    resolved against the manifest's directory.
    """
    path = Path(path)
    records: list[ImageRecord] = []
    ids_seen: set[str] = set()
    vocab = set(vocabulary)
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedManifest(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            if not isinstance(row, dict):
                raise MalformedManifest(f"{path}:{line_no}: row must be an object")
            missing = [f for f in MANIFEST_FIELDS if f not in row]
            if missing:
                raise MalformedManifest(f"{path}:{line_no}: missing fields {missing}")
            image_id = str(row["image_id"])
            if image_id in ids_seen:
                raise DuplicateId(f"{path}:{line_no}: duplicate image_id {image_id!r}")
            ids_seen.add(image_id)
            label = str(row["pseudo_label"]) if row["pseudo_label"] else UNLABELED
            if label != UNLABELED and label not in vocab:
                raise UnknownLabel(f"{path}:{line_no}: unknown label {label!r}")
            records.append(
                ImageRecord(
                    image_id=image_id,
                    patient_id=str(row["patient_id"]),
                    pixel_path=str(row["pixel_path"]),
                    pseudo_label=label,
                    machine=str(row["machine"]),
                    width=int(row["width"]) if row.get("width") is not None else None,
                    height=int(row["height"]) if row.get("height") is not None else None,
                )
            )
    manifest = DatasetManifest(records=records, label_vocabulary=tuple(vocabulary), root=path.parent)
    if require_pixels:
        for rec in manifest.records:
            p = manifest.resolve_pixel_path(rec)
            if not p.exists():
                raise MissingPixels(f"pixel_path {p} for {rec.image_id!r} does not exist")
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write a manifest as line-delimited JSON. Inverse of load_manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in manifest.records:
            row = {
                "image_id": rec.image_id,
                "patient_id": rec.patient_id,
                "pixel_path": rec.pixel_path,
                "pseudo_label": rec.pseudo_label,
                "machine": rec.machine,
            }
            if rec.width is not None:
                row["width"] = rec.width
            if rec.height is not None:
                row["height"] = rec.height
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def split_by_patient(manifest: DatasetManifest, train_fraction: float, seed: int) -> Split:
    """Partition a manifest into patient-disjoint train/test id sets.

    Greedy assignment: patients are visited in a seeded random order (the
    candidate order is first canonicalized by patient_id so the result does
    not depend on record order) and each patient goes to the side that
    minimizes the summed per-view absolute deviation of the running train
    counts from ``train_fraction`` of the per-view totals. Both sides are
    guaranteed at least one patient.
    """
    if not (0.0 < train_fraction < 1.0):
        raise InfeasibleSplit(f"train_fraction must be in (0,1), got {train_fraction}")
    patients = manifest.patients()
    if len(patients) < 2:
        raise InfeasibleSplit("need at least 2 patients to split without leakage")

    views = list(manifest.label_vocabulary) + [UNLABELED]
    view_pos = {v: i for i, v in enumerate(views)}
    totals = np.zeros(len(views), dtype=np.float64)
    per_patient: dict[str, np.ndarray] = {}
    for pid in sorted(patients):
        counts = np.zeros(len(views), dtype=np.float64)
        for rec in patients[pid]:
            counts[view_pos[rec.pseudo_label]] += 1
        per_patient[pid] = counts
        totals += counts

    targets = train_fraction * totals
    target_images = train_fraction * totals.sum()

    rng = np.random.default_rng(seed)
    order = list(rng.permutation(sorted(patients)))

    train_counts = np.zeros(len(views), dtype=np.float64)
    train_patients: list[str] = []
    test_patients: list[str] = []
    for pid in order:
        counts = per_patient[pid]
        dev_add = np.abs(train_counts + counts - targets).sum()
        dev_skip = np.abs(train_counts - targets).sum()
        if dev_add < dev_skip or (dev_add == dev_skip and train_counts.sum() < target_images):
            train_patients.append(pid)
            train_counts += counts
        else:
            test_patients.append(pid)

    # Never leave a side empty: move the smallest patient from the full side.
    if not test_patients:
        mover = min(train_patients, key=lambda p: (per_patient[p].sum(), p))
        train_patients.remove(mover)
        test_patients.append(mover)
    elif not train_patients:
        mover = min(test_patients, key=lambda p: (per_patient[p].sum(), p))
        test_patients.remove(mover)
        train_patients.append(mover)

    train_set = set(train_patients)
    train_ids = frozenset(r.image_id for r in manifest.records if r.patient_id in train_set)
    test_ids = frozenset(r.image_id for r in manifest.records if r.patient_id not in train_set)
    return Split(train_ids=train_ids, test_ids=test_ids, seed=seed)


def map_to_superclass(label: str) -> SuperClass:
    """Return the unique superclass containing a canonical view label."""
    for name, members in SUPERCLASS_MEMBERS.items():
        if label in members:
            return SuperClass(name=name, members=members)
    raise UnknownLabel(f"{label!r} is not one of the {len(VIEW_LABELS)} canonical views")
