import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusc.data import (
    SUPERCLASS_MEMBERS,
    UNLABELED,
    VIEW_LABELS,
    DatasetManifest,
    DuplicateId,
    InfeasibleSplit,
    MalformedManifest,
    MissingPixels,
    UnknownLabel,
    load_manifest,
    map_to_superclass,
    save_manifest,
    split_by_patient,
)
from tests.conftest import make_manifest


def write_rows(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def row(image_id, patient_id="p1", label="Brain", pixel_path=None):
    return {
        "image_id": image_id,
        "patient_id": patient_id,
        "pixel_path": pixel_path or f"{image_id}.png",
        "pseudo_label": label,
        "machine": "GE",
    }


class TestLoadManifest:
    def test_well_formed_three_records(self, tmp_path):
        rows = [row("img1"), row("img2", label="Femur"), row("img3", label="")]
        write_rows(tmp_path / "m.jsonl", rows)
        for r in rows:
            (tmp_path / r["pixel_path"]).write_bytes(b"x")
        m = load_manifest(tmp_path / "m.jsonl")
        assert len(m) == 3
        assert m.records[2].pseudo_label == UNLABELED

    def test_duplicate_image_id(self, tmp_path):
        write_rows(tmp_path / "m.jsonl", [row("img7"), row("img7", patient_id="p2")])
        with pytest.raises(DuplicateId):
            load_manifest(tmp_path / "m.jsonl", require_pixels=False)

    def test_unknown_label_rejected(self, tmp_path):
        write_rows(tmp_path / "m.jsonl", [row("img1", label="Placenta")])
        with pytest.raises(UnknownLabel):
            load_manifest(tmp_path / "m.jsonl", require_pixels=False)

    def test_missing_field_is_malformed(self, tmp_path):
        bad = row("img1")
        del bad["machine"]
        write_rows(tmp_path / "m.jsonl", [bad])
        with pytest.raises(MalformedManifest):
            load_manifest(tmp_path / "m.jsonl", require_pixels=False)

    def test_invalid_json_is_malformed(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("{not json\n")
        with pytest.raises(MalformedManifest):
            load_manifest(tmp_path / "m.jsonl", require_pixels=False)

    def test_missing_pixels_detected(self, tmp_path):
        write_rows(tmp_path / "m.jsonl", [row("img1")])
        with pytest.raises(MissingPixels):
            load_manifest(tmp_path / "m.jsonl")

    def test_round_trip_identity(self, tmp_path):
        m = make_manifest({"p1": ["Brain", "Femur"], "p2": [None, "Spine"]})
        save_manifest(m, tmp_path / "m.jsonl")
        back = load_manifest(tmp_path / "m.jsonl", require_pixels=False)
        assert back.records == m.records


class TestSuperclasses:
    def test_partition_of_vocabulary(self):
        all_members = [v for members in SUPERCLASS_MEMBERS.values() for v in members]
        assert sorted(all_members) == sorted(VIEW_LABELS)
        assert sorted(len(m) for m in SUPERCLASS_MEMBERS.values()) == [3, 4, 4, 4]

    @pytest.mark.parametrize(
        "label,expected",
        [("RVOT", "Heart"), ("Femur", "Bone"), ("Brain", "Head"), ("CordInsertion", "Abdomen")],
    )
    def test_mapping(self, label, expected):
        assert map_to_superclass(label).name == expected

    def test_every_view_maps(self):
        for v in VIEW_LABELS:
            sc = map_to_superclass(v)
            assert v in sc.members

    def test_unlabeled_rejected(self):
        with pytest.raises(UnknownLabel):
            map_to_superclass(UNLABELED)


class TestSplitByPatient:
    def test_ten_equal_patients(self):
        m = make_manifest({f"p{i}": ["Brain"] * 10 for i in range(10)})
        split = split_by_patient(m, train_fraction=0.8, seed=1)
        assert len(split.train_ids) == 80
        assert len(split.test_ids) == 20
        train_pat = {m.by_id(i).patient_id for i in split.train_ids}
        test_pat = {m.by_id(i).patient_id for i in split.test_ids}
        assert not train_pat & test_pat
        assert len(train_pat) == 8 and len(test_pat) == 2

    def test_deterministic_for_seed(self):
        m = make_manifest({f"p{i}": ["Brain", "Spine"] for i in range(7)})
        a = split_by_patient(m, 0.8, seed=1)
        b = split_by_patient(m, 0.8, seed=1)
        assert a == b

    def test_single_patient_infeasible(self):
        m = make_manifest({"p1": ["Brain", "Spine", "Femur"]})
        with pytest.raises(InfeasibleSplit):
            split_by_patient(m, 0.8, seed=0)

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.5, 1.5])
    def test_degenerate_fraction_infeasible(self, fraction):
        m = make_manifest({"p1": ["Brain"], "p2": ["Spine"]})
        with pytest.raises(InfeasibleSplit):
            split_by_patient(m, fraction, seed=0)

    def test_record_order_does_not_change_split(self):
        m = make_manifest({f"p{i}": ["Brain", "Femur", "Spine"] for i in range(6)})
        shuffled = DatasetManifest(
            records=list(reversed(m.records)), label_vocabulary=m.label_vocabulary
        )
        assert split_by_patient(m, 0.7, seed=3) == split_by_patient(shuffled, 0.7, seed=3)


@st.composite
def random_corpus(draw):
    n_patients = draw(st.integers(min_value=2, max_value=12))
    corpus = {}
    for i in range(n_patients):
        n_images = draw(st.integers(min_value=1, max_value=8))
        labels = draw(
            st.lists(
                st.sampled_from(list(VIEW_LABELS) + [None]),
                min_size=n_images,
                max_size=n_images,
            )
        )
        corpus[f"p{i}"] = labels
    return corpus


@settings(max_examples=100, deadline=None)
@given(corpus=random_corpus(), seed=st.integers(min_value=0, max_value=2**31), fraction=st.floats(0.1, 0.9))
def test_split_partitions_without_leakage(corpus, seed, fraction):
    m = make_manifest(corpus)
    split = split_by_patient(m, fraction, seed)
    all_ids = set(m.ids)
    assert split.train_ids | split.test_ids == all_ids
    assert not split.train_ids & split.test_ids
    train_pat = {m.by_id(i).patient_id for i in split.train_ids}
    test_pat = {m.by_id(i).patient_id for i in split.test_ids}
    assert not train_pat & test_pat
    assert train_pat and test_pat
