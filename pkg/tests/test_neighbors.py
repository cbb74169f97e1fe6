import numpy as np
import pytest

from fusc.neighbors import KTooLarge, NeighborIndex, UnlabeledSample, mine_neighbors, neighbor_label_agreement
from fusc.ssl import EmbeddingMatrix
from tests.conftest import make_manifest
from tests.oracles import knn_oracle


def normalized(rows):
    arr = np.asarray(rows, dtype=np.float64)
    arr = arr / np.linalg.norm(arr, axis=1, keepdims=True)
    return arr.astype(np.float32)


def embedding(ids, rows):
    return EmbeddingMatrix(ids=list(ids), vectors=normalized(rows), normalized=True)


class TestMineNeighbors:
    def test_nearest_by_cosine(self):
        emb = embedding(["e1", "e2", "e3"], [[1, 0], [0.9, 0.1], [0, 1]])
        index = mine_neighbors(emb, k=1)
        assert index.neighbors_of("e1") == ("e2",)

    def test_k_equals_n_minus_one(self):
        emb = embedding(["a", "b", "c", "d"], np.eye(4) + 0.1)
        index = mine_neighbors(emb, k=3)
        for own, row in zip(index.ids, index.neighbor_ids):
            assert set(row) == set(index.ids) - {own}

    def test_duplicates_are_mutual_neighbors(self):
        emb = embedding(["a", "b", "c"], [[1, 0], [1, 0], [0, 1]])
        index = mine_neighbors(emb, k=1)
        assert index.neighbors_of("a") == ("b",)
        assert index.neighbors_of("b") == ("a",)

    def test_k_too_large(self):
        emb = embedding(["a", "b"], [[1, 0], [0, 1]])
        with pytest.raises(KTooLarge):
            mine_neighbors(emb, k=2)
        with pytest.raises(KTooLarge):
            mine_neighbors(emb, k=0)

    def test_requires_normalized(self):
        raw = EmbeddingMatrix(ids=["a", "b"], vectors=np.ones((2, 3)), normalized=False)
        with pytest.raises(Exception):
            mine_neighbors(raw, k=1)

    def test_matches_oracle_small_blocks(self, rng):
        vectors = normalized(rng.normal(size=(67, 8)))
        ids = [f"s{i:03d}" for i in range(67)]
        emb = EmbeddingMatrix(ids=ids, vectors=vectors, normalized=True)
        expected = knn_oracle(ids, vectors.astype(np.float32), k=5)
        for block in (7, 16, 1024):
            index = mine_neighbors(emb, k=5, block_size=block)
            assert index.neighbor_ids == expected

    def test_permutation_gives_same_neighbor_sets(self, rng):
        vectors = normalized(rng.normal(size=(40, 6)))
        ids = [f"s{i:02d}" for i in range(40)]
        emb = EmbeddingMatrix(ids=ids, vectors=vectors, normalized=True)
        base = dict(zip(emb.ids, mine_neighbors(emb, k=4).neighbor_ids))

        perm = rng.permutation(40)
        shuffled = EmbeddingMatrix(
            ids=[ids[i] for i in perm], vectors=vectors[perm], normalized=True
        )
        other = dict(zip(shuffled.ids, mine_neighbors(shuffled, k=4).neighbor_ids))
        assert base == other

    def test_self_exclusion_and_distinctness(self, rng):
        vectors = normalized(rng.normal(size=(30, 5)))
        ids = [f"s{i}" for i in range(30)]
        index = mine_neighbors(EmbeddingMatrix(ids, vectors, True), k=7)
        for own, row in zip(index.ids, index.neighbor_ids):
            assert own not in row
            assert len(set(row)) == 7

    def test_round_trip(self, tmp_path, rng):
        vectors = normalized(rng.normal(size=(12, 4)))
        index = mine_neighbors(EmbeddingMatrix([f"i{k}" for k in range(12)], vectors, True), k=3)
        index.save(tmp_path / "nn")
        back = NeighborIndex.load(tmp_path / "nn")
        assert back.ids == index.ids
        assert back.neighbor_ids == index.neighbor_ids
        assert back.k == index.k


class TestNeighborLabelAgreement:
    def test_all_same_label(self):
        m = make_manifest({"p1": ["Brain"] * 4})
        index = NeighborIndex(
            ids=m.ids, neighbor_ids=[(m.ids[(i + 1) % 4],) for i in range(4)], k=1
        )
        assert neighbor_label_agreement(index, m) == 1.0

    def test_no_shared_labels(self):
        m = make_manifest({"p1": ["Brain", "Femur"]})
        index = NeighborIndex(ids=m.ids, neighbor_ids=[(m.ids[1],), (m.ids[0],)], k=1)
        assert neighbor_label_agreement(index, m) == 0.0

    def test_pairwise_count(self):
        m = make_manifest({"p1": ["Brain", "Brain", "Femur", "Femur"]})
        ids = m.ids
        index = NeighborIndex(
            ids=ids, neighbor_ids=[(ids[1],), (ids[0],), (ids[3],), (ids[2],)], k=1
        )
        assert neighbor_label_agreement(index, m) == 1.0

    def test_unlabeled_rejected(self):
        m = make_manifest({"p1": ["Brain", None]})
        index = NeighborIndex(ids=m.ids, neighbor_ids=[(m.ids[1],), (m.ids[0],)], k=1)
        with pytest.raises(UnlabeledSample):
            neighbor_label_agreement(index, m)
