"""Exact K-nearest-neighbor mining over normalized embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fusc.data import UNLABELED, DatasetManifest
from fusc.ssl import EmbeddingMatrix


class NeighborError(Exception):
    pass


class KTooLarge(NeighborError):
    pass


class UnlabeledSample(NeighborError):
    pass


@dataclass
class NeighborIndex:
    """Per-sample list of the K most cosine-similar other samples."""

    ids: list[str]
    neighbor_ids: list[tuple[str, ...]]  # length N, each of length K
    k: int
    metric: str = "cosine"

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.neighbor_ids):
            raise ValueError("ids and neighbor_ids length mismatch")
        for own, row in zip(self.ids, self.neighbor_ids):
            if len(row) != self.k or len(set(row)) != self.k:
                raise ValueError(f"row for {own!r} must hold exactly {self.k} distinct ids")
            if own in row:
                raise ValueError(f"row for {own!r} contains itself")

    def neighbors_of(self, image_id: str) -> tuple[str, ...]:
        try:
            return self.neighbor_ids[self._pos[image_id]]
        except AttributeError:
            self._pos = {i: k for k, i in enumerate(self.ids)}
            return self.neighbor_ids[self._pos[image_id]]

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ids.txt").write_text("\n".join(self.ids) + "\n", encoding="utf-8")
        with (out_dir / "neighbors.tsv").open("w", encoding="utf-8") as fh:
            for row in self.neighbor_ids:
                fh.write("\t".join(row) + "\n")
        meta = {"format_version": 1, "kind": "fusc-neighbors", "k": self.k, "metric": self.metric}
        (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")
        return out_dir

    @classmethod
    def load(cls, out_dir: str | Path) -> "NeighborIndex":
        out_dir = Path(out_dir)
        meta = json.loads((out_dir / "meta.json").read_text(encoding="utf-8"))
        ids = (out_dir / "ids.txt").read_text(encoding="utf-8").splitlines()
        rows = [
            tuple(line.split("\t"))
            for line in (out_dir / "neighbors.tsv").read_text(encoding="utf-8").splitlines()
        ]
        return cls(ids=ids, neighbor_ids=rows, k=meta["k"], metric=meta["metric"])


def mine_neighbors(emb: EmbeddingMatrix, k: int, block_size: int = 1024) -> NeighborIndex:
    """Exact top-K by cosine similarity, computed in row blocks.

    Rows are ranked by descending similarity with ties broken by ascending
    image_id; the sample itself is excluded. Results are independent of input
    row order (up to the per-row neighbor sets).
    """
    if not emb.normalized:
        raise NeighborError("embeddings must be L2-normalized before mining")
    n = len(emb.ids)
    if not (1 <= k <= n - 1):
        raise KTooLarge(f"need 1 <= K <= N-1, got K={k} with N={n}")

    ids = np.array(emb.ids)
    # Rank of each row's id in ascending id order, for deterministic tie-breaks.
    id_rank = np.empty(n, dtype=np.int64)
    id_rank[np.argsort(ids, kind="stable")] = np.arange(n)

    vectors = emb.vectors
    neighbor_rows: list[tuple[str, ...]] = []
    for lo in range(0, n, block_size):
        block = vectors[lo : lo + block_size]
        sims = block @ vectors.T
        for local, i in enumerate(range(lo, min(lo + block_size, n))):
            row = sims[local].copy()
            row[i] = -np.inf
            order = np.lexsort((id_rank, -row))
            neighbor_rows.append(tuple(ids[order[:k]]))
    return NeighborIndex(ids=list(emb.ids), neighbor_ids=neighbor_rows, k=k)


def neighbor_label_agreement(index: NeighborIndex, manifest: DatasetManifest) -> float:
    """Fraction of (sample, neighbor) pairs that share a pseudo_label."""
    label_of: dict[str, str] = {}
    for image_id in index.ids:
        label = manifest.by_id(image_id).pseudo_label
        if label == UNLABELED:
            raise UnlabeledSample(f"{image_id!r} has no pseudo_label")
        label_of[image_id] = label
    agree = 0
    total = 0
    for image_id, row in zip(index.ids, index.neighbor_ids):
        for other in row:
            other_label = label_of.get(other)
            if other_label is None:
                other_label = manifest.by_id(other).pseudo_label
                if other_label == UNLABELED:
                    raise UnlabeledSample(f"{other!r} has no pseudo_label")
            agree += other_label == label_of[image_id]
            total += 1
    return agree / total
