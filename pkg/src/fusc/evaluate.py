"""Clustering quality metrics: purity, NMI, per-cluster tables, superclass merging."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence, TYPE_CHECKING

import numpy as np

from fusc.data import SUPERCLASS_MEMBERS, UNLABELED, DatasetManifest

if TYPE_CHECKING:
    from fusc.clustering import SoftAssignment


class EvaluationError(Exception):
    pass


class NoLabeledSamples(EvaluationError):
    pass


class UnmappedLabel(EvaluationError):
    pass


@dataclass(frozen=True)
class ContingencyTable:
    """Integer cluster-by-label co-occurrence counts."""

    counts: np.ndarray  # C x L, int64
    labels: tuple[str, ...]  # column names, length L
    n_unlabeled: int = 0

    @property
    def cluster_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def label_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def contingency(assignment: "SoftAssignment", manifest: DatasetManifest) -> ContingencyTable:
    """Count (cluster, label) co-occurrences over the labeled ids of an assignment.

    Unlabeled ids are excluded from the counts and reported via n_unlabeled.
    """
    labels = tuple(manifest.label_vocabulary)
    label_pos = {v: i for i, v in enumerate(labels)}
    n_clusters = assignment.n_clusters
    counts = np.zeros((n_clusters, len(labels)), dtype=np.int64)
    n_unlabeled = 0
    for image_id, cluster in zip(assignment.ids, assignment.hard_labels):
        label = manifest.by_id(image_id).pseudo_label
        if label == UNLABELED:
            n_unlabeled += 1
            continue
        counts[int(cluster), label_pos[label]] += 1
    if counts.sum() == 0:
        raise NoLabeledSamples("no labeled samples to evaluate")
    return ContingencyTable(counts=counts, labels=labels, n_unlabeled=n_unlabeled)


def table_from_arrays(
    clusters: Sequence[int], labels: Sequence[str], label_order: Sequence[str] | None = None
) -> ContingencyTable:
    """Build a ContingencyTable directly from parallel cluster/label arrays."""
    if len(clusters) != len(labels):
        raise EvaluationError("clusters and labels must be the same length")
    if len(clusters) == 0:
        raise NoLabeledSamples("empty input")
    names = tuple(label_order) if label_order is not None else tuple(sorted(set(labels)))
    pos = {v: i for i, v in enumerate(names)}
    counts = np.zeros((int(max(clusters)) + 1, len(names)), dtype=np.int64)
    for c, l in zip(clusters, labels):
        counts[int(c), pos[l]] += 1
    return ContingencyTable(counts=counts, labels=names)


def cluster_purity(table: ContingencyTable) -> float:
    """Fraction of samples that carry their cluster's majority label."""
    return float(table.counts.max(axis=1).sum() / table.n)


def _entropy(freqs: np.ndarray) -> float:
    p = freqs[freqs > 0]
    return float(-(p * np.log(p)).sum())


def nmi(table: ContingencyTable) -> float:
    """Mutual information of the two partitions over the mean of their entropies.

    Degenerate partitions: both entropies zero -> 1.0 (both trivial, hence
    identical); exactly one zero -> 0.0.
    """
    n = table.n
    joint = table.counts / n
    pc = table.cluster_sizes / n
    pl = table.label_sizes / n
    h_c = _entropy(pc)
    h_l = _entropy(pl)
    if h_c == 0.0 and h_l == 0.0:
        return 1.0
    if h_c == 0.0 or h_l == 0.0:
        return 0.0
    outer = np.outer(pc, pl)
    mask = joint > 0
    mi = float((joint[mask] * np.log(joint[mask] / outer[mask])).sum())
    return 2.0 * mi / (h_c + h_l)


@dataclass(frozen=True)
class ClusterTopRow:
    cluster_id: int
    size: int
    top: tuple[tuple[str, float], ...]  # (label, fraction) descending, length 3


def per_cluster_report(table: ContingencyTable, top_k: int = 3) -> list[ClusterTopRow]:
    """Top-k label fractions for each nonempty cluster, ties by label order."""
    rows: list[ClusterTopRow] = []
    for c in range(table.counts.shape[0]):
        size = int(table.counts[c].sum())
        if size == 0:
            continue
        fractions = table.counts[c] / size
        order = np.lexsort((np.arange(len(table.labels)), -fractions))
        top = tuple((table.labels[j], float(fractions[j])) for j in order[:top_k])
        rows.append(ClusterTopRow(cluster_id=c, size=size, top=top))
    return rows


def filled_clusters(assignment: "SoftAssignment") -> int:
    """Number of clusters with at least one assigned sample."""
    return int(len(np.unique(assignment.hard_labels)))


def merge_table(
    table: ContingencyTable, superclasses: Mapping[str, Sequence[str]] = SUPERCLASS_MEMBERS
) -> ContingencyTable:
    """Collapse label columns into their superclasses (additive)."""
    owner: dict[str, str] = {}
    for name, members in superclasses.items():
        for m in members:
            owner[m] = name
    unmapped = [l for l in table.labels if l not in owner]
    if unmapped:
        raise UnmappedLabel(f"labels {unmapped} have no superclass")
    names = tuple(superclasses.keys())
    pos = {v: i for i, v in enumerate(names)}
    merged = np.zeros((table.counts.shape[0], len(names)), dtype=np.int64)
    for j, label in enumerate(table.labels):
        merged[:, pos[owner[label]]] += table.counts[:, j]
    return ContingencyTable(counts=merged, labels=names, n_unlabeled=table.n_unlabeled)


def merged_metrics(
    table: ContingencyTable, superclasses: Mapping[str, Sequence[str]] = SUPERCLASS_MEMBERS
) -> tuple[float, float]:
    """(cluster purity, NMI) after collapsing labels into superclasses."""
    merged = merge_table(table, superclasses)
    return cluster_purity(merged), nmi(merged)


@dataclass
class EvaluationReport:
    cp: float
    nmi: float
    filled_clusters: int
    n_evaluated: int
    n_unlabeled: int
    per_cluster: list[ClusterTopRow]
    eval_split: str = "test"
    merged_cp: float | None = None
    merged_nmi: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "eval_split": self.eval_split,
            "cp": self.cp,
            "nmi": self.nmi,
            "filled_clusters": self.filled_clusters,
            "n_evaluated": self.n_evaluated,
            "n_unlabeled": self.n_unlabeled,
            "merged_cp": self.merged_cp,
            "merged_nmi": self.merged_nmi,
            "per_cluster": [
                {
                    "cluster_id": r.cluster_id,
                    "size": r.size,
                    "top": [[label, frac] for label, frac in r.top],
                }
                for r in self.per_cluster
            ],
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_text(self) -> str:
        lines = [
            f"eval split: {self.eval_split}   samples: {self.n_evaluated}"
            f"   (unlabeled excluded: {self.n_unlabeled})",
            f"CP  = {self.cp:.4f}",
            f"NMI = {self.nmi:.4f}",
            f"filled clusters = {self.filled_clusters}",
        ]
        if self.merged_cp is not None:
            lines.append(f"merged CP  = {self.merged_cp:.4f}")
            lines.append(f"merged NMI = {self.merged_nmi:.4f}")
        lines.append("")
        lines.append(f"{'cluster':>8} {'size':>7}  top classes")
        for r in self.per_cluster:
            tops = "  ".join(f"{label} {100 * frac:.0f}%" for label, frac in r.top)
            lines.append(f"{r.cluster_id:>8} {r.size:>7}  {tops}")
        return "\n".join(lines) + "\n"


def build_report(
    assignment: "SoftAssignment",
    manifest: DatasetManifest,
    merge: bool = False,
    eval_split: str = "test",
) -> EvaluationReport:
    """Assemble the full evaluation report for one assignment."""
    table = contingency(assignment, manifest)
    report = EvaluationReport(
        cp=cluster_purity(table),
        nmi=nmi(table),
        filled_clusters=filled_clusters(assignment),
        n_evaluated=table.n,
        n_unlabeled=table.n_unlabeled,
        per_cluster=per_cluster_report(table),
        eval_split=eval_split,
    )
    if merge:
        report.merged_cp, report.merged_nmi = merged_metrics(table)
    return report
