"""Cluster-head training with the neighbor-consistency + entropy objective,
confidence-based self-labeling, and a Lloyd K-means baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from fusc.augment import AugmentationPolicy, sample_view, strong_policy, view_seed
from fusc.neighbors import NeighborIndex
from fusc.ssl import EncoderState, EmbeddingMatrix, embed


class ClusteringError(Exception):
    pass


class NotADistribution(ClusteringError):
    pass


class IndexEmbeddingMismatch(ClusteringError):
    pass


class DimensionMismatch(ClusteringError):
    pass


class NoConfidentSamples(ClusteringError):
    pass


class CGreaterThanN(ClusteringError):
    pass


@dataclass(frozen=True)
class ClusterHeadConfig:
    n_clusters: int
    entropy_weight: float = 5.0
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    log_clamp: float = 1e-8
    average_neighbors: bool = False  # ablation: mean instead of sum over neighbors
    neighbor_grad: bool = True  # gradients flow into neighbor probabilities
    finetune_encoder: bool = False
    # "kmeans" starts the head at seeded centroids of the training embeddings
    # (label-free); from a uniform random start the summed consistency term
    # dwarfs the entropy term and the head tends to collapse into few clusters.
    init: str = "kmeans"
    init_scale: float = 10.0  # logit sharpness of the centroid initialization
    # Among seeded centroid restarts, keep the one whose smallest cluster is
    # largest: a dead cluster at initialization stays dead under the loss.
    init_restarts: int = 8

    def __post_init__(self) -> None:
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        if self.entropy_weight < 0:
            raise ValueError("entropy_weight must be >= 0")
        if not (0.0 < self.log_clamp <= 1e-4):
            raise ValueError("log_clamp must be in (0, 1e-4]")
        if self.init not in ("kmeans", "random"):
            raise ValueError("init must be 'kmeans' or 'random'")


@dataclass
class SoftAssignment:
    """Row-stochastic cluster probabilities with derived hard labels/confidences."""

    ids: list[str]
    probs: np.ndarray  # N x C float32

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float32)
        if len(self.ids) != self.probs.shape[0]:
            raise ValueError("ids and probs row count mismatch")
        sums = self.probs.astype(np.float64).sum(axis=1)
        if len(self.ids) and not np.allclose(sums, 1.0, atol=1e-6):
            worst = float(np.abs(sums - 1.0).max())
            raise NotADistribution(f"rows must sum to 1 within 1e-6 (worst {worst:.2e})")
        # argmax resolves ties to the lowest cluster index
        self.hard_labels = self.probs.argmax(axis=1).astype(np.int64)
        self.confidence = self.probs.max(axis=1).astype(np.float32)

    @property
    def n_clusters(self) -> int:
        return int(self.probs.shape[1])

    def confidence_of(self, image_id: str) -> float:
        return float(self.confidence[self._position(image_id)])

    def cluster_of(self, image_id: str) -> int:
        return int(self.hard_labels[self._position(image_id)])

    def _position(self, image_id: str) -> int:
        try:
            return self._pos[image_id]
        except AttributeError:
            self._pos = {i: k for k, i in enumerate(self.ids)}
            return self._pos[image_id]

    def subset(self, ids: Sequence[str]) -> "SoftAssignment":
        rows = [self._position(i) for i in ids]
        return SoftAssignment(ids=list(ids), probs=self.probs[rows])

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ids.txt").write_text("\n".join(self.ids) + "\n", encoding="utf-8")
        self.probs.astype("<f4").tofile(out_dir / "probs.f32")
        with (out_dir / "assignments.tsv").open("w", encoding="utf-8") as fh:
            fh.write("image_id\tcluster\tconfidence\n")
            for image_id, cluster, conf in zip(self.ids, self.hard_labels, self.confidence):
                fh.write(f"{image_id}\t{int(cluster)}\t{float(conf):.6f}\n")
        meta = {
            "format_version": 1,
            "kind": "fusc-assignment",
            "n": len(self.ids),
            "c": self.n_clusters,
            "dtype": "float32-le",
        }
        (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")
        return out_dir

    @classmethod
    def load(cls, out_dir: str | Path) -> "SoftAssignment":
        out_dir = Path(out_dir)
        meta = json.loads((out_dir / "meta.json").read_text(encoding="utf-8"))
        ids = (out_dir / "ids.txt").read_text(encoding="utf-8").splitlines()
        probs = np.fromfile(out_dir / "probs.f32", dtype="<f4").reshape(meta["n"], meta["c"])
        return cls(ids=ids, probs=probs)


@dataclass
class ClusterHead:
    """Linear map from embedding space to cluster logits (softmax applied downstream)."""

    weight: np.ndarray  # C x d float32
    bias: np.ndarray  # C float32
    config: ClusterHeadConfig
    training_log: list = field(default_factory=list)
    finetuned_encoder: EncoderState | None = None  # set when config.finetune_encoder

    def to_torch(self) -> torch.nn.Linear:
        layer = torch.nn.Linear(self.weight.shape[1], self.weight.shape[0])
        with torch.no_grad():
            layer.weight.copy_(torch.from_numpy(self.weight))
            layer.bias.copy_(torch.from_numpy(self.bias))
        return layer

    @classmethod
    def from_torch(cls, layer: torch.nn.Linear, config: ClusterHeadConfig) -> "ClusterHead":
        return cls(
            weight=layer.weight.detach().numpy().astype(np.float32).copy(),
            bias=layer.bias.detach().numpy().astype(np.float32).copy(),
            config=config,
        )

    def save(self, path: str | Path) -> Path:
        from dataclasses import asdict

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path,
            weight=self.weight,
            bias=self.bias,
            config=json.dumps(asdict(self.config), sort_keys=True),
            training_log=json.dumps(self.training_log, sort_keys=True),
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ClusterHead":
        blob = np.load(path, allow_pickle=False)
        cfg = ClusterHeadConfig(**json.loads(str(blob["config"])))
        return cls(
            weight=blob["weight"],
            bias=blob["bias"],
            config=cfg,
            training_log=json.loads(str(blob["training_log"])),
        )


def _check_distribution(p: np.ndarray, what: str) -> None:
    if p.ndim == 0 or np.any(p < -1e-6):
        raise NotADistribution(f"{what} has negative entries")
    sums = p.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-5):
        raise NotADistribution(f"{what} rows must sum to 1")


def entropy_regularizer(mean_probs) -> float:
    """Sum of p*ln(p) over a probability vector, with 0*ln(0) = 0.

    Bounded in [-ln C, 0]; minimized (most negative) at the uniform vector.
    """
    p = np.asarray(mean_probs, dtype=np.float64)
    if p.ndim != 1:
        raise NotADistribution("mean_probs must be a vector")
    _check_distribution(p, "mean_probs")
    nz = p[p > 0]
    return float((nz * np.log(nz)).sum())


@dataclass(frozen=True)
class FuscLossParts:
    total: torch.Tensor
    consistency: torch.Tensor
    entropy_term: torch.Tensor


def fusc_loss(
    anchor_probs,
    neighbor_probs,
    entropy_weight: float,
    log_clamp: float = 1e-8,
    average_neighbors: bool = False,
) -> FuscLossParts:
    """Neighbor-consistency plus entropy objective over cluster probabilities.

    consistency = -(1/B) sum_anchors sum_neighbors ln(max(<p, q>, log_clamp));
    entropy_term = entropy_weight * sum_c mean_p[c] * ln(mean_p[c]), where
    mean_p is the batch mean of the anchor probabilities (the batch estimate
    of the corpus-wide cluster distribution). total = consistency + entropy_term.
    """
    p = torch.as_tensor(anchor_probs)
    q = torch.as_tensor(neighbor_probs)
    if p.ndim != 2 or q.ndim != 3 or q.shape[0] != p.shape[0] or q.shape[2] != p.shape[1]:
        raise ClusteringError("expected anchor B x C and neighbors B x K x C")
    if q.shape[1] < 1:
        raise ClusteringError("need at least one neighbor per anchor")
    _check_distribution(p.detach().numpy(), "anchor_probs")
    _check_distribution(q.detach().numpy().reshape(-1, q.shape[2]), "neighbor_probs")

    dots = torch.einsum("bc,bkc->bk", p, q).clamp(min=log_clamp, max=1.0)
    per_anchor = -torch.log(dots)
    per_anchor = per_anchor.mean(dim=1) if average_neighbors else per_anchor.sum(dim=1)
    consistency = per_anchor.mean()

    mean_p = p.mean(dim=0)
    plogp = mean_p * torch.log(mean_p.clamp(min=log_clamp))
    entropy_term = entropy_weight * plogp.sum()
    return FuscLossParts(
        total=consistency + entropy_term, consistency=consistency, entropy_term=entropy_term
    )


def assign(head: ClusterHead, emb: EmbeddingMatrix) -> SoftAssignment:
    """Softmax cluster probabilities of each embedding row under the head."""
    if emb.dim != head.weight.shape[1]:
        raise DimensionMismatch(
            f"embedding dim {emb.dim} != head input dim {head.weight.shape[1]}"
        )
    logits = emb.vectors.astype(np.float64) @ head.weight.T.astype(np.float64) + head.bias
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    probs = expl / expl.sum(axis=1, keepdims=True)
    return SoftAssignment(ids=list(emb.ids), probs=probs.astype(np.float32))


def train_cluster_head(
    emb: EmbeddingMatrix,
    index: NeighborIndex,
    cfg: ClusterHeadConfig,
    encoder_state: EncoderState | None = None,
    images: np.ndarray | None = None,
    image_ids: Sequence[str] | None = None,
) -> tuple[ClusterHead, SoftAssignment]:
    """Fit the linear softmax head by minibatch gradient descent.

    Each batch samples anchors from the neighbor index and gathers their
    stored neighbors' embeddings. Both loss components are logged per epoch
    (available on the returned head's training_log). With
    cfg.finetune_encoder the anchor/neighbor images are re-encoded every step
    and the encoder trains jointly; the fine-tuned state is then available as
    the head's ``finetuned_encoder`` attribute.
    """
    pos = {i: k for k, i in enumerate(emb.ids)}
    try:
        anchor_rows = np.array([pos[i] for i in index.ids], dtype=np.int64)
        neighbor_rows = np.array(
            [[pos[j] for j in row] for row in index.neighbor_ids], dtype=np.int64
        )
    except KeyError as exc:
        raise IndexEmbeddingMismatch(f"index id {exc} missing from embeddings") from exc

    torch.manual_seed(cfg.seed)
    head = torch.nn.Linear(emb.dim, cfg.n_clusters)
    if cfg.init == "kmeans":
        # Centroid selection runs on the same rows the head trains on.
        local_pos = {row: k for k, row in enumerate(anchor_rows)}
        local_neighbors = np.array(
            [[local_pos[j] for j in row] for row in neighbor_rows], dtype=np.int64
        )
        train_vectors = emb.vectors[anchor_rows].astype(np.float64)
        unit_centers = _select_head_init(train_vectors, local_neighbors, cfg)
        with torch.no_grad():
            head.weight.copy_(torch.from_numpy(cfg.init_scale * unit_centers))
            head.bias.zero_()

    backbone = None
    image_row_of = None
    if cfg.finetune_encoder:
        if encoder_state is None or images is None or image_ids is None:
            raise ClusteringError(
                "finetune_encoder=True needs encoder_state, images and image_ids"
            )
        backbone = encoder_state.build_modules()["backbone"]
        backbone.train()
        img_pos = {i: k for k, i in enumerate(image_ids)}
        try:
            image_row_of = np.array([img_pos[i] for i in emb.ids], dtype=np.int64)
        except KeyError as exc:
            raise IndexEmbeddingMismatch(f"no image for embedding id {exc}") from exc
        params = list(backbone.parameters()) + list(head.parameters())
    else:
        params = list(head.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)

    x = torch.from_numpy(emb.vectors.astype(np.float32))
    n = len(index.ids)
    log: list[dict] = []
    for epoch in range(cfg.epochs):
        order = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([cfg.seed, 31337, epoch]))
        ).permutation(n)
        totals, consistencies, entropies = [], [], []
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            if backbone is None:
                xa = x[anchor_rows[batch]]
                xn = x[neighbor_rows[batch]]  # B x K x d
            else:
                rows = np.concatenate([anchor_rows[batch], neighbor_rows[batch].reshape(-1)])
                pixels = torch.from_numpy(images[image_row_of[rows]]).unsqueeze(1)
                feats = F.normalize(backbone(pixels), dim=1, eps=1e-12)
                xa = feats[: len(batch)]
                xn = feats[len(batch) :].reshape(len(batch), index.k, emb.dim)
            p = F.softmax(head(xa), dim=1)
            q_logits = head(xn.reshape(-1, emb.dim)).reshape(len(batch), index.k, cfg.n_clusters)
            q = F.softmax(q_logits, dim=2)
            if not cfg.neighbor_grad:
                q = q.detach()
            parts = fusc_loss(p, q, cfg.entropy_weight, cfg.log_clamp, cfg.average_neighbors)
            optimizer.zero_grad()
            parts.total.backward()
            optimizer.step()
            totals.append(float(parts.total.detach()))
            consistencies.append(float(parts.consistency.detach()))
            entropies.append(float(parts.entropy_term.detach()))
        log.append(
            {
                "epoch": epoch,
                "total": float(np.mean(totals)),
                "consistency": float(np.mean(consistencies)),
                "entropy_term": float(np.mean(entropies)),
            }
        )

    trained = ClusterHead.from_torch(head, cfg)
    trained.training_log = log
    if backbone is not None:
        backbone.eval()
        finetuned = EncoderState(
            config=encoder_state.config,
            weights={
                "backbone": _clone_state_dict(backbone.state_dict()),
                "projector": encoder_state.weights["projector"],
            },
            training_log=list(encoder_state.training_log),
        )
        trained.finetuned_encoder = finetuned
        train_ids = list(index.ids)
        matrix = embed(finetuned, images=images[image_row_of], ids=list(emb.ids))
        train_assignment = assign(trained, matrix.subset(train_ids))
    else:
        train_assignment = assign(trained, emb.subset(index.ids))
    return trained, train_assignment


def _clone_state_dict(sd: dict) -> dict:
    return {k: v.detach().clone() for k, v in sd.items()}


def _select_head_init(
    x: np.ndarray, neighbor_rows: np.ndarray, cfg: ClusterHeadConfig
) -> np.ndarray:
    """Seeded centroid restarts scored under the clustering objective itself.

    Each restart's centroids induce the head's initial soft assignment; the
    restart with the lowest objective value wins (ties: lower restart index).
    A restart that leaves a cluster empty loses on the entropy term, one that
    cuts through dense neighborhoods loses on the consistency term.
    """
    best = None
    for r in range(max(1, cfg.init_restarts)):
        centers, _ = kmeans_fit(x, cfg.n_clusters, cfg.seed + r)
        norms = np.linalg.norm(centers, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        unit_centers = centers / norms
        logits = cfg.init_scale * (x @ unit_centers.T)
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        dots = np.clip(np.einsum("bc,bkc->bk", probs, probs[neighbor_rows]), cfg.log_clamp, 1.0)
        per_anchor = -np.log(dots)
        per_anchor = per_anchor.mean(axis=1) if cfg.average_neighbors else per_anchor.sum(axis=1)
        consistency = per_anchor.mean()
        mean_p = probs.mean(axis=0)
        entropy_term = cfg.entropy_weight * float(
            (mean_p * np.log(np.clip(mean_p, cfg.log_clamp, None))).sum()
        )
        total = float(consistency + entropy_term)
        if best is None or total < best[0]:
            best = (total, unit_centers)
    return best[1]


def select_confident(assignment: SoftAssignment, threshold: float) -> list[tuple[str, int]]:
    """All (image_id, hard_label) whose confidence meets the threshold (inclusive)."""
    if not (0.5 < threshold <= 1.0):
        raise ValueError("threshold must be in (0.5, 1]")
    return [
        (image_id, int(label))
        for image_id, label, conf in zip(assignment.ids, assignment.hard_labels, assignment.confidence)
        if float(conf) >= threshold
    ]


@dataclass(frozen=True)
class SelfLabelConfig:
    threshold: float = 0.99
    strong_policy: AugmentationPolicy = field(default_factory=strong_policy)
    epochs: int = 5
    batch_size: int = 256
    learning_rate: float = 1e-4
    seed: int = 0
    update_encoder: bool = True
    update_head: bool = True

    def __post_init__(self) -> None:
        if not (0.5 < self.threshold <= 1.0):
            raise ValueError("threshold must be in (0.5, 1]")
        if self.strong_policy.strength != "strong":
            raise ValueError("self-labeling expects a strong augmentation policy")


def self_label_train(
    state: EncoderState,
    head: ClusterHead,
    images: np.ndarray,
    ids: Sequence[str],
    cfg: SelfLabelConfig,
) -> tuple[EncoderState, ClusterHead, SoftAssignment, list[dict]]:
    """Iteratively retrain on confident samples with strong augmentation.

    Each epoch recomputes assignments, selects samples with confidence >=
    threshold, and takes one cross-entropy pass over them against their hard
    labels. Returns the updated encoder/head, the final full assignment, and
    a per-epoch log of confident-set sizes.
    """
    ids = list(ids)
    modules = state.build_modules()
    backbone = modules["backbone"]
    torch_head = head.to_torch()

    params = []
    if cfg.update_encoder:
        params += list(backbone.parameters())
    if cfg.update_head:
        params += list(torch_head.parameters())
    if not params:
        raise ValueError("nothing to update: enable encoder and/or head updates")
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)

    def current_assignment() -> SoftAssignment:
        current = EncoderState(
            config=state.config,
            weights={"backbone": backbone.state_dict(), "projector": state.weights["projector"]},
            training_log=state.training_log,
        )
        matrix = embed(current, images=images, ids=ids)
        return assign(ClusterHead.from_torch(torch_head, head.config), matrix)

    assignment = current_assignment()
    confident = select_confident(assignment, cfg.threshold)
    if not confident:
        raise NoConfidentSamples(f"no sample reaches confidence {cfg.threshold}")

    pos = {i: k for k, i in enumerate(ids)}
    log: list[dict] = []
    for epoch in range(cfg.epochs):
        assignment = current_assignment()
        confident = select_confident(assignment, cfg.threshold)
        log.append({"epoch": epoch, "confident": len(confident)})
        if not confident:
            continue
        rows = np.array([pos[i] for i, _ in confident], dtype=np.int64)
        labels = np.array([c for _, c in confident], dtype=np.int64)
        order = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([cfg.seed, 5151, epoch]))
        ).permutation(len(rows))
        if cfg.update_encoder:
            backbone.train()
            # Normalization statistics stay frozen: confident-only strongly
            # augmented batches are not representative of the corpus.
            for module in backbone.modules():
                if isinstance(module, torch.nn.modules.batchnorm._BatchNorm):
                    module.eval()
        for lo in range(0, len(rows), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            views = []
            for j in batch:
                rng = np.random.Generator(
                    np.random.PCG64(view_seed(cfg.seed ^ 0x5E1F, epoch, int(rows[j])))
                )
                views.append(sample_view(images[rows[j]], cfg.strong_policy, rng))
            xb = torch.from_numpy(np.stack(views)).unsqueeze(1)
            target = torch.from_numpy(labels[batch])
            if cfg.update_encoder:
                feats = F.normalize(backbone(xb), dim=1, eps=1e-12)
            else:
                with torch.no_grad():
                    feats = F.normalize(backbone(xb), dim=1, eps=1e-12)
            loss = F.cross_entropy(torch_head(feats), target)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        backbone.eval()

    final_state = EncoderState(
        config=state.config,
        weights={
            "backbone": _clone_state_dict(backbone.state_dict()),
            "projector": state.weights["projector"],
        },
        training_log=list(state.training_log),
    )
    final_head = ClusterHead.from_torch(torch_head, head.config)
    final_assignment = assign(final_head, embed(final_state, images=images, ids=ids))
    return final_state, final_head, final_assignment, log


def _greedy_spread_init(x: np.ndarray, c: int, seed: int) -> np.ndarray:
    """First center seeded at random, then farthest-point selection (ties by index)."""
    rng = np.random.default_rng(seed)
    centers = [int(rng.integers(0, x.shape[0]))]
    d2 = ((x - x[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, c):
        nxt = int(np.argmax(d2))  # argmax takes the lowest index on ties
        centers.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[centers].copy()


def kmeans_fit(
    vectors: np.ndarray, c: int, seed: int, max_iter: int = 100
) -> tuple[np.ndarray, list[float]]:
    """Lloyd iterations until the assignment fixpoint or the iteration cap.

    Returns (centers, inertia history); inertia is recorded after each
    assignment step and never increases.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if c > n:
        raise CGreaterThanN(f"C={c} exceeds N={n}")
    if c < 1:
        raise ValueError("C must be >= 1")
    x_sq = (x**2).sum(axis=1)
    centers = _greedy_spread_init(x, c, seed)
    prev_assign = None
    inertia_history: list[float] = []
    for _ in range(max_iter):
        d2 = _pairwise_sq(x, x_sq, centers)
        labels = d2.argmin(axis=1)
        inertia_history.append(float(d2[np.arange(n), labels].sum()))
        if prev_assign is not None and np.array_equal(labels, prev_assign):
            break
        prev_assign = labels
        for j in range(c):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                # Re-seed an empty cluster at the point farthest from its center.
                dist = d2[np.arange(n), labels]
                centers[j] = x[int(np.argmax(dist))]
    return centers, inertia_history


def _pairwise_sq(x: np.ndarray, x_sq: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = x_sq[:, None] + (centers**2).sum(axis=1)[None, :] - 2.0 * (x @ centers.T)
    return np.maximum(d2, 0.0)


def kmeans_assign(centers: np.ndarray, emb: EmbeddingMatrix) -> SoftAssignment:
    """One-hot assignment of embedding rows to their nearest center."""
    x = emb.vectors.astype(np.float64)
    d2 = _pairwise_sq(x, (x**2).sum(axis=1), centers)
    labels = d2.argmin(axis=1)
    probs = np.zeros((x.shape[0], centers.shape[0]), dtype=np.float32)
    probs[np.arange(x.shape[0]), labels] = 1.0
    return SoftAssignment(ids=list(emb.ids), probs=probs)


def kmeans_baseline(emb: EmbeddingMatrix, c: int, seed: int, max_iter: int = 100) -> SoftAssignment:
    """Fit K-means on the matrix and return its own one-hot assignment."""
    centers, _ = kmeans_fit(emb.vectors, c, seed, max_iter)
    return kmeans_assign(centers, emb)
