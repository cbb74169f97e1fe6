"""Self-supervised representation learning and corpus embedding.

Two pretext variants behind one encoder interface: a contrastive objective
over in-batch negatives, and a self-distillation objective with an EMA
teacher. Both minimize the distance between an image and its augmentations.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from fusc.augment import AugmentationPolicy, sample_view, view_seed
from fusc.data import DatasetManifest

CHECKPOINT_FORMAT_VERSION = 1

TOPOLOGIES = ("small-convolutional-residual", "small-patch-transformer")
METHODS = ("contrastive", "self-distillation")


class SSLError(Exception):
    pass


class BatchTooSmall(SSLError):
    pass


class EmptyTrainSet(SSLError):
    pass


class MissingImage(SSLError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    topology: str = "small-convolutional-residual"
    embedding_dim: int | None = None  # default: 512 conv / 384 transformer
    projection_dim: int = 128
    temperature: float = 0.5
    distance: str = "cosine"
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    method: str = "contrastive"
    image_size: int = 32
    conv_widths: tuple[int, ...] = (32, 64, 128)
    vit_dim: int = 64
    vit_depth: int = 4
    vit_heads: int = 4
    vit_patch: int = 4
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    ema_momentum: float = 0.996
    center_momentum: float = 0.9

    def __post_init__(self) -> None:
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.embedding_dim is not None and self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.distance != "cosine":
            raise ValueError("only cosine distance is supported")

    @property
    def resolved_embedding_dim(self) -> int:
        if self.embedding_dim is not None:
            return self.embedding_dim
        return 512 if self.topology == "small-convolutional-residual" else 384


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class SmallResNet(nn.Module):
    """Compact convolutional-residual backbone for small grayscale inputs."""

    def __init__(self, widths: Sequence[int] = (32, 64, 128), embedding_dim: int = 512):
        super().__init__()
        w = list(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(1, w[0], 3, 1, 1, bias=False), nn.BatchNorm2d(w[0]), nn.ReLU(inplace=True)
        )
        blocks = [_ResBlock(w[0], w[0], stride=1)]
        for cin, cout in zip(w[:-1], w[1:]):
            blocks.append(_ResBlock(cin, cout, stride=2))
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(w[-1], embedding_dim)

    def forward(self, x):
        h = self.blocks(self.stem(x))
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return self.fc(h)


class SmallViT(nn.Module):
    """Tiny patch-transformer backbone (CLS-token readout)."""

    def __init__(
        self,
        image_size: int = 32,
        patch: int = 4,
        dim: int = 64,
        depth: int = 4,
        heads: int = 4,
        embedding_dim: int = 384,
    ):
        super().__init__()
        if image_size % patch != 0:
            raise ValueError("image_size must be divisible by patch size")
        n_patches = (image_size // patch) ** 2
        self.patchify = nn.Conv2d(1, dim, kernel_size=patch, stride=patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches + 1, dim))
        layer = nn.TransformerEncoderLayer(
            d_model=dim,
            nhead=heads,
            dim_feedforward=2 * dim,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)
        self.fc = nn.Linear(dim, embedding_dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def forward(self, x):
        tokens = self.patchify(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed
        out = self.norm(self.encoder(tokens))
        return self.fc(out[:, 0])


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, in_dim), nn.ReLU(inplace=True), nn.Linear(in_dim, out_dim))

    def forward(self, x):
        return self.net(x)


def build_backbone(config: EncoderConfig) -> nn.Module:
    if config.topology == "small-convolutional-residual":
        return SmallResNet(widths=config.conv_widths, embedding_dim=config.resolved_embedding_dim)
    return SmallViT(
        image_size=config.image_size,
        patch=config.vit_patch,
        dim=config.vit_dim,
        depth=config.vit_depth,
        heads=config.vit_heads,
        embedding_dim=config.resolved_embedding_dim,
    )


def contrastive_loss(z_a, z_b, temperature: float) -> torch.Tensor:
    """Normalized-temperature cross-entropy over in-batch negatives.

    Rows of z_a and z_b are projections of two views of the same images,
    row-aligned. Mean over all 2B anchors of -log softmax(positive) where
    candidates are the 2B-1 other embeddings, similarities cosine / temperature.
    """
    za = torch.as_tensor(z_a)
    zb = torch.as_tensor(z_b)
    if za.ndim != 2 or za.shape != zb.shape:
        raise ValueError("z_a and z_b must be equal-shape B x p matrices")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    b = za.shape[0]
    if b < 2:
        raise BatchTooSmall(f"contrastive loss needs B >= 2, got {b}")
    z = F.normalize(torch.cat([za, zb], dim=0), dim=1, eps=1e-12)
    sim = (z @ z.T) / temperature
    mask = torch.eye(2 * b, dtype=torch.bool, device=sim.device)
    sim = sim.masked_fill(mask, float("-inf"))
    targets = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)]).to(sim.device)
    return F.cross_entropy(sim, targets)


def self_distillation_loss(
    student_logits,
    teacher_logits,
    center,
    teacher_temp: float = 0.04,
    student_temp: float = 0.1,
) -> torch.Tensor:
    """Cross-entropy between the sharpened centered teacher softmax and the
    student softmax. The teacher branch receives no gradient."""
    if teacher_temp <= 0 or student_temp <= 0:
        raise ValueError("temperatures must be > 0")
    s = torch.as_tensor(student_logits)
    t = torch.as_tensor(teacher_logits)
    c = torch.as_tensor(center)
    targets = F.softmax((t - c) / teacher_temp, dim=1).detach()
    logp = F.log_softmax(s / student_temp, dim=1)
    return -(targets * logp).sum(dim=1).mean()


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student (parameters);
    buffers are copied from the student."""
    if not (0.0 <= momentum <= 1.0):
        raise ValueError("momentum must be in [0,1]")
    for pt, ps in zip(teacher.parameters(), student.parameters()):
        pt.mul_(momentum).add_(ps, alpha=1.0 - momentum)
    if momentum < 1.0:
        for bt, bs in zip(teacher.buffers(), student.buffers()):
            bt.copy_(bs)


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float) -> torch.Tensor:
    return momentum * center + (1.0 - momentum) * teacher_logits.mean(dim=0)


@dataclass
class EncoderState:
    """Serializable encoder snapshot: weights + config + training history."""

    config: EncoderConfig
    weights: dict
    training_log: list = field(default_factory=list)

    def build_modules(self) -> dict:
        torch.manual_seed(self.config.seed)
        backbone = build_backbone(self.config)
        projector = ProjectionHead(self.config.resolved_embedding_dim, self.config.projection_dim)
        backbone.load_state_dict(self.weights["backbone"])
        projector.load_state_dict(self.weights["projector"])
        return {"backbone": backbone, "projector": projector}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format_version": CHECKPOINT_FORMAT_VERSION,
                "kind": "fusc-encoder",
                "config": asdict(self.config),
                "weights": self.weights,
                "training_log": self.training_log,
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EncoderState":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("kind") != "fusc-encoder":
            raise SSLError(f"{path} is not an encoder checkpoint")
        if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise SSLError(f"unsupported checkpoint version {blob.get('format_version')}")
        cfg_dict = dict(blob["config"])
        cfg_dict["conv_widths"] = tuple(cfg_dict["conv_widths"])
        return cls(
            config=EncoderConfig(**cfg_dict),
            weights=blob["weights"],
            training_log=list(blob["training_log"]),
        )


@dataclass
class EmbeddingMatrix:
    """Row-aligned (image_id, vector) matrix; rows unit-norm when normalized."""

    ids: list[str]
    vectors: np.ndarray  # N x d float32
    normalized: bool = True

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if len(self.ids) != self.vectors.shape[0]:
            raise ValueError("ids and vectors row count mismatch")
        if self.normalized and len(self.ids) > 0:
            norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ValueError("normalized=True but rows are not unit norm")

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def row_for(self, image_id: str) -> np.ndarray:
        try:
            idx = self._pos[image_id]
        except AttributeError:
            self._pos = {i: k for k, i in enumerate(self.ids)}
            idx = self._pos[image_id]
        return self.vectors[idx]

    def subset(self, ids: Sequence[str]) -> "EmbeddingMatrix":
        pos = {i: k for k, i in enumerate(self.ids)}
        rows = [pos[i] for i in ids]
        return EmbeddingMatrix(ids=list(ids), vectors=self.vectors[rows], normalized=self.normalized)

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ids.txt").write_text("\n".join(self.ids) + "\n", encoding="utf-8")
        self.vectors.astype("<f4").tofile(out_dir / "vectors.f32")
        meta = {
            "format_version": 1,
            "kind": "fusc-embeddings",
            "n": len(self.ids),
            "d": self.dim,
            "dtype": "float32-le",
            "order": "row-major",
            "normalized": self.normalized,
        }
        (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")
        return out_dir

    @classmethod
    def load(cls, out_dir: str | Path) -> "EmbeddingMatrix":
        out_dir = Path(out_dir)
        meta = json.loads((out_dir / "meta.json").read_text(encoding="utf-8"))
        ids = (out_dir / "ids.txt").read_text(encoding="utf-8").splitlines()
        vectors = np.fromfile(out_dir / "vectors.f32", dtype="<f4").reshape(meta["n"], meta["d"])
        return cls(ids=ids, vectors=vectors, normalized=meta["normalized"])


def load_images(
    manifest: DatasetManifest, image_size: int | None = None, ids: Sequence[str] | None = None
) -> tuple[list[str], np.ndarray]:
    """Read manifest images as a float32 [0,1] stack, resizing if asked."""
    wanted = list(ids) if ids is not None else manifest.ids
    arrays = []
    for image_id in wanted:
        rec = manifest.by_id(image_id)
        path = manifest.resolve_pixel_path(rec)
        img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
        if img is None:
            raise MissingImage(f"cannot read image {path} for {image_id!r}")
        if image_size is not None and img.shape != (image_size, image_size):
            img = cv2.resize(img, (image_size, image_size), interpolation=cv2.INTER_AREA)
        arrays.append(img.astype(np.float32) / 255.0)
    if not arrays:
        raise EmptyTrainSet("no images to load")
    return wanted, np.stack(arrays)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 777, epoch])))
    return rng.permutation(n)


def _augment_batch(
    images: np.ndarray, indices: np.ndarray, policy: AugmentationPolicy, seed: int, epoch: int
) -> tuple[torch.Tensor, torch.Tensor]:
    views_a, views_b = [], []
    for i in indices:
        rng = np.random.Generator(np.random.PCG64(view_seed(seed, epoch, int(i))))
        views_a.append(sample_view(images[i], policy, rng))
        views_b.append(sample_view(images[i], policy, rng))
    xa = torch.from_numpy(np.stack(views_a)).unsqueeze(1)
    xb = torch.from_numpy(np.stack(views_b)).unsqueeze(1)
    return xa, xb


def train_ssl(
    manifest: DatasetManifest | None,
    config: EncoderConfig,
    policy: AugmentationPolicy,
    checkpoint_dir: str | Path | None = None,
    images: np.ndarray | None = None,
    ids: Sequence[str] | None = None,
) -> EncoderState:
    """Train the encoder with the configured pretext task.

    Deterministic for a fixed config seed. Writes a resumable checkpoint per
    epoch when checkpoint_dir is given; a partially trained checkpoint in that
    directory is picked up automatically.
    """
    if images is None:
        if manifest is None or len(manifest) == 0:
            raise EmptyTrainSet("manifest is empty")
        ids, images = load_images(manifest, config.image_size, ids)
    if images.shape[0] == 0:
        raise EmptyTrainSet("no training images")
    n = images.shape[0]

    torch.manual_seed(config.seed)
    backbone = build_backbone(config)
    projector = ProjectionHead(config.resolved_embedding_dim, config.projection_dim)
    params = list(backbone.parameters()) + list(projector.parameters())
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, config.epochs))

    distill = config.method == "self-distillation"
    if distill:
        teacher_backbone = copy.deepcopy(backbone)
        teacher_projector = copy.deepcopy(projector)
        for p in list(teacher_backbone.parameters()) + list(teacher_projector.parameters()):
            p.requires_grad_(False)
        center = torch.zeros(config.projection_dim)

    training_log: list[dict] = []
    start_epoch = 0
    resume_path = Path(checkpoint_dir) / "encoder_partial.pt" if checkpoint_dir else None
    if resume_path is not None and resume_path.exists():
        blob = torch.load(resume_path, map_location="cpu", weights_only=True)
        if blob["config"] == asdict(config) and blob["epoch"] < config.epochs:
            backbone.load_state_dict(blob["weights"]["backbone"])
            projector.load_state_dict(blob["weights"]["projector"])
            optimizer.load_state_dict(blob["optimizer"])
            scheduler.load_state_dict(blob["scheduler"])
            training_log = list(blob["training_log"])
            start_epoch = blob["epoch"]
            if distill:
                teacher_backbone.load_state_dict(blob["weights"]["teacher_backbone"])
                teacher_projector.load_state_dict(blob["weights"]["teacher_projector"])
                center = blob["weights"]["center"]

    backbone.train()
    projector.train()
    for epoch in range(start_epoch, config.epochs):
        order = _epoch_order(config.seed, epoch, n)
        epoch_losses = []
        for lo in range(0, n, config.batch_size):
            batch = order[lo : lo + config.batch_size]
            if len(batch) < 2:
                continue
            xa, xb = _augment_batch(images, batch, policy, config.seed, epoch)
            if distill:
                s_a = projector(backbone(xa))
                s_b = projector(backbone(xb))
                with torch.no_grad():
                    t_a = teacher_projector(teacher_backbone(xa))
                    t_b = teacher_projector(teacher_backbone(xb))
                loss = 0.5 * (
                    self_distillation_loss(s_b, t_a, center, config.teacher_temp, config.student_temp)
                    + self_distillation_loss(s_a, t_b, center, config.teacher_temp, config.student_temp)
                )
            else:
                z_a = projector(backbone(xa))
                z_b = projector(backbone(xb))
                loss = contrastive_loss(z_a, z_b, config.temperature)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if distill:
                ema_update(teacher_backbone, backbone, config.ema_momentum)
                ema_update(teacher_projector, projector, config.ema_momentum)
                center = update_center(center, torch.cat([t_a, t_b]), config.center_momentum)
            epoch_losses.append(float(loss.detach()))
        scheduler.step()
        training_log.append({"epoch": epoch, "loss": float(np.mean(epoch_losses))})

        if checkpoint_dir is not None:
            weights = {
                "backbone": backbone.state_dict(),
                "projector": projector.state_dict(),
            }
            if distill:
                weights["teacher_backbone"] = teacher_backbone.state_dict()
                weights["teacher_projector"] = teacher_projector.state_dict()
                weights["center"] = center
            torch.save(
                {
                    "format_version": CHECKPOINT_FORMAT_VERSION,
                    "kind": "fusc-encoder-partial",
                    "config": asdict(config),
                    "weights": weights,
                    "optimizer": optimizer.state_dict(),
                    "scheduler": scheduler.state_dict(),
                    "training_log": training_log,
                    "epoch": epoch + 1,
                },
                Path(checkpoint_dir) / "encoder_partial.pt",
            )

    weights = {"backbone": backbone.state_dict(), "projector": projector.state_dict()}
    return EncoderState(config=config, weights=weights, training_log=training_log)


def embed(
    state: EncoderState,
    manifest: DatasetManifest | None = None,
    images: np.ndarray | None = None,
    ids: Sequence[str] | None = None,
    batch_size: int = 512,
) -> EmbeddingMatrix:
    """L2-normalized embeddings for a manifest subset, in input id order.

    No augmentation is applied; the backbone runs in eval mode.
    """
    if images is None:
        if manifest is None:
            raise ValueError("either manifest or images must be given")
        ids, images = load_images(manifest, state.config.image_size, ids)
    assert ids is not None
    modules = state.build_modules()
    backbone = modules["backbone"]
    backbone.eval()
    chunks = []
    with torch.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            x = torch.from_numpy(images[lo : lo + batch_size]).unsqueeze(1)
            chunks.append(backbone(x).numpy())
    vectors = np.concatenate(chunks, axis=0).astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    vectors = (vectors / norms).astype(np.float32)
    return EmbeddingMatrix(ids=list(ids), vectors=vectors, normalized=True)
