"""Staged pipeline orchestration: configs, artifacts, hashing, resume.

A run owns one directory with a sub-directory per stage. Every stage records
the hash of its config and inputs plus the hashes of the files it wrote;
rerunning a stage whose record still matches is a no-op, and artifacts that
were tampered with are re-built.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fusc import augment as aug
from fusc.clustering import (
    ClusterHead,
    ClusterHeadConfig,
    SelfLabelConfig,
    SoftAssignment,
    assign,
    kmeans_assign,
    kmeans_fit,
    self_label_train,
    train_cluster_head,
)
from fusc.data import (
    UNLABELED,
    DatasetManifest,
    Split,
    load_manifest,
    split_by_patient,
)
from fusc.evaluate import EvaluationReport, build_report
from fusc.neighbors import NeighborIndex, mine_neighbors
from fusc.preprocess import InpaintConfig, preprocess_corpus
from fusc.ssl import EmbeddingMatrix, EncoderConfig, EncoderState, embed, load_images, train_ssl

CONFIG_VERSION = 1

STAGES = (
    "preprocess",
    "pretrain",
    "embed",
    "mine",
    "cluster",
    "selflabel",
    "kmeans",
    "evaluate",
    "export",
)

RUN_ROOT_ENV = "FUSC_RUN_ROOT"


class PipelineError(Exception):
    pass


class MissingArtifact(PipelineError):
    pass


class ConfigVersionMismatch(PipelineError):
    pass


class IdMismatch(PipelineError):
    pass


class MissingCheckpoint(PipelineError):
    pass


@dataclass(frozen=True)
class PreprocessStageConfig:
    enabled: bool = True
    sidecar: str | None = None
    max_iterations: int = 2000
    convergence_tol: float = 0.5


@dataclass(frozen=True)
class SplitStageConfig:
    train_fraction: float = 0.8
    seed: int = 0


@dataclass(frozen=True)
class AugmentStageConfig:
    name: str = "standard"  # {"standard", "strong", "identity"}

    def build(self) -> aug.AugmentationPolicy:
        return {
            "standard": aug.standard_policy,
            "strong": aug.strong_policy,
            "identity": aug.identity_policy,
        }[self.name]()


@dataclass(frozen=True)
class MineStageConfig:
    k: int = 20
    scope: str = "train"  # neighbors mined on the train split only


@dataclass(frozen=True)
class SelfLabelStageConfig:
    enabled: bool = True
    threshold: float = 0.99
    epochs: int = 5
    batch_size: int = 256
    learning_rate: float = 3e-4
    seed: int = 0
    update_encoder: bool = False
    update_head: bool = True


@dataclass(frozen=True)
class KMeansStageConfig:
    enabled: bool = True
    n_clusters: int | None = None  # default: cluster stage's C
    seed: int = 0
    features: str = "pixels"  # {"pixels", "embeddings"}


@dataclass(frozen=True)
class EvaluateStageConfig:
    split: str = "test"  # {"test", "train", "all"}
    merge: bool = False


@dataclass(frozen=True)
class RunConfig:
    manifest: str
    run_dir: str
    config_version: int = CONFIG_VERSION
    seed: int = 0
    preprocess: PreprocessStageConfig = field(default_factory=PreprocessStageConfig)
    split: SplitStageConfig = field(default_factory=SplitStageConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentStageConfig = field(default_factory=AugmentStageConfig)
    mine: MineStageConfig = field(default_factory=MineStageConfig)
    cluster: ClusterHeadConfig = field(default_factory=lambda: ClusterHeadConfig(n_clusters=5))
    selflabel: SelfLabelStageConfig = field(default_factory=SelfLabelStageConfig)
    kmeans: KMeansStageConfig = field(default_factory=KMeansStageConfig)
    evaluate: EvaluateStageConfig = field(default_factory=EvaluateStageConfig)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if raw.get("config_version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigVersionMismatch(
                f"config_version {raw.get('config_version')} != supported {CONFIG_VERSION}"
            )
        def build(sub_cls, key):
            payload = dict(raw.get(key, {}))
            if sub_cls is EncoderConfig and "conv_widths" in payload:
                payload["conv_widths"] = tuple(payload["conv_widths"])
            return sub_cls(**payload)

        return cls(
            manifest=raw["manifest"],
            run_dir=raw["run_dir"],
            config_version=CONFIG_VERSION,
            seed=raw.get("seed", 0),
            preprocess=build(PreprocessStageConfig, "preprocess"),
            split=build(SplitStageConfig, "split"),
            encoder=build(EncoderConfig, "encoder"),
            augment=build(AugmentStageConfig, "augment"),
            mine=build(MineStageConfig, "mine"),
            cluster=build(ClusterHeadConfig, "cluster"),
            selflabel=build(SelfLabelStageConfig, "selflabel"),
            kmeans=build(KMeansStageConfig, "kmeans"),
            evaluate=build(EvaluateStageConfig, "evaluate"),
        )

    @classmethod
    def from_json_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def resolved_run_dir(self) -> Path:
        root = os.environ.get(RUN_ROOT_ENV)
        run_dir = Path(self.run_dir)
        if root and not run_dir.is_absolute():
            return Path(root) / run_dir
        return run_dir


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_sha256(obj) -> str:
    payload = json.dumps(asdict(obj) if dataclasses.is_dataclass(obj) else obj, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _tree_hashes(paths: Sequence[Path], base: Path) -> dict[str, str]:
    out = {}
    for p in sorted(paths):
        out[str(p.relative_to(base))] = file_sha256(p)
    return out


@dataclass
class StageRecord:
    stage: str
    config_hash: str
    input_hashes: dict
    outputs: dict  # relative path -> sha256

    def save(self, stage_dir: Path) -> None:
        stage_dir.mkdir(parents=True, exist_ok=True)
        (stage_dir / "stage.json").write_text(
            json.dumps(asdict(self), sort_keys=True, indent=2), encoding="utf-8"
        )

    @classmethod
    def load(cls, stage_dir: Path) -> "StageRecord | None":
        path = stage_dir / "stage.json"
        if not path.exists():
            return None
        return cls(**json.loads(path.read_text(encoding="utf-8")))


def _stage_fresh(stage_dir: Path, config_hash: str, input_hashes: dict) -> bool:
    record = StageRecord.load(stage_dir)
    if record is None:
        return False
    if record.config_hash != config_hash or record.input_hashes != input_hashes:
        return False
    for rel, digest in record.outputs.items():
        path = stage_dir / rel
        if not path.exists() or file_sha256(path) != digest:
            return False  # tampered or missing artifact: rebuild
    return True


class Run:
    """One pipeline execution bound to a run directory."""

    def __init__(self, config: RunConfig):
        if config.config_version != CONFIG_VERSION:
            raise ConfigVersionMismatch(
                f"config_version {config.config_version} != supported {CONFIG_VERSION}"
            )
        self.config = config
        self.run_dir = config.resolved_run_dir()
        self.executed: list[str] = []
        self.skipped: list[str] = []
        self._images: tuple[list[str], np.ndarray] | None = None

    # ---- shared artifacts -------------------------------------------------

    def stage_dir(self, stage: str) -> Path:
        return self.run_dir / stage

    @property
    def manifest_path(self) -> Path:
        if self.config.preprocess.enabled:
            return self.stage_dir("preprocess") / "manifest.jsonl"
        return Path(self.config.manifest)

    def working_manifest(self) -> DatasetManifest:
        if not self.manifest_path.exists():
            raise MissingArtifact(f"manifest {self.manifest_path} not found; run preprocess")
        return load_manifest(self.manifest_path)

    def split(self) -> Split:
        path = self.run_dir / "split.json"
        cfg = self.config.split
        if path.exists():
            raw = json.loads(path.read_text(encoding="utf-8"))
            if raw.get("seed") == cfg.seed and raw.get("train_fraction") == cfg.train_fraction:
                return Split(
                    train_ids=frozenset(raw["train_ids"]),
                    test_ids=frozenset(raw["test_ids"]),
                    seed=raw["seed"],
                )
        split = split_by_patient(self.working_manifest(), cfg.train_fraction, cfg.seed)
        payload = {
            "train_ids": sorted(split.train_ids),
            "test_ids": sorted(split.test_ids),
            "seed": split.seed,
            "train_fraction": cfg.train_fraction,
        }
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, sort_keys=True, indent=2), encoding="utf-8")
        return split

    def images(self) -> tuple[list[str], np.ndarray]:
        if self._images is None:
            manifest = self.working_manifest()
            self._images = load_images(manifest, self.config.encoder.image_size)
        return self._images

    def image_rows(self, ids: Sequence[str]) -> np.ndarray:
        all_ids, images = self.images()
        pos = {i: k for k, i in enumerate(all_ids)}
        return images[[pos[i] for i in ids]]

    # ---- stage implementations --------------------------------------------

    def _run_stage(
        self,
        stage: str,
        config_obj,
        input_paths: Sequence[Path],
        body: Callable[[Path], None],
        extra_inputs: dict | None = None,
    ) -> None:
        stage_dir = self.stage_dir(stage)
        for p in input_paths:
            if not Path(p).exists():
                raise MissingArtifact(f"stage {stage!r} needs missing input {p}")
        input_hashes = {str(p): file_sha256(p) for p in sorted(map(Path, input_paths))}
        if extra_inputs:
            input_hashes.update(extra_inputs)
        config_hash = config_sha256(config_obj)
        if _stage_fresh(stage_dir, config_hash, input_hashes):
            self.skipped.append(stage)
            return
        stage_dir.mkdir(parents=True, exist_ok=True)
        body(stage_dir)
        outputs = [
            p for p in stage_dir.rglob("*") if p.is_file() and p.name != "stage.json"
        ]
        StageRecord(
            stage=stage,
            config_hash=config_hash,
            input_hashes=input_hashes,
            outputs=_tree_hashes(outputs, stage_dir),
        ).save(stage_dir)
        self.executed.append(stage)

    def stage_preprocess(self) -> None:
        cfg = self.config.preprocess
        if not cfg.enabled:
            return
        source = Path(self.config.manifest)
        inputs = [source] + ([Path(cfg.sidecar)] if cfg.sidecar else [])

        def body(stage_dir: Path) -> None:
            manifest = load_manifest(source)
            preprocess_corpus(
                manifest,
                cfg.sidecar,
                stage_dir,
                InpaintConfig(cfg.max_iterations, cfg.convergence_tol),
            )

        self._run_stage("preprocess", cfg, inputs, body)
        self._images = None  # invalidate cache; manifest may have changed

    def stage_pretrain(self) -> None:
        split = self.split()
        train_ids = sorted(split.train_ids)

        def body(stage_dir: Path) -> None:
            state = train_ssl(
                None,
                self.config.encoder,
                self.config.augment.build(),
                checkpoint_dir=stage_dir,
                images=self.image_rows(train_ids),
                ids=train_ids,
            )
            state.save(stage_dir / "encoder.pt")
            (stage_dir / "loss_log.json").write_text(
                json.dumps(state.training_log, sort_keys=True, indent=2), encoding="utf-8"
            )
            partial = stage_dir / "encoder_partial.pt"
            if partial.exists():
                partial.unlink()

        self._run_stage(
            "pretrain",
            {"encoder": asdict(self.config.encoder), "augment": asdict(self.config.augment)},
            [self.manifest_path, self.run_dir / "split.json"],
            body,
        )

    def encoder_state(self) -> EncoderState:
        path = self.stage_dir("pretrain") / "encoder.pt"
        if not path.exists():
            raise MissingCheckpoint(f"no encoder checkpoint at {path}")
        return EncoderState.load(path)

    def clustering_encoder_state(self) -> EncoderState:
        """Encoder the cluster head was trained against (fine-tuned if the
        cluster stage updated it)."""
        finetuned = self.stage_dir("cluster") / "encoder.pt"
        if finetuned.exists():
            return EncoderState.load(finetuned)
        return self.encoder_state()

    def stage_embed(self) -> None:
        def body(stage_dir: Path) -> None:
            ids, images = self.images()
            matrix = embed(self.encoder_state(), images=images, ids=ids)
            matrix.save(stage_dir)

        self._run_stage(
            "embed",
            {"batch": "default"},
            [self.manifest_path, self.stage_dir("pretrain") / "encoder.pt"],
            body,
        )

    def embeddings(self) -> EmbeddingMatrix:
        stage_dir = self.stage_dir("embed")
        if not (stage_dir / "meta.json").exists():
            raise MissingArtifact(f"no embeddings under {stage_dir}")
        return EmbeddingMatrix.load(stage_dir)

    def stage_mine(self) -> None:
        def body(stage_dir: Path) -> None:
            matrix = self.embeddings()
            if self.config.mine.scope == "train":
                matrix = matrix.subset(sorted(self.split().train_ids))
            index = mine_neighbors(matrix, self.config.mine.k)
            index.save(stage_dir)

        self._run_stage(
            "mine",
            self.config.mine,
            [self.stage_dir("embed") / "meta.json", self.stage_dir("embed") / "vectors.f32"],
            body,
        )

    def stage_cluster(self) -> None:
        def body(stage_dir: Path) -> None:
            index = NeighborIndex.load(self.stage_dir("mine"))
            if self.config.cluster.finetune_encoder:
                ids, images = self.images()
                head, train_assignment = train_cluster_head(
                    self.embeddings(),
                    index,
                    self.config.cluster,
                    encoder_state=self.encoder_state(),
                    images=images,
                    image_ids=ids,
                )
                head.finetuned_encoder.save(stage_dir / "encoder.pt")
                full = assign(head, embed(head.finetuned_encoder, images=images, ids=ids))
            else:
                head, train_assignment = train_cluster_head(
                    self.embeddings(), index, self.config.cluster
                )
                full = assign(head, self.embeddings())
            head.save(stage_dir / "head.npz")
            full.save(stage_dir / "assignment")
            train_assignment.save(stage_dir / "assignment_train")
            (stage_dir / "loss_log.json").write_text(
                json.dumps(head.training_log, sort_keys=True, indent=2), encoding="utf-8"
            )
            # collapse diagnostic: how many of the C clusters ended up used
            summary = {
                "n_clusters": self.config.cluster.n_clusters,
                "filled_clusters_train": int(len(np.unique(train_assignment.hard_labels))),
                "filled_clusters_full": int(len(np.unique(full.hard_labels))),
            }
            (stage_dir / "summary.json").write_text(
                json.dumps(summary, sort_keys=True, indent=2), encoding="utf-8"
            )

        self._run_stage(
            "cluster",
            self.config.cluster,
            [
                self.stage_dir("embed") / "vectors.f32",
                self.stage_dir("mine") / "neighbors.tsv",
            ],
            body,
        )

    def stage_selflabel(self) -> None:
        cfg = self.config.selflabel
        if not cfg.enabled:
            return

        def body(stage_dir: Path) -> None:
            split = self.split()
            train_ids = sorted(split.train_ids)
            head = ClusterHead.load(self.stage_dir("cluster") / "head.npz")
            sl_config = SelfLabelConfig(
                threshold=cfg.threshold,
                strong_policy=aug.strong_policy(),
                epochs=cfg.epochs,
                batch_size=cfg.batch_size,
                learning_rate=cfg.learning_rate,
                seed=cfg.seed,
                update_encoder=cfg.update_encoder,
                update_head=cfg.update_head,
            )
            state, new_head, _, log = self_label_train(
                self.clustering_encoder_state(), head, self.image_rows(train_ids), train_ids, sl_config
            )
            state.save(stage_dir / "encoder.pt")
            new_head.save(stage_dir / "head.npz")
            ids, images = self.images()
            full = assign(new_head, embed(state, images=images, ids=ids))
            full.save(stage_dir / "assignment")
            (stage_dir / "confident_log.json").write_text(
                json.dumps(log, sort_keys=True, indent=2), encoding="utf-8"
            )

        self._run_stage(
            "selflabel",
            cfg,
            [
                self.stage_dir("cluster") / "head.npz",
                self.stage_dir("pretrain") / "encoder.pt",
            ],
            body,
        )

    def stage_kmeans(self) -> None:
        cfg = self.config.kmeans
        if not cfg.enabled:
            return
        c = cfg.n_clusters or self.config.cluster.n_clusters
        inputs = [self.manifest_path, self.run_dir / "split.json"]
        if cfg.features == "embeddings":
            inputs.append(self.stage_dir("embed") / "vectors.f32")

        def body(stage_dir: Path) -> None:
            split = self.split()
            train_ids = sorted(split.train_ids)
            ids, images = self.images()
            if cfg.features == "pixels":
                vectors_all = images.reshape(images.shape[0], -1)
                matrix = EmbeddingMatrix(ids=ids, vectors=vectors_all, normalized=False)
            else:
                matrix = self.embeddings()
            train_matrix = matrix.subset(train_ids)
            centers, history = kmeans_fit(train_matrix.vectors, c, cfg.seed)
            full = kmeans_assign(centers, matrix)
            full.save(stage_dir / "assignment")
            (stage_dir / "inertia.json").write_text(
                json.dumps(history, sort_keys=True), encoding="utf-8"
            )

        self._run_stage("kmeans", cfg, inputs, body)

    def _eval_ids(self, manifest: DatasetManifest) -> list[str]:
        split_cfg = self.config.evaluate.split
        if split_cfg == "all":
            return manifest.ids
        split = self.split()
        wanted = split.train_ids if split_cfg == "train" else split.test_ids
        return [i for i in manifest.ids if i in wanted]

    def stage_evaluate(self) -> None:
        sources = {"fusc": self.stage_dir("cluster") / "assignment"}
        if self.config.selflabel.enabled:
            sources["fusc_selflabel"] = self.stage_dir("selflabel") / "assignment"
        if self.config.kmeans.enabled:
            sources["kmeans"] = self.stage_dir("kmeans") / "assignment"
        inputs = [self.manifest_path]
        for path in sources.values():
            if not (path / "meta.json").exists():
                raise MissingArtifact(f"assignment artifact missing at {path}")
            inputs += [path / "probs.f32", path / "ids.txt"]

        def body(stage_dir: Path) -> None:
            manifest = self.working_manifest()
            eval_ids = self._eval_ids(manifest)
            results = {}
            for name, path in sources.items():
                assignment = SoftAssignment.load(path).subset(eval_ids)
                report = build_report(
                    assignment,
                    manifest,
                    merge=self.config.evaluate.merge,
                    eval_split=self.config.evaluate.split,
                )
                report.extra["assignment"] = name
                results[name] = report
            payload = {name: r.to_dict() for name, r in results.items()}
            (stage_dir / "report.json").write_text(
                json.dumps(payload, sort_keys=True, indent=2), encoding="utf-8"
            )
            text = "\n".join(
                f"== {name} ==\n{report.to_text()}" for name, report in sorted(results.items())
            )
            (stage_dir / "report.txt").write_text(text, encoding="utf-8")

        self._run_stage("evaluate", self.config.evaluate, inputs, body)

    def stage_export(self) -> None:
        source = (
            self.stage_dir("selflabel") / "assignment"
            if self.config.selflabel.enabled
            else self.stage_dir("cluster") / "assignment"
        )
        if not (source / "meta.json").exists():
            raise MissingArtifact(f"assignment artifact missing at {source}")

        def body(stage_dir: Path) -> None:
            assignment = SoftAssignment.load(source)
            manifest = self.working_manifest()
            export_cluster_manifest(assignment, manifest, stage_dir)

        self._run_stage(
            "export",
            {"source": str(source)},
            [self.manifest_path, source / "probs.f32", source / "ids.txt"],
            body,
        )

    # ---- driver ------------------------------------------------------------

    def execute(self, stages: Sequence[str] | None = None) -> Path:
        wanted = list(stages) if stages else list(STAGES)
        unknown = set(wanted) - set(STAGES)
        if unknown:
            raise PipelineError(f"unknown stages {sorted(unknown)}")
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.json").write_text(self.config.to_json(), encoding="utf-8")
        order = [s for s in STAGES if s in wanted]
        for stage in order:
            getattr(self, f"stage_{stage}")()
        return self.run_dir


def run(config: RunConfig, stages: Sequence[str] | None = None) -> Path:
    """Execute the requested stages in dependency order; returns the run dir."""
    return Run(config).execute(stages)


@dataclass
class ClusterManifestRow:
    image_id: str
    cluster_id: int
    confidence: float
    pixel_path: str
    pseudo_label: str


def export_cluster_manifest(
    assignment: SoftAssignment,
    manifest: DatasetManifest,
    out_dir: str | Path,
) -> Path:
    """Write the review hand-off: rows sorted by (cluster, ascending confidence).

    Likely outliers therefore lead each cluster. Also writes per-cluster
    summary stats and the label vocabulary for the review service.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for image_id, cluster, conf in zip(assignment.ids, assignment.hard_labels, assignment.confidence):
        try:
            rec = manifest.by_id(image_id)
        except KeyError as exc:
            raise IdMismatch(f"assignment id {image_id!r} not in manifest") from exc
        rows.append(
            ClusterManifestRow(
                image_id=image_id,
                cluster_id=int(cluster),
                confidence=float(conf),
                pixel_path=str(manifest.resolve_pixel_path(rec)),
                pseudo_label="" if rec.pseudo_label == UNLABELED else rec.pseudo_label,
            )
        )
    rows.sort(key=lambda r: (r.cluster_id, r.confidence, r.image_id))
    path = out_dir / "cluster_manifest.jsonl"
    with path.open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    summary = {}
    for r in rows:
        entry = summary.setdefault(
            r.cluster_id, {"size": 0, "mean_confidence": 0.0, "min_confidence": 1.0}
        )
        entry["size"] += 1
        entry["mean_confidence"] += r.confidence
        entry["min_confidence"] = min(entry["min_confidence"], r.confidence)
    for entry in summary.values():
        entry["mean_confidence"] = entry["mean_confidence"] / entry["size"]
    (out_dir / "cluster_summary.json").write_text(
        json.dumps(
            {
                "n_clusters": assignment.n_clusters,
                "clusters": {str(k): v for k, v in sorted(summary.items())},
                "vocabulary": list(manifest.label_vocabulary),
            },
            sort_keys=True,
            indent=2,
        ),
        encoding="utf-8",
    )
    return path


def generalization_eval(
    run_dir: str | Path,
    external_manifest: DatasetManifest,
    exclude_labels: Sequence[str] = (),
    merge: bool = False,
) -> EvaluationReport:
    """Frozen-weights evaluation on an external corpus.

    Applies the run's trained encoder and cluster head (self-labeled variant
    when present) to the external manifest without any fine-tuning; records
    drop out when their label is in exclude_labels.
    """
    run_dir = Path(run_dir)
    head_path = run_dir / "selflabel" / "head.npz"
    if not head_path.exists():
        head_path = run_dir / "cluster" / "head.npz"
    # newest model wins: self-labeled > head-stage fine-tuned > pretrained
    encoder_path = None
    for candidate in ("selflabel", "cluster", "pretrain"):
        path = run_dir / candidate / "encoder.pt"
        if path.exists():
            encoder_path = path
            break
    if encoder_path is None:
        raise MissingCheckpoint(f"no encoder checkpoint under {run_dir}")
    if not head_path.exists():
        raise MissingCheckpoint(f"no cluster-head checkpoint under {run_dir}")

    excluded = set(exclude_labels)
    keep = [r.image_id for r in external_manifest.records if r.pseudo_label not in excluded]
    if not keep:
        raise PipelineError("all external records excluded")
    subset = external_manifest.subset(keep)

    state = EncoderState.load(encoder_path)
    head = ClusterHead.load(head_path)
    matrix = embed(state, manifest=subset)
    assignment = assign(head, matrix)
    report = build_report(assignment, subset, merge=merge, eval_split="external")
    report.extra["excluded_labels"] = sorted(excluded)
    report.extra["source_run"] = str(run_dir)
    return report
