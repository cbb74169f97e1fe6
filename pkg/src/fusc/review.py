"""Cluster-review service: browse clusters, record corrections, export labels.

State is event-sourced: every correction and cluster-naming event is appended
(and fsynced) to a JSONL log before it is acknowledged, so replaying the log
from an empty state always reproduces the effective labels.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import cv2
from fastapi import FastAPI
from fastapi.responses import FileResponse, PlainTextResponse, JSONResponse
from pydantic import BaseModel

from fusc.data import UNLABELED, VIEW_LABELS, DatasetManifest, ImageRecord

ACTIONS = ("relabel", "move_to_cluster", "flag_outlier")
THUMBNAIL_MAX_EDGE = 256


class ReviewError(Exception):
    pass


@dataclass
class ClusterManifestEntry:
    image_id: str
    cluster_id: int
    confidence: float
    pixel_path: str
    pseudo_label: str


@dataclass
class Correction:
    image_id: str
    action: str  # one of ACTIONS
    label: str | None = None
    cluster_id: int | None = None
    annotator: str = ""
    timestamp: str = ""


def load_cluster_manifest(path: str | Path) -> list[ClusterManifestEntry]:
    entries = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            entries.append(
                ClusterManifestEntry(
                    image_id=str(row["image_id"]),
                    cluster_id=int(row["cluster_id"]),
                    confidence=float(row["confidence"]),
                    pixel_path=str(row["pixel_path"]),
                    pseudo_label=str(row.get("pseudo_label", "")),
                )
            )
    if not entries:
        raise ReviewError(f"cluster manifest {path} is empty")
    return entries


class ReviewState:
    """Effective review state = manifest + replayed correction log.

    Label precedence per image: latest relabel/flag correction, else the name
    assigned to its (possibly moved) cluster, else its original pseudo label.
    """

    def __init__(self, entries: list[ClusterManifestEntry], log_path: str | Path,
                 vocabulary: tuple[str, ...] = VIEW_LABELS):
        self.entries = {e.image_id: e for e in entries}
        if len(self.entries) != len(entries):
            raise ReviewError("duplicate image_id in cluster manifest")
        self.vocabulary = tuple(vocabulary)
        self.cluster_ids = sorted({e.cluster_id for e in entries})
        self.log_path = Path(log_path)
        self._lock = threading.Lock()
        self._corrections: dict[str, Correction] = {}
        self._cluster_names: dict[int, str] = {}
        if self.log_path.exists():
            self._replay()

    def _replay(self) -> None:
        with self.log_path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                if event["type"] == "correction":
                    c = Correction(**{k: v for k, v in event.items() if k != "type"})
                    self._apply_correction(c)
                elif event["type"] == "cluster_name":
                    self._cluster_names[int(event["cluster_id"])] = event["name"]

    def _apply_correction(self, c: Correction) -> None:
        self._corrections[c.image_id] = c  # later events supersede earlier ones

    def _append_event(self, event: dict) -> None:
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with self.log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    # ---- queries ------------------------------------------------------------

    def effective_cluster(self, image_id: str) -> int:
        c = self._corrections.get(image_id)
        if c is not None and c.action == "move_to_cluster":
            return int(c.cluster_id)
        return self.entries[image_id].cluster_id

    def effective_label(self, image_id: str) -> str:
        c = self._corrections.get(image_id)
        if c is not None:
            if c.action == "relabel":
                return c.label
            if c.action == "flag_outlier":
                return ""
        name = self._cluster_names.get(self.effective_cluster(image_id))
        if name:
            return name
        return self.entries[image_id].pseudo_label

    def known_clusters(self) -> list[int]:
        moved = {
            int(c.cluster_id)
            for c in self._corrections.values()
            if c.action == "move_to_cluster"
        }
        return sorted(set(self.cluster_ids) | moved)

    def cluster_members(self, cluster_id: int) -> list[ClusterManifestEntry]:
        return [e for e in self.entries.values() if self.effective_cluster(e.image_id) == cluster_id]

    def list_clusters(self) -> list[dict]:
        summaries = []
        for cid in self.known_clusters():
            members = self.cluster_members(cid)
            confidences = [m.confidence for m in members]
            labels: dict[str, int] = {}
            for m in members:
                label = m.pseudo_label
                if label:
                    labels[label] = labels.get(label, 0) + 1
            top = sorted(labels.items(), key=lambda kv: (-kv[1], kv[0]))[:3]
            summaries.append(
                {
                    "cluster_id": cid,
                    "size": len(members),
                    "mean_confidence": sum(confidences) / len(confidences) if confidences else None,
                    "min_confidence": min(confidences) if confidences else None,
                    "name": self._cluster_names.get(cid),
                    "top_labels": [{"label": l, "count": n} for l, n in top],
                }
            )
        return summaries

    def cluster_items(self, cluster_id: int, page: int, page_size: int, sort: str) -> dict:
        if cluster_id not in self.known_clusters():
            raise KeyError(cluster_id)
        members = self.cluster_members(cluster_id)
        reverse = sort == "confidence_desc"
        members.sort(key=lambda e: (e.confidence, e.image_id), reverse=reverse)
        start = page * page_size
        chunk = members[start : start + page_size]
        items = [
            {
                "image_id": e.image_id,
                "confidence": e.confidence,
                "pseudo_label": e.pseudo_label,
                "effective_label": self.effective_label(e.image_id),
                "flagged": (
                    self._corrections.get(e.image_id) is not None
                    and self._corrections[e.image_id].action == "flag_outlier"
                ),
                "thumbnail_url": f"/thumbnails/{e.image_id}",
            }
            for e in chunk
        ]
        return {"cluster_id": cluster_id, "page": page, "page_size": page_size,
                "total": len(members), "items": items}

    # ---- mutations ----------------------------------------------------------

    def submit_correction(self, correction: Correction) -> int:
        if correction.image_id not in self.entries:
            raise KeyError(correction.image_id)
        if correction.action not in ACTIONS:
            raise ValueError(f"unknown action {correction.action!r}")
        if correction.action == "relabel":
            if correction.label not in self.vocabulary:
                raise ValueError(f"label {correction.label!r} not in vocabulary")
        if correction.action == "move_to_cluster":
            if correction.cluster_id is None or correction.cluster_id < 0:
                raise ValueError("move_to_cluster needs a non-negative cluster_id")
        if not correction.timestamp:
            correction.timestamp = datetime.now(timezone.utc).isoformat()
        with self._lock:
            self._append_event({"type": "correction", **correction.__dict__})
            self._apply_correction(correction)
            return len(self._corrections)

    def name_cluster(self, cluster_id: int, name: str) -> None:
        if cluster_id not in self.known_clusters():
            raise KeyError(cluster_id)
        if name not in self.vocabulary:
            raise ValueError(f"cluster name {name!r} must be a vocabulary label")
        with self._lock:
            self._append_event(
                {
                    "type": "cluster_name",
                    "cluster_id": cluster_id,
                    "name": name,
                    "timestamp": datetime.now(timezone.utc).isoformat(),
                }
            )
            self._cluster_names[cluster_id] = name

    def correction_count(self) -> int:
        return len(self._corrections)

    # ---- export -------------------------------------------------------------

    def export_manifest(self) -> DatasetManifest:
        records = []
        for e in sorted(self.entries.values(), key=lambda e: e.image_id):
            label = self.effective_label(e.image_id)
            records.append(
                ImageRecord(
                    image_id=e.image_id,
                    patient_id="",
                    pixel_path=e.pixel_path,
                    pseudo_label=label if label else UNLABELED,
                    machine="",
                )
            )
        return DatasetManifest(records=records, label_vocabulary=self.vocabulary)


class CorrectionBody(BaseModel):
    image_id: str
    action: str
    label: str | None = None
    cluster_id: int | None = None
    annotator: str = ""


class ClusterNameBody(BaseModel):
    name: str


def create_app(state: ReviewState, thumb_dir: str | Path | None = None) -> FastAPI:
    """HTTP+JSON facade over a ReviewState."""
    app = FastAPI(title="fusc cluster review")
    thumb_dir = Path(thumb_dir) if thumb_dir else Path(state.log_path).parent / "thumbnails"

    @app.get("/clusters")
    def clusters():
        return state.list_clusters()

    @app.get("/clusters/{cluster_id}/items")
    def cluster_items(cluster_id: int, page: int = 0, page_size: int = 50,
                      sort: str = "confidence_asc"):
        if sort not in ("confidence_asc", "confidence_desc"):
            return JSONResponse({"error": f"bad sort {sort!r}"}, status_code=400)
        if page < 0 or page_size < 1:
            return JSONResponse({"error": "bad pagination"}, status_code=400)
        try:
            return state.cluster_items(cluster_id, page, page_size, sort)
        except KeyError:
            return JSONResponse({"error": f"unknown cluster {cluster_id}"}, status_code=404)

    @app.post("/corrections")
    def corrections(body: CorrectionBody):
        correction = Correction(
            image_id=body.image_id,
            action=body.action,
            label=body.label,
            cluster_id=body.cluster_id,
            annotator=body.annotator,
        )
        try:
            count = state.submit_correction(correction)
        except KeyError:
            return JSONResponse({"error": f"unknown image {body.image_id!r}"}, status_code=404)
        except ValueError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        return {"acknowledged": True, "corrections": count}

    @app.post("/clusters/{cluster_id}/name")
    def cluster_name(cluster_id: int, body: ClusterNameBody):
        try:
            state.name_cluster(cluster_id, body.name)
        except KeyError:
            return JSONResponse({"error": f"unknown cluster {cluster_id}"}, status_code=404)
        except ValueError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        return {"acknowledged": True}

    @app.get("/export")
    def export():
        manifest = state.export_manifest()
        lines = []
        for rec in manifest.records:
            lines.append(
                json.dumps(
                    {
                        "image_id": rec.image_id,
                        "patient_id": rec.patient_id,
                        "pixel_path": rec.pixel_path,
                        "pseudo_label": rec.pseudo_label,
                        "machine": rec.machine,
                    },
                    sort_keys=True,
                )
            )
        return PlainTextResponse(
            "\n".join(lines) + "\n",
            headers={"Content-Disposition": "attachment; filename=corrected_manifest.jsonl"},
        )

    @app.get("/export/summary")
    def export_summary():
        return {"corrections": state.correction_count()}

    @app.get("/thumbnails/{image_id}")
    def thumbnail(image_id: str):
        entry = state.entries.get(image_id)
        if entry is None:
            return JSONResponse({"error": f"unknown image {image_id!r}"}, status_code=404)
        thumb_dir.mkdir(parents=True, exist_ok=True)
        cached = thumb_dir / f"{image_id}.png"
        if not cached.exists():
            img = cv2.imread(entry.pixel_path, cv2.IMREAD_GRAYSCALE)
            if img is None:
                return JSONResponse({"error": f"cannot read pixels for {image_id!r}"}, status_code=404)
            h, w = img.shape
            scale = THUMBNAIL_MAX_EDGE / max(h, w)
            if scale < 1.0:
                img = cv2.resize(img, (int(w * scale), int(h * scale)), interpolation=cv2.INTER_AREA)
            cv2.imwrite(str(cached), img)
        return FileResponse(cached, media_type="image/png")

    return app


def serve(
    cluster_manifest: str | Path,
    port: int = 8765,
    host: str = "127.0.0.1",
    log_path: str | Path | None = None,
    vocabulary: tuple[str, ...] = VIEW_LABELS,
) -> None:
    """Run the review service over a cluster manifest file."""
    import uvicorn

    entries = load_cluster_manifest(cluster_manifest)
    log_path = Path(log_path) if log_path else Path(cluster_manifest).parent / "corrections.jsonl"
    state = ReviewState(entries, log_path, vocabulary)
    app = create_app(state)
    uvicorn.run(app, host=host, port=port, log_level="info")
