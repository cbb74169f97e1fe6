"""Procedural benchmark corpus: 5 view-like shape classes under heavy
acquisition nuisance (gain/offset, speckle, pose jitter) plus burned-in text.

The nuisance is deliberately brightness-dominated so that raw-pixel distances
are a weak signal, while shape identity survives the augmentation family used
by the pretext task.
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from fusc.data import DatasetManifest, ImageRecord, save_manifest

# The 5 synthetic classes reuse canonical view names so the full label
# machinery (aliases, superclasses) is exercised end to end.
BENCHMARK_VIEWS = ("Brain", "FourChamber", "Abdomen", "Femur", "Spine")
BENCHMARK_TEXTS = {"Brain": "BRAIN", "FourChamber": "4CH", "Abdomen": "ABDOMEN", "Femur": "FEMUR", "Spine": "SPINE"}


def class_counts(n_images: int, weights: tuple[int, ...]) -> list[int]:
    """Largest-remainder apportionment of n_images across the weights."""
    total = sum(weights)
    exact = [n_images * w / total for w in weights]
    counts = [int(x) for x in exact]
    remainders = sorted(range(len(weights)), key=lambda i: exact[i] - counts[i], reverse=True)
    for i in remainders[: n_images - sum(counts)]:
        counts[i] += 1
    return counts


def _shape_canvas(class_idx: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Foreground geometry for one class, drawn on a dark canvas in [0,1]."""
    canvas = np.zeros((size, size), dtype=np.float32)
    c = size // 2
    cx = c + int(rng.integers(-size // 8, size // 8 + 1))
    cy = c + int(rng.integers(-size // 8, size // 8 + 1))
    scale = float(rng.uniform(0.8, 1.2))
    r = int(round(size * 0.28 * scale))

    if class_idx == 0:  # filled disk
        cv2.circle(canvas, (cx, cy), r, 0.9, thickness=-1)
    elif class_idx == 1:  # annulus with a clear hole
        cv2.circle(canvas, (cx, cy), r, 0.9, thickness=-1)
        cv2.circle(canvas, (cx, cy), max(3, int(r * 0.62)), 0.0, thickness=-1)
    elif class_idx == 2:  # horizontal bands
        period = max(4, int(round(size * 0.2 * scale)))
        for y in range(0, size, period):
            canvas[y : y + max(2, period // 2), :] = 0.85
    elif class_idx == 3:  # vertical bands
        period = max(4, int(round(size * 0.2 * scale)))
        for x in range(0, size, period):
            canvas[:, x : x + max(2, period // 2)] = 0.85
    elif class_idx == 4:  # diagonal cross
        t = max(3, size // 8)
        cv2.line(canvas, (2, 2), (size - 3, size - 3), 0.9, thickness=t)
        cv2.line(canvas, (size - 3, 2), (2, size - 3), 0.9, thickness=t)
    else:
        raise ValueError(f"no shape for class {class_idx}")

    angle = float(rng.uniform(-10, 10))
    mat = cv2.getRotationMatrix2D((size / 2, size / 2), angle, 1.0)
    return cv2.warpAffine(canvas, mat, (size, size), flags=cv2.INTER_LINEAR)


def render_phantom(class_idx: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One uint8 image: class shape + brightness-dominated nuisance + speckle."""
    img = _shape_canvas(class_idx, size, rng)
    img += 0.12  # tissue background
    gain = float(rng.uniform(0.35, 1.0))
    offset = float(rng.uniform(0.0, 0.12))
    img = img * gain + offset
    img += rng.normal(0.0, rng.uniform(0.02, 0.06), size=img.shape).astype(np.float32)
    return (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def _burn_text(img: np.ndarray, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Bright glyph-like block in the top band, mimicking sonographer text."""
    size = img.shape[0]
    w = int(rng.integers(size // 3, size // 2))
    h = max(3, size // 10)
    x = int(rng.integers(1, size - w - 1))
    y = int(rng.integers(1, max(2, size // 8)))
    block = (rng.uniform(0.0, 1.0, size=(h, w)) > 0.45).astype(np.uint8) * 255
    img[y : y + h, x : x + w] = np.maximum(img[y : y + h, x : x + w], block)
    return x, y, w, h


def make_benchmark_corpus(
    out_dir: str | Path,
    n_images: int = 2500,
    image_size: int = 32,
    weights: tuple[int, ...] = (5, 4, 3, 2, 1),
    n_patients: int = 50,
    seed: int = 0,
    with_text: bool = True,
) -> tuple[Path, Path | None]:
    """Generate the benchmark corpus; returns (manifest path, sidecar path)."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    counts = class_counts(n_images, weights)
    class_of: list[int] = []
    for idx, count in enumerate(counts):
        class_of += [idx] * count
    class_of = [int(class_of[i]) for i in rng.permutation(n_images)]

    records = []
    sidecar_rows = []
    for i, cls in enumerate(class_of):
        image_id = f"img{i:05d}"
        img = render_phantom(cls, image_size, rng)
        if with_text:
            x, y, w, h = _burn_text(img, rng)
            sidecar_rows.append(
                {"image_id": image_id, "x": x, "y": y, "w": w, "h": h,
                 "raw_text": BENCHMARK_TEXTS[BENCHMARK_VIEWS[cls]]}
            )
            if rng.uniform() < 0.02:  # occasional OCR junk row -> rejects report
                sidecar_rows.append(
                    {"image_id": image_id, "x": x, "y": y, "w": w, "h": h,
                     "raw_text": f"FR {int(rng.integers(10, 99))}HZ"}
                )
        rel = f"images/{image_id}.png"
        cv2.imwrite(str(out_dir / rel), img)
        records.append(
            ImageRecord(
                image_id=image_id,
                patient_id=f"pat{int(rng.integers(0, n_patients)):03d}",
                pixel_path=rel,
                pseudo_label=BENCHMARK_VIEWS[cls],
                machine=f"machine{int(rng.integers(0, 3))}",
                width=image_size,
                height=image_size,
            )
        )

    manifest = DatasetManifest(
        records=records,
        provenance={"generator": "fusc-synthetic-benchmark", "seed": seed, "weights": list(weights)},
        root=out_dir,
    )
    manifest_path = save_manifest(manifest, out_dir / "manifest.jsonl")

    sidecar_path = None
    if with_text:
        sidecar_path = out_dir / "sidecar.jsonl"
        with sidecar_path.open("w", encoding="utf-8") as fh:
            for row in sidecar_rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest_path, sidecar_path
