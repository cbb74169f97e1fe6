"""Burned-in text removal and pseudo-label canonicalization.

Text regions come from an OCR sidecar produced outside this package; masked
pixels are filled by iterative neighbor-mean diffusion (Jacobi sweeps over the
4-connected neighborhood) so the model cannot latch onto sonographer
annotations.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import cv2
import numpy as np

from fusc.data import DatasetManifest, ImageRecord, save_manifest


class PreprocessError(Exception):
    pass


class UnknownImage(PreprocessError):
    pass


class OutOfBoundsBox(PreprocessError):
    pass


class UnrecognizedLabel(PreprocessError):
    pass


@dataclass(frozen=True)
class TextMask:
    image_id: str
    boxes: tuple[tuple[int, int, int, int], ...]  # (x, y, w, h)

    def to_array(self, height: int, width: int) -> np.ndarray:
        mask = np.zeros((height, width), dtype=bool)
        for x, y, w, h in self.boxes:
            mask[y : y + h, x : x + w] = True
        return mask


@dataclass(frozen=True)
class InpaintConfig:
    max_iterations: int = 2000
    convergence_tol: float = 0.5  # max per-pixel change, intensity units

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be > 0")


@dataclass
class InpaintResult:
    image: np.ndarray
    converged: bool
    iterations: int
    residual: float


@dataclass(frozen=True)
class SidecarRow:
    image_id: str
    box: tuple[int, int, int, int]
    raw_text: str


def read_sidecar_rows(path: str | Path) -> list[SidecarRow]:
    """Parse the OCR sidecar: line-delimited JSON (image_id, x, y, w, h, raw_text)."""
    rows: list[SidecarRow] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rows.append(
                    SidecarRow(
                        image_id=str(obj["image_id"]),
                        box=(int(obj["x"]), int(obj["y"]), int(obj["w"]), int(obj["h"])),
                        raw_text=str(obj["raw_text"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise PreprocessError(f"{path}:{line_no}: bad sidecar row: {exc}") from exc
    return rows


def _image_shape(manifest: DatasetManifest, rec: ImageRecord) -> tuple[int, int]:
    if rec.width is not None and rec.height is not None:
        return rec.height, rec.width
    img = cv2.imread(str(manifest.resolve_pixel_path(rec)), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise UnknownImage(f"cannot read pixels for {rec.image_id!r}")
    return img.shape


def load_text_sidecar(path: str | Path, manifest: DatasetManifest) -> list[TextMask]:
    """Group sidecar boxes per image and validate them against image bounds."""
    rows = read_sidecar_rows(path)
    by_image: dict[str, list[tuple[int, int, int, int]]] = {}
    shapes: dict[str, tuple[int, int]] = {}
    for row in rows:
        try:
            rec = manifest.by_id(row.image_id)
        except KeyError as exc:
            raise UnknownImage(f"sidecar references unknown image {row.image_id!r}") from exc
        if row.image_id not in shapes:
            shapes[row.image_id] = _image_shape(manifest, rec)
        height, width = shapes[row.image_id]
        x, y, w, h = row.box
        if x < 0 or y < 0 or w < 0 or h < 0 or x + w > width or y + h > height:
            raise OutOfBoundsBox(
                f"box {row.box} exceeds {width}x{height} image {row.image_id!r}"
            )
        by_image.setdefault(row.image_id, []).append(row.box)
    return [TextMask(image_id=i, boxes=tuple(bs)) for i, bs in sorted(by_image.items())]


def inpaint_text(image: np.ndarray, mask: TextMask, cfg: InpaintConfig | None = None) -> InpaintResult:
    """Fill masked pixels by repeated 4-neighbor averaging until convergence.

    Pixels outside the mask are returned bit-for-bit unchanged. Masked pixels
    start at the mean of the mask's boundary values, so every iterate stays
    within the [min, max] of those boundary values. If the tolerance is not
    met within max_iterations the (non-converged) result is still returned,
    flagged with the residual.
    """
    cfg = cfg or InpaintConfig()
    if image.ndim != 2:
        raise PreprocessError("expected a 2-D grayscale raster")
    height, width = image.shape
    mask_arr = mask.to_array(height, width)
    if not mask_arr.any():
        return InpaintResult(image=image.copy(), converged=True, iterations=0, residual=0.0)

    work = image.astype(np.float64)
    # Dirichlet boundary: unmasked 4-neighbors of the masked region.
    grown = np.zeros_like(mask_arr)
    grown[1:, :] |= mask_arr[:-1, :]
    grown[:-1, :] |= mask_arr[1:, :]
    grown[:, 1:] |= mask_arr[:, :-1]
    grown[:, :-1] |= mask_arr[:, 1:]
    boundary = grown & ~mask_arr
    if boundary.any():
        work[mask_arr] = work[boundary].mean()
    # else: the mask covers the whole raster; diffuse from the original values.

    padded = np.pad(work, 1, mode="edge")
    pad_mask = np.pad(mask_arr, 1, mode="constant", constant_values=False)
    inner = (slice(1, -1), slice(1, -1))
    residual = np.inf
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        neighbor_sum = (
            padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:]
        )
        # Edge padding repeats the border pixel, which stands in for the
        # missing off-image neighbor.
        new_vals = neighbor_sum[mask_arr] / 4.0
        residual = float(np.abs(new_vals - padded[inner][mask_arr]).max())
        current = padded[inner]
        current[mask_arr] = new_vals
        padded[0, 1:-1] = padded[1, 1:-1]
        padded[-1, 1:-1] = padded[-2, 1:-1]
        padded[1:-1, 0] = padded[1:-1, 1]
        padded[1:-1, -1] = padded[1:-1, -2]
        if residual <= cfg.convergence_tol:
            break

    result = image.copy()
    filled = padded[inner][mask_arr]
    if np.issubdtype(image.dtype, np.integer):
        info = np.iinfo(image.dtype)
        filled = np.clip(np.rint(filled), info.min, info.max)
    result[mask_arr] = filled.astype(image.dtype)
    return InpaintResult(
        image=result,
        converged=residual <= cfg.convergence_tol,
        iterations=iterations,
        residual=residual,
    )


_ALIAS_TABLE: dict[str, str] | None = None
_NORMALIZE_RE = re.compile(r"[^A-Z0-9]+")


def _alias_table() -> dict[str, str]:
    global _ALIAS_TABLE
    if _ALIAS_TABLE is None:
        text = resources.files("fusc").joinpath("label_aliases.json").read_text(encoding="utf-8")
        _ALIAS_TABLE = json.loads(text)
    return _ALIAS_TABLE


def normalize_label_text(raw_text: str) -> str:
    return _NORMALIZE_RE.sub("", raw_text.upper())


def parse_pseudo_label(raw_text: str, aliases: dict[str, str] | None = None) -> str:
    """Map an OCR string onto the canonical view vocabulary via the alias table.

    Matching is case-insensitive and punctuation-tolerant; strings with no
    alias are rejected, never guessed.
    """
    table = aliases if aliases is not None else _alias_table()
    key = normalize_label_text(raw_text)
    if key in table:
        return table[key]
    raise UnrecognizedLabel(f"no alias for {raw_text!r}")


@dataclass
class RejectRow:
    image_id: str
    raw_text: str
    reason: str


def preprocess_corpus(
    manifest: DatasetManifest,
    sidecar_path: str | Path | None,
    out_dir: str | Path,
    cfg: InpaintConfig | None = None,
    aliases: dict[str, str] | None = None,
) -> tuple[DatasetManifest, list[RejectRow]]:
    """Inpaint all sidecar text boxes and re-derive pseudo labels from the text.

    Writes cleaned PNGs under out_dir/images plus a cleaned manifest and a
    rejects report (one row per unparseable sidecar text). Images without
    sidecar rows are copied through untouched.
    """
    cfg = cfg or InpaintConfig()
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    masks: dict[str, TextMask] = {}
    texts: dict[str, list[str]] = {}
    if sidecar_path is not None:
        for m in load_text_sidecar(sidecar_path, manifest):
            masks[m.image_id] = m
        for row in read_sidecar_rows(sidecar_path):
            texts.setdefault(row.image_id, []).append(row.raw_text)

    rejects: list[RejectRow] = []
    new_records: list[ImageRecord] = []
    non_converged = 0
    for rec in manifest.records:
        img = cv2.imread(str(manifest.resolve_pixel_path(rec)), cv2.IMREAD_GRAYSCALE)
        if img is None:
            raise UnknownImage(f"cannot read pixels for {rec.image_id!r}")
        mask = masks.get(rec.image_id)
        if mask is not None:
            result = inpaint_text(img, mask, cfg)
            img = result.image
            non_converged += not result.converged
        rel = f"images/{rec.image_id}.png"
        cv2.imwrite(str(out_dir / rel), img)

        label = rec.pseudo_label
        parsed = None
        for raw_text in texts.get(rec.image_id, []):
            try:
                candidate = parse_pseudo_label(raw_text, aliases)
                if parsed is None:
                    parsed = candidate
            except UnrecognizedLabel:
                rejects.append(RejectRow(rec.image_id, raw_text, "UnrecognizedLabel"))
        if parsed is not None:
            label = parsed
        new_records.append(
            ImageRecord(
                image_id=rec.image_id,
                patient_id=rec.patient_id,
                pixel_path=rel,
                pseudo_label=label,
                machine=rec.machine,
                width=img.shape[1],
                height=img.shape[0],
            )
        )

    cleaned = DatasetManifest(
        records=new_records,
        label_vocabulary=manifest.label_vocabulary,
        provenance={**manifest.provenance, "preprocessed": True, "non_converged": non_converged},
        root=out_dir,
    )
    save_manifest(cleaned, out_dir / "manifest.jsonl")
    with (out_dir / "rejects.jsonl").open("w", encoding="utf-8") as fh:
        for r in rejects:
            fh.write(
                json.dumps(
                    {"image_id": r.image_id, "raw_text": r.raw_text, "reason": r.reason},
                    sort_keys=True,
                )
                + "\n"
            )
    return cleaned, rejects
