"""Stochastic image augmentations for pretext training.

All ops work on float32 grayscale arrays in [0, 1] and are driven by an
explicit numpy Generator, so a given (image, seed) pair always reproduces
the same pair of views.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

OP_KINDS = ("crop_resize", "hflip", "brightness", "contrast", "gaussian_blur", "rotate")


@dataclass(frozen=True)
class OpSpec:
    """One stochastic transform: applied with probability `prob`, magnitude drawn
    uniformly from [lo, hi]."""

    kind: str
    prob: float
    lo: float = 0.0
    hi: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {self.kind!r}")
        if not (0.0 <= self.prob <= 1.0):
            raise ValueError("prob must be in [0,1]")
        if self.hi < self.lo:
            raise ValueError("hi must be >= lo")


@dataclass(frozen=True)
class AugmentationPolicy:
    ops: tuple[OpSpec, ...]
    strength: str = "standard"  # {"standard", "strong"}

    def op(self, kind: str) -> OpSpec | None:
        for spec in self.ops:
            if spec.kind == kind:
                return spec
        return None


def standard_policy() -> AugmentationPolicy:
    return AugmentationPolicy(
        ops=(
            OpSpec("crop_resize", prob=1.0, lo=0.7, hi=1.0),
            OpSpec("hflip", prob=0.5),
            OpSpec("brightness", prob=0.8, lo=-0.2, hi=0.2),
            OpSpec("contrast", prob=0.8, lo=0.7, hi=1.3),
            OpSpec("gaussian_blur", prob=0.3, lo=0.3, hi=1.0),
            OpSpec("rotate", prob=0.5, lo=-15.0, hi=15.0),
        ),
        strength="standard",
    )


def strong_policy() -> AugmentationPolicy:
    # Magnitude ranges contain the standard ones.
    return AugmentationPolicy(
        ops=(
            OpSpec("crop_resize", prob=1.0, lo=0.6, hi=1.0),
            OpSpec("hflip", prob=0.5),
            OpSpec("brightness", prob=0.9, lo=-0.3, hi=0.3),
            OpSpec("contrast", prob=0.9, lo=0.6, hi=1.4),
            OpSpec("gaussian_blur", prob=0.5, lo=0.3, hi=1.2),
            OpSpec("rotate", prob=0.6, lo=-20.0, hi=20.0),
        ),
        strength="strong",
    )


def identity_policy() -> AugmentationPolicy:
    return AugmentationPolicy(
        ops=tuple(OpSpec(kind, prob=0.0) for kind in OP_KINDS), strength="standard"
    )


def _apply_op(img: np.ndarray, spec: OpSpec, rng: np.random.Generator) -> np.ndarray:
    if rng.uniform() >= spec.prob:
        return img
    h, w = img.shape
    if spec.kind == "crop_resize":
        frac = rng.uniform(spec.lo, spec.hi)
        ch = max(4, int(round(h * frac)))
        cw = max(4, int(round(w * frac)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        crop = img[top : top + ch, left : left + cw]
        if (ch, cw) == (h, w):
            return crop.copy()
        return cv2.resize(crop, (w, h), interpolation=cv2.INTER_LINEAR)
    if spec.kind == "hflip":
        return np.ascontiguousarray(img[:, ::-1])
    if spec.kind == "brightness":
        delta = rng.uniform(spec.lo, spec.hi)
        return np.clip(img + np.float32(delta), 0.0, 1.0)
    if spec.kind == "contrast":
        gain = rng.uniform(spec.lo, spec.hi)
        mean = img.mean()
        return np.clip((img - mean) * np.float32(gain) + mean, 0.0, 1.0)
    if spec.kind == "gaussian_blur":
        sigma = float(rng.uniform(spec.lo, spec.hi))
        return cv2.GaussianBlur(img, ksize=(0, 0), sigmaX=sigma)
    if spec.kind == "rotate":
        angle = float(rng.uniform(spec.lo, spec.hi))
        mat = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, 1.0)
        return cv2.warpAffine(
            img, mat, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101
        )
    raise AssertionError(spec.kind)


def sample_view(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply the policy's ops in order with freshly drawn parameters."""
    out = image.astype(np.float32, copy=False)
    for spec in policy.ops:
        out = _apply_op(out, spec, rng)
    return np.ascontiguousarray(out, dtype=np.float32)


def augment(
    image: np.ndarray, policy: AugmentationPolicy, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Two independently sampled views of one image, deterministic per (image, seed)."""
    if image.size == 0:
        raise ValueError("image must be nonempty")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    return sample_view(image, policy, rng), sample_view(image, policy, rng)


def view_seed(base_seed: int, epoch: int, index: int) -> int:
    """Stable per-(epoch, sample) augmentation seed."""
    ss = np.random.SeedSequence([int(base_seed), int(epoch), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
