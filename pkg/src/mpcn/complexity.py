"""Image-complexity scoring and the complexity-based dataset split.

A 256x256 image is converted to grayscale, decomposed one level with the
orthonormal Haar wavelet, and scored by counting detail coefficients whose
normalized magnitude exceeds a threshold.  Classes are then sorted by that
score and cut into equal-size groups, simplest first.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DatasetError, ShapeError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def to_grayscale(img):
    """(H, W, 3) uint8 RGB -> (H, W) float64 luma in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H,W,3) image, got {img.shape}")
    r, g, b = (img[..., i].astype(np.float64) for i in range(3))
    return (LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b) / 255.0


@dataclass
class WaveletDetail:
    """The three high-frequency subbands of a one-level 2D transform."""
    horizontal: np.ndarray
    vertical: np.ndarray
    diagonal: np.ndarray

    def stacked(self):
        return np.stack([self.horizontal, self.vertical, self.diagonal])


def haar_level1(gray):
    """One level of the orthonormal 2D Haar transform.

    Each non-overlapping 2x2 block {a, b; c, d} maps to
        approx = (a + b + c + d) / 2      horizontal = (a + b - c - d) / 2
        vertical = (a - b + c - d) / 2    diagonal = (a - b - c + d) / 2
    so the transform preserves total energy exactly.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ShapeError(f"expected a 2-D grayscale array, got shape {gray.shape}")
    h, w = gray.shape
    if h % 2 or w % 2 or h == 0 or w == 0:
        raise ShapeError(f"wavelet transform needs even dimensions, got {h}x{w}")
    a = gray[0::2, 0::2]
    b = gray[0::2, 1::2]
    c = gray[1::2, 0::2]
    d = gray[1::2, 1::2]
    approx = (a + b + c + d) / 2.0
    detail = WaveletDetail(horizontal=(a + b - c - d) / 2.0,
                           vertical=(a - b + c - d) / 2.0,
                           diagonal=(a - b - c + d) / 2.0)
    return approx, detail


def complexity_index(detail, threshold=0.5):
    """Count of detail coefficients whose magnitude, normalized by the
    per-image maximum across all three subbands, strictly exceeds
    `threshold`.  A perfectly flat image (max 0) scores 0."""
    mags = np.abs(detail.stacked())
    if mags.size == 0:
        raise ShapeError("empty detail subbands")
    peak = mags.max()
    if peak == 0.0:
        return 0
    return int(np.count_nonzero(mags / peak > threshold))


def score_image(img, threshold=0.5):
    """Complexity index of an RGB uint8 image (grayscale + Haar + count)."""
    _, detail = haar_level1(to_grayscale(img))
    return complexity_index(detail, threshold)


@dataclass
class ComplexityScore:
    image_id: str
    label: int
    c: int

    def __post_init__(self):
        if self.c < 0:
            raise ValueError(f"complexity index must be non-negative, got {self.c}")


def partition_groups(scores, n_groups=4, per_group=None):
    """Split each class into `n_groups` complexity bands.

    `scores` maps class label -> list of ComplexityScore.  Within a class,
    images are sorted ascending by (C, image_id) — a stable, deterministic
    order — and rank r lands in group r // per_group + 1.  Images ranked
    beyond n_groups * per_group (the most complex ones) are dropped, which
    is how an uneven validation class is trimmed to size.

    Returns {image_id: group} with groups numbered 1 (simplest) through
    n_groups (most complex).
    """
    if per_group is None:
        sizes = {len(v) for v in scores.values()}
        per_group = min(sizes) // n_groups if sizes else 0
    if per_group < 1:
        raise DatasetError(f"per_group must be >= 1, got {per_group}")
    keep = n_groups * per_group
    assignment = {}
    for label in sorted(scores):
        entries = scores[label]
        if len(entries) < keep:
            raise DatasetError(
                f"class {label} has {len(entries)} images, needs {keep} "
                f"for {n_groups} groups of {per_group}")
        ranked = sorted(entries, key=lambda s: (s.c, s.image_id))
        for rank, entry in enumerate(ranked[:keep]):
            assignment[entry.image_id] = rank // per_group + 1
    return assignment
