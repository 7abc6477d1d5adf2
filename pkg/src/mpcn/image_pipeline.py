"""Dataset image transforms: canonicalization to 256x256, mean image,
train/eval cropping, class oversampling, and the bilateral filter feeding
the second network path.

Convention: images travel as (H, W, 3) arrays — uint8 before mean
subtraction, float32 after — and leave for the network as (3, crop, crop)
float32.  All randomness comes in through explicit numpy Generators so a
caller can partition seed streams per image index.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DatasetError, ParameterError, ShapeError
from .imageio import read_image, resolve_path

CANONICAL_SIDE = 256


def round_half_up_u8(values):
    """Float intensities -> uint8 with ties rounding up (0.5 -> 1)."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def resize_bilinear(img, out_h, out_w):
    """Bilinear resample of an (H, W, C) image to (out_h, out_w, C), float64.

    Sample positions use half-pixel centers: destination pixel i maps to
    source coordinate (i + 0.5) * scale - 0.5, clamped to the image.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if out_h == h and out_w == w:
        return img.copy()

    def axis_coords(n_in, n_out):
        coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0, n_in - 1)
        lo = np.floor(coords).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def canonicalize(img):
    """Any-size RGB uint8 -> 256x256x3 uint8: scale shorter side to 256
    (preserving aspect ratio), then center-crop."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H,W,3) image, got {img.shape}")
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ShapeError(f"degenerate image {h}x{w}")
    short = min(h, w)
    if short != CANONICAL_SIDE:
        scale = CANONICAL_SIDE / short
        new_h = max(CANONICAL_SIDE, int(round(h * scale)))
        new_w = max(CANONICAL_SIDE, int(round(w * scale)))
        img = round_half_up_u8(resize_bilinear(img, new_h, new_w))
        h, w = new_h, new_w
    top = (h - CANONICAL_SIDE) // 2
    left = (w - CANONICAL_SIDE) // 2
    return np.ascontiguousarray(img[top:top + CANONICAL_SIDE, left:left + CANONICAL_SIDE])


def load_canonical(manifest_path, row):
    """Read + canonicalize one manifest row's image."""
    return canonicalize(read_image(resolve_path(manifest_path, row.path)))


def compute_mean(images):
    """Per-position per-channel mean over an iterable of 256x256x3 uint8
    images; raises on an empty iterable."""
    total = np.zeros((CANONICAL_SIDE, CANONICAL_SIDE, 3), dtype=np.float64)
    count = 0
    for img in images:
        if img.shape != total.shape:
            raise ShapeError(f"mean expects canonical 256x256x3 inputs, got {img.shape}")
        total += img
        count += 1
    if count == 0:
        raise DatasetError("cannot compute a mean image over zero training images")
    return total / count


def _check_crop(side, crop):
    if not 1 <= crop <= side:
        raise ParameterError(f"crop {crop} outside [1, {side}]")


def sample_augment(side, crop, rng):
    """Draw one augmentation: (top, left, flip).  Offsets are uniform over
    [0, side-crop]; flip is a fair coin."""
    _check_crop(side, crop)
    top = int(rng.integers(0, side - crop + 1))
    left = int(rng.integers(0, side - crop + 1))
    return top, left, bool(rng.random() < 0.5)


def apply_augment(img, crop, top, left, flip):
    """Apply a sampled augmentation -> (3, crop, crop) float32.  Splitting
    sample from apply lets a multi-path loader cut the source image and its
    filtered twin identically."""
    patch = img[top:top + crop, left:left + crop]
    if flip:
        patch = patch[:, ::-1]
    return np.ascontiguousarray(patch.transpose(2, 0, 1), dtype=np.float32)


def augment_train(img, crop, rng):
    """Random crop + 50% horizontal flip -> (3, crop, crop) float32.

    `img` is a mean-subtracted (S, S, 3) float image; the crop offset is
    uniform over [0, S-crop] per axis.
    """
    side = img.shape[0]
    return apply_augment(img, crop, *sample_augment(side, crop, rng))


def center_crop(img, crop):
    """Deterministic centered crop -> (3, crop, crop) float32; the offset
    is floor((S - crop) / 2) on each axis."""
    side = img.shape[0]
    _check_crop(side, crop)
    off = (side - crop) // 2
    patch = img[off:off + crop, off:off + crop]
    return np.ascontiguousarray(patch.transpose(2, 0, 1), dtype=np.float32)


def hflip(img):
    """Horizontal mirror of an (H, W, C) image."""
    return np.ascontiguousarray(img[:, ::-1])


def oversample(class_images, target, rng):
    """Pad a class to `target` images by appending horizontally flipped
    copies of uniformly chosen originals."""
    if not class_images:
        raise DatasetError("cannot oversample an empty class")
    if target < len(class_images):
        raise ParameterError(f"target {target} below existing count {len(class_images)}")
    out = list(class_images)
    n = len(class_images)
    while len(out) < target:
        out.append(hflip(class_images[int(rng.integers(0, n))]))
    return out


@dataclass
class BilateralParams:
    """half_kernel in pixels; sigma_spatial in pixels; sigma_range on the
    [0, 1] intensity scale."""
    half_kernel: int = 5
    sigma_spatial: float = 3.0
    sigma_range: float = 0.15

    def __post_init__(self):
        if self.half_kernel < 1:
            raise ParameterError(f"half_kernel {self.half_kernel} must be >= 1")
        if self.sigma_spatial <= 0 or self.sigma_range <= 0:
            raise ParameterError("bilateral sigmas must be positive")


def bilateral_filter(img, params=None):
    """Edge-preserving smoother over a (2*half_kernel+1)^2 window.

    Each channel is treated independently on a [0, 1] intensity scale:

        out(x) = sum_y w(x, y) * in(y) / sum_y w(x, y)
        w(x, y) = exp(-|x - y|^2 / (2 sigma_s^2))
                * exp(-(in(x) - in(y))^2 / (2 sigma_r^2))

    Borders clamp to the edge pixel.  Implemented as a loop over the window
    offsets with whole-image shifts, so the cost is (2k+1)^2 vector passes
    rather than per-pixel Python work.
    """
    p = params or BilateralParams()
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H,W,3) image, got {img.shape}")
    h, w = img.shape[:2]
    k = p.half_kernel
    chans = img.astype(np.float64) / 255.0
    padded = np.pad(chans, ((k, k), (k, k), (0, 0)), mode="edge")
    inv_2ss = 1.0 / (2.0 * p.sigma_spatial ** 2)
    inv_2sr = 1.0 / (2.0 * p.sigma_range ** 2)
    acc = np.zeros_like(chans)
    norm = np.zeros_like(chans)
    for dy in range(-k, k + 1):
        for dx in range(-k, k + 1):
            spatial = np.exp(-(dy * dy + dx * dx) * inv_2ss)
            shifted = padded[k + dy:k + dy + h, k + dx:k + dx + w]
            weight = spatial * np.exp(-((chans - shifted) ** 2) * inv_2sr)
            acc += weight * shifted
            norm += weight
    return round_half_up_u8(acc / norm * 255.0)
