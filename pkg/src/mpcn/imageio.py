"""Image decoding/encoding and the small CSV formats around datasets.

Images load as (H, W, 3) uint8 RGB arrays.  Two container formats are
supported, dispatched on magic bytes: binary PPM (P6), decoded here, and
PNG, decoded through Pillow.  Grayscale/palette/CMYK sources are converted
to RGB on the way in.

The dataset manifest is a UTF-8 CSV with header ``path,label,split``
(split is ``train`` or ``val``); an optional fourth ``group`` column (1-4)
appears on manifests produced by the complexity split.
"""

import csv
import io
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DatasetError, DecodeError

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


# ---------------------------------------------------------------------------
# PPM (P6)

def _read_ppm_token(buf):
    """Next whitespace-delimited token, skipping '#' comments."""
    token = b""
    while True:
        ch = buf.read(1)
        if ch == b"":
            raise DecodeError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = buf.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def decode_ppm(data):
    buf = io.BytesIO(data)
    if buf.read(2) != b"P6":
        raise DecodeError("not a P6 PPM")
    width = int(_read_ppm_token(buf))
    height = int(_read_ppm_token(buf))
    maxval = int(_read_ppm_token(buf))
    if width < 1 or height < 1:
        raise DecodeError(f"bad PPM dimensions {width}x{height}")
    if maxval != 255:
        raise DecodeError(f"only maxval 255 PPM supported, got {maxval}")
    raster = buf.read(width * height * 3)
    if len(raster) != width * height * 3:
        raise DecodeError("truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(pixels):
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DecodeError(f"PPM writer expects (H,W,3) uint8, got {pixels.shape}")
    h, w = pixels.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


# ---------------------------------------------------------------------------
# Generic image load/save

def read_image(path):
    """(H, W, 3) uint8 RGB from a PNG or P6 PPM file."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
            fh.seek(0)
            data = fh.read()
    except OSError as exc:
        raise DecodeError(f"cannot read image {path}: {exc}") from exc
    if not head:
        raise DecodeError(f"empty image file {path}")
    if head.startswith(b"P6"):
        return decode_ppm(data)
    if head.startswith(PNG_MAGIC[: len(head)]):
        try:
            with Image.open(io.BytesIO(data)) as img:
                return np.asarray(img.convert("RGB"), dtype=np.uint8)
        except Exception as exc:
            raise DecodeError(f"broken PNG {path}: {exc}") from exc
    raise DecodeError(f"unsupported image format in {path} (want PNG or P6 PPM)")


def write_image(path, pixels):
    """Write (H, W, 3) uint8 as PPM or PNG depending on the extension."""
    if str(path).lower().endswith(".png"):
        Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), "RGB").save(path)
    else:
        with open(path, "wb") as fh:
            fh.write(encode_ppm(pixels))


# ---------------------------------------------------------------------------
# Manifests

SPLITS = ("train", "val")


@dataclass
class ManifestRow:
    path: str
    label: int
    split: str
    group: int | None = None


def read_manifest(path):
    """Parse and validate a dataset manifest CSV."""
    rows = []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot open manifest {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"empty manifest {path}")
        if header[:3] != ["path", "label", "split"]:
            raise DatasetError(f"manifest header must start with path,label,split; got {header}")
        has_group = len(header) > 3 and header[3] == "group"
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) < 3:
                raise DatasetError(f"{path}:{lineno}: expected at least 3 fields")
            try:
                label = int(rec[1])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: label {rec[1]!r} is not an integer") from None
            if label < 0:
                raise DatasetError(f"{path}:{lineno}: negative label {label}")
            if rec[2] not in SPLITS:
                raise DatasetError(f"{path}:{lineno}: split must be one of {SPLITS}, got {rec[2]!r}")
            group = None
            if has_group and len(rec) > 3 and rec[3] != "":
                group = int(rec[3])
            rows.append(ManifestRow(rec[0], label, rec[2], group))
    return rows


def write_manifest(path, rows, with_group=False):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "split"] + (["group"] if with_group else []))
        for row in rows:
            rec = [row.path, row.label, row.split]
            if with_group:
                rec.append("" if row.group is None else row.group)
            writer.writerow(rec)


def resolve_path(manifest_path, image_path):
    """Manifest-relative image path -> loadable path."""
    if os.path.isabs(image_path):
        return image_path
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), image_path)


# ---------------------------------------------------------------------------
# Mean image persistence

def save_mean_image(path, mean):
    """Persist a (256, 256, 3) float mean image.

    The PPM holds the rounded picture (for eyeballs); a text sidecar keeps
    the exact per-channel float means so downstream consumers are not at
    the mercy of 8-bit rounding.
    """
    mean = np.asarray(mean, dtype=np.float64)
    rounded = np.clip(np.floor(mean + 0.5), 0, 255).astype(np.uint8)
    write_image(path, rounded)
    with open(str(path) + ".means.txt", "w", encoding="utf-8") as fh:
        for name, value in zip("RGB", mean.mean(axis=(0, 1))):
            fh.write(f"{name} {float(value)!r}\n")


def load_mean_image(path):
    """(mean float64 array from the PPM, dict of exact per-channel means)."""
    picture = read_image(path).astype(np.float64)
    channel_means = {}
    sidecar = str(path) + ".means.txt"
    if os.path.exists(sidecar):
        with open(sidecar, encoding="utf-8") as fh:
            for line in fh:
                name, value = line.split()
                channel_means[name] = float(value)
    return picture, channel_means
