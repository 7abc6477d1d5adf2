"""Binary checkpoint format.

Layout:

    magic           4 bytes  b"MPCN"
    version         u32 LE   (currently 1)
    header length   u32 LE
    header          UTF-8 JSON (canonical: sorted keys, no spaces)
    tensor records  for each name in header["tensors"], in that order:
        name length u32 LE
        name        UTF-8
        rank        u32 LE
        dims        u32 LE each
        data        raw little-endian float32, C order

The header holds the architecture spec, optimizer hyperparameters, epoch,
seed, and the metrics history.  Tensor records cover parameters, optimizer
velocity ("velocity:<param>"), and the dataset mean images
("mean:<path transform>").  Because the header JSON is canonical and the
record order is pinned by the header, save -> load -> save is
byte-identical.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (ArchitectureMismatchError, CorruptCheckpointError,
                     UnsupportedVersionError)
from .network import spec_from_dict, spec_to_dict

MAGIC = b"MPCN"
VERSION = 1

VELOCITY_PREFIX = "velocity:"
MEAN_PREFIX = "mean:"


@dataclass
class Checkpoint:
    spec: object                       # NetworkSpec
    params: dict                       # name -> float32 ndarray
    velocity: dict = field(default_factory=dict)
    sgd: dict = field(default_factory=dict)   # learning_rate / momentum / weight_decay
    epoch: int = 0
    seed: int = 0
    metrics: list = field(default_factory=list)  # rows [epoch, batch, split, loss, e1, e5]
    means: dict = field(default_factory=dict)    # transform -> float32 ndarray


def _tensor_record(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    parts = [struct.pack("<I", len(name.encode()))]
    parts.append(name.encode())
    parts.append(struct.pack("<I", arr.ndim))
    parts.extend(struct.pack("<I", d) for d in arr.shape)
    parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt, path):
    """Write atomically: a temp file in the same directory, then rename."""
    tensors = {}
    order = []
    for name in ckpt.params:
        tensors[name] = ckpt.params[name]
        order.append(name)
    for name in ckpt.velocity:
        key = VELOCITY_PREFIX + name
        tensors[key] = ckpt.velocity[name]
        order.append(key)
    for name in ckpt.means:
        key = MEAN_PREFIX + name
        tensors[key] = ckpt.means[name]
        order.append(key)

    header = {
        "spec": spec_to_dict(ckpt.spec),
        "sgd": {k: float(v) for k, v in sorted(ckpt.sgd.items())},
        "epoch": int(ckpt.epoch),
        "seed": int(ckpt.seed),
        "metrics": ckpt.metrics,
        "tensors": order,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    blob = [MAGIC, struct.pack("<I", VERSION),
            struct.pack("<I", len(header_bytes)), header_bytes]
    blob.extend(_tensor_record(name, tensors[name]) for name in order)

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(blob))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expect_spec=None):
    """Parse a checkpoint; `expect_spec` (a NetworkSpec) makes loading into
    the wrong architecture fail loudly instead of at the first matmul."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic, not a checkpoint")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version}, "
                                      f"this build reads {VERSION}")
    try:
        header = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header: {exc}") from exc

    spec = spec_from_dict(header["spec"])
    if expect_spec is not None and spec != expect_spec:
        raise ArchitectureMismatchError(
            f"{path}: checkpoint architecture ({len(spec.paths)} path(s), "
            f"{spec.n_classes} classes, crop {spec.crop}) does not match the "
            f"requested one ({len(expect_spec.paths)} path(s), "
            f"{expect_spec.n_classes} classes, crop {expect_spec.crop})")

    tensors = {}
    for expected in header["tensors"]:
        name = r.take(r.u32()).decode()
        if name != expected:
            raise CorruptCheckpointError(f"{path}: tensor order mismatch "
                                         f"({name!r} where {expected!r} expected)")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(4 * count)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise CorruptCheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")

    params, velocity, means = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith(VELOCITY_PREFIX):
            velocity[name[len(VELOCITY_PREFIX):]] = arr
        elif name.startswith(MEAN_PREFIX):
            means[name[len(MEAN_PREFIX):]] = arr
        else:
            params[name] = arr
    return Checkpoint(spec=spec, params=params, velocity=velocity,
                      sgd=header["sgd"], epoch=header["epoch"],
                      seed=header["seed"], metrics=header["metrics"],
                      means=means)
