"""Network assembly: declarative specs, static shape checking, and the
runtime model built from them.

A network is 1 or 2 convolutional paths — the second fed with bilaterally
filtered copies of the same images — whose final feature maps are flattened
and concatenated into one vector, followed by a two-layer fully connected
head with dropout on each FC input and a softmax classifier.

Specs are plain frozen dataclasses serializable to/from JSON-friendly
dicts, so a checkpoint can embed the exact architecture it was trained
with and refuse to load into a different one.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import layers as nn
from .errors import ParameterError, ShapeError
from .imageio import write_image

TRANSFORMS = ("source", "bilateral")

# seed-stream tags; every Generator in the system is keyed (seed, tag, ...)
SEED_INIT = 0
SEED_DROPOUT = 1
SEED_SHUFFLE = 2
SEED_AUGMENT = 3


def keyed_rng(seed, tag, *indices):
    """Deterministic Generator for one (seed, tag, index...) slot."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tag), *map(int, indices)]))


# ---------------------------------------------------------------------------
# Specs

@dataclass(frozen=True)
class ConvSpec:
    """Convolution + ReLU.  `pad` is an int or a (top, bottom, left, right)
    tuple (the asymmetric form only exists for the 224 input mode)."""
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int | tuple = 0

    kind = "conv"


@dataclass(frozen=True)
class LrnSpec:
    size: int = 5
    k: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75

    kind = "lrn"


@dataclass(frozen=True)
class PoolSpec:
    kernel: int = 3
    stride: int = 2

    kind = "pool"


@dataclass(frozen=True)
class PathSpec:
    layers: tuple
    transform: str = "source"

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ParameterError(f"path transform must be one of {TRANSFORMS}, "
                                 f"got {self.transform!r}")
        if not any(layer.kind == "conv" for layer in self.layers):
            raise ParameterError("a path needs at least one conv layer")


@dataclass(frozen=True)
class NetworkSpec:
    paths: tuple
    n_classes: int
    crop: int
    in_channels: int = 3
    head_dropout: float = 0.5

    def __post_init__(self):
        if len(self.paths) not in (1, 2):
            raise ParameterError(f"1 or 2 paths supported, got {len(self.paths)}")
        if self.n_classes < 2:
            raise ParameterError(f"need at least 2 classes, got {self.n_classes}")
        if self.crop < 1:
            raise ParameterError(f"bad crop {self.crop}")


def _layer_to_dict(layer):
    if layer.kind == "conv":
        pad = list(layer.pad) if isinstance(layer.pad, tuple) else layer.pad
        return {"kind": "conv", "out_channels": layer.out_channels,
                "kernel": layer.kernel, "stride": layer.stride, "pad": pad}
    if layer.kind == "lrn":
        return {"kind": "lrn", "size": layer.size, "k": layer.k,
                "alpha": layer.alpha, "beta": layer.beta}
    return {"kind": "pool", "kernel": layer.kernel, "stride": layer.stride}


def _layer_from_dict(d):
    kind = d["kind"]
    if kind == "conv":
        pad = d["pad"]
        if isinstance(pad, list):
            pad = tuple(pad)
        return ConvSpec(d["out_channels"], d["kernel"], d["stride"], pad)
    if kind == "lrn":
        return LrnSpec(d["size"], d["k"], d["alpha"], d["beta"])
    if kind == "pool":
        return PoolSpec(d["kernel"], d["stride"])
    raise ParameterError(f"unknown layer kind {kind!r}")


def spec_to_dict(spec):
    return {
        "paths": [{"transform": p.transform,
                   "layers": [_layer_to_dict(l) for l in p.layers]}
                  for p in spec.paths],
        "n_classes": spec.n_classes,
        "crop": spec.crop,
        "in_channels": spec.in_channels,
        "head_dropout": spec.head_dropout,
    }


def spec_from_dict(d):
    paths = tuple(PathSpec(tuple(_layer_from_dict(l) for l in p["layers"]),
                           p["transform"])
                  for p in d["paths"])
    return NetworkSpec(paths, d["n_classes"], d["crop"],
                       d["in_channels"], d["head_dropout"])


# ---------------------------------------------------------------------------
# Static shape inference

def infer_path_shapes(path, crop, in_channels=3):
    """(C, H, W) after every layer of a path; raises ShapeError if any
    layer would produce an empty output."""
    c, h, w = in_channels, crop, crop
    shapes = []
    for layer in path.layers:
        if layer.kind == "conv":
            pad = layer.pad if isinstance(layer.pad, tuple) else (layer.pad,) * 4
            pt, pb, pl, pr = pad
            h = nn.conv_output_size(h, layer.kernel, layer.stride, pt, pb)
            w = nn.conv_output_size(w, layer.kernel, layer.stride, pl, pr)
            c = layer.out_channels
        elif layer.kind == "pool":
            if layer.kernel > h or layer.kernel > w:
                raise ShapeError(f"pool kernel {layer.kernel} exceeds map {h}x{w}")
            h = (h - layer.kernel) // layer.stride + 1
            w = (w - layer.kernel) // layer.stride + 1
        if h < 1 or w < 1:
            raise ShapeError(f"layer {layer} shrinks feature map to {h}x{w}")
        shapes.append((c, h, w))
    return shapes


def path_output_volume(path, crop, in_channels=3):
    c, h, w = infer_path_shapes(path, crop, in_channels)[-1]
    return c * h * w


def concat_width(spec):
    """Width of the fused feature vector (the FC head's input size)."""
    return sum(path_output_volume(p, spec.crop, spec.in_channels) for p in spec.paths)


def parameter_count(spec):
    """Exact learnable-parameter total, computed without allocating."""
    total = 0
    for path in spec.paths:
        c = spec.in_channels
        for layer in path.layers:
            if layer.kind == "conv":
                total += layer.out_channels * c * layer.kernel ** 2 + layer.out_channels
                c = layer.out_channels
    d = concat_width(spec)
    total += d * d + d                          # fc1
    total += d * spec.n_classes + spec.n_classes  # fc2
    return total


# ---------------------------------------------------------------------------
# The reference architecture

def build_paper_architecture(n_classes, n_paths=2, crop=227):
    """The five-conv path stack with 48/192/256/256/192 filters.

    Only 227 makes 11x11/stride-4 land exactly on 55x55, so 227 is the
    default; 224 is accepted and handled with asymmetric padding (1 on
    top/left, 2 on bottom/right) to recover the same 55x55 map.
    """
    if crop not in (224, 227):
        raise ParameterError(f"crop must be 224 or 227, got {crop}")
    if n_paths not in (1, 2):
        raise ParameterError(f"n_paths must be 1 or 2, got {n_paths}")
    conv1_pad = 0 if crop == 227 else (1, 2, 1, 2)
    stack = (
        ConvSpec(48, 11, stride=4, pad=conv1_pad),
        LrnSpec(),
        PoolSpec(3, 2),
        ConvSpec(192, 5, pad=2),
        LrnSpec(),
        PoolSpec(3, 2),
        ConvSpec(256, 3, pad=1),
        LrnSpec(),
        ConvSpec(256, 3, pad=1),
        LrnSpec(),
        ConvSpec(192, 3, pad=0),
        LrnSpec(),
        PoolSpec(3, 2),
    )
    transforms = ("source", "bilateral")[:n_paths]
    paths = tuple(PathSpec(stack, t) for t in transforms)
    return NetworkSpec(paths=paths, n_classes=n_classes, crop=crop)


# ---------------------------------------------------------------------------
# Runtime network

class Network:
    """Layer objects instantiated from a NetworkSpec.

    Weights are N(0, 0.01^2), biases 0, drawn from a Generator keyed on
    (seed, SEED_INIT) in a fixed layer order, so the same (spec, seed)
    always yields the same initialization.
    """

    def __init__(self, spec, seed=0, dtype=np.float32, init_std=0.01):
        self.spec = spec
        self.seed = seed
        self.dtype = dtype
        rng = keyed_rng(seed, SEED_INIT)

        self.path_layers = []   # list (per path) of [(stage_conv_index|None, layer_obj)]
        self._named = []        # (name, layer) for layers holding parameters
        for p_idx, path in enumerate(spec.paths):
            infer_path_shapes(path, spec.crop, spec.in_channels)  # fail early
            objs = []
            c = spec.in_channels
            conv_no = 0
            for layer in path.layers:
                if layer.kind == "conv":
                    conv_no += 1
                    conv = nn.Conv2d(c, layer.out_channels, layer.kernel,
                                     stride=layer.stride, pad=layer.pad,
                                     rng=rng, init_std=init_std, dtype=dtype)
                    objs.append(conv)
                    objs.append(nn.ReLU())
                    self._named.append((f"path{p_idx}/conv{conv_no}", conv))
                    c = layer.out_channels
                elif layer.kind == "lrn":
                    objs.append(nn.Lrn(nn.LrnParams(layer.size, layer.k,
                                                    layer.alpha, layer.beta)))
                else:
                    objs.append(nn.MaxPool2d(layer.kernel, layer.stride))
            self.path_layers.append(objs)

        d = concat_width(spec)
        self.concat = nn.ConcatFlatten()
        self.drop1 = nn.Dropout(spec.head_dropout)
        self.fc1 = nn.FullyConnected(d, d, rng=rng, init_std=init_std, dtype=dtype)
        self.head_relu = nn.ReLU()
        self.drop2 = nn.Dropout(spec.head_dropout)
        self.fc2 = nn.FullyConnected(d, spec.n_classes, rng=rng,
                                     init_std=init_std, dtype=dtype)
        self.loss_layer = nn.SoftmaxLogLoss()
        self._named.append(("head/fc1", self.fc1))
        self._named.append(("head/fc2", self.fc2))

    # -- parameter access ---------------------------------------------------

    def params(self):
        out = {}
        for name, layer in self._named:
            for key, arr in layer.params().items():
                out[f"{name}/{key}"] = arr
        return out

    def grads(self):
        out = {}
        for name, layer in self._named:
            for key, arr in layer.grads().items():
                out[f"{name}/{key}"] = arr
        return out

    def set_params(self, values):
        """Copy new values into the existing parameter arrays (in place)."""
        own = self.params()
        if set(values) != set(own):
            raise ShapeError("parameter name sets differ")
        for name, arr in own.items():
            if values[name].shape != arr.shape:
                raise ShapeError(f"shape mismatch for {name}: "
                                 f"{values[name].shape} vs {arr.shape}")
            np.copyto(arr, values[name])

    # -- forward / backward ---------------------------------------------------

    def _path_inputs(self, source, filtered):
        inputs = []
        for path in self.spec.paths:
            if path.transform == "source":
                inputs.append(source)
            else:
                if filtered is None:
                    raise ShapeError("this network has a bilateral path but no "
                                     "filtered tensor was given")
                inputs.append(filtered)
        return inputs

    def _check_input(self, t, what):
        want = (self.spec.in_channels, self.spec.crop, self.spec.crop)
        if t.ndim != 4 or t.shape[1:] != want:
            raise ShapeError(f"{what} input must be (N, {want[0]}, {want[1]}, "
                             f"{want[2]}), got {t.shape}")

    def forward(self, source, filtered=None, labels=None, mode="infer",
                dropout_rng=None, capture=None):
        """-> (probs, loss or None).  `capture`, if a list, receives
        (path_index, layer_index, activation) for every path layer."""
        if mode not in ("train", "infer"):
            raise ParameterError(f"unknown mode {mode!r}")
        self._check_input(source, "source")
        inputs = self._path_inputs(source, filtered)
        if len(self.spec.paths) == 2:
            self._check_input(inputs[1], "bilateral")
            if inputs[1].shape[0] != source.shape[0]:
                raise ShapeError("path inputs disagree on batch size")
        feats = []
        for p_idx, (objs, x) in enumerate(zip(self.path_layers, inputs)):
            h = x.astype(self.dtype, copy=False)
            for l_idx, layer in enumerate(objs):
                h = layer.forward(h)
                if capture is not None:
                    capture.append((p_idx, l_idx, h))
            feats.append(h)
        fused = self.concat.forward(*feats)
        h = self.drop1.forward(fused, mode=mode, rng=dropout_rng)
        h = self.head_relu.forward(self.fc1.forward(h))
        h = self.drop2.forward(h, mode=mode, rng=dropout_rng)
        logits = self.fc2.forward(h)
        return self.loss_layer.forward(logits, labels)

    def backward(self):
        """Populate every parameter gradient from the cached forward."""
        g = self.loss_layer.backward()
        g = self.fc2.backward(g)
        g = self.drop2.backward(g)
        g = self.fc1.backward(self.head_relu.backward(g))
        g = self.drop1.backward(g)
        path_grads = self.concat.backward(g)
        for objs, pg in zip(self.path_layers, path_grads):
            for layer in reversed(objs):
                pg = layer.backward(pg)

    def step(self, state):
        nn.sgd_step(self.params(), self.grads(), state)


# ---------------------------------------------------------------------------
# Inspection dumps

def _normalize_to_u8(values):
    """Min-max scale any float array to the full 0..255 range (flat input
    maps to all black)."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.floor((values - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def _conv_positions(objs):
    return [i for i, layer in enumerate(objs) if isinstance(layer, nn.Conv2d)]


def dump_feature_maps(net, source, filtered=None, layer=1, out_dir=".", path_index=0):
    """Write one grayscale PPM per channel of the chosen conv stage's final
    activation (after its ReLU/LRN/pool tail) for a single input image.

    Returns the list of files written; filenames carry the channel index.
    """
    if not 0 <= path_index < len(net.spec.paths):
        raise ParameterError(f"no path {path_index} in a "
                             f"{len(net.spec.paths)}-path network")
    objs = net.path_layers[path_index]
    conv_pos = _conv_positions(objs)
    if not 1 <= layer <= len(conv_pos):
        raise ParameterError(f"layer must be in [1, {len(conv_pos)}], got {layer}")
    stage_end = (conv_pos[layer] - 1) if layer < len(conv_pos) else len(objs) - 1

    captured = []
    net.forward(source, filtered, mode="infer", capture=captured)
    activation = next(h for p, l, h in captured
                      if p == path_index and l == stage_end)[0]  # (C, H, W)

    os.makedirs(out_dir, exist_ok=True)
    written = []
    for ch in range(activation.shape[0]):
        plane = _normalize_to_u8(activation[ch])
        path = os.path.join(out_dir, f"path{path_index}_layer{layer}_ch{ch:03d}.ppm")
        write_image(path, np.repeat(plane[..., None], 3, axis=2))
        written.append(path)
    return written


def dump_filters(net, path_index, out_dir):
    """Write each first-layer filter of one path as a small RGB tile,
    min-max normalized per filter."""
    if not 0 <= path_index < len(net.spec.paths):
        raise ParameterError(f"no path {path_index} in a "
                             f"{len(net.spec.paths)}-path network")
    first_conv = net.path_layers[path_index][0]
    weights = first_conv.weights  # (F, C_in, k, k)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for f_idx in range(weights.shape[0]):
        tile = _normalize_to_u8(weights[f_idx])
        if tile.shape[0] == 3:
            rgb = tile.transpose(1, 2, 0)
        else:  # non-RGB input: show the channel average as gray
            rgb = np.repeat(_normalize_to_u8(weights[f_idx].mean(axis=0))[..., None],
                            3, axis=2)
        path = os.path.join(out_dir, f"path{path_index}_filter{f_idx:02d}.ppm")
        write_image(path, rgb)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# Prediction metrics

def topk_predictions(probs, k):
    """Indices of the k most probable classes per row; probability ties
    resolve toward the lower class index."""
    order = np.argsort(-probs, axis=1, kind="stable")
    return order[:, :k]

def topk_error(probs, labels, k):
    """Fraction of rows whose true label is outside the top-k set."""
    labels = np.asarray(labels)
    top = topk_predictions(probs, k)
    hits = (top == labels[:, None]).any(axis=1)
    return float(1.0 - hits.mean())
