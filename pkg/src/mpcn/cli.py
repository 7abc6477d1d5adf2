"""Command-line front end tying the pipeline together: score images by
complexity, split a manifest into complexity groups, precompute bilateral
twins, train, evaluate, and inspect a trained model.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable inputs,
malformed manifests, bad checkpoints), 3 internal invariant violation.

Every subcommand accepts `--config FILE` holding `key=value` lines (keys
are the long flag names); explicit flags win over file entries.  The fully
resolved configuration is echoed line by line before anything runs, so a
metrics log or terminal capture always names the settings that produced it.
"""

import argparse
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import complexity
from . import gradcheck as gc
from . import image_pipeline as pipe
from . import network as nets
from . import training as tr
from .checkpoint import load_checkpoint
from .errors import (CheckpointError, DatasetError, DecodeError, LabelError,
                     MpcnError, ParameterError, PersistedStateError)
from .imageio import (ManifestRow, read_image, read_manifest, resolve_path,
                      write_image, write_manifest)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns exit codes."""

    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# Flag tables

@dataclass(frozen=True)
class Flag:
    name: str                 # long flag name, dashes
    type: type
    default: object = None
    help: str = ""
    required: bool = False
    choices: tuple = None

    @property
    def dest(self):
        return self.name.replace("-", "_")


COMMON = (
    Flag("config", str, None, "key=value file supplying flag defaults"),
    Flag("workers", int, 1, "ingestion worker cap; this build ingests "
                            "sequentially, so every value behaves like 1"),
)

SUBCOMMANDS = {
    "score": (
        "write a CSV of per-image complexity indices",
        (Flag("manifest", str, required=True, help="dataset manifest CSV"),
         Flag("out", str, required=True, help="output CSV (path,label,C)"),
         Flag("threshold", float, 0.5, "normalized-coefficient threshold")),
    ),
    "split": (
        "assign complexity groups and write the manifest with a group column",
        (Flag("manifest", str, required=True, help="dataset manifest CSV"),
         Flag("out", str, required=True, help="output manifest CSV with group column"),
         Flag("scores", str, None, "precomputed score CSV; omitted = score now"),
         Flag("groups", int, 4, "number of complexity groups"),
         Flag("per-group-train", int, None,
              "training images kept per class per group; default fits the smallest class"),
         Flag("per-group-val", int, None,
              "validation images kept per class per group; default fits the smallest class"),
         Flag("threshold", float, 0.5, "normalized-coefficient threshold")),
    ),
    "bilateral": (
        "apply the edge-preserving filter to one image or a whole manifest",
        (Flag("image", str, None, "single input image"),
         Flag("out", str, None, "single output image"),
         Flag("manifest", str, None, "manifest to filter (canonicalized first)"),
         Flag("out-dir", str, None, "cache directory for manifest mode"),
         Flag("half-kernel", int, 5, "window half size in pixels"),
         Flag("sigma-spatial", float, 3.0, "spatial standard deviation (pixels)"),
         Flag("sigma-range", float, 0.15, "intensity standard deviation on [0,1]")),
    ),
    "train": (
        "train a classifier and write a checkpoint plus a metrics log",
        (Flag("manifest", str, required=True, help="dataset manifest CSV"),
         Flag("checkpoint", str, "checkpoint.mpcn", "output checkpoint path"),
         Flag("metrics", str, "metrics.csv", "output metrics CSV"),
         Flag("paths", int, 2, "number of network paths", choices=(1, 2)),
         Flag("classes", int, None, "class count; default infers max label + 1"),
         Flag("crop", int, 227, "input crop side", choices=(224, 227)),
         Flag("epochs", int, 10, "training epochs"),
         Flag("batch", int, 100, "batch size"),
         Flag("val-freq", int, 10, "training batches between validations"),
         Flag("seed", int, 0, "seed for init, shuffling, augmentation, dropout"),
         Flag("lr", float, 0.01, "initial learning rate"),
         Flag("momentum", float, 0.9, "SGD momentum"),
         Flag("weight-decay", float, 5e-4, "L2 penalty"),
         Flag("decay-factor", float, 0.1, "plateau learning-rate multiplier"),
         Flag("patience", int, 3, "plateau length in validations"),
         Flag("min-improvement", float, 0.001,
              "absolute validation-error improvement that resets the plateau"),
         Flag("group", int, None, "train only on this complexity group"),
         Flag("filtered-dir", str, None, "bilateral twin cache directory"),
         Flag("resume", str, None, "checkpoint to continue from")),
    ),
    "eval": (
        "report top-k error of a checkpoint on a manifest split",
        (Flag("manifest", str, required=True, help="dataset manifest CSV"),
         Flag("checkpoint", str, required=True, help="trained checkpoint"),
         Flag("k", int, 5, "top-k rank", choices=(1, 5)),
         Flag("split", str, "val", "manifest split to evaluate", choices=("train", "val")),
         Flag("group", int, None, "restrict to this complexity group"),
         Flag("filtered-dir", str, None, "bilateral twin cache directory"),
         Flag("batch", int, 100, "evaluation batch size"),
         Flag("out", str, None, "optional output CSV (k,error)")),
    ),
    "gradcheck": (
        "audit analytic gradients against central finite differences",
        (Flag("seed", int, 0, "seed for the randomized instances"),
         Flag("epsilon", float, gc.EPSILON, "finite-difference step"),
         Flag("tolerance", float, gc.TOLERANCE, "max acceptable relative error")),
    ),
    "featmaps": (
        "write one layer's feature maps for an image as grayscale files",
        (Flag("checkpoint", str, required=True, help="trained checkpoint"),
         Flag("image", str, required=True, help="input image"),
         Flag("layer", int, 5, "convolution stage to dump", choices=(1, 2, 3, 4, 5)),
         Flag("out-dir", str, required=True, help="output directory"),
         Flag("path-index", int, 0, "which path to dump")),
    ),
    "filters": (
        "write first-layer filters as RGB tiles",
        (Flag("checkpoint", str, required=True, help="trained checkpoint"),
         Flag("out-dir", str, required=True, help="output directory"),
         Flag("path-index", int, None, "single path to dump; default dumps all")),
    ),
}


def _build_parser():
    parser = _Parser(prog="mpcn", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="subcommand", metavar="subcommand")
    for name, (blurb, flags) in SUBCOMMANDS.items():
        sub = subs.add_parser(name, help=blurb, description=blurb)
        for flag in flags + COMMON:
            if flag.required:
                suffix = "(required)"
            else:
                suffix = f"(default: {flag.default})"
            sub.add_argument(f"--{flag.name}", dest=flag.dest, type=str,
                             default=None, help=f"{flag.help} {suffix}")
    return parser


# ---------------------------------------------------------------------------
# Config resolution: flag > config file > default

def _convert(flag, raw, origin):
    try:
        value = flag.type(raw)
    except ValueError:
        raise UsageError(f"{origin}: {flag.name} expects "
                         f"{flag.type.__name__}, got {raw!r}")
    if flag.choices is not None and value not in flag.choices:
        raise UsageError(f"{origin}: {flag.name} must be one of "
                         f"{'/'.join(map(str, flag.choices))}, got {value}")
    return value


def _load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}")
    except UnicodeDecodeError:
        raise UsageError(f"config file {path} is not valid UTF-8")
    entries = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        entries[key.strip().replace("-", "_")] = raw.strip()
    return entries


def _resolve(subcommand, namespace):
    flags = SUBCOMMANDS[subcommand][1] + COMMON
    by_dest = {f.dest: f for f in flags}
    file_entries = {}
    config_path = getattr(namespace, "config", None)
    if config_path is not None:
        file_entries = _load_config_file(config_path)
        unknown = set(file_entries) - set(by_dest)
        if unknown:
            raise UsageError(f"{config_path}: unknown keys for {subcommand}: "
                             f"{', '.join(sorted(unknown))}")
    values = {}
    for flag in flags:
        raw = getattr(namespace, flag.dest)
        if raw is not None:
            values[flag.dest] = _convert(flag, raw, "flag")
        elif flag.dest in file_entries:
            values[flag.dest] = _convert(flag, file_entries[flag.dest], config_path)
        else:
            values[flag.dest] = flag.default
    missing = [f"--{f.name}" for f in flags if f.required and values[f.dest] is None]
    if missing:
        raise UsageError(f"{subcommand} is missing required flags: "
                         f"{', '.join(missing)}")
    return values


def _echo(subcommand, values):
    print(f"command: {subcommand}")
    for key in sorted(values):
        print(f"config: {key}={values[key]}")


def _write_text(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Subcommands

def _cmd_score(v):
    rows = read_manifest(v["manifest"])
    lines = ["path,label,C"]
    for row in rows:
        img = pipe.canonicalize(read_image(resolve_path(v["manifest"], row.path)))
        c = complexity.score_image(img, threshold=v["threshold"])
        lines.append(f"{row.path},{row.label},{c}")
    _write_text(v["out"], lines)
    print(f"scored {len(rows)} images -> {v['out']}")
    return EXIT_OK


def _read_scores(path):
    scores = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "path,label,C":
            raise DatasetError(f"{path}: expected header path,label,C, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.rsplit(",", 2)
            try:
                scores[parts[0]] = int(parts[2])
            except (IndexError, ValueError):
                raise DatasetError(f"{path}:{lineno}: malformed score row {line!r}")
    return scores


def _cmd_split(v):
    rows = read_manifest(v["manifest"])
    precomputed = _read_scores(v["scores"]) if v["scores"] is not None else None

    def c_of(row):
        if precomputed is not None:
            if row.path not in precomputed:
                raise DatasetError(f"{v['scores']}: no score for {row.path}")
            return precomputed[row.path]
        img = pipe.canonicalize(read_image(resolve_path(v["manifest"], row.path)))
        return complexity.score_image(img, threshold=v["threshold"])

    assignment = {}
    for split_name, per_group in (("train", v["per_group_train"]),
                                  ("val", v["per_group_val"])):
        split_rows = [r for r in rows if r.split == split_name]
        if not split_rows:
            continue
        by_label = {}
        for r in split_rows:
            by_label.setdefault(r.label, []).append(
                complexity.ComplexityScore(r.path, r.label, c_of(r)))
        assignment.update(complexity.partition_groups(
            by_label, n_groups=v["groups"], per_group=per_group))
    kept = [ManifestRow(r.path, r.label, r.split, assignment[r.path])
            for r in rows if r.path in assignment]
    write_manifest(v["out"], kept, with_group=True)
    print(f"assigned {len(kept)} of {len(rows)} rows into "
          f"{v['groups']} groups -> {v['out']}")
    return EXIT_OK


def _twin_name(manifest_row_path):
    return manifest_row_path.replace("/", "_").replace("\\", "_") + ".ppm"


def _cmd_bilateral(v):
    params = pipe.BilateralParams(v["half_kernel"], v["sigma_spatial"],
                                  v["sigma_range"])
    if v["image"] is not None and v["out"] is not None:
        write_image(v["out"], pipe.bilateral_filter(read_image(v["image"]), params))
        print(f"filtered {v['image']} -> {v['out']}")
    elif v["manifest"] is not None and v["out_dir"] is not None:
        rows = read_manifest(v["manifest"])
        os.makedirs(v["out_dir"], exist_ok=True)
        for row in rows:
            img = pipe.canonicalize(read_image(resolve_path(v["manifest"], row.path)))
            out_path = os.path.join(v["out_dir"], _twin_name(row.path))
            write_image(out_path, pipe.bilateral_filter(img, params))
        print(f"filtered {len(rows)} images -> {v['out_dir']}")
    else:
        raise UsageError("bilateral needs --image with --out, "
                         "or --manifest with --out-dir")
    return EXIT_OK


def _cmd_train(v):
    two_path = v["paths"] == 2
    ds = tr.dataset_from_manifest(v["manifest"], two_path=two_path,
                                  filtered_dir=v["filtered_dir"],
                                  group=v["group"])
    n_classes = v["classes"] if v["classes"] is not None else ds.max_label() + 1
    spec = nets.build_paper_architecture(n_classes, n_paths=v["paths"],
                                         crop=v["crop"])
    net = nets.Network(spec, seed=v["seed"])
    cfg = tr.TrainConfig(epochs=v["epochs"], crop=v["crop"],
                         batch_size=v["batch"],
                         validation_frequency=v["val_freq"], seed=v["seed"],
                         learning_rate=v["lr"], momentum=v["momentum"],
                         weight_decay=v["weight_decay"],
                         decay_factor=v["decay_factor"], patience=v["patience"],
                         min_improvement=v["min_improvement"])
    print(f"dataset: {ds.n_train} train / {ds.n_val} val images, "
          f"{n_classes} classes, {'two paths' if two_path else 'one path'}")
    _, rows = tr.train(net, ds, cfg, checkpoint_path=v["checkpoint"],
                       metrics_path=v["metrics"], resume_from=v["resume"],
                       log=print)
    print(f"wrote {v['checkpoint']} and {v['metrics']} ({len(rows)} metric rows)")
    return EXIT_OK


def _load_network(checkpoint_path):
    ckpt = load_checkpoint(checkpoint_path)
    net = nets.Network(ckpt.spec, seed=ckpt.seed)
    net.set_params(ckpt.params)
    return ckpt, net


def _cmd_eval(v):
    ckpt, net = _load_network(v["checkpoint"])
    crop = ckpt.spec.crop
    two_path = len(ckpt.spec.paths) == 2
    rows = [r for r in read_manifest(v["manifest"]) if r.split == v["split"]]
    if v["group"] is not None:
        rows = [r for r in rows if r.group == v["group"]]
    if not rows:
        raise DatasetError(f"{v['manifest']}: no rows for split {v['split']}"
                           + (f" group {v['group']}" if v["group"] is not None else ""))
    labels = np.array([r.label for r in rows], dtype=np.int64)
    if labels.max() >= ckpt.spec.n_classes:
        raise LabelError(f"label {labels.max()} out of range for "
                         f"{ckpt.spec.n_classes} classes")

    mean_src = ckpt.means.get("source")
    mean_fil = ckpt.means.get("bilateral")
    if mean_src is None:
        print("note: checkpoint carries no mean images; evaluating unsubtracted")
        mean_src = np.zeros((256, 256, 3), dtype=np.float32)
    if two_path and mean_fil is None:
        mean_fil = np.zeros((256, 256, 3), dtype=np.float32)

    def load_crops(row):
        img = pipe.canonicalize(read_image(resolve_path(v["manifest"], row.path)))
        src = pipe.center_crop(img.astype(np.float32) - mean_src, crop)
        fil = None
        if two_path:
            cache = (os.path.join(v["filtered_dir"], _twin_name(row.path))
                     if v["filtered_dir"] is not None else None)
            if cache is not None and os.path.exists(cache):
                twin = read_image(cache)
            else:
                twin = pipe.bilateral_filter(img)
            fil = pipe.center_crop(twin.astype(np.float32) - mean_fil, crop)
        return src, fil

    wrong = 0.0
    for start in range(0, len(rows), v["batch"]):
        chunk = rows[start:start + v["batch"]]
        crops = [load_crops(r) for r in chunk]
        src = np.stack([c[0] for c in crops])
        fil = np.stack([c[1] for c in crops]) if two_path else None
        probs, _ = net.forward(src, fil, mode="infer")
        wrong += nets.topk_error(probs, labels[start:start + len(chunk)],
                                 v["k"]) * len(chunk)
    error = wrong / len(rows)
    print(f"top{v['k']}_error={error!r}")
    if v["out"] is not None:
        _write_text(v["out"], ["k,error", f"{v['k']},{error!r}"])
    return EXIT_OK


def _cmd_gradcheck(v):
    results = gc.run_gradient_audit(seed=v["seed"], epsilon=v["epsilon"])
    failed = []
    for name, err in results:
        status = "ok" if err <= v["tolerance"] else "FAIL"
        print(f"{name}: max_relative_error={err:.3e} {status}")
        if err > v["tolerance"]:
            failed.append(name)
    if failed:
        print(f"gradient check FAILED: {', '.join(failed)}")
        return EXIT_INTERNAL
    print(f"gradient check passed ({len(results)} checks <= {v['tolerance']:g})")
    return EXIT_OK


def _cmd_featmaps(v):
    ckpt, net = _load_network(v["checkpoint"])
    crop = ckpt.spec.crop
    img = pipe.canonicalize(read_image(v["image"]))
    mean_src = ckpt.means.get("source", np.zeros((256, 256, 3), np.float32))
    src = pipe.center_crop(img.astype(np.float32) - mean_src, crop)[None]
    fil = None
    if len(ckpt.spec.paths) == 2:
        mean_fil = ckpt.means.get("bilateral", np.zeros((256, 256, 3), np.float32))
        twin = pipe.bilateral_filter(img)
        fil = pipe.center_crop(twin.astype(np.float32) - mean_fil, crop)[None]
    os.makedirs(v["out_dir"], exist_ok=True)
    files = nets.dump_feature_maps(net, src, fil, layer=v["layer"],
                                   out_dir=v["out_dir"],
                                   path_index=v["path_index"])
    print(f"wrote {len(files)} feature maps -> {v['out_dir']}")
    return EXIT_OK


def _cmd_filters(v):
    ckpt, net = _load_network(v["checkpoint"])
    os.makedirs(v["out_dir"], exist_ok=True)
    indices = ([v["path_index"]] if v["path_index"] is not None
               else range(len(ckpt.spec.paths)))
    files = []
    for p in indices:
        files += nets.dump_filters(net, p, v["out_dir"])
    print(f"wrote {len(files)} filter tiles -> {v['out_dir']}")
    return EXIT_OK


_DISPATCH = {
    "score": _cmd_score,
    "split": _cmd_split,
    "bilateral": _cmd_bilateral,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "featmaps": _cmd_featmaps,
    "filters": _cmd_filters,
}


def main(argv=None):
    parser = _build_parser()
    try:
        namespace = parser.parse_args(argv)
        if namespace.subcommand is None:
            raise UsageError(f"a subcommand is required\n{parser.format_usage()}")
        values = _resolve(namespace.subcommand, namespace)
        _echo(namespace.subcommand, values)
        return _DISPATCH[namespace.subcommand](values)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParameterError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DecodeError, DatasetError, LabelError, CheckpointError,
            PersistedStateError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MpcnError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:   # noqa: BLE001 - the CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
