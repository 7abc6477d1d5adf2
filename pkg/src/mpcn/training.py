"""The training harness: dataset assembly, the SGD epoch loop with its
validation cadence and learning-rate plateau decay, evaluation, and the
metrics log.

Determinism contract: every random draw is keyed on (seed, purpose tag,
indices) — shuffle order on (seed, epoch), per-image augmentation on
(seed, epoch, image index), dropout on (seed, epoch, batch) — so two runs
with the same seed produce identical metrics logs, and a run resumed from
a checkpoint continues exactly where the uninterrupted run would be.

Datasets are held in memory as uint8 arrays; this harness targets
desk-scale experiments (a few thousand small images), not the full-scale
setting, which would stream from disk instead.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import image_pipeline as pipe
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import DatasetError, LabelError, ParameterError
from .imageio import read_image, resolve_path, write_image
from .layers import SgdState
from .network import (SEED_AUGMENT, SEED_DROPOUT, SEED_SHUFFLE, keyed_rng,
                      topk_error)


@dataclass
class TrainConfig:
    epochs: int
    crop: int
    batch_size: int = 100
    validation_frequency: int = 10   # in training batches
    seed: int = 0
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_factor: float = 0.1
    patience: int = 3                # validations without improvement
    min_improvement: float = 0.001   # absolute top-1 error improvement floor

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.validation_frequency < 1:
            raise ParameterError("epochs, batch_size and validation_frequency "
                                 "must all be >= 1")
        if not 0.0 < self.decay_factor < 1.0:
            raise ParameterError(f"decay factor {self.decay_factor} outside (0, 1)")
        if self.patience < 1:
            raise ParameterError(f"patience {self.patience} must be >= 1")
        if self.crop < 1:
            raise ParameterError(f"bad crop {self.crop}")

    def as_dict(self):
        return {k: getattr(self, k) for k in (
            "epochs", "crop", "batch_size", "validation_frequency", "seed",
            "learning_rate", "momentum", "weight_decay", "decay_factor",
            "patience", "min_improvement")}


@dataclass
class MetricsRow:
    epoch: int
    batch: int
    split: str
    loss: float
    top1_error: float
    top5_error: float

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise ParameterError(f"split {self.split!r} must be train or val")
        for err in (self.top1_error, self.top5_error):
            if not 0.0 <= err <= 1.0:
                raise ParameterError(f"error rate {err} outside [0, 1]")
        if self.top5_error > self.top1_error:
            raise ParameterError("top-5 error cannot exceed top-1 error")

    def as_list(self):
        return [self.epoch, self.batch, self.split,
                self.loss, self.top1_error, self.top5_error]


def lr_plateau_step(history, current_lr, patience=3, min_improvement=0.001,
                    factor=0.1):
    """Plateau rule on a list of validation error values.

    A point "improves" when it beats the best of all earlier points by
    more than `min_improvement` (absolute).  Let r be the length of the
    non-improving run at the end of the history; the rate decays by
    `factor` exactly when r is a positive multiple of `patience` — so a
    flat stretch of `patience` validations triggers one decay, the next
    decay needs `patience` further flat validations, and an improving
    history never decays.
    """
    run = 0
    for i in range(len(history) - 1, -1, -1):
        improved = i > 0 and history[i] < min(history[:i]) - min_improvement
        if improved:
            break
        run += 1
    if run > 0 and run % patience == 0:
        return current_lr * factor
    return current_lr


# ---------------------------------------------------------------------------
# Dataset

class ArrayDataset:
    """Same-size square images held in memory, with per-path mean images.

    For a two-path network every image also gets a bilaterally filtered
    twin, computed once up front (or supplied precomputed, e.g. from a
    disk cache).  Means are computed over the training split only, one per
    path, and subtracted at crop time.
    """

    def __init__(self, train_images, train_labels, val_images, val_labels,
                 two_path=False, bilateral_params=None,
                 train_filtered=None, val_filtered=None):
        train_images = np.asarray(train_images)
        val_images = np.asarray(val_images)
        if train_images.ndim != 4 or train_images.shape[1] != train_images.shape[2]:
            raise DatasetError(f"expected (N, S, S, 3) images, got {train_images.shape}")
        if len(train_images) == 0:
            raise DatasetError("empty training split")
        self.side = train_images.shape[1]
        if len(val_images) and val_images.shape[1:] != train_images.shape[1:]:
            raise DatasetError("train/val image shapes disagree")
        self.train_images = train_images
        self.val_images = val_images
        self.train_labels = np.asarray(train_labels, dtype=np.int64)
        self.val_labels = np.asarray(val_labels, dtype=np.int64)
        if len(self.train_labels) != len(train_images):
            raise DatasetError("training labels/images length mismatch")
        if len(self.val_labels) != len(val_images):
            raise DatasetError("validation labels/images length mismatch")

        self.two_path = bool(two_path)
        if self.two_path:
            params = bilateral_params or pipe.BilateralParams()
            if train_filtered is None:
                train_filtered = np.stack([pipe.bilateral_filter(img, params)
                                           for img in train_images])
            if val_filtered is None:
                val_filtered = (np.stack([pipe.bilateral_filter(img, params)
                                          for img in val_images])
                                if len(val_images) else val_images)
            self.train_filtered = np.asarray(train_filtered)
            self.val_filtered = np.asarray(val_filtered)
            self.mean_filtered = self.train_filtered.astype(np.float64).mean(axis=0).astype(np.float32)
        else:
            self.train_filtered = None
            self.val_filtered = None
            self.mean_filtered = None
        self.mean_source = self.train_images.astype(np.float64).mean(axis=0).astype(np.float32)
        self._val_crop_cache = {}

    @property
    def n_train(self):
        return len(self.train_images)

    @property
    def n_val(self):
        return len(self.val_images)

    def means(self):
        out = {"source": self.mean_source}
        if self.two_path:
            out["bilateral"] = self.mean_filtered
        return out

    def max_label(self):
        labels = [self.train_labels.max()]
        if len(self.val_labels):
            labels.append(self.val_labels.max())
        return int(max(labels))

    def train_batch(self, indices, crop, seed, epoch):
        """Augmented (source, filtered, labels) arrays for one batch; the
        same crop/flip is applied to an image and its filtered twin."""
        src, fil = [], []
        for i in indices:
            rng = keyed_rng(seed, SEED_AUGMENT, epoch, int(i))
            top, left, flip = pipe.sample_augment(self.side, crop, rng)
            img = self.train_images[i].astype(np.float32) - self.mean_source
            src.append(pipe.apply_augment(img, crop, top, left, flip))
            if self.two_path:
                twin = self.train_filtered[i].astype(np.float32) - self.mean_filtered
                fil.append(pipe.apply_augment(twin, crop, top, left, flip))
        return (np.stack(src),
                np.stack(fil) if self.two_path else None,
                self.train_labels[indices])

    def val_crops(self, crop):
        """Center crops of the whole validation split, cached per crop."""
        if crop not in self._val_crop_cache:
            src = np.stack([pipe.center_crop(img.astype(np.float32) - self.mean_source, crop)
                            for img in self.val_images])
            fil = None
            if self.two_path:
                fil = np.stack([pipe.center_crop(img.astype(np.float32) - self.mean_filtered, crop)
                                for img in self.val_filtered])
            self._val_crop_cache[crop] = (src, fil)
        return self._val_crop_cache[crop]


def dataset_from_manifest(manifest_path, two_path=False, filtered_dir=None,
                          group=None, bilateral_params=None):
    """Load + canonicalize every manifest image into an ArrayDataset.

    With `filtered_dir`, bilateral twins are cached there as PPM files
    (filtered once, reused forever); without it they are computed in
    memory on each load.  `group` keeps only rows of one complexity group.
    """
    from .imageio import read_manifest

    rows = read_manifest(manifest_path)
    if group is not None:
        rows = [r for r in rows if r.group == group]
    train_rows = [r for r in rows if r.split == "train"]
    val_rows = [r for r in rows if r.split == "val"]
    if not train_rows:
        raise DatasetError(f"{manifest_path}: no training rows"
                           + (f" in group {group}" if group is not None else ""))

    def load_split(split_rows):
        return np.stack([pipe.canonicalize(read_image(resolve_path(manifest_path, r.path)))
                         for r in split_rows]) if split_rows else np.zeros((0, 256, 256, 3), np.uint8)

    train_images = load_split(train_rows)
    val_images = load_split(val_rows)
    train_labels = [r.label for r in train_rows]
    val_labels = [r.label for r in val_rows]

    train_filtered = val_filtered = None
    if two_path and filtered_dir is not None:
        params = bilateral_params or pipe.BilateralParams()
        os.makedirs(filtered_dir, exist_ok=True)

        def cached_split(split_rows, images):
            out = []
            for row, img in zip(split_rows, images):
                name = row.path.replace("/", "_").replace("\\", "_") + ".ppm"
                cache = os.path.join(filtered_dir, name)
                if os.path.exists(cache):
                    out.append(read_image(cache))
                else:
                    filtered = pipe.bilateral_filter(img, params)
                    write_image(cache, filtered)
                    out.append(filtered)
            return np.stack(out) if out else np.zeros((0, 256, 256, 3), np.uint8)

        train_filtered = cached_split(train_rows, train_images)
        val_filtered = cached_split(val_rows, val_images)

    return ArrayDataset(train_images, train_labels, val_images, val_labels,
                        two_path=two_path, bilateral_params=bilateral_params,
                        train_filtered=train_filtered, val_filtered=val_filtered)


# ---------------------------------------------------------------------------
# Metrics log

METRICS_HEADER = ["epoch", "batch", "split", "loss", "top1_error", "top5_error"]


def write_metrics(path, rows, config=None):
    """CSV with '#'-prefixed config echo lines before the header."""
    lines = []
    if config:
        for key in sorted(config):
            lines.append(f"# {key}={config[key]}")
    lines.append(",".join(METRICS_HEADER))
    for row in rows:
        e, b, s, loss, e1, e5 = row.as_list()
        lines.append(f"{e},{b},{s},{loss!r},{e1!r},{e5!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metrics(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("epoch,"):
                continue
            e, b, s, loss, e1, e5 = line.split(",")
            rows.append(MetricsRow(int(e), int(b), s, float(loss),
                                   float(e1), float(e5)))
    return rows


# ---------------------------------------------------------------------------
# Evaluation

def _batched(n, size):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def evaluate_metrics(net, src, fil, labels):
    """(mean loss, top-1 error, top-5 error) on prepared crop tensors."""
    probs, loss = net.forward(src, fil, labels=labels, mode="infer")
    k5 = min(5, net.spec.n_classes)
    return loss, topk_error(probs, labels, 1), topk_error(probs, labels, k5)


def evaluate_topk(net, dataset, k, crop, split="val", batch_size=100):
    """Center-crop top-k error over a whole split."""
    labels = dataset.val_labels if split == "val" else dataset.train_labels
    if len(labels) == 0:
        raise DatasetError(f"{split} split is empty")
    src_all, fil_all = (dataset.val_crops(crop) if split == "val"
                        else _train_center_crops(dataset, crop))
    wrong = 0
    for idx in _batched(len(labels), batch_size):
        probs, _ = net.forward(src_all[idx],
                               None if fil_all is None else fil_all[idx],
                               mode="infer")
        wrong += topk_error(probs, labels[idx], k) * len(idx)
    return wrong / len(labels)


def _train_center_crops(dataset, crop):
    src = np.stack([pipe.center_crop(img.astype(np.float32) - dataset.mean_source, crop)
                    for img in dataset.train_images])
    fil = None
    if dataset.two_path:
        fil = np.stack([pipe.center_crop(img.astype(np.float32) - dataset.mean_filtered, crop)
                        for img in dataset.train_filtered])
    return src, fil


# ---------------------------------------------------------------------------
# The training loop

def train(net, dataset, cfg, checkpoint_path=None, metrics_path=None,
          resume_from=None, log=None):
    """Run the epoch loop; returns (final Checkpoint, list of MetricsRow).

    Cadence: batches are numbered within each epoch; after every
    `validation_frequency` training batches one train row (averaged over
    that window) and one val row (a rotating validation batch) are
    appended, and the plateau rule is consulted.  A trailing partial
    window flushes as a train row at epoch end.  A checkpoint is written
    after every epoch; `resume_from` restores one and continues with the
    next epoch, reproducing the uninterrupted run exactly.
    """
    say = log or (lambda msg: None)
    if dataset.max_label() >= net.spec.n_classes:
        raise LabelError(f"label {dataset.max_label()} out of range for "
                         f"{net.spec.n_classes} classes")
    if dataset.two_path != (len(net.spec.paths) == 2):
        raise ParameterError("dataset path count does not match the network")

    state = SgdState(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    rows = []
    val_history = []
    lr = cfg.learning_rate
    start_epoch = 1

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expect_spec=net.spec)
        if ckpt.seed != cfg.seed:
            raise ParameterError(f"checkpoint seed {ckpt.seed} != config seed {cfg.seed}")
        net.set_params(ckpt.params)
        state.velocity = {name: arr.copy() for name, arr in ckpt.velocity.items()}
        lr = ckpt.sgd["learning_rate"]
        rows = [MetricsRow(int(r[0]), int(r[1]), r[2], float(r[3]),
                           float(r[4]), float(r[5])) for r in ckpt.metrics]
        val_history = [r.top1_error for r in rows if r.split == "val"]
        start_epoch = ckpt.epoch + 1
        if start_epoch > cfg.epochs:
            raise ParameterError(
                f"checkpoint already covers epoch {ckpt.epoch}; "
                f"nothing left of the {cfg.epochs}-epoch budget")
        say(f"resumed from {resume_from} after epoch {ckpt.epoch}")

    n_val_batches = len(val_history)
    ckpt = None
    for epoch in range(start_epoch, cfg.epochs + 1):
        order = keyed_rng(cfg.seed, SEED_SHUFFLE, epoch).permutation(dataset.n_train)
        window = []
        batch_no = 0
        for start in range(0, dataset.n_train, cfg.batch_size):
            batch_no += 1
            idx = order[start:start + cfg.batch_size]
            src, fil, labels = dataset.train_batch(idx, cfg.crop, cfg.seed, epoch)
            probs, loss = net.forward(
                src, fil, labels=labels, mode="train",
                dropout_rng=keyed_rng(cfg.seed, SEED_DROPOUT, epoch, batch_no))
            net.backward()
            state.learning_rate = lr
            net.step(state)
            k5 = min(5, net.spec.n_classes)
            window.append((loss, topk_error(probs, labels, 1),
                           topk_error(probs, labels, k5)))

            if batch_no % cfg.validation_frequency == 0:
                rows.append(_window_row(epoch, batch_no, window))
                window = []
                if dataset.n_val:
                    rows.append(_validation_row(net, dataset, cfg, epoch,
                                                batch_no, n_val_batches))
                    n_val_batches += 1
                    val_history.append(rows[-1].top1_error)
                    lr = lr_plateau_step(val_history, lr, cfg.patience,
                                         cfg.min_improvement, cfg.decay_factor)
        if window:
            rows.append(_window_row(epoch, batch_no, window))

        ckpt = Checkpoint(spec=net.spec, params=net.params(),
                          velocity=state.velocity,
                          sgd={"learning_rate": lr, "momentum": cfg.momentum,
                               "weight_decay": cfg.weight_decay},
                          epoch=epoch, seed=cfg.seed,
                          metrics=[r.as_list() for r in rows],
                          means=dataset.means())
        if checkpoint_path is not None:
            save_checkpoint(ckpt, checkpoint_path)
        if metrics_path is not None:
            write_metrics(metrics_path, rows, cfg.as_dict())
        last_val = val_history[-1] if val_history else float("nan")
        say(f"epoch {epoch}: train loss {rows[-1].loss:.4f}, "
            f"val top-1 {last_val:.4f}, lr {lr:g}")
    return ckpt, rows


def _window_row(epoch, batch_no, window):
    arr = np.asarray(window, dtype=np.float64)
    return MetricsRow(epoch, batch_no, "train", float(arr[:, 0].mean()),
                      float(arr[:, 1].mean()), float(arr[:, 2].mean()))


def _validation_row(net, dataset, cfg, epoch, batch_no, n_val_batches):
    src_all, fil_all = dataset.val_crops(cfg.crop)
    idx = (np.arange(n_val_batches * cfg.batch_size,
                     n_val_batches * cfg.batch_size
                     + min(cfg.batch_size, dataset.n_val))
           % dataset.n_val)
    loss, e1, e5 = evaluate_metrics(net, src_all[idx],
                                    None if fil_all is None else fil_all[idx],
                                    dataset.val_labels[idx])
    return MetricsRow(epoch, batch_no, "val", loss, e1, e5)
