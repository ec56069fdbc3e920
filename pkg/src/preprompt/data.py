"""Dataset ingestion: IDX binary files, synthetic class banks, embedding export."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, IdxParseError
from .translation import compute_prototypes

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledImageSet:
    images: np.ndarray            # (n, H, W, C) float64 scaled to [0, 1]
    labels: np.ndarray            # (n,) int64
    class_names: list[str] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DomainError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx: np.ndarray) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx], self.class_names)


def _read_u32(buf: bytes, offset: int, path) -> int:
    if offset + 4 > len(buf):
        raise IdxParseError(f"{path}: truncated at offset {offset}")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path, labels_path) -> LabeledImageSet:
    """Parse an IDX image/label file pair (big-endian, ubyte payloads).

    Pixels are scaled by 1/255. Errors name the failing byte offset.
    """
    with open(images_path, "rb") as fh:
        ibuf = fh.read()
    with open(labels_path, "rb") as fh:
        lbuf = fh.read()

    magic = _read_u32(ibuf, 0, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxParseError(
            f"{images_path}: bad image magic 0x{magic:08x} at offset 0")
    n = _read_u32(ibuf, 4, images_path)
    rows = _read_u32(ibuf, 8, images_path)
    cols = _read_u32(ibuf, 12, images_path)
    need = 16 + n * rows * cols
    if len(ibuf) < need:
        raise IdxParseError(f"{images_path}: truncated at offset {len(ibuf)}, "
                            f"expected {need} bytes")
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = pixels.reshape(n, rows, cols, 1).astype(np.float64) / 255.0

    magic = _read_u32(lbuf, 0, labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxParseError(
            f"{labels_path}: bad label magic 0x{magic:08x} at offset 0")
    n_labels = _read_u32(lbuf, 4, labels_path)
    if len(lbuf) < 8 + n_labels:
        raise IdxParseError(f"{labels_path}: truncated at offset {len(lbuf)}")
    if n_labels != n:
        raise IdxParseError(
            f"count mismatch: {n} images vs {n_labels} labels")
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=n_labels, offset=8)
    return LabeledImageSet(images, labels.astype(np.int64))


def write_idx(dataset: LabeledImageSet, images_path, labels_path) -> None:
    """Encode a dataset back to the IDX pair (inverse of ``load_idx``)."""
    images = dataset.images
    if images.shape[3] != 1:
        raise DomainError("IDX images are single-channel")
    n, rows, cols, _ = images.shape
    pixels = np.clip(np.round(images[..., 0] * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def gen_synthetic(n_classes: int, per_class: int, *, image_h: int = 28,
                  image_w: int = 28, channels: int = 1, noise: float = 0.12,
                  seed: int = 0, class_id_offset: int = 0) -> LabeledImageSet:
    """Synthetic class bank: per-class low-frequency pattern plus pixel noise.

    Each class gets a distinct sum of low-frequency cosine waves (seeded);
    samples add i.i.d. Gaussian noise and clip to [0, 1]. Different seeds
    give disjoint banks, so a pretraining bank never overlaps a benchmark
    bank. ``noise`` controls difficulty; 0 makes all samples of a class
    identical.
    """
    if n_classes < 2:
        raise DomainError("need at least two classes")
    if per_class < 1 or noise < 0:
        raise DomainError("per-class count must be >= 1 and noise >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([0x5E41, seed]))
    yy, xx = np.mgrid[0:image_h, 0:image_w]
    images = np.empty((n_classes * per_class, image_h, image_w, channels))
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    for c in range(n_classes):
        pattern = np.zeros((image_h, image_w))
        for _ in range(3):
            amp = rng.uniform(0.5, 1.0)
            fx = rng.uniform(0.3, 1.5)
            fy = rng.uniform(0.3, 1.5)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            pattern += amp * np.cos(2.0 * np.pi * (fx * xx / image_w
                                                   + fy * yy / image_h) + phase)
        lo, hi = pattern.min(), pattern.max()
        pattern = 0.15 + 0.7 * (pattern - lo) / max(hi - lo, 1e-12)
        block = slice(c * per_class, (c + 1) * per_class)
        samples = pattern[None, :, :, None] + rng.normal(
            0.0, noise, size=(per_class, image_h, image_w, channels))
        images[block] = np.clip(samples, 0.0, 1.0)
        labels[block] = class_id_offset + c
    return LabeledImageSet(images, labels)


def export_embeddings(learner, dataset: LabeledImageSet, path) -> None:
    """Write prompted features, predicted task, and true class per sample,
    followed by one mean-feature row per class, as CSV."""
    dim = learner.backbone.config.embed_dim
    header = ["kind", "true_class", "predicted_task"] + [f"f{i}" for i in range(dim)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        if len(dataset) == 0:
            return
        feats = learner.features(dataset.images)
        tasks = learner.predict_task_from_features(feats)
        prompted = np.zeros_like(feats)
        for task in np.unique(tasks):
            mask = tasks == task
            from .prompts import batch_features
            prompted[mask] = batch_features(dataset.images[mask], learner.backbone,
                                            learner.pool, int(task))
        for i in range(len(dataset)):
            writer.writerow(["sample", int(dataset.labels[i]), int(tasks[i])]
                            + [repr(float(v)) for v in prompted[i]])
        by_class = {int(c): prompted[dataset.labels == c]
                    for c in np.unique(dataset.labels)}
        means = compute_prototypes(by_class)
        for c in sorted(means):
            writer.writerow(["mean", c, ""] + [repr(float(v)) for v in means[c]])
