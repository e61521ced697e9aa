"""
Synthetic eye-state data, the unbalanced normal-size partitioner and the FSDS dataset file.
"""

import hashlib
import logging
import struct
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from src.errors import DatasetFormatError, RejectedInputError
from src.models import (
    BLINK_CLASSES,
    LabeledDataset,
    Partition,
    PartitionSpec,
    SyntheticBlinkSpec,
)
from src.uncertainty import ClientShard

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"FSDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4s6I")

BACKGROUND = 0.5
OUTLINE = 0.95
DARK = 0.05


def _eye_image(h: int, w: int, cx: float, cy: float, closed: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    a, b = 0.38 * w, 0.22 * h
    image = np.full((h, w), BACKGROUND)
    if closed:
        # lid line sagging downward in the middle
        inside = np.abs(xx - cx) <= a
        arc = cy + 0.35 * b * (1.0 - ((xx - cx) / a) ** 2)
        image[inside & (np.abs(yy - arc) < 0.8)] = DARK
    else:
        radius = np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2)
        image[np.abs(radius - 1.0) < 0.18] = OUTLINE
        image[(xx - cx) ** 2 + (yy - cy) ** 2 <= (0.7 * b) ** 2] = DARK
    return image


def generate_blink_dataset(spec: SyntheticBlinkSpec) -> LabeledDataset:
    """Alternating open/closed eyes with jittered centers and clipped Gaussian noise"""
    h, w = spec.image_size
    rng = np.random.default_rng(spec.seed)
    images = np.empty((spec.num_samples, h, w, 1), dtype=np.float32)
    labels = np.arange(spec.num_samples, dtype=np.int64) % 2
    for i in range(spec.num_samples):
        dy, dx = rng.integers(-spec.jitter_px, spec.jitter_px + 1, size=2)
        image = _eye_image(h, w, (w - 1) / 2 + dx, (h - 1) / 2 + dy, closed=bool(labels[i]))
        if spec.noise_std > 0:
            image = image + rng.normal(0.0, spec.noise_std, size=(h, w))
        images[i, :, :, 0] = np.clip(image, 0.0, 1.0)
    logger.info(f"Generated {spec.num_samples} synthetic eye images of {h}x{w} (seed {spec.seed})")
    return LabeledDataset(images, labels, list(BLINK_CLASSES))


def train_test_split(dataset: LabeledDataset, test_fraction: float,
                     seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    if not 0.0 < test_fraction < 1.0:
        raise RejectedInputError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n_test >= n:
        raise RejectedInputError(f"Cannot hold out {test_fraction:.0%} of {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


def draw_part_sizes(spec: PartitionSpec, capacity: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Rounded Normal(mu, spread²) sizes, clamped at 1, shrunk proportionally to fit capacity"""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    sizes = np.maximum(np.rint(rng.normal(spec.mu, spec.spread, spec.num_parts)).astype(np.int64), 1)
    if capacity is not None:
        if capacity < spec.num_parts:
            raise RejectedInputError(f"{capacity} samples cannot fill {spec.num_parts} non-empty parts")
        while sizes.sum() > capacity:
            sizes = np.maximum(np.floor(sizes * (capacity / sizes.sum())).astype(np.int64), 1)
    return sizes


def partition_indices(num_samples: int, spec: PartitionSpec) -> Partition:
    if num_samples < spec.num_parts:
        raise RejectedInputError(f"Dataset of {num_samples} samples is smaller than N={spec.num_parts}")
    rng = np.random.default_rng(spec.seed)
    sizes = draw_part_sizes(spec, capacity=num_samples, rng=rng)
    order = rng.permutation(num_samples)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    parts = [order[bounds[i]:bounds[i + 1]].tolist() for i in range(spec.num_parts)]
    return Partition(parts=parts)


def partition_unbalanced(dataset: LabeledDataset, spec: PartitionSpec) -> Partition:
    partition = partition_indices(len(dataset), spec)
    logger.debug(f"Partitioned {len(dataset)} samples into sizes {partition.sizes}")
    return partition


def assign_clients(num_clients: int, num_edges: int) -> List[List[int]]:
    """Round-robin: client n is attached to edge n mod K"""
    return [list(range(k, num_clients, num_edges)) for k in range(num_edges)]


def shard_for(dataset: LabeledDataset, partition: Partition, client_id: int) -> ClientShard:
    ids = np.asarray(partition.parts[client_id], dtype=np.int64)
    return ClientShard(client_id, ids, dataset.images[ids], dataset.labels[ids])


# ---------------------------------------------------------------------------
# FSDS file format
# ---------------------------------------------------------------------------

def _record_dtype(h: int, w: int, c: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("pixels", "<f4", (h, w, c))])


def save_dataset(dataset: LabeledDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, c = dataset.image_shape
    records = np.empty(len(dataset), dtype=_record_dtype(h, w, c))
    records["label"] = dataset.labels
    records["pixels"] = dataset.images
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(dataset), h, w, c, len(dataset.class_names))
    path.write_bytes(header + records.tobytes())


def load_dataset(path) -> LabeledDataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError("Truncated header", len(blob))
    magic, version, count, h, w, c, num_classes = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError("Bad magic, expected FSDS", 0)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"Unsupported format version {version}", 4)
    if min(h, w, c) < 1 or num_classes < 1:
        raise DatasetFormatError(f"Invalid dimensions {h}x{w}x{c} / {num_classes} classes", 12)
    dtype = _record_dtype(h, w, c)
    payload = len(blob) - _HEADER.size
    complete = payload // dtype.itemsize
    if complete < count:
        raise DatasetFormatError(
            f"Truncated payload: {complete} of {count} samples present",
            _HEADER.size + complete * dtype.itemsize,
        )
    if payload != count * dtype.itemsize:
        raise DatasetFormatError("Trailing bytes after last sample", _HEADER.size + count * dtype.itemsize)
    records = np.frombuffer(blob, dtype=dtype, count=count, offset=_HEADER.size)
    labels = records["label"].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if len(bad):
        raise DatasetFormatError(f"Label {labels[bad[0]]} out of range", _HEADER.size + int(bad[0]) * dtype.itemsize)
    if num_classes == len(BLINK_CLASSES):
        names = list(BLINK_CLASSES)
    else:
        names = [f"class_{i}" for i in range(num_classes)]
    images = records["pixels"].astype(np.float32).reshape(count, h, w, c)
    return LabeledDataset(images, labels, names)


def dataset_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
