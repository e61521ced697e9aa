"""
MC-dropout scoring on the client and the uncertainty-filtered upload.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from src.errors import RejectedInputError
from src.models import ClientConfig, NetworkSpec, UncertaintyRecord
from src.tensor_nn import ModelParams, RngStream, Tensor, forward

logger = logging.getLogger(__name__)

RecordSink = Callable[[UncertaintyRecord], None]


@dataclass
class ClientShard:
    """The images one client holds locally, with their global sample ids"""
    client_id: int
    sample_ids: np.ndarray
    images: Tensor
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.sample_ids)


@dataclass(frozen=True)
class UploadEntry:
    image: Tensor
    label: int
    alpha: float


@dataclass
class UploadDict:
    """sample_id -> uploaded image with its uncertainty"""
    entries: Dict[int, UploadEntry] = field(default_factory=dict)
    epsilon: float = 0.0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, sample_id: int) -> bool:
        return sample_id in self.entries


def mc_predict_batch(spec: NetworkSpec, params: ModelParams, images: Tensor, passes: int,
                     rng: RngStream) -> np.ndarray:
    """M stochastic passes over a batch; returns (M, B, num_classes)"""
    if passes < 1:
        raise RejectedInputError(f"M must be >= 1, got {passes}")
    return np.stack([forward(spec, params, images, dropout_enabled=True, rng=rng) for _ in range(passes)])


def mc_predict(spec: NetworkSpec, params: ModelParams, image: Tensor, passes: int,
               rng: RngStream) -> Tuple[np.ndarray, np.ndarray]:
    """Mean probabilities and the (M, num_classes) per-pass matrix for one image"""
    image = np.asarray(image)
    per_pass = mc_predict_batch(spec, params, image[None, ...], passes, rng)[:, 0, :]
    return per_pass.mean(axis=0), per_pass


def confidence_uncertainty(per_pass_probs) -> Tuple[float, float, int]:
    """
    r and alpha of the predicted class across the M passes.

    The predicted class is the argmax of the column means. r is the mean of that
    class's per-pass probability and alpha its population variance around r.
    """
    probs = np.asarray(per_pass_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.size == 0:
        raise RejectedInputError(f"Expected a non-empty (M, classes) matrix, got shape {probs.shape}")
    predicted = int(probs.mean(axis=0).argmax())
    column = probs[:, predicted]
    if np.all(column == column[0]):
        return float(column[0]), 0.0, predicted
    r = float(column.mean())
    alpha = float(np.mean((r - column) ** 2))
    return r, alpha, predicted


def score_images(spec: NetworkSpec, params: ModelParams, images: Tensor, passes: int,
                 rng: RngStream):
    """(r, alpha, predicted_class) for every image of a batch"""
    if len(images) == 0:
        return []
    per_pass = mc_predict_batch(spec, params, images, passes, rng)
    return [confidence_uncertainty(per_pass[:, i, :]) for i in range(per_pass.shape[1])]


def client_upload(client_id: int, spec: NetworkSpec, params: ModelParams, local_images: ClientShard,
                  config: ClientConfig, rng: RngStream, round_index: int = 0,
                  sink: Optional[RecordSink] = None) -> UploadDict:
    """Score every local image and keep those with alpha >= epsilon"""
    uploads = UploadDict(epsilon=config.epsilon)
    scores = score_images(spec, params, local_images.images, config.passes, rng)
    for position, (r, alpha, predicted) in enumerate(scores):
        sample_id = int(local_images.sample_ids[position])
        uploaded = alpha >= config.epsilon
        if uploaded:
            uploads.entries[sample_id] = UploadEntry(
                image=local_images.images[position],
                label=int(local_images.labels[position]),
                alpha=alpha,
            )
        if sink is not None:
            sink(UncertaintyRecord(
                sample_id=sample_id,
                r=min(max(r, 0.0), 1.0),
                alpha=alpha,
                predicted_class=predicted,
                client_id=client_id,
                round=round_index,
                uploaded=uploaded,
            ))
    logger.debug(
        f"client {client_id}: uploaded {len(uploads)}/{len(local_images)} images (epsilon={config.epsilon})"
    )
    return uploads
