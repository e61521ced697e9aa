"""
Classical eye features: Gabor filter bank, LBP codes and the PERCLOS fatigue criterion.
"""

import logging
from typing import List, Literal, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import convolve2d

from src.errors import RejectedInputError
from src.models import FatigueState, FrameStateSequence, GaborParams
from src.tensor_nn import Tensor

logger = logging.getLogger(__name__)

DEFAULT_ORIENTATIONS = 4
DEFAULT_WAVELENGTHS = (4.0, 8.0)
SIGMA_PER_WAVELENGTH = 0.56
DEFAULT_GAMMA = 0.5
DEFAULT_KERNEL_SIZE = 7
DEFAULT_PERCLOS_THRESHOLD = 0.4

# clockwise from top-left; the first neighbor is the most significant bit
LBP_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def _grayscale(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim != 2:
        raise RejectedInputError(f"Expected a grayscale image, got shape {image.shape}")
    return image


def gabor_kernel(p: GaborParams) -> Tensor:
    """Real Gabor kernel sampled on a size x size grid centered at the midpoint"""
    half = p.size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    x_rot = x * np.cos(p.theta) + y * np.sin(p.theta)
    y_rot = -x * np.sin(p.theta) + y * np.cos(p.theta)
    envelope = np.exp(-(x_rot ** 2 + p.gamma ** 2 * y_rot ** 2) / (2 * p.sigma ** 2))
    carrier = np.cos(2 * np.pi * x_rot / p.wavelength + p.psi)
    return (envelope * carrier).astype(np.float32)


def bank_params(orientations: int = DEFAULT_ORIENTATIONS, scales: int = len(DEFAULT_WAVELENGTHS),
                psi: float = 0.0, size: int = DEFAULT_KERNEL_SIZE,
                base_wavelength: float = DEFAULT_WAVELENGTHS[0]) -> List[GaborParams]:
    """Orientations k·π/K for each wavelength base·2^s, scale-major order"""
    if orientations < 1 or scales < 1:
        raise RejectedInputError("A Gabor bank needs at least one orientation and one scale")
    params = []
    for s in range(scales):
        wavelength = base_wavelength * 2 ** s
        for k in range(orientations):
            params.append(GaborParams(
                theta=k * np.pi / orientations,
                wavelength=wavelength,
                sigma=SIGMA_PER_WAVELENGTH * wavelength,
                gamma=DEFAULT_GAMMA,
                psi=psi,
                size=size,
            ))
    return params


def gabor_bank(image, orientations: int = DEFAULT_ORIENTATIONS, scales: int = len(DEFAULT_WAVELENGTHS),
               psi: float = 0.0, size: int = DEFAULT_KERNEL_SIZE) -> Tensor:
    """Valid-mode convolution with every bank kernel, stacked as (H', W', K·S)"""
    gray = _grayscale(image)
    if gray.shape[0] < size or gray.shape[1] < size:
        raise RejectedInputError(f"Image {gray.shape} is smaller than the {size}x{size} kernel")
    responses = [
        convolve2d(gray, gabor_kernel(p).astype(np.float64), mode="valid")
        for p in bank_params(orientations, scales, psi, size)
    ]
    return np.stack(responses, axis=-1).astype(np.float32)


def lbp_map(image) -> np.ndarray:
    """8-bit LBP code of every interior pixel; bit set iff neighbor >= center"""
    gray = _grayscale(image)
    h, w = gray.shape
    if h < 3 or w < 3:
        raise RejectedInputError(f"LBP needs at least a 3x3 image, got {gray.shape}")
    center = gray[1:-1, 1:-1]
    codes = np.zeros(center.shape, dtype=np.uint8)
    for bit, (dy, dx) in enumerate(LBP_NEIGHBORS):
        neighbor = gray[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
        codes |= (neighbor >= center).astype(np.uint8) << np.uint8(7 - bit)
    return codes


def feature_image(image, kind: Literal["gabor", "lbp"] = "lbp") -> Tensor:
    """Same-size single-channel feature map in [0, 1], used for feature-map pretraining"""
    gray = _grayscale(image)
    if kind == "lbp":
        fmap = lbp_map(gray).astype(np.float64) / 255.0
    elif kind == "gabor":
        fmap = np.abs(gabor_bank(gray)).mean(axis=-1).astype(np.float64)
        peak = fmap.max()
        if peak > 0:
            fmap = fmap / peak
    else:
        raise RejectedInputError(f"Unknown feature kind '{kind}'")
    pad_h = gray.shape[0] - fmap.shape[0]
    pad_w = gray.shape[1] - fmap.shape[1]
    fmap = np.pad(fmap, ((pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)), mode="edge")
    return fmap[:, :, None].astype(np.float32)


def feature_images(images: Tensor, kind: Literal["gabor", "lbp"] = "lbp") -> Tensor:
    return np.stack([feature_image(img, kind) for img in images]) if len(images) else np.asarray(images)


def default_window(seq: FrameStateSequence) -> int:
    """Two seconds of frames, capped at the sequence length"""
    return max(1, min(len(seq.states), int(round(2 * seq.fps))))


def perclos(seq: FrameStateSequence, window_frames: int) -> np.ndarray:
    """Sliding-window fraction of closed frames"""
    if not 1 <= window_frames <= len(seq.states):
        raise RejectedInputError(f"Window {window_frames} must be in [1, {len(seq.states)}]")
    closed = np.array([s == "closed" for s in seq.states], dtype=np.int64)
    counts = sliding_window_view(closed, window_frames).sum(axis=1)
    return counts / window_frames


def fatigue_judgment(perclos_values: Sequence[float],
                     threshold: float = DEFAULT_PERCLOS_THRESHOLD) -> List[str]:
    if not 0.0 < threshold < 1.0:
        raise RejectedInputError(f"PERCLOS threshold must be in (0, 1), got {threshold}")
    return ["fatigued" if v >= threshold else "alert" for v in perclos_values]


def closed_runs(seq: FrameStateSequence) -> List[Tuple[int, int]]:
    """(start frame, length) of every maximal run of closed frames"""
    runs = []
    start = None
    for index, state in enumerate(list(seq.states) + ["open"]):
        if state == "closed" and start is None:
            start = index
        elif state != "closed" and start is not None:
            runs.append((start, index - start))
            start = None
    return runs


def consecutive_closed(seq: FrameStateSequence, min_frames: int) -> List[bool]:
    """Frames that belong to a closed run at least min_frames long"""
    if min_frames < 1:
        raise RejectedInputError("min_frames must be >= 1")
    flags = [False] * len(seq.states)
    for start, length in closed_runs(seq):
        if length >= min_frames:
            flags[start:start + length] = [True] * length
    return flags


def states_from_predictions(predicted_classes: Sequence[int], fps: float,
                            closed_class: int = 1) -> FrameStateSequence:
    states = ["closed" if int(c) == closed_class else "open" for c in predicted_classes]
    return FrameStateSequence(states=states, fps=fps)


def assess_fatigue(client_id: int, predicted_classes: Sequence[int], fps: float,
                   threshold: float = DEFAULT_PERCLOS_THRESHOLD, closed_class: int = 1) -> FatigueState:
    """Fatigued iff any two-second PERCLOS window reaches the threshold"""
    if len(predicted_classes) == 0:
        return FatigueState(client_id=client_id, frames=0, closed_fraction=0.0, peak_perclos=0.0, judgment="alert")
    seq = states_from_predictions(predicted_classes, fps, closed_class)
    values = perclos(seq, default_window(seq))
    judgments = fatigue_judgment(values, threshold)
    return FatigueState(
        client_id=client_id,
        frames=len(seq.states),
        closed_fraction=float(np.mean([s == "closed" for s in seq.states])),
        peak_perclos=float(values.max()),
        judgment="fatigued" if "fatigued" in judgments else "alert",
    )
