import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import (
    AliasChoices,
    BaseModel,
    ConfigDict,
    Field,
    field_validator,
    model_validator,
)


Shape = Tuple[int, ...]
LayerKind = Literal["conv2d", "maxpool2d", "dense", "relu", "softmax", "dropout", "flatten"]
PARAM_KINDS = ("conv2d", "dense")
BLINK_CLASSES = ("open", "closed")


def _split_list(value: Any) -> Any:
    """Accept comma separated strings wherever a list is expected"""
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


class LayerSpec(BaseModel):
    """One row of a network architecture table"""
    model_config = ConfigDict(frozen=True)

    kind: LayerKind
    kernel: Optional[Tuple[int, int]] = None
    channels: Optional[int] = None
    units: Optional[int] = None
    pool: Optional[int] = None
    rate: float = 0.0

    @model_validator(mode="after")
    def _check_kind_params(self):
        if self.kind == "conv2d":
            if self.kernel is None or min(self.kernel) < 1:
                raise ValueError("conv2d kernel dims must be >= 1")
            if self.channels is None or self.channels < 1:
                raise ValueError("conv2d channels must be >= 1")
        elif self.kind == "dense":
            if self.units is None or self.units < 1:
                raise ValueError("dense units must be >= 1")
        elif self.kind == "maxpool2d":
            if self.pool is None or self.pool < 1:
                raise ValueError("maxpool2d pool size must be >= 1")
        elif self.kind == "dropout":
            if not 0.0 <= self.rate < 1.0:
                raise ValueError("dropout rate must be in [0, 1)")
        return self

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS


class NetworkSpec(BaseModel):
    """Ordered layer stack plus the input it expects"""
    model_config = ConfigDict(frozen=True)

    name: str = "network"
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, int, int]
    num_classes: int = Field(..., ge=1)

    @model_validator(mode="after")
    def _check_composition(self):
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ValueError("final layer must be softmax")
        shapes = self.layer_shapes()
        if shapes[-1] != (self.num_classes,):
            raise ValueError(
                f"network produces {shapes[-1]} outputs, expected ({self.num_classes},)"
            )
        return self

    def layer_shapes(self) -> List[Shape]:
        """Output shape of every layer, batch dimension excluded"""
        shape: Shape = tuple(self.input_shape)
        if min(shape) < 1:
            raise ValueError(f"input shape {shape} has a non-positive dimension")
        shapes = []
        for index, layer in enumerate(self.layers):
            if layer.kind == "conv2d":
                if len(shape) != 3:
                    raise ValueError(f"layer {index}: conv2d needs (H, W, C) input, got {shape}")
                kh, kw = layer.kernel
                if shape[0] < kh or shape[1] < kw:
                    raise ValueError(f"layer {index}: input {shape} smaller than kernel {layer.kernel}")
                shape = (shape[0] - kh + 1, shape[1] - kw + 1, layer.channels)
            elif layer.kind == "maxpool2d":
                if len(shape) != 3:
                    raise ValueError(f"layer {index}: maxpool2d needs (H, W, C) input, got {shape}")
                if shape[0] < layer.pool or shape[1] < layer.pool:
                    raise ValueError(f"layer {index}: input {shape} smaller than pool {layer.pool}")
                shape = (shape[0] // layer.pool, shape[1] // layer.pool, shape[2])
            elif layer.kind == "flatten":
                shape = (math.prod(shape),)
            elif layer.kind in ("dense", "softmax"):
                if len(shape) != 1:
                    raise ValueError(f"layer {index}: {layer.kind} needs flat input, got {shape}")
                if layer.kind == "dense":
                    shape = (layer.units,)
            shapes.append(shape)
        return shapes

    @property
    def dropout_count(self) -> int:
        return sum(1 for layer in self.layers if layer.kind == "dropout")


class ClientConfig(BaseModel):
    """Client-side MC-dropout settings"""
    model_config = ConfigDict(populate_by_name=True)

    passes: int = Field(3, ge=1, validation_alias=AliasChoices("M", "passes"))
    epsilon: float = Field(0.025, ge=0.0)


class UncertaintyRecord(BaseModel):
    """Confidence and uncertainty of one scored image"""
    sample_id: int
    r: float = Field(..., ge=0.0, le=1.0)
    alpha: float = Field(..., ge=0.0)
    predicted_class: int
    client_id: int = -1
    round: int = 0
    uploaded: bool = False


class GaborParams(BaseModel):
    """Real Gabor kernel parameters"""
    model_config = ConfigDict(populate_by_name=True)

    theta: float = 0.0
    wavelength: float = Field(4.0, gt=0.0, validation_alias=AliasChoices("lambda", "wavelength"))
    sigma: float = Field(2.24, gt=0.0)
    gamma: float = 0.5
    psi: float = 0.0
    size: int = 7

    @field_validator("size")
    @classmethod
    def _odd_size(cls, v: int) -> int:
        if v < 3 or v % 2 == 0:
            raise ValueError("kernel size must be odd and >= 3")
        return v


class FrameStateSequence(BaseModel):
    """Per-frame eye states of a video clip"""
    states: List[Literal["open", "closed"]] = Field(..., min_length=1)
    fps: float = Field(30.0, gt=0.0)


class FatigueState(BaseModel):
    """PERCLOS verdict over one client's frames, read as a clip in shard order"""
    client_id: int
    frames: int = Field(..., ge=0)
    closed_fraction: float = Field(..., ge=0.0, le=1.0)
    peak_perclos: float = Field(..., ge=0.0, le=1.0)
    judgment: Literal["alert", "fatigued"]


class SyntheticBlinkSpec(BaseModel):
    """Parameters of the synthetic eye-state generator"""
    image_size: Tuple[int, int] = (24, 24)
    num_samples: int = Field(2500, ge=0)
    noise_std: float = Field(0.15, ge=0.0)
    jitter_px: int = Field(2, ge=0)
    seed: int = 0

    @field_validator("image_size")
    @classmethod
    def _min_size(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        if min(v) < 12:
            raise ValueError("image height and width must be >= 12")
        return v


class PartitionSpec(BaseModel):
    """Unbalanced normal-size partition request"""
    num_parts: int = Field(..., ge=1)
    mu: float = Field(..., ge=1.0)
    sigma: float = Field(0.0, ge=0.0)
    seed: int = 0
    sigma_is_variance: bool = False

    @property
    def spread(self) -> float:
        """Standard deviation actually used for the size draw"""
        return math.sqrt(self.sigma) if self.sigma_is_variance else self.sigma


class Partition(BaseModel):
    """Disjoint index lists, one per client"""
    parts: List[List[int]]

    @property
    def sizes(self) -> List[int]:
        return [len(p) for p in self.parts]


class FederationConfig(BaseModel):
    """Round-loop settings shared by the federated run and its baselines"""
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    edges: int = Field(10, ge=1, validation_alias=AliasChoices("K", "edges"))
    clients: int = Field(50, ge=1, validation_alias=AliasChoices("N", "clients"))
    fraction: float = Field(0.3, gt=0.0, le=1.0, validation_alias=AliasChoices("C", "fraction"))
    local_epochs: int = Field(5, ge=1, validation_alias=AliasChoices("E", "local_epochs"))
    eta: float = Field(0.01, ge=0.0)
    passes: int = Field(3, ge=1, validation_alias=AliasChoices("M", "passes"))
    epsilon: float = Field(0.025, ge=0.0)
    rounds: int = Field(200, ge=0, validation_alias=AliasChoices("T", "rounds"))
    batch_size: int = Field(32, ge=1)
    aggregator: Literal["uwaa", "fedavg"] = "uwaa"
    normalize_weights: bool = True
    persistent_buffer: bool = True
    target_accuracy: float = Field(0.90, gt=0.0, le=1.0)
    stop_at_target: bool = False
    feature_pretrain_rounds: int = Field(0, ge=0)
    feature_kind: Literal["gabor", "lbp"] = "lbp"
    edge_workers: int = Field(1, ge=1)

    @property
    def edges_per_round(self) -> int:
        return max(1, math.ceil(self.fraction * self.edges))

    @property
    def client_config(self) -> ClientConfig:
        return ClientConfig(passes=self.passes, epsilon=self.epsilon)


class ExperimentConfig(FederationConfig):
    """Declarative spec of one experiment, every seed included"""

    name: str = "experiment"
    mode: Literal["federated", "centralized", "standalone"] = "federated"
    network: Literal["blink", "landmark"] = "blink"
    dropout_conv: float = Field(0.25, ge=0.0, lt=1.0)
    dropout_dense: float = Field(0.5, ge=0.0, lt=1.0)
    dataset_path: Optional[str] = None
    image_size: Tuple[int, int] = (24, 24)
    num_samples: int = Field(2500, ge=1)
    noise_std: float = Field(0.15, ge=0.0)
    jitter_px: int = Field(2, ge=0)
    data_seed: int = 0
    mu: float = Field(40.0, ge=1.0)
    sigma: float = Field(3.0, ge=0.0)
    sigma_is_variance: bool = False
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    checkpoint_every: int = Field(0, ge=0)
    # fatigue.csv: each client shard is replayed as a clip at this frame rate
    fps: float = Field(30.0, gt=0.0)
    perclos_threshold: float = Field(0.4, gt=0.0, lt=1.0)

    @field_validator("seeds", mode="before")
    @classmethod
    def _parse_seeds(cls, v: Any) -> Any:
        return _split_list(v)

    @field_validator("image_size", mode="before")
    @classmethod
    def _parse_image_size(cls, v: Any) -> Any:
        if isinstance(v, int):
            return (v, v)
        if isinstance(v, str):
            parts = [p for p in v.lower().replace("x", ",").split(",") if p.strip()]
            return tuple(parts * 2 if len(parts) == 1 else parts)
        return v

    @field_validator("image_size")
    @classmethod
    def _min_image(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        if min(v) < 12:
            raise ValueError("image height and width must be >= 12")
        return v

    @model_validator(mode="after")
    def _check_dataset(self):
        if self.dataset_path is not None:
            from pathlib import Path
            if not Path(self.dataset_path).is_file():
                raise ValueError(f"dataset_path does not exist: {self.dataset_path}")
        return self

    def blink_spec(self) -> SyntheticBlinkSpec:
        return SyntheticBlinkSpec(
            image_size=self.image_size,
            num_samples=self.num_samples,
            noise_std=self.noise_std,
            jitter_px=self.jitter_px,
            seed=self.data_seed,
        )

    def partition_spec(self, seed: int) -> PartitionSpec:
        return PartitionSpec(
            num_parts=self.clients,
            mu=self.mu,
            sigma=self.sigma,
            seed=seed,
            sigma_is_variance=self.sigma_is_variance,
        )


class SweepSpec(BaseModel):
    """One axis of the parameter grid"""
    base: ExperimentConfig
    axis: str
    values: List[Any] = Field(..., min_length=1)


class RoundMetrics(BaseModel):
    """Measurements of one cloud round"""
    round: int = Field(..., ge=0)
    accuracy: float
    uploads_images: int = Field(0, ge=0)
    uploads_bytes: int = Field(0, ge=0)
    params_bytes_exchanged: int = Field(0, ge=0)
    selected_edges: List[int] = []
    mean_alpha: float = 0.0
    eligible_images: int = Field(0, ge=0)
    # every image held by every client, selected or not
    total_images: int = Field(0, ge=0)


class RunSummary(BaseModel):
    """Headline numbers of a single seeded run"""
    seed: int = 0
    target: float
    best_accuracy: float = 0.0
    best_round: Optional[int] = None
    rounds_to_target: Optional[int] = None
    rounds_executed: int = 0
    total_upload_ratio: float = Field(0.0, ge=0.0, le=1.0)
    total_uploads_images: int = 0
    total_params_bytes: int = 0

    @property
    def reached(self) -> bool:
        return self.rounds_to_target is not None


class SeedStatistics(BaseModel):
    """Average(Standard Deviation) presentation over seeds"""
    runs: int
    best_accuracy_mean: float
    best_accuracy_std: float
    rounds_mean: Optional[float] = None
    rounds_std: Optional[float] = None
    rounds_median: Optional[float] = None
    reached: int = 0
    upload_ratio_mean: float = 0.0


class ComparisonReport(BaseModel):
    """Candidate run set measured against a baseline run set"""
    target: float
    baseline: SeedStatistics
    candidate: SeedStatistics
    baseline_median_rounds: float
    candidate_median_rounds: float
    round_reduction: Optional[float] = None
    reduction_bound: Literal["exact", "lower", "upper", "indeterminate"] = "exact"
    baseline_not_reached: int = 0
    candidate_not_reached: int = 0


class Preset(BaseModel):
    """Named configuration shipped with the simulator"""
    name: str
    description: str = ""
    values: Dict[str, Any] = {}


@dataclass
class LabeledDataset:
    """Stacked eye images (n, H, W, C) in [0, 1] with integer labels"""
    images: np.ndarray
    labels: np.ndarray
    class_names: List[str] = field(default_factory=lambda: list(BLINK_CLASSES))

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("labels out of range of class_names")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], list(self.class_names))
