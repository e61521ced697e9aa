"""
Client-edge-cloud state machines, UWAA/FedAVG aggregation and the SGD baselines.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.data_service import assign_clients, shard_for
from src.errors import RejectedInputError
from src.features import feature_images
from src.metrics import MetricsSink
from src.models import (
    FederationConfig,
    LabeledDataset,
    NetworkSpec,
    Partition,
    RoundMetrics,
    UncertaintyRecord,
)
from src.tensor_nn import (
    ModelParams,
    RngStream,
    check_params,
    evaluate,
    init_params,
    save_params,
    serialized_size,
    train_epochs,
    weighted_sum,
)
from src.uncertainty import ClientShard, UploadEntry, client_upload

logger = logging.getLogger(__name__)

# stream keys; every consumer of randomness derives its own stream from the run root
INIT_KEY = 1
SELECT_KEY = 2
EDGE_KEY = 3
TRAIN_KEY = 4
CLIENT_KEY = 5


def _edge_stream(rng: RngStream, round_index: int, edge_id: int) -> RngStream:
    return rng.child(EDGE_KEY, round_index, edge_id)


@dataclass
class EdgeState:
    edge_id: int
    clients: List[ClientShard]
    buffer: Dict[int, UploadEntry] = field(default_factory=dict)
    local_params: Optional[ModelParams] = None
    alpha_E: float = 0.0

    @property
    def client_ids(self) -> List[int]:
        return [c.client_id for c in self.clients]

    @property
    def local_images(self) -> int:
        return sum(len(c) for c in self.clients)


@dataclass
class EdgeUpdateResult:
    """What an edge hands back to the cloud; params is None when the edge skipped the round"""
    edge_id: int
    params: Optional[ModelParams]
    alpha_E: float
    n_k: int
    uploads_images: int = 0
    eligible_images: int = 0
    records: List[UncertaintyRecord] = field(default_factory=list)
    loss: float = 0.0

    @property
    def skipped(self) -> bool:
        return self.params is None


@dataclass
class AggregationRecord:
    round: int
    contributors: List[int]
    weights: List[float]
    skipped: List[int]
    accuracy: float


@dataclass
class CloudState:
    round: int
    omega_C: ModelParams
    history: List[AggregationRecord] = field(default_factory=list)

    @property
    def accuracies(self) -> List[float]:
        return [record.accuracy for record in self.history]


@dataclass
class Trajectory:
    accuracies: List[float]
    params: ModelParams
    losses: List[float] = field(default_factory=list)

    @property
    def best_accuracy(self) -> float:
        return max(self.accuracies) if self.accuracies else 0.0


def build_edges(dataset: LabeledDataset, partition: Partition, num_edges: int) -> List[EdgeState]:
    """Attach clients to edges round-robin"""
    assignment = assign_clients(len(partition.parts), num_edges)
    return [
        EdgeState(edge_id=k, clients=[shard_for(dataset, partition, n) for n in client_ids])
        for k, client_ids in enumerate(assignment)
    ]


def _training_inputs(images: np.ndarray, cfg: FederationConfig, round_index: int) -> np.ndarray:
    if round_index < cfg.feature_pretrain_rounds:
        return feature_images(images, cfg.feature_kind)
    return images


def edge_update(state: EdgeState, omega_C: ModelParams, cfg: FederationConfig, rng: RngStream,
                spec: NetworkSpec, round_index: int = 0) -> EdgeUpdateResult:
    """Download the cloud model, collect uncertain uploads, train E epochs on the buffer"""
    check_params(spec, omega_C)
    state.local_params = omega_C
    if not cfg.persistent_buffer:
        state.buffer.clear()

    records: List[UncertaintyRecord] = []
    uploads = 0
    for shard in state.clients:
        uploaded = client_upload(
            shard.client_id, spec, omega_C, shard, cfg.client_config,
            rng.child(CLIENT_KEY, shard.client_id), round_index, records.append,
        )
        uploads += len(uploaded)
        state.buffer.update(uploaded.entries)

    if not state.buffer:
        logger.debug(f"edge {state.edge_id}: empty buffer in round {round_index}, skipping")
        state.alpha_E = 0.0
        return EdgeUpdateResult(state.edge_id, None, 0.0, 0, uploads, state.local_images, records)

    entries = list(state.buffer.values())
    images = _training_inputs(np.stack([e.image for e in entries]), cfg, round_index)
    labels = np.array([e.label for e in entries], dtype=np.int64)
    params, loss = train_epochs(
        spec, omega_C, images, labels, cfg.local_epochs, cfg.eta, cfg.batch_size, rng.child(TRAIN_KEY)
    )
    state.local_params = params
    state.alpha_E = float(np.mean([e.alpha for e in entries]))
    logger.debug(
        f"edge {state.edge_id}: round {round_index} trained on {len(entries)} samples, "
        f"alpha_E={state.alpha_E:.5f}, loss={loss:.4f}"
    )
    return EdgeUpdateResult(
        state.edge_id, params, state.alpha_E, len(entries), uploads, state.local_images, records, loss
    )


def uwaa_weights(alphas: Sequence[float], sizes: Sequence[int], normalize: bool = True) -> np.ndarray:
    """e^alpha_k · n_k / n, optionally rescaled to sum to one"""
    alphas = np.asarray(alphas, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.sum() <= 0:
        raise RejectedInputError("Aggregation needs at least one sample")
    if normalize:
        # n cancels under normalization; leaving it out keeps alpha = 0 bitwise equal to FedAVG
        raw = np.exp(alphas) * sizes
        return raw / raw.sum()
    return np.exp(alphas) * sizes / sizes.sum()


def fedavg_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.sum() <= 0:
        raise RejectedInputError("Aggregation needs at least one sample")
    return sizes / sizes.sum()


def uwaa_aggregate(results: Sequence[Tuple[ModelParams, float, int]], normalize: bool = True) -> ModelParams:
    if not results:
        raise RejectedInputError("No edge results to aggregate (every edge skipped)")
    params, alphas, sizes = zip(*results)
    return weighted_sum(params, uwaa_weights(alphas, sizes, normalize))


def fedavg_aggregate(results: Sequence[Tuple[ModelParams, int]]) -> ModelParams:
    if not results:
        raise RejectedInputError("No edge results to aggregate (every edge skipped)")
    params, sizes = zip(*results)
    return weighted_sum(params, fedavg_weights(sizes))


def select_edges(num_edges: int, fraction: float, rng: RngStream) -> List[int]:
    count = max(1, math.ceil(fraction * num_edges))
    return sorted(int(k) for k in rng.generator.choice(num_edges, size=count, replace=False))


def _aggregation_weights(cfg: FederationConfig, results: List[EdgeUpdateResult]) -> np.ndarray:
    sizes = [r.n_k for r in results]
    if cfg.aggregator == "uwaa":
        return uwaa_weights([r.alpha_E for r in results], sizes, cfg.normalize_weights)
    return fedavg_weights(sizes)


def cloud_execute(cfg: FederationConfig, edges: List[EdgeState], eval_set: LabeledDataset,
                  rng: RngStream, metrics_sink: Optional[MetricsSink], spec: NetworkSpec,
                  initial_params: Optional[ModelParams] = None,
                  checkpoint_dir: Optional[Path] = None, checkpoint_every: int = 0) -> CloudState:
    """Synchronous rounds: select edges, update them from the same ω^C, aggregate, evaluate"""
    if not edges:
        raise RejectedInputError("cloud_execute needs at least one edge")
    omega = initial_params if initial_params is not None else init_params(spec, rng.child(INIT_KEY))
    check_params(spec, omega)
    state = CloudState(round=0, omega_C=omega)
    image_bytes = int(np.prod(spec.input_shape)) * 4
    params_bytes = serialized_size(omega)
    held_images = sum(edge.local_images for edge in edges)
    pool = ThreadPoolExecutor(max_workers=cfg.edge_workers) if cfg.edge_workers > 1 else None

    try:
        for t in range(cfg.rounds):
            selected = select_edges(len(edges), cfg.fraction, rng.child(SELECT_KEY, t))
            round_start = state.omega_C

            def run_edge(k: int) -> EdgeUpdateResult:
                return edge_update(edges[k], round_start, cfg, _edge_stream(rng, t, k), spec, t)

            if pool is not None:
                results = list(pool.map(run_edge, selected))
            else:
                results = [run_edge(k) for k in selected]
            results.sort(key=lambda r: r.edge_id)

            contributors = [r for r in results if not r.skipped]
            skipped = [r.edge_id for r in results if r.skipped]
            if contributors:
                weights = _aggregation_weights(cfg, contributors)
                state.omega_C = weighted_sum([r.params for r in contributors], weights)
            else:
                weights = np.zeros(0)
                logger.warning(f"Round {t}: every selected edge skipped; cloud model unchanged")

            accuracy = evaluate(spec, state.omega_C, eval_set)
            records = [record for r in results for record in r.records]
            uploads = sum(r.uploads_images for r in results)
            if metrics_sink is not None:
                for record in records:
                    metrics_sink.record_uncertainty(record)
                metrics_sink.record_round(RoundMetrics(
                    round=t,
                    accuracy=accuracy,
                    uploads_images=uploads,
                    uploads_bytes=uploads * image_bytes,
                    params_bytes_exchanged=params_bytes * (2 * len(contributors) + len(skipped)),
                    selected_edges=selected,
                    mean_alpha=float(np.mean([rec.alpha for rec in records])) if records else 0.0,
                    eligible_images=sum(r.eligible_images for r in results),
                    total_images=held_images,
                ))
            state.history.append(AggregationRecord(
                round=t,
                contributors=[r.edge_id for r in contributors],
                weights=[float(w) for w in weights],
                skipped=skipped,
                accuracy=accuracy,
            ))
            state.round = t + 1
            logger.info(
                f"Round {t}: accuracy {accuracy:.4f}, edges {selected} (skipped {skipped}), uploads {uploads}"
            )

            if checkpoint_dir is not None and checkpoint_every and (t + 1) % checkpoint_every == 0:
                save_params(state.omega_C, Path(checkpoint_dir) / f"round_{t:04d}.fsup")
            if cfg.stop_at_target and accuracy >= cfg.target_accuracy:
                logger.info(f"Target accuracy {cfg.target_accuracy} reached in round {t}")
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return state


def _sgd_rounds(cfg: FederationConfig, spec: NetworkSpec, params: ModelParams, images: np.ndarray,
                labels: np.ndarray, eval_set: LabeledDataset, rng: RngStream, edge_id: int,
                sink: Optional[MetricsSink] = None) -> Trajectory:
    trajectory = Trajectory(accuracies=[], params=params)
    for t in range(cfg.rounds):
        if len(labels):
            params, loss = train_epochs(
                spec, params, _training_inputs(images, cfg, t), labels,
                cfg.local_epochs, cfg.eta, cfg.batch_size, _edge_stream(rng, t, edge_id).child(TRAIN_KEY),
            )
            trajectory.losses.append(loss)
        accuracy = evaluate(spec, params, eval_set)
        trajectory.accuracies.append(accuracy)
        if sink is not None:
            collected = len(labels) if t == 0 else 0
            sink.record_round(RoundMetrics(
                round=t,
                accuracy=accuracy,
                uploads_images=collected,
                uploads_bytes=collected * int(np.prod(spec.input_shape)) * 4,
                eligible_images=collected,
                total_images=len(labels),
            ))
        if cfg.stop_at_target and accuracy >= cfg.target_accuracy:
            break
    trajectory.params = params
    return trajectory


def run_centralized_sgd(cfg: FederationConfig, spec: NetworkSpec, dataset: LabeledDataset,
                        eval_set: LabeledDataset, rng: RngStream,
                        sink: Optional[MetricsSink] = None) -> Trajectory:
    """Mini-batch SGD on the pooled data, E epochs per round"""
    if len(dataset) == 0:
        raise RejectedInputError("Centralized SGD needs a non-empty dataset")
    params = init_params(spec, rng.child(INIT_KEY))
    trajectory = _sgd_rounds(cfg, spec, params, dataset.images, dataset.labels, eval_set, rng, 0, sink)
    logger.info(f"Centralized SGD: best accuracy {trajectory.best_accuracy:.4f}")
    return trajectory


def pooled_dataset(dataset: LabeledDataset, partition: Partition) -> LabeledDataset:
    """Union of all parts, in client order"""
    indices = [i for part in partition.parts for i in part]
    return dataset.subset(indices)


def run_standalone_sgd(cfg: FederationConfig, spec: NetworkSpec, dataset: LabeledDataset,
                       partition: Partition, eval_set: LabeledDataset,
                       rng: RngStream) -> Dict[int, Trajectory]:
    """Each edge trains on its own clients' data and never shares parameters"""
    initial = init_params(spec, rng.child(INIT_KEY))
    trajectories = {}
    for k, client_ids in enumerate(assign_clients(len(partition.parts), cfg.edges)):
        indices = [i for n in client_ids for i in partition.parts[n]]
        local = dataset.subset(indices)
        trajectories[k] = _sgd_rounds(cfg, spec, initial, local.images, local.labels, eval_set, rng, k)
        logger.info(f"Standalone edge {k}: {len(local)} samples, best accuracy {trajectories[k].best_accuracy:.4f}")
    return trajectories
