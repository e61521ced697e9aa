#!/usr/bin/env python3
"""
Experiment operations
Contains the business logic behind the generate / run / sweep / compare commands
"""

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config_loader import cell_config, config_diff
from src.data_service import (
    dataset_digest,
    generate_blink_dataset,
    load_dataset,
    partition_unbalanced,
    save_dataset,
    shard_for,
    train_test_split,
)
from src.errors import ConfigError, RejectedInputError
from src.features import assess_fatigue
from src.federation import (
    build_edges,
    cloud_execute,
    pooled_dataset,
    run_centralized_sgd,
    run_standalone_sgd,
)
from src.metrics import (
    FATIGUE_FILE,
    MetricsSink,
    ROUNDS_FILE,
    aggregate_seeds,
    compare_runs,
    read_rounds,
    summarize,
    write_fatigue,
    write_json,
)
from src.models import (
    ExperimentConfig,
    FatigueState,
    LabeledDataset,
    Partition,
    RoundMetrics,
    RunSummary,
    SweepSpec,
    SyntheticBlinkSpec,
)
from src.result_cache import ResultCache, cell_key
from src.tensor_nn import ModelParams, RngStream, build_network, predict_classes, save_params

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
SUMMARY_FILE = "summary.json"
FINAL_PARAMS_FILE = "final.fsup"
SWEEP_TABLE = "sweep_table"
COMPARISON_FILE = "comparison.json"

# settings that may differ between run sets that are compared
COMPARABLE_KEYS = {
    "name", "aggregator", "epsilon", "passes", "mode", "normalize_weights",
    "persistent_buffer", "checkpoint_every", "edge_workers", "fps", "perclos_threshold",
}


def seed_dir(run_dir: Path, seed: int) -> Path:
    return Path(run_dir) / f"seed_{seed}"


def generate_dataset(spec: SyntheticBlinkSpec, out_path) -> str:
    """Write a synthetic eye dataset and return its sha256"""
    save_dataset(generate_blink_dataset(spec), out_path)
    digest = dataset_digest(out_path)
    logger.info(f"Wrote {spec.num_samples} samples to {out_path} (sha256 {digest})")
    return digest


def prepare_data(config: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    """Train / held-out split of the configured dataset"""
    if config.dataset_path:
        dataset = load_dataset(config.dataset_path)
    else:
        dataset = generate_blink_dataset(config.blink_spec())
    return train_test_split(dataset, config.test_fraction, config.data_seed)


def network_for(config: ExperimentConfig, dataset: LabeledDataset):
    spec = build_network(config.network, dataset.image_shape, config.dropout_conv, config.dropout_dense)
    if spec.num_classes != len(dataset.class_names):
        raise ConfigError(
            f"Network '{config.network}' predicts {spec.num_classes} classes "
            f"but the dataset has {len(dataset.class_names)}"
        )
    return spec


def _standalone_rounds(trajectories) -> List[RoundMetrics]:
    executed = min(len(t.accuracies) for t in trajectories.values())
    return [
        RoundMetrics(round=t, accuracy=float(np.mean([traj.accuracies[t] for traj in trajectories.values()])))
        for t in range(executed)
    ]


def client_fatigue(config: ExperimentConfig, spec, dataset: LabeledDataset, partition: Partition,
                   client_params: Dict[int, ModelParams]) -> List[FatigueState]:
    """Final-model eye states of every client's shard, judged by PERCLOS"""
    states = []
    for client_id, params in sorted(client_params.items()):
        shard = shard_for(dataset, partition, client_id)
        predicted = predict_classes(spec, params, shard.images)
        states.append(assess_fatigue(client_id, predicted, config.fps, config.perclos_threshold,
                                     closed_class=dataset.class_names.index("closed")))
    return states


def run_seed(config: ExperimentConfig, seed: int, run_dir) -> RunSummary:
    """One seeded run of the configured mode; writes rounds.csv, uncertainty.csv, fatigue.csv and summary.json"""
    out = seed_dir(run_dir, seed)
    train, test = prepare_data(config)
    spec = network_for(config, train)
    rng = RngStream(seed)
    partition = partition_unbalanced(train, config.partition_spec(seed))
    logger.info(f"[{config.name}] seed {seed}: {config.mode} run on {len(train)} samples, {config.rounds} rounds")

    with MetricsSink(out) as sink:
        if config.mode == "federated":
            edges = build_edges(train, partition, config.edges)
            checkpoints = out / "checkpoints" if config.checkpoint_every else None
            state = cloud_execute(config, edges, test, rng, sink, spec,
                                  checkpoint_dir=checkpoints, checkpoint_every=config.checkpoint_every)
            save_params(state.omega_C, out / FINAL_PARAMS_FILE)
            client_params = {n: state.omega_C for n in range(config.clients)}
            summary = summarize(sink.rounds, config.target_accuracy, seed)
        elif config.mode == "centralized":
            trajectory = run_centralized_sgd(config, spec, pooled_dataset(train, partition), test, rng, sink)
            save_params(trajectory.params, out / FINAL_PARAMS_FILE)
            client_params = {n: trajectory.params for n in range(config.clients)}
            summary = summarize(sink.rounds, config.target_accuracy, seed)
        else:
            trajectories = run_standalone_sgd(config, spec, train, partition, test, rng)
            for m in _standalone_rounds(trajectories):
                sink.record_round(m)
            # a client only ever sees the model of the edge it is attached to
            client_params = {n: trajectories[n % config.edges].params for n in range(config.clients)}
            summary = summarize(sink.rounds, config.target_accuracy, seed).model_copy(update={
                "best_accuracy": float(np.mean([t.best_accuracy for t in trajectories.values()])),
            })

    if "closed" in train.class_names:
        write_fatigue(out / FATIGUE_FILE, client_fatigue(config, spec, train, partition, client_params))
    else:
        logger.info(f"[{config.name}] seed {seed}: no closed-eye class, fatigue.csv skipped")
    write_json(out / SUMMARY_FILE, summary)
    logger.info(
        f"[{config.name}] seed {seed}: best accuracy {summary.best_accuracy:.4f}, "
        f"rounds to {config.target_accuracy:.2f}: {summary.rounds_to_target}"
    )
    return summary


def _run_seed_task(task: Tuple[ExperimentConfig, int, str]) -> RunSummary:
    config, seed, run_dir = task
    return run_seed(config, seed, Path(run_dir))


def _map_tasks(tasks: Sequence[Tuple[ExperimentConfig, int, str]], jobs: int) -> List[Any]:
    """Run seed tasks in order; failures come back as the exception instance"""
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_seed_task, task) for task in tasks]
            results = []
            for future in futures:
                try:
                    results.append(future.result())
                except Exception as e:
                    results.append(e)
            return results
    results = []
    for task in tasks:
        try:
            results.append(_run_seed_task(task))
        except Exception as e:
            results.append(e)
    return results


def run_experiment(config: ExperimentConfig, out_root, jobs: int = 1) -> Dict[str, Any]:
    """Every seed of a config, then the seed aggregate in <out>/<name>/summary.json"""
    run_dir = Path(out_root) / config.name
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(run_dir / CONFIG_FILE, config.model_dump(mode="json"))

    results = _map_tasks([(config, seed, str(run_dir)) for seed in config.seeds], jobs)
    for seed, result in zip(config.seeds, results):
        if isinstance(result, Exception):
            logger.error(f"[{config.name}] seed {seed} failed: {result}")
            raise result
    document = {
        "runs": [r.model_dump(mode="json") for r in results],
        "aggregate": aggregate_seeds(results).model_dump(mode="json"),
    }
    write_json(run_dir / SUMMARY_FILE, document)
    return document


def _sweep_row(axis: str, value: Any, summaries: List[RunSummary], failed: int) -> Dict[str, Any]:
    row = {"axis": axis, "value": value, "runs": len(summaries), "failed": failed}
    if summaries:
        row.update(aggregate_seeds(summaries).model_dump(mode="json"))
    return row


def run_sweep(spec: SweepSpec, out_root, jobs: int = 1, cache: Optional[ResultCache] = None) -> List[Dict[str, Any]]:
    """One cell per (value, seed); failed cells are marked and the sweep carries on"""
    sweep_dir = Path(out_root) / spec.base.name
    sweep_dir.mkdir(parents=True, exist_ok=True)
    write_json(sweep_dir / CONFIG_FILE, {
        "base": spec.base.model_dump(mode="json"), "axis": spec.axis, "values": spec.values,
    })

    cells = [(value, cell_config(spec, value)) for value in spec.values]
    slots: Dict[Tuple[int, int], Any] = {}
    pending = []
    for position, (value, config) in enumerate(cells):
        cell_dir = sweep_dir / "cells" / f"{spec.axis}={value}"
        # each cell is a run directory of its own, loadable by compare
        write_json(cell_dir / CONFIG_FILE, config.model_dump(mode="json"))
        for seed in config.seeds:
            cached = cache.get(cell_key(config, seed)) if cache is not None else None
            if cached is not None:
                logger.info(f"Cell {spec.axis}={value} seed {seed}: cached")
                slots[(position, seed)] = cached
            else:
                pending.append(((position, seed), (config, seed, str(cell_dir))))

    for (slot, task), result in zip(pending, _map_tasks([task for _, task in pending], jobs)):
        if isinstance(result, Exception):
            logger.error(f"Cell {spec.axis}={cells[slot[0]][0]} seed {slot[1]} failed: {result}")
        elif cache is not None:
            cache.set(cell_key(task[0], task[1]), result)
        slots[slot] = result

    rows = []
    for position, (value, config) in enumerate(cells):
        outcomes = [slots[(position, seed)] for seed in config.seeds]
        summaries = [o for o in outcomes if isinstance(o, RunSummary)]
        rows.append(_sweep_row(spec.axis, value, summaries, len(outcomes) - len(summaries)))

    write_sweep_table(rows, sweep_dir)
    return rows


SWEEP_COLUMNS = [
    "axis", "value", "runs", "failed", "best_accuracy_mean", "best_accuracy_std",
    "rounds_mean", "rounds_std", "rounds_median", "reached", "upload_ratio_mean",
]


def write_sweep_table(rows: List[Dict[str, Any]], sweep_dir) -> None:
    sweep_dir = Path(sweep_dir)
    with open(sweep_dir / f"{SWEEP_TABLE}.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else row.get(c) for c in SWEEP_COLUMNS])
    write_json(sweep_dir / f"{SWEEP_TABLE}.json", rows)
    logger.info(f"Wrote sweep table for {len(rows)} values to {sweep_dir}")


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

def load_run_set(run_dir) -> Tuple[Dict[str, Any], List[RunSummary], List[List[RoundMetrics]]]:
    """config.json, per-seed summaries and per-seed round logs of a finished run"""
    run_dir = Path(run_dir)
    config_path = run_dir / CONFIG_FILE
    if not config_path.is_file():
        raise RejectedInputError(f"{run_dir} is not a run directory (no {CONFIG_FILE})")
    config = json.loads(config_path.read_text())
    summaries, logs = [], []
    for seed in config["seeds"]:
        path = seed_dir(run_dir, seed)
        if not (path / SUMMARY_FILE).is_file():
            # cells served from the result cache or that failed have no seed logs
            raise RejectedInputError(f"{path} has no {SUMMARY_FILE}; the seed never ran here")
        summaries.append(RunSummary.model_validate_json((path / SUMMARY_FILE).read_text()))
        logs.append(read_rounds(path / ROUNDS_FILE))
    return config, summaries, logs


def mean_series(logs: List[List[RoundMetrics]], field: str) -> List[Optional[float]]:
    """Per-round mean across seeds; rounds no seed executed are absent"""
    length = max((len(log) for log in logs), default=0)
    series = []
    for t in range(length):
        values = [getattr(log[t], field) for log in logs if len(log) > t]
        series.append(float(np.mean(values)))
    return series


def _write_plot_csv(path: Path, columns: Dict[str, List[Optional[float]]]) -> None:
    length = max((len(v) for v in columns.values()), default=0)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["round", *columns])
        for t in range(length):
            writer.writerow([t, *(repr(v[t]) if t < len(v) else "" for v in columns.values())])


def compare_run_dirs(baseline_dir, candidate_dirs: Sequence, out_dir) -> Dict[str, Any]:
    """Round-reduction report of each candidate against the baseline, plus plot-ready CSVs"""
    base_config, base_summaries, base_logs = load_run_set(baseline_dir)
    base_name = base_config["name"]
    reports = {}
    accuracy = {base_name: mean_series(base_logs, "accuracy")}
    uploads = {base_name: mean_series(base_logs, "uploads_images")}

    for candidate_dir in candidate_dirs:
        config, summaries, logs = load_run_set(candidate_dir)
        diff = config_diff(base_config, config, ignore=COMPARABLE_KEYS)
        if diff:
            raise ConfigError(f"{candidate_dir} is not comparable with {baseline_dir}", diff)
        report = compare_runs(summaries, base_summaries)
        name = config["name"]
        if name in accuracy:
            name = f"{name}@{Path(candidate_dir).parent.name}"
        reports[name] = report.model_dump(mode="json")
        accuracy[name] = mean_series(logs, "accuracy")
        uploads[name] = mean_series(logs, "uploads_images")
        reduction = report.round_reduction
        logger.info(
            f"{name} vs {base_name}: round reduction "
            f"{'n/a' if reduction is None else f'{reduction:.1%}'} ({report.reduction_bound})"
        )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    document = {"baseline": base_name, "candidates": reports}
    write_json(out_dir / COMPARISON_FILE, document)
    _write_plot_csv(out_dir / "plot_accuracy.csv", accuracy)
    _write_plot_csv(out_dir / "plot_uploads.csv", uploads)
    return document
