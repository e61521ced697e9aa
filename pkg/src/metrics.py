"""
Run logs, per-run summaries, seed statistics and run-set comparisons.
"""

import csv
import json
import logging
import statistics
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from src.errors import RejectedInputError
from src.models import (
    ComparisonReport,
    FatigueState,
    RoundMetrics,
    RunSummary,
    SeedStatistics,
    UncertaintyRecord,
)

logger = logging.getLogger(__name__)

ROUNDS_FILE = "rounds.csv"
UNCERTAINTY_FILE = "uncertainty.csv"
FATIGUE_FILE = "fatigue.csv"
ROUND_COLUMNS = [
    "round", "accuracy", "uploads_images", "uploads_bytes", "params_bytes", "mean_alpha",
    "eligible_images", "total_images",
]
UNCERTAINTY_COLUMNS = ["round", "client_id", "sample_id", "r", "alpha", "predicted_class", "uploaded"]
FATIGUE_COLUMNS = ["client_id", "frames", "closed_fraction", "peak_perclos", "judgment"]


def _fmt(value: float) -> str:
    return repr(float(value))


class MetricsSink:
    """Append-only run log; rows are flushed as they are recorded"""

    def __init__(self, run_dir: Optional[Path] = None, keep_records: bool = False):
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.keep_records = keep_records
        self.rounds: List[RoundMetrics] = []
        self.records: List[UncertaintyRecord] = []
        self.uploads_by_round: Dict[int, int] = {}
        self._round_file = None
        self._record_file = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            self._round_file = open(self.run_dir / ROUNDS_FILE, "w", newline="")
            self._round_writer = csv.writer(self._round_file, lineterminator="\n")
            self._round_writer.writerow(ROUND_COLUMNS)
            self._record_file = open(self.run_dir / UNCERTAINTY_FILE, "w", newline="")
            self._record_writer = csv.writer(self._record_file, lineterminator="\n")
            self._record_writer.writerow(UNCERTAINTY_COLUMNS)
            self._round_file.flush()
            self._record_file.flush()

    def record_uncertainty(self, record: UncertaintyRecord) -> None:
        if record.uploaded:
            self.uploads_by_round[record.round] = self.uploads_by_round.get(record.round, 0) + 1
        if self.keep_records:
            self.records.append(record)
        if self._record_file is not None:
            self._record_writer.writerow([
                record.round, record.client_id, record.sample_id, _fmt(record.r),
                _fmt(record.alpha), record.predicted_class, int(record.uploaded),
            ])

    def record_round(self, m: RoundMetrics) -> None:
        if self.rounds and m.round <= self.rounds[-1].round:
            raise RejectedInputError(
                f"Round {m.round} recorded after round {self.rounds[-1].round}; rounds must strictly increase"
            )
        self.rounds.append(m)
        if self._round_file is not None:
            self._round_writer.writerow([
                m.round, _fmt(m.accuracy), m.uploads_images, m.uploads_bytes,
                m.params_bytes_exchanged, _fmt(m.mean_alpha), m.eligible_images, m.total_images,
            ])
            self._round_file.flush()
            self._record_file.flush()

    def close(self) -> None:
        for handle in (self._round_file, self._record_file):
            if handle is not None:
                handle.close()
        self._round_file = self._record_file = None

    def __enter__(self) -> "MetricsSink":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def record_round(sink: MetricsSink, m: RoundMetrics) -> None:
    sink.record_round(m)


def read_rounds(path) -> List[RoundMetrics]:
    """Load a rounds.csv written by MetricsSink"""
    with open(path, newline="") as f:
        return [
            RoundMetrics(
                round=int(row["round"]),
                accuracy=float(row["accuracy"]),
                uploads_images=int(row["uploads_images"]),
                uploads_bytes=int(row["uploads_bytes"]),
                params_bytes_exchanged=int(row["params_bytes"]),
                mean_alpha=float(row["mean_alpha"]),
                eligible_images=int(row["eligible_images"]),
                total_images=int(row["total_images"]),
            )
            for row in csv.DictReader(f)
        ]


def summarize(rounds: Sequence[RoundMetrics], target: float, seed: int = 0) -> RunSummary:
    if not rounds:
        return RunSummary(seed=seed, target=target)
    best = max(rounds, key=lambda m: m.accuracy)
    reached = next((m.round for m in rounds if m.accuracy >= target), None)
    uploads = sum(m.uploads_images for m in rounds)
    # clients x images per client x rounds
    capacity = sum(m.total_images for m in rounds)
    return RunSummary(
        seed=seed,
        target=target,
        best_accuracy=best.accuracy,
        best_round=best.round,
        rounds_to_target=reached,
        rounds_executed=len(rounds),
        total_upload_ratio=min(1.0, uploads / capacity) if capacity else 0.0,
        total_uploads_images=uploads,
        total_params_bytes=sum(m.params_bytes_exchanged for m in rounds),
    )


def upload_ratios(rounds: Sequence[RoundMetrics]) -> List[float]:
    """Per-round fraction of all client-held images that were uploaded"""
    return [m.uploads_images / m.total_images if m.total_images else 0.0 for m in rounds]


def _rounds_or_budget(summaries: Sequence[RunSummary]) -> List[float]:
    # an unreached target is bounded below by the rounds actually executed
    return [float(s.rounds_to_target if s.reached else s.rounds_executed) for s in summaries]


def aggregate_seeds(summaries: Sequence[RunSummary]) -> SeedStatistics:
    if not summaries:
        raise RejectedInputError("No runs to aggregate")
    best = np.array([s.best_accuracy for s in summaries], dtype=np.float64)
    reached = [float(s.rounds_to_target) for s in summaries if s.reached]
    return SeedStatistics(
        runs=len(summaries),
        best_accuracy_mean=float(best.mean()),
        best_accuracy_std=float(best.std()),
        rounds_mean=float(np.mean(reached)) if reached else None,
        rounds_std=float(np.std(reached)) if reached else None,
        rounds_median=float(statistics.median(reached)) if reached else None,
        reached=len(reached),
        upload_ratio_mean=float(np.mean([s.total_upload_ratio for s in summaries])),
    )


def compare_runs(a: Sequence[RunSummary], b: Sequence[RunSummary]) -> ComparisonReport:
    """Candidate runs a against baseline runs b: reduction = 1 - median_a / median_b"""
    if not a or not b:
        raise RejectedInputError("Both run sets must be non-empty")
    targets = {s.target for s in list(a) + list(b)}
    if len(targets) != 1:
        raise RejectedInputError(f"Runs were measured against different targets: {sorted(targets)}")
    median_a = float(statistics.median(_rounds_or_budget(a)))
    median_b = float(statistics.median(_rounds_or_budget(b)))
    missing_a = sum(1 for s in a if not s.reached)
    missing_b = sum(1 for s in b if not s.reached)

    if median_b > 0:
        reduction = 1.0 - median_a / median_b
    elif median_a == 0:
        reduction = 0.0
    else:
        reduction = None

    if missing_a and missing_b:
        bound = "indeterminate"
    elif missing_b:
        bound = "lower"
    elif missing_a:
        bound = "upper"
    else:
        bound = "exact"
    if bound != "exact":
        logger.warning(
            f"Target {targets.pop()} not reached by {missing_a} candidate / {missing_b} baseline runs; "
            f"reduction is {bound}"
        )

    return ComparisonReport(
        target=a[0].target,
        baseline=aggregate_seeds(b),
        candidate=aggregate_seeds(a),
        baseline_median_rounds=median_b,
        candidate_median_rounds=median_a,
        round_reduction=reduction,
        reduction_bound=bound,
        baseline_not_reached=missing_b,
        candidate_not_reached=missing_a,
    )


def write_json(path, document) -> None:
    """Stable JSON: sorted keys, two-space indent, trailing newline"""
    if isinstance(document, BaseModel):
        document = document.model_dump(mode="json")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")


def write_fatigue(path, states: Sequence[FatigueState]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(FATIGUE_COLUMNS)
        for s in states:
            writer.writerow([s.client_id, s.frames, _fmt(s.closed_fraction), _fmt(s.peak_perclos), s.judgment])
    fatigued = sum(s.judgment == "fatigued" for s in states)
    logger.info(f"Wrote fatigue states of {len(states)} clients to {path} ({fatigued} fatigued)")
