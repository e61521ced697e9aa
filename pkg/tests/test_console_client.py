import json

import numpy as np
from pathlib import Path

import pytest

from clients import console_client
from clients.shared.experiment_operations import load_run_set
from src.data_service import save_dataset
from src.models import LabeledDataset

PRESETS = Path(__file__).parent.parent / "data" / "presets.json"


@pytest.fixture(autouse=True)
def shipped_presets(monkeypatch, tmp_path):
    monkeypatch.setenv("FEDSUP_PRESETS_PATH", str(PRESETS))
    monkeypatch.setenv("FEDSUP_OUT", str(tmp_path / "default-out"))


def write_config(tmp_path, name: str, extra: str = "") -> str:
    path = tmp_path / f"{name}.cfg"
    path.write_text(f"preset = smoke\nname = {name}\nseeds = 0,1\n{extra}")
    return str(path)


def all_files(root: Path):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_prints_digest(tmp_path, capsys):
    out = tmp_path / "eyes.fsds"
    code = console_client.main(["generate", "--samples", "20", "--seed", "4", "--size", "16", "--out", str(out)])
    digest = capsys.readouterr().out.strip()
    assert code == 0
    assert out.is_file()
    assert len(digest) == 64
    console_client.main(["generate", "--samples", "20", "--seed", "4", "--size", "16", "--out", str(tmp_path / "b.fsds")])
    assert capsys.readouterr().out.strip() == digest


def test_generate_rejects_tiny_images(tmp_path):
    assert console_client.main(["generate", "--size", "8", "--out", str(tmp_path / "x.fsds")]) == 2


def test_run_writes_artifacts(tmp_path):
    out = tmp_path / "runs"
    assert console_client.main(["run", "--config", write_config(tmp_path, "smoke-a"), "--out", str(out),
                                "--checkpoint-every", "1"]) == 0
    run_dir = out / "smoke-a"
    for seed in (0, 1):
        seed_dir = run_dir / f"seed_{seed}"
        assert (seed_dir / "rounds.csv").read_text().count("\n") == 3
        assert (seed_dir / "uncertainty.csv").is_file()
        fatigue = (seed_dir / "fatigue.csv").read_text().splitlines()
        assert fatigue[0] == "client_id,frames,closed_fraction,peak_perclos,judgment"
        assert [row.split(",")[0] for row in fatigue[1:]] == ["0", "1", "2", "3"]
        assert {row.split(",")[-1] for row in fatigue[1:]} <= {"alert", "fatigued"}
        assert (seed_dir / "final.fsup").is_file()
        assert (seed_dir / "checkpoints" / "round_0001.fsup").is_file()
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["aggregate"]["runs"] == 2
    # epsilon 0 uploads every scored image
    assert summary["aggregate"]["upload_ratio_mean"] == 1.0


def test_run_is_reproducible_across_jobs(tmp_path):
    config = write_config(tmp_path, "smoke-det")
    for out, jobs in (("one", "1"), ("two", "1"), ("pool", "2")):
        assert console_client.main(["run", "--config", config, "--out", str(tmp_path / out), "--jobs", jobs]) == 0
    first = all_files(tmp_path / "one")
    assert first == all_files(tmp_path / "two")
    assert first == all_files(tmp_path / "pool")


def test_seed_flag_overrides_file(tmp_path):
    out = tmp_path / "runs"
    assert console_client.main(["run", "--config", write_config(tmp_path, "smoke-s"), "--out", str(out),
                                "--seed", "5"]) == 0
    assert sorted(p.name for p in (out / "smoke-s").glob("seed_*")) == ["seed_5"]


def test_bad_config_exits_two(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("preset = smoke\nC = 3\n")
    assert console_client.main(["run", "--config", str(path), "--out", str(tmp_path)]) == 2


def test_missing_config_file_exits_one(tmp_path):
    assert console_client.main(["run", "--config", str(tmp_path / "absent.cfg")]) == 1


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        console_client.main(["run"])
    assert exc.value.code == 2


def test_sweep_table_and_cache(tmp_path):
    path = tmp_path / "sweep.cfg"
    path.write_text("preset = smoke\nname = sw\nsweep_axis = epsilon\nsweep_values = 0.0, 0.02\n")
    cache = tmp_path / "cache.db"
    args = ["sweep", "--config", str(path), "--out", str(tmp_path / "runs"), "--cache", str(cache)]
    assert console_client.main(args) == 0
    table = (tmp_path / "runs" / "sw" / "sweep_table.csv").read_text().splitlines()
    assert len(table) == 3
    rows = json.loads((tmp_path / "runs" / "sw" / "sweep_table.json").read_text())
    assert [r["value"] for r in rows] == ["0.0", "0.02"]
    assert rows[0]["upload_ratio_mean"] >= rows[1]["upload_ratio_mean"]
    first = (tmp_path / "runs" / "sw" / "sweep_table.json").read_text()
    assert console_client.main(args) == 0
    assert (tmp_path / "runs" / "sw" / "sweep_table.json").read_text() == first


def test_compare_writes_report_and_plots(tmp_path):
    out = tmp_path / "runs"
    assert console_client.main(["run", "--config", write_config(tmp_path, "base", "aggregator = fedavg\n"),
                                "--out", str(out)]) == 0
    assert console_client.main(["run", "--config", write_config(tmp_path, "cand", "epsilon = 0.01\n"),
                                "--out", str(out)]) == 0
    report_dir = tmp_path / "cmp"
    assert console_client.main(["compare", str(out / "base"), str(out / "cand"), "--out", str(report_dir)]) == 0
    report = json.loads((report_dir / "comparison.json").read_text())
    assert report["baseline"] == "base"
    assert report["candidates"]["cand"]["reduction_bound"] in {"exact", "lower", "upper", "indeterminate"}
    plot = (report_dir / "plot_accuracy.csv").read_text().splitlines()
    assert plot[0] == "round,base,cand"
    assert len(plot) == 3
    assert (report_dir / "plot_uploads.csv").is_file()


def test_compare_refuses_different_settings(tmp_path, capsys):
    out = tmp_path / "runs"
    console_client.main(["run", "--config", write_config(tmp_path, "base"), "--out", str(out)])
    console_client.main(["run", "--config", write_config(tmp_path, "longer", "T = 3\n"), "--out", str(out)])
    assert console_client.main(["compare", str(out / "base"), str(out / "longer")]) == 2
    assert "rounds" in capsys.readouterr().err
    _, summaries, _ = load_run_set(out / "longer")
    assert [s.rounds_executed for s in summaries] == [3, 3]


def test_sweep_cell_is_a_run_directory(tmp_path):
    path = tmp_path / "sweep.cfg"
    path.write_text("preset = smoke\nname = sw\nsweep_axis = epsilon\nsweep_values = 0.0, 0.02\n")
    out = tmp_path / "runs"
    assert console_client.main(["sweep", "--config", str(path), "--out", str(out)]) == 0
    cells = out / "sw" / "cells"
    config, summaries, _ = load_run_set(cells / "epsilon=0.02")
    assert config["epsilon"] == 0.02
    assert len(summaries) == 1
    report_dir = tmp_path / "cmp"
    assert console_client.main(["compare", str(cells / "epsilon=0.0"), str(cells / "epsilon=0.02"),
                                "--out", str(report_dir)]) == 0
    assert json.loads((report_dir / "comparison.json").read_text())["baseline"] == "sw/epsilon=0.0"


def test_landmark_network_runs_on_ten_class_file(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.uniform(0, 1, size=(60, 16, 16, 1)).astype(np.float32)
    data = tmp_path / "landmarks.fsds"
    save_dataset(LabeledDataset(images, np.arange(60) % 10, [f"class_{i}" for i in range(10)]), data)
    config = write_config(tmp_path, "lm", f"network = landmark\ndataset_path = {data}\nT = 1\n")
    out = tmp_path / "runs"
    assert console_client.main(["run", "--config", config, "--out", str(out), "--seed", "0"]) == 0
    seed_dir = out / "lm" / "seed_0"
    assert (seed_dir / "rounds.csv").read_text().count("\n") == 2
    # no closed-eye class to judge fatigue on
    assert not (seed_dir / "fatigue.csv").exists()


def test_landmark_network_on_eye_states_exits_two(tmp_path):
    config = write_config(tmp_path, "lm2", "network = landmark\n")
    assert console_client.main(["run", "--config", config, "--out", str(tmp_path / "runs")]) == 2
