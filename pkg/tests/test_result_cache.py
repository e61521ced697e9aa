import sqlite3

from src.models import ExperimentConfig, RunSummary
from src.result_cache import ResultCache, cell_key


def test_set_get_delete(tmp_path):
    cache = ResultCache(str(tmp_path / "cache.db"))
    summary = RunSummary(seed=3, target=0.9, best_accuracy=0.93, rounds_to_target=12, rounds_executed=40)
    cache.set("abc", summary)
    assert cache.get("abc") == summary
    assert len(cache) == 1
    cache.delete("abc")
    assert cache.get("abc") is None


def test_key_depends_on_seed_and_settings_not_name():
    config = ExperimentConfig(name="a", epsilon=0.02)
    assert cell_key(config, 0) != cell_key(config, 1)
    assert cell_key(config, 0) == cell_key(config.model_copy(update={"name": "b"}), 0)
    assert cell_key(config, 0) != cell_key(config.model_copy(update={"epsilon": 0.03}), 0)


def test_corrupt_row_is_discarded(tmp_path):
    path = str(tmp_path / "cache.db")
    cache = ResultCache(path)
    with sqlite3.connect(path) as conn:
        conn.execute("INSERT INTO results (cell_key, summary) VALUES (?, ?)", ("bad", "{not json"))
    assert cache.get("bad") is None
    assert len(cache) == 0


def test_expired_rows(tmp_path):
    path = str(tmp_path / "cache.db")
    cache = ResultCache(path, ttl_hours=1)
    cache.set("old", RunSummary(target=0.9))
    with sqlite3.connect(path) as conn:
        conn.execute("UPDATE results SET timestamp = '2000-01-01 00:00:00'")
    assert cache.get("old") is None


def test_clear(tmp_path):
    cache = ResultCache(str(tmp_path / "cache.db"))
    cache.set("a", RunSummary(target=0.9))
    cache.set("b", RunSummary(target=0.9))
    cache.clear()
    assert len(cache) == 0
