import hashlib
import json
import logging
import sqlite3
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from src.models import ExperimentConfig, RunSummary

logger = logging.getLogger(__name__)


def cell_key(config: ExperimentConfig, seed: int) -> str:
    """Digest of everything that determines a seeded run's result"""
    document = config.model_dump(mode="json", exclude={"name", "seeds", "checkpoint_every"})
    document["seed"] = seed
    return hashlib.sha256(json.dumps(document, sort_keys=True).encode()).hexdigest()


class ResultCache:
    """SQLite-based cache of seeded run summaries, used to resume sweeps"""

    def __init__(self, db_path: str = "runs/cache.db", ttl_hours: Optional[int] = None):
        self.db_path = db_path
        self.ttl_hours = ttl_hours
        self._init_db()

    def _init_db(self):
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)

        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.cursor()
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS results (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    cell_key TEXT UNIQUE NOT NULL,
                    summary TEXT NOT NULL,
                    timestamp DATETIME DEFAULT CURRENT_TIMESTAMP
                )
            """)
            conn.commit()

    def get(self, key: str) -> Optional[RunSummary]:
        """Cached summary for a cell, or None"""
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.cursor()
            cursor.execute("SELECT summary, timestamp FROM results WHERE cell_key = ?", (key,))
            row = cursor.fetchone()

        if not row:
            return None

        summary_json, timestamp_str = row
        if self.ttl_hours is not None:
            # sqlite CURRENT_TIMESTAMP is UTC
            age = datetime.now(timezone.utc).replace(tzinfo=None) - datetime.fromisoformat(timestamp_str)
            if age > timedelta(hours=self.ttl_hours):
                self.delete(key)
                return None

        try:
            return RunSummary.model_validate_json(summary_json)
        except ValidationError:
            logger.warning(f"Discarding corrupt cache row {key[:12]}")
            self.delete(key)
            return None

    def set(self, key: str, summary: RunSummary) -> None:
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.cursor()
            cursor.execute(
                "INSERT OR REPLACE INTO results (cell_key, summary) VALUES (?, ?)",
                (key, summary.model_dump_json()),
            )
            conn.commit()

    def delete(self, key: str) -> None:
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.cursor()
            cursor.execute("DELETE FROM results WHERE cell_key = ?", (key,))
            conn.commit()

    def clear(self) -> None:
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.cursor()
            cursor.execute("DELETE FROM results")
            conn.commit()

    def __len__(self) -> int:
        with sqlite3.connect(self.db_path) as conn:
            return conn.execute("SELECT COUNT(*) FROM results").fetchone()[0]
