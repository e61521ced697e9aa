import json
import logging
from typing import List, Optional

from src.models import Preset

logger = logging.getLogger(__name__)


class PresetLoader:
    """Loads and manages the shipped experiment presets"""

    def __init__(self, data_path: str = "data/presets.json"):
        self.data_path = data_path
        self.presets: List[Preset] = []
        self.preset_map = {}
        self._load()

    def _load(self):
        """Load presets from JSON file"""
        try:
            with open(self.data_path, "r") as f:
                data = json.load(f)
                self.presets = [Preset(**preset) for preset in data.get("presets", [])]
                # case-insensitive lookup
                for preset in self.presets:
                    self.preset_map[preset.name.lower()] = preset
        except FileNotFoundError:
            logger.warning(f"Preset file not found at {self.data_path}")
            self.presets = []

    def get_preset(self, name: str) -> Optional[Preset]:
        """Get preset by name (case-insensitive)"""
        return self.preset_map.get(name.lower())

    def search_presets(self, query: str) -> List[Preset]:
        """Presets whose name contains the query, or is contained in it"""
        query_lower = query.lower()
        return [
            preset for preset in self.presets
            if query_lower in preset.name.lower() or preset.name.lower() in query_lower
        ]

    def is_valid_preset(self, name: str) -> bool:
        return name.lower() in self.preset_map

    def names(self) -> List[str]:
        return [preset.name for preset in self.presets]
