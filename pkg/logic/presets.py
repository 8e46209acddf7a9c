import copy
import json
from pathlib import Path
from typing import Any, Dict, List, Optional

from logic.errors import ConfigError, DataIOError

BASE_DIR = Path(__file__).resolve().parent.parent

_SEARCH_DIRS = [
    BASE_DIR / "data",
    BASE_DIR / "logic",
    BASE_DIR,
]


def _find_file(name: str) -> Optional[Path]:
    for d in _SEARCH_DIRS:
        path = d / name
        if path.exists():
            return path
    return None


PRESETS_FILE = _find_file("presets.json")

_presets_cache: Optional[Dict[str, Dict[str, Any]]] = None


def _load_presets() -> None:
    global _presets_cache

    if not PRESETS_FILE:
        _presets_cache = {}
        return

    try:
        with PRESETS_FILE.open("r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, ValueError) as e:
        raise DataIOError(f"cannot read {PRESETS_FILE}: {e}")

    if not isinstance(data, dict):
        raise DataIOError(f"{PRESETS_FILE} must contain an object at top level")
    _presets_cache = {str(name): cfg for name, cfg in data.items() if isinstance(cfg, dict)}


def preset_names() -> List[str]:
    global _presets_cache
    if _presets_cache is None:
        _load_presets()
    assert _presets_cache is not None
    return sorted(_presets_cache)


def get_preset(name: str) -> Dict[str, Any]:
    names = preset_names()
    if name not in names:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(names) or 'none'}")
    assert _presets_cache is not None
    return copy.deepcopy(_presets_cache[name])
