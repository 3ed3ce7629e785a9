# src/flowtsvad/presets.py
from importlib import resources

import yaml

from src.flowtsvad.errors import ConfigError

PRESET_PACKAGE = "resources.configs"


def list_presets():
    return sorted(
        p.name[:-len(".yaml")]
        for p in resources.files(PRESET_PACKAGE).iterdir()
        if p.name.endswith(".yaml")
    )


def get_preset(name: str) -> dict:
    """
    Preset by name, e.g. "desk" -> resources/configs/desk.yaml.
    """
    source = resources.files(PRESET_PACKAGE).joinpath(f"{name}.yaml")
    if not source.is_file():
        raise ConfigError(f"unknown preset {name!r}, available: {', '.join(list_presets())}")
    settings = yaml.safe_load(source.read_text(encoding="utf-8")) or {}
    if not isinstance(settings, dict):
        raise ConfigError(f"preset {name!r} is not a flat key/value mapping")
    return settings
