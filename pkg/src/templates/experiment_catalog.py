import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from src.config import ConfigError

logger = logging.getLogger(__name__)

PRESET_KINDS = ("dataset", "rng", "iterative", "ablation", "noise", "estimator", "compare")


@dataclass
class ExperimentPreset:
    """Named experiment settings selected by matching conditions"""
    name: str
    kind: str
    conditions: Dict[str, Any]
    params: Dict[str, Any]

    @classmethod
    def from_dict(cls, name: str, config_dict: Dict[str, Any]) -> 'ExperimentPreset':
        """Create an ExperimentPreset instance from a dictionary"""
        kind = config_dict['kind']
        if kind not in PRESET_KINDS:
            raise ConfigError(f"Preset {name} has unknown kind: {kind}")
        return cls(
            name=name,
            kind=kind,
            conditions=dict(config_dict.get('conditions') or {}),
            params=dict(config_dict.get('params') or {}),
        )

    def matches(self, selector: Dict[str, Any]) -> bool:
        return all(selector.get(key) == value for key, value in self.conditions.items())

    def merged(self, overrides: Dict[str, Any], section: Optional[str] = None) -> Dict[str, Any]:
        """
        Preset params with overrides applied; None overrides are ignored.

        Args:
            overrides: flat setting name -> value
            section: nested params key receiving the overrides instead of the top level
        """
        params = copy.deepcopy(self.params)
        target = params.setdefault(section, {}) if section else params
        for key, value in overrides.items():
            if value is not None:
                target[key] = value
        return params

    def overlaid(self, params: Dict[str, Any]) -> 'ExperimentPreset':
        """Copy whose params are updated from params; nested mappings merge key by key."""
        merged = copy.deepcopy(self.params)
        for key, value in params.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key].update(value)
            else:
                merged[key] = value
        return ExperimentPreset(self.name, self.kind, dict(self.conditions), merged)

    @staticmethod
    def load_params(path: Path) -> Dict[str, Any]:
        """Params mapping from a YAML file, as used by --config."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Params file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                params = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            logger.error(f"Error parsing params file {path}: {e}")
            raise ConfigError(f"Error parsing params file {path}: {e}")
        if not isinstance(params, dict):
            raise ConfigError(f"Params file {path} must hold a mapping, got {type(params).__name__}")
        return params


class ExperimentCatalog:
    """Catalog of experiment presets loaded from YAML"""

    def __init__(self, config_path: Path):
        self.config_path = Path(config_path)
        self.presets = self._load_presets(self.config_path)
        logger.info(f"Experiment catalog initialized with {len(self.presets)} presets")

    def _load_presets(self, config_path: Path) -> Dict[str, ExperimentPreset]:
        """Load preset configurations from YAML file"""
        if not config_path.exists():
            logger.error(f"Config file not found: {config_path}")
            raise FileNotFoundError(f"Config file not found: {config_path}")

        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                config_data = yaml.safe_load(f)

            return {
                name: ExperimentPreset.from_dict(name, preset_config)
                for name, preset_config in config_data['experiments'].items()
            }
        except yaml.YAMLError as e:
            logger.error(f"Error parsing YAML config: {e}")
            raise ConfigError(f"Error parsing YAML config: {e}")
        except (KeyError, TypeError, AttributeError) as e:
            logger.error(f"Invalid config structure: {e}")
            raise ConfigError(f"Invalid config structure: {e}")

    def determine_preset(self, selector: Dict[str, Any]) -> str:
        """
        First preset, in file order, whose conditions all match the selector.
        Raises ValueError if none does.
        """
        for name, preset in self.presets.items():
            if preset.matches(selector):
                logger.info(f"Experiment preset determined: {name}")
                return name

        logger.error(f"No matching preset found for {selector}")
        raise ValueError(f"No matching preset found for {selector}")

    def get_preset(self, name: str) -> ExperimentPreset:
        if name not in self.presets:
            logger.error(f"Unknown preset: {name}")
            raise ValueError(f"Unknown preset: {name}")
        return self.presets[name]
