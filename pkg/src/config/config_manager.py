"""YAML run settings with ``${ENV}`` placeholders and ``--set key=value`` overrides."""
import copy
import os
import re
from typing import Any, Dict, Iterable

import yaml

from src.utils.error_handler import ParameterError
from src.utils.logger import LoggerFactory

DEFAULT_CONFIG_PATH = 'config/config.yaml'
_PLACEHOLDER = re.compile(r'^\$\{([A-Za-z_][A-Za-z0-9_]*)\}$')


class ConfigManager:
    def __init__(self, config_path: str = DEFAULT_CONFIG_PATH):
        self.logger = LoggerFactory.get_logger(self.__class__.__name__)
        self.config_path = config_path
        with open(config_path, 'r') as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise ParameterError(f"{config_path} must hold a mapping at top level")
        self.config: Dict[str, Any] = self._resolve(raw)
        self.logger.debug(f"Loaded settings from {config_path}: sections {sorted(self.config)}")

    def _resolve(self, node: Any) -> Any:
        # Environment values are parsed as YAML so WFREN_SEED=7 arrives as an int.
        if isinstance(node, dict):
            return {key: self._resolve(value) for key, value in node.items()}
        if isinstance(node, list):
            return [self._resolve(value) for value in node]
        if isinstance(node, str):
            match = _PLACEHOLDER.match(node)
            if match:
                raw = os.getenv(match.group(1))
                if raw is None:
                    self.logger.debug(f"{match.group(1)} is unset")
                    return None
                return yaml.safe_load(raw)
        return node

    def get(self, key: str, default: Any = None) -> Any:
        node: Any = self.config
        for part in key.split('.'):
            if not isinstance(node, dict):
                return default
            node = node.get(part)
        return default if node is None else node

    def set(self, key: str, value: Any) -> None:
        *parents, leaf = key.split('.')
        node = self.config
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ParameterError(f"Cannot set '{key}': '{part}' is a value, not a section")
            node = child
        node[leaf] = value

    def apply_overrides(self, assignments: Iterable[str]) -> None:
        for item in assignments:
            key, sep, raw = item.partition('=')
            key = key.strip()
            if not sep or not key:
                raise ParameterError(f"Override '{item}' is not of the form key=value")
            value = yaml.safe_load(raw.strip())
            self.set(key, value)
            self.logger.info(f"Override {key} = {value!r}")

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.config)


class ConfigManagerFactory:
    @staticmethod
    def create(config_path: str = DEFAULT_CONFIG_PATH) -> ConfigManager:
        return ConfigManager(config_path)
