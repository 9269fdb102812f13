import copy
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import torch
import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from .models import RunConfig

load_dotenv()

OUTPUT_ROOT = os.getenv("PUZZLE_AE_OUTPUT_ROOT", os.path.join(os.getcwd(), "runs"))

TRAIN_CONFIG_PATH = os.getenv(
    "TRAIN_CONFIG_PATH", os.path.join(os.getcwd(), "train_config.yaml")
)

CHECKPOINT_PATH = os.getenv("CHECKPOINT_PATH")

DEVICE = os.getenv("PUZZLE_AE_DEVICE", "auto")

LOG_LEVEL = os.getenv("PUZZLE_AE_LOG_LEVEL", "INFO")


class ConfigError(ValueError):
    """Invalid configuration document; the message carries file:line diagnostics."""
    pass


def load_train_config() -> Dict[str, Any]:
    """Load the default run configuration from YAML file."""
    try:
        with open(TRAIN_CONFIG_PATH, "r") as f:
            return yaml.safe_load(f) or {}
    except FileNotFoundError:
        return {
            "dataset": {"format": "synthetic", "channels": 1, "canvas_size": [32, 32]},
            "normal_class": 0,
            "protocol": "2",
            "train": {
                "lr_unet": 1e-3,
                "lr_disc": 2e-4,
                "lambda_adv": 1.0,
                "batch_size": 128,
                "epochs": 100,
                "attack": {"epsilon": 0.05, "alpha": 0.05, "steps": 1},
                "puzzle": {"grid": [2, 2], "perm_mode": "at_least_two"},
            },
        }


# Load default run configuration
TRAIN_CONFIG = load_train_config()


def resolve_device(name: Optional[str] = None) -> str:
    name = name or DEVICE
    if name != "auto":
        return name
    return "cuda" if torch.cuda.is_available() else "cpu"


def _line_index(node: yaml.Node, prefix: Tuple = (), index: Optional[Dict] = None) -> Dict:
    """Map every key path of a composed YAML document to its 1-based line."""
    if index is None:
        index = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (str(key_node.value),)
            index[path] = key_node.start_mark.line + 1
            _line_index(value_node, path, index)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = prefix + (str(i),)
            index[path] = item.start_mark.line + 1
            _line_index(item, path, index)
    return index


def _set_dotted(document: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    target = document
    for key in keys[:-1]:
        child = target.get(key)
        if not isinstance(child, dict):
            child = {}
            target[key] = child
        target = child
    target[keys[-1]] = value


def apply_overrides(document: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Dotted-key overrides win over the file; ``None`` values are ignored."""
    for dotted, value in overrides.items():
        if value is not None:
            _set_dotted(document, dotted, value)
    return document


def _format_errors(
    error: ValidationError, source: str, lines: Dict[Tuple, int], prefix: Tuple = ()
) -> List[str]:
    messages = []
    for item in error.errors():
        loc = prefix + tuple(str(part) for part in item["loc"])
        line = None
        for end in range(len(loc), 0, -1):
            if loc[:end] in lines:
                line = lines[loc[:end]]
                break
        where = f"{source}:{line}" if line is not None else source
        dotted = ".".join(loc[len(prefix):]) or "<root>"
        messages.append(f"{where}: {dotted}: {item['msg']}")
    return messages


def load_run_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Validate a YAML run config (or a run manifest) with CLI overrides on top.

    Without ``path`` the default document from ``TRAIN_CONFIG_PATH`` is used.
    """
    lines: Dict[Tuple, int] = {}
    prefix: Tuple = ()
    if path is None:
        source = TRAIN_CONFIG_PATH
        document = copy.deepcopy(TRAIN_CONFIG)
    else:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"{source}: cannot read config: {e}") from e
        try:
            root = yaml.compose(text)
            document = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            where = f"{source}:{mark.line + 1}" if mark is not None else source
            raise ConfigError(f"{where}: invalid YAML: {getattr(e, 'problem', e)}") from e
        if root is not None:
            lines = _line_index(root)
        if not isinstance(document, dict):
            raise ConfigError(f"{source}:1: <root>: expected a mapping")
        # a run manifest replays its recorded config
        if "command" in document and isinstance(document.get("config"), dict):
            document = document["config"]
            prefix = ("config",)

    document = apply_overrides(document, overrides or {})
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        messages = _format_errors(e, source, lines, prefix)
        raise ConfigError("invalid configuration:\n" + "\n".join(messages)) from e


class Config:
    """Configuration management class."""

    def __init__(self):
        self.train_config_path = TRAIN_CONFIG_PATH
        self.output_root = Path(OUTPUT_ROOT)

    def get_train_config(self) -> Dict[str, Any]:
        """Get default run configuration."""
        return load_train_config()

    def get_run_config(
        self, path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None
    ) -> RunConfig:
        return load_run_config(path, overrides)
