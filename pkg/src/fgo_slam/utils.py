"""Helper functions and utilities."""

from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import yaml
from loguru import logger
from PIL import Image
from pydantic import ValidationError

from fgo_slam.errors import ConfigurationError, MissingFileError
from fgo_slam.models import RunConfig

SYNTHETIC_PREFIX = "synthetic:"
SYNTHETIC_KEYS = {"gaussians": "n_gaussians", "frames": "n_frames", "seed": "seed", "landmarks": "n_landmarks"}


def load_config(config_path: Optional[Path] = None, **overrides: Any) -> RunConfig:
    """Load run configuration from a YAML file and environment variables.

    Args:
        config_path: Optional path to YAML configuration file
        overrides: Top-level keys that take precedence over the file

    Returns:
        RunConfig object with loaded configuration

    Raises:
        MissingFileError: If config_path is given but does not exist
        ConfigurationError: If the file does not parse or a value fails validation
    """
    config_data: Dict[str, Any] = {}

    # Load from YAML file if provided
    if config_path is not None:
        if not config_path.exists():
            raise MissingFileError(f"config file not found: {config_path}")
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                config_data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            logger.error(f"Failed to load config file {config_path}: {e}")
            raise ConfigurationError(f"{config_path} is not valid YAML: {e}") from e
        if not isinstance(config_data, dict):
            raise ConfigurationError(f"{config_path} must contain a mapping of sections")
        logger.info(f"Loaded configuration from {config_path}")

    config_data.update({k: v for k, v in overrides.items() if v is not None})

    # Create configuration object (will also load from environment variables)
    try:
        config = RunConfig(**config_data)
    except ValidationError as e:
        logger.error(f"Configuration validation failed: {e}")
        fields = ", ".join(".".join(str(p) for p in err["loc"]) for err in e.errors())
        raise ConfigurationError(f"invalid value for {fields}") from e
    logger.debug("Configuration loaded successfully")
    return config


def parse_synthetic_source(source: str) -> Optional[Dict[str, Any]]:
    """Parse ``synthetic:SHAPE[,key=value...]`` into scene generator arguments.

    Returns None when ``source`` is not a synthetic source.
    Example: ``synthetic:orbit,gaussians=20,frames=24,seed=3``.
    """
    if not source.startswith(SYNTHETIC_PREFIX):
        return None
    parts = [p.strip() for p in source[len(SYNTHETIC_PREFIX):].split(",") if p.strip()]
    args: Dict[str, Any] = {"shape": "orbit"}
    for part in parts:
        if "=" not in part:
            args["shape"] = part
            continue
        key, value = (s.strip() for s in part.split("=", 1))
        if key not in SYNTHETIC_KEYS:
            raise ValueError(f"unknown synthetic scene option {key!r}, expected one of {sorted(SYNTHETIC_KEYS)}")
        args[SYNTHETIC_KEYS[key]] = int(value)
    return args


def save_color_png(path: Path, image: np.ndarray) -> Path:
    """Write an (H, W, 3) image in [0, 1] as 8-bit RGB."""
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)
    return path


def save_depth_png(path: Path, depth: np.ndarray, depth_scale: float = 5000.0) -> Path:
    """Write a depth map in meters as 16-bit PNG in ``1 / depth_scale`` units."""
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = np.clip(np.round(np.asarray(depth) * depth_scale), 0, np.iinfo(np.uint16).max).astype(np.uint16)
    Image.fromarray(raw).save(path)
    return path


def load_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img)
