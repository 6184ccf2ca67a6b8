"""Strict JSON run configuration for the command-line tools.

Every command accepts an optional JSON config file. Parsing is strict:

* unknown fields are rejected with an error naming the offending field,
* type mismatches name the field and the expected type,
* an empty object ``{}`` yields the full set of defaults.

``ConfigError`` is the single exception type; the CLI maps it to exit code 2.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .core import LidarConfig
from .loss import MODES
from .optim import OptimConfig, OptimError
from .sim import SCENE_IDS, TEXTURE_VARIANTS


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


def _expect_int(name: str, v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"config field '{name}' must be an integer, got {v!r}")
    return int(v)


def _expect_float(name: str, v):
    """Accept JSON numbers plus the strings 'inf' / '-inf' / 'nan'."""
    if isinstance(v, bool):
        raise ConfigError(f"config field '{name}' must be a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            pass
    raise ConfigError(f"config field '{name}' must be a number, got {v!r}")


def _expect_str(name: str, v):
    if not isinstance(v, str):
        raise ConfigError(f"config field '{name}' must be a string, got {v!r}")
    return v


def _expect_choice(name: str, v, choices):
    v = _expect_str(name, v)
    if v not in choices:
        raise ConfigError(f"config field '{name}' must be one of "
                          f"{sorted(choices)}, got {v!r}")
    return v


def _expect_vec3(name: str, v):
    if (not isinstance(v, (list, tuple)) or len(v) != 3
            or any(isinstance(x, bool) or not isinstance(x, (int, float))
                   for x in v)):
        raise ConfigError(f"config field '{name}' must be a list of 3 numbers, "
                          f"got {v!r}")
    return tuple(float(x) for x in v)


def _optional(conv):
    def wrapped(name: str, v):
        return None if v is None else conv(name, v)
    return wrapped


def _apply_schema(raw: dict, schema: dict, prefix: str = "") -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"config section '{prefix or '<root>'}' must be a "
                          f"JSON object, got {raw!r}")
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown config field '{prefix}{key}'")
    out = {}
    for key, (conv, default) in schema.items():
        out[key] = conv(prefix + key, raw[key]) if key in raw else default
    return out


def load_json_config(path) -> dict:
    """Read a JSON object from ``path``; parse failures become ConfigError."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    return raw


_LIDAR_SCHEMA = {
    "nx": (_expect_int, 8),
    "ny": (_expect_int, 8),
    "ifov_deg": (_expect_float, 4.9),
    "bin_width_s": (_expect_float, 40e-12),
    "n_bins": (_expect_int, 256),
    "max_range_m": (_expect_float, 1.5),
    "rays_per_cone": (_expect_int, 64),
}


def _expect_lidar(name: str, v) -> LidarConfig:
    vals = _apply_schema(v, _LIDAR_SCHEMA, prefix=f"{name}.")
    try:
        return LidarConfig(**vals)
    except ValueError as e:
        raise ConfigError(f"config field '{name}' is inconsistent: {e}") from e


_SIMULATE_SCHEMA = {
    "scene_id": (lambda n, v: _expect_choice(n, v, SCENE_IDS), "sphere_plane"),
    "texture_variant": (lambda n, v: _expect_choice(n, v, TEXTURE_VARIANTS),
                        "full"),
    "n_train": (_expect_int, 10),
    "n_test": (_expect_int, 10),
    "snr_db": (_expect_float, math.inf),
    "seed": (_expect_int, 0),
    "image_size": (_expect_int, 128),
    "gt_rays": (_expect_int, 1024),
    "radius": (_expect_float, 0.75),
    "height": (_expect_float, 0.55),
    "target": (_expect_vec3, (0.0, 0.0, 0.08)),
    "poisson_photons": (_optional(_expect_float), None),
    "lidar": (_expect_lidar, None),  # None -> LidarConfig() defaults
}


@dataclass
class SimulateConfig:
    """Typed settings for the dataset simulator."""

    scene_id: str
    texture_variant: str
    n_train: int
    n_test: int
    snr_db: float
    seed: int
    image_size: int
    gt_rays: int
    radius: float
    height: float
    target: tuple
    poisson_photons: object
    lidar: LidarConfig

    @classmethod
    def from_dict(cls, raw: dict) -> "SimulateConfig":
        vals = _apply_schema(raw, _SIMULATE_SCHEMA)
        if vals["lidar"] is None:
            vals["lidar"] = LidarConfig()
        if vals["n_train"] < 1:
            raise ConfigError("config field 'n_train' must be >= 1")
        if vals["n_test"] < 0:
            raise ConfigError("config field 'n_test' must be >= 0")
        if vals["image_size"] < 1:
            raise ConfigError("config field 'image_size' must be >= 1")
        if vals["gt_rays"] < 1:
            raise ConfigError("config field 'gt_rays' must be >= 1")
        if vals["image_size"] % vals["lidar"].nx or \
                vals["image_size"] % vals["lidar"].ny:
            raise ConfigError("config field 'image_size' must be divisible by "
                              "the LiDAR zone counts "
                              f"({vals['lidar'].nx} x {vals['lidar'].ny})")
        return cls(**vals)

    def snapshot(self) -> dict:
        """JSON-safe copy of the resolved settings (for run manifests)."""
        out = {k: getattr(self, k) for k in _SIMULATE_SCHEMA if k != "lidar"}
        out["target"] = list(self.target)
        out["snr_db"] = _json_float(self.snr_db)
        out["lidar"] = {k: getattr(self.lidar, k) for k in _LIDAR_SCHEMA}
        return out


_RECONSTRUCT_SCHEMA = {
    "iterations": (_expect_int, OptimConfig.iterations),
    "mode": (lambda n, v: _expect_choice(n, v, MODES), OptimConfig.mode),
    "lr_position": (_expect_float, OptimConfig.lr_position),
    "lr_rotation": (_expect_float, OptimConfig.lr_rotation),
    "lr_scale": (_expect_float, OptimConfig.lr_scale),
    "lr_opacity": (_expect_float, OptimConfig.lr_opacity),
    "lr_color": (_expect_float, OptimConfig.lr_color),
    "lr_decay": (_expect_float, OptimConfig.lr_decay),
    "n_init_surfels": (_expect_int, OptimConfig.n_init_surfels),
    "prune_interval": (_expect_int, OptimConfig.prune_interval),
    "prune_opacity": (_expect_float, OptimConfig.prune_opacity),
    "seed": (_expect_int, OptimConfig.seed),
    "rays_per_cone": (_expect_int, OptimConfig.rays_per_cone),
    "transient_mode": (lambda n, v: _expect_choice(
        n, v, ("transmittance", "density")), OptimConfig.transient_mode),
    "lambda_ssim": (_expect_float, OptimConfig.lambda_ssim),
    "lambda_reg": (_expect_float, OptimConfig.lambda_reg),
    "lambda_lidar": (_expect_float, OptimConfig.lambda_lidar),
    "patch_a": (_expect_float, OptimConfig.patch_a),
    "patch_b": (_expect_float, OptimConfig.patch_b),
    "patch_k": (_expect_float, OptimConfig.patch_k),
    "ssim_window": (_expect_int, OptimConfig.ssim_window),
    "log_every": (_expect_int, OptimConfig.log_every),
    "checkpoint_every": (_expect_int, OptimConfig.checkpoint_every),
    "dtype": (lambda n, v: _expect_choice(n, v, ("float32", "float64")),
              OptimConfig.dtype),
}


def reconstruct_config_from_dict(raw: dict, *, mode: str | None = None
                                 ) -> OptimConfig:
    """Build optimizer settings from a JSON dict; ``mode`` overrides the file."""
    vals = _apply_schema(raw, _RECONSTRUCT_SCHEMA)
    if mode is not None:
        if mode not in MODES:
            raise ConfigError(f"config field 'mode' must be one of "
                              f"{sorted(MODES)}, got {mode!r}")
        vals["mode"] = mode
    cfg = OptimConfig(**vals)
    try:
        cfg.validate()
    except OptimError as e:
        raise ConfigError(str(e)) from e
    return cfg


def optim_config_snapshot(cfg: OptimConfig) -> dict:
    """JSON-safe copy of resolved optimizer settings (for run manifests)."""
    return {k: _json_float(getattr(cfg, k))
            if isinstance(getattr(cfg, k), float) else getattr(cfg, k)
            for k in _RECONSTRUCT_SCHEMA}


def _json_float(v: float):
    """Represent non-finite floats as strings so strict JSON can hold them."""
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)  # 'inf', '-inf', 'nan'
    return v
