"""Run configuration and its sectioned ``key = value`` file format."""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import FormatError, ParameterError

CAMERA_STRATEGIES = ("fixed-ring-4", "random")
DENOISERS = ("oracle", "toy")
PSI_SOURCES = ("auto", "lora", "oracle", "none")

# section name for each key when writing a config snapshot
SECTIONS = {
    "run": ("seed", "out_dir", "threads", "resolution", "denoiser", "psi_source", "prompt"),
    "init": ("init_shape", "init_n", "init_extent", "reference"),
    "stages": ("stage1_steps", "stage2_steps", "stage1_camera", "camera_strategy", "lora_updates_per_step"),
    "lr": ("lr_means", "lr_log_scales", "lr_rotations", "lr_opacity", "lr_colors", "lr_lora"),
    "guidance": ("lambda_scale", "t_lo", "t_hi", "T", "beta_min", "beta_max", "alpha_mask_guidance"),
    "style": ("style_image", "stage1_ply", "style_on_object", "surface_weight", "surface_mean_of_logs", "freeze_geometry"),
    "camera": ("camera_radius", "camera_elevation_deg", "fov_deg", "orbit_radius_min", "orbit_radius_max",
               "orbit_elevation_min_deg", "orbit_elevation_max_deg"),
}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    threads: int = 0
    resolution: int = 64
    denoiser: str = "oracle"
    psi_source: str = "auto"
    prompt: str = "a toy object"

    init_shape: str = "sphere"
    init_n: int = 400
    init_extent: float = 0.8
    reference: str = ""

    stage1_steps: int = 500
    stage2_steps: int = 500
    stage1_camera: str = "random"
    camera_strategy: str = "fixed-ring-4"
    lora_updates_per_step: int = 1

    lr_means: float = 1.6e-4
    lr_log_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-2
    lr_lora: float = 1e-3

    lambda_scale: float = 0.8
    t_lo: float = 0.0
    t_hi: float = 1.0
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    alpha_mask_guidance: bool = True

    style_image: str = ""
    stage1_ply: str = ""
    surface_weight: float = 1.0
    style_on_object: bool = True
    surface_mean_of_logs: bool = False
    freeze_geometry: bool = False

    camera_radius: float = 2.5
    camera_elevation_deg: float = 15.0
    fov_deg: float = 40.0
    orbit_radius_min: float = 2.3
    orbit_radius_max: float = 2.7
    orbit_elevation_min_deg: float = 0.0
    orbit_elevation_max_deg: float = 30.0

    def validate(self):
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ParameterError("step counts must be non-negative")
        if self.lambda_scale < 0:
            raise ParameterError("lambda_scale must be >= 0")
        if not 0.0 <= self.t_lo < self.t_hi <= 1.0:
            raise ParameterError("timestep bounds must satisfy 0 <= t_lo < t_hi <= 1")
        for name, allowed in (("camera_strategy", CAMERA_STRATEGIES), ("stage1_camera", CAMERA_STRATEGIES),
                              ("denoiser", DENOISERS), ("psi_source", PSI_SOURCES)):
            if getattr(self, name) not in allowed:
                raise ParameterError(f"{name} must be one of {allowed}")
        if self.resolution < 8 or self.resolution % 8:
            raise ParameterError("resolution must be a positive multiple of 8")
        if self.init_n < 1:
            raise ParameterError("init_n must be >= 1")
        if self.lora_updates_per_step < 0:
            raise ParameterError("lora_updates_per_step must be >= 0")
        return self

    @property
    def learning_rates(self):
        return {
            "means": self.lr_means,
            "log_scales": self.lr_log_scales,
            "rotations": self.lr_rotations,
            "opacity_logits": self.lr_opacity,
            "colors": self.lr_colors,
        }

    @property
    def resolved_psi(self):
        if self.psi_source != "auto":
            return self.psi_source
        return "oracle" if self.denoiser == "oracle" else "lora"

    def replace(self, **changes):
        return apply_overrides(self, changes)

    def to_text(self):
        parser = configparser.ConfigParser()
        parser.optionxform = str
        values = asdict(self)
        for section, keys in SECTIONS.items():
            parser[section] = {k: _format(values[k]) for k in keys}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser[section].items())
            lines.append("")
        return "\n".join(lines)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def field_type(name):
    return _TYPES[_FIELDS[name].type]


def coerce(name, value):
    if name not in _FIELDS:
        raise ParameterError(f"unknown config key {name!r}")
    kind = field_type(name)
    if isinstance(value, str):
        if kind is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ParameterError(f"{name}: not a boolean: {value!r}")
        try:
            return kind(value.strip())
        except ValueError as exc:
            raise ParameterError(f"{name}: cannot parse {value!r}") from exc
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ParameterError(f"{name}: expected {kind.__name__}, got {value!r}")
    return value


def apply_overrides(config, overrides):
    values = asdict(config)
    for key, value in overrides.items():
        values[key] = coerce(key, value)
    return RunConfig(**values).validate()


def load_config(path):
    """Read a sectioned ``key = value`` file, or JSON (flat or sectioned)."""
    path = Path(path)
    text = path.read_text()
    flat = {}
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        for key, value in data.items():
            if isinstance(value, dict):
                flat.update(value)
            else:
                flat[key] = value
    else:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise FormatError(f"{path}: {exc}") from exc
        for section in parser.sections():
            flat.update(parser[section])
    return apply_overrides(RunConfig(), flat)
