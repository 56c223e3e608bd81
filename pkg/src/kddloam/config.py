"""Pipeline configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class PipelineConfig:
    # map
    voxel_size: float = 1.0
    n_max: int = 20
    eps_plane: float = 0.05
    min_planarity: float = 0.3
    min_point_spacing: float = 0.1
    fit_surfels: bool = True
    # subsampling
    alpha: float = 0.5
    beta: float = 1.5
    saliency_keep_fraction: float = 0.7
    k_salient: int = 3
    # range crop
    min_range: float = 1.0
    max_range: float = 100.0
    # features
    feature_provider: str = "auto"
    feature_radius: float = 1.0
    # scan-to-scan
    match_mode: str = "mutual"
    ransac_inlier_threshold: float = 0.6
    ransac_confidence: float = 0.999
    ransac_max_iterations: int = 50_000
    ransac_min_inliers: int = 10
    # scan-to-map
    delta_min: float = 0.1
    tau_default: float = 2.0
    tau_floor: float = 0.3
    icp_eps_conv: float = 1e-4
    icp_max_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 1.0 <= self.beta <= 2.0:
            raise ConfigError(f"beta must lie in [1, 2], got {self.beta}")
        if not 0.0 < self.saliency_keep_fraction <= 1.0:
            raise ConfigError("saliency_keep_fraction must lie in (0, 1]")
        if self.k_salient < 1:
            raise ConfigError("k_salient must be >= 1")
        if self.voxel_size <= 0 or self.max_range <= 0:
            raise ConfigError("voxel_size and max_range must be positive")
        if not 0.0 <= self.min_range < self.max_range:
            raise ConfigError("need 0 <= min_range < max_range")
        if self.feature_provider not in ("auto", "builtin", "external"):
            raise ConfigError(f"unknown feature_provider {self.feature_provider!r}")
        if self.match_mode not in ("mutual", "one-way"):
            raise ConfigError(f"unknown match_mode {self.match_mode!r}")
        if not 0.0 < self.ransac_confidence < 1.0:
            raise ConfigError("ransac_confidence must lie in (0, 1)")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, kind, raw: str):
    kind = {"float": float, "int": int, "bool": bool, "str": str}.get(kind, kind)
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str, require_all: bool = True) -> dict:
    known = {f.name: f.type for f in fields(PipelineConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, known[key], raw)
    if require_all:
        for key in known:
            if key not in values:
                raise ConfigError(f"config is missing key {key!r}")
    return values


def load_config(path, overrides: dict | None = None, require_all: bool = True) -> PipelineConfig:
    """Read a config file; ``overrides`` (e.g. from CLI flags) win over file values."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = parse_config_text(text, require_all=require_all)
    values.update(overrides or {})
    return PipelineConfig(**values)


def format_config(config: PipelineConfig) -> str:
    lines = ["# pipeline configuration: one 'key = value' per line"]
    for f in fields(config):
        val = getattr(config, f.name)
        lines.append(f"{f.name} = {str(val).lower() if isinstance(val, bool) else val}")
    return "\n".join(lines) + "\n"
