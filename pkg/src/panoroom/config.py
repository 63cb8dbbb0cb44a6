"""Run configuration: flat ``key = value`` files merged under command-line flags."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .lines import RansacConfig
from .solver import PIPELINE_RANSAC, SolverConfig
from .sphere import EquirectGrid
from .synth import NoiseSpec, RoomSpec


@dataclass(frozen=True)
class RunConfig:
    """Every setting a command may use.  Paths are ``None`` until given."""

    seed: int = 0
    # corpus
    rooms: int = 10
    corners: int = 0            # 0: the default corner-count mix
    complex_only: bool = False
    width: int = 128
    height: int = 64
    camera_height: float = 1.0
    line_thickness: float = 2.0
    blur_sigma: float = 1.5
    # corruption
    sigma: float = 0.0
    spurious: float = 0.0
    dropout: float = 0.0
    # line extraction
    ransac_iterations: int = PIPELINE_RANSAC.max_iterations
    inlier_tol: float = PIPELINE_RANSAC.inlier_tol_rad
    edge_threshold: float = PIPELINE_RANSAC.edge_threshold
    max_lines: int = PIPELINE_RANSAC.max_lines
    # solver
    max_corners: int = SolverConfig.max_corners
    max_hypotheses: int = SolverConfig.max_hypotheses
    refine: bool = True
    level: bool = True
    denoise: bool = True
    # evaluation
    eval_width: int = 256
    eval_height: int = 128
    bin_threshold: float = 0.25
    channel: str = "edge"
    # paths
    out: str | None = None
    corpus: str | None = None
    pred: str | None = None
    gt: str | None = None
    overlay: bool = False

    def __post_init__(self):
        if self.rooms < 0:
            raise ConfigError("rooms must be non-negative")
        if self.corners not in (0, 4, 6, 8, 10, 12):
            raise ConfigError(f"corners must be an even count in 4..12 (or 0 for the mix), got {self.corners}")
        if self.channel not in ("edge", "corner"):
            raise ConfigError("channel must be 'edge' or 'corner'")
        try:
            self.grid()
            self.eval_grid()
            self.noise()
            self.ransac()
            self.solver()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def grid(self) -> EquirectGrid:
        return EquirectGrid(self.width, self.height)

    def eval_grid(self) -> EquirectGrid:
        return EquirectGrid(self.eval_width, self.eval_height)

    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.sigma, self.spurious, self.dropout)

    def room_spec(self) -> RoomSpec:
        return RoomSpec(corner_count=self.corners or 4, camera_height=self.camera_height)

    def ransac(self) -> RansacConfig:
        return dataclasses.replace(PIPELINE_RANSAC, seed=self.seed, max_iterations=self.ransac_iterations,
                                   inlier_tol_rad=self.inlier_tol, edge_threshold=self.edge_threshold,
                                   max_lines=self.max_lines)

    def solver(self) -> SolverConfig:
        return SolverConfig(max_corners=self.max_corners, max_hypotheses=self.max_hypotheses, refine=self.refine,
                            level=self.level, denoise=self.denoise, camera_height=self.camera_height)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(name: str, text: str):
    kind = _FIELDS[name].type
    try:
        if kind == "bool":
            low = text.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys use underscores or dashes."""
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"line {no}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def load_config_file(path) -> dict:
    try:
        return parse_config_text(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def build_config(file_values: dict | None = None, cli_values: dict | None = None) -> RunConfig:
    """Defaults, overridden by the config file, overridden by command-line flags."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (cli_values or {}).items() if v is not None})
    unknown = set(merged) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown settings: {sorted(unknown)}")
    return RunConfig(**merged)


def dumps_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if v is not None:
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
