import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .errors import ConfigError

logger = logging.getLogger(__name__)

MODES = ("two-stage", "one-stage", "auto")

DEFAULT_DATABASE_URL = "sqlite:///tolo_runs.db"
BUNDLED_COLOR_TABLE = Path(__file__).resolve().parent.parent / "config" / "color_table.json"


@dataclass
class EngineConfig:
    """Geometry and seeding of the toy attention model"""

    height: int = 16
    width: int = 16
    channels: int = 4
    proj_dim: int = 8
    embed_dim: int = 16
    layer_resolutions: List[Tuple[int, int]] = field(default_factory=lambda: [(8, 8), (16, 16)])
    map_size: int = 64
    canvas_size: int = 512
    gamma: float = 0.98
    drift_scale: float = 1.0

    def validate(self) -> "EngineConfig":
        if min(self.height, self.width, self.channels, self.proj_dim, self.embed_dim) < 1:
            raise ConfigError("engine dimensions must be positive")
        if not self.layer_resolutions:
            raise ConfigError("at least one attention layer is required")
        for h, w in self.layer_resolutions:
            if h < 1 or w < 1:
                raise ConfigError(f"layer resolution {h}x{w} must be positive")
            if self.height % h or self.width % w:
                raise ConfigError(
                    f"layer resolution {h}x{w} does not divide latent {self.height}x{self.width}"
                )
        if self.map_size < 1 or self.canvas_size < 1:
            raise ConfigError("map and canvas sizes must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        return self


@dataclass
class LossWeights:
    """Loss hyperparameters: lam mixes the threshold, sharpness scales the sigmoid"""

    lam: float = 0.6
    sharpness: float = 10.0
    lambda_s: float = 1.0
    lambda_a: float = 1.0
    eps: float = 1e-6

    def validate(self) -> "LossWeights":
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.sharpness <= 0:
            raise ConfigError("sharpness must be positive")
        if self.lambda_s < 0 or self.lambda_a < 0:
            raise ConfigError("lambda_s and lambda_a must be non-negative")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        return self


@dataclass
class GuidanceConfig:
    T: int = 50
    m: int = 10
    n: int = 12
    alpha: float = 70.0
    iou_threshold: float = 0.1
    mode: str = "two-stage"

    def validate(self) -> "GuidanceConfig":
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        if not 0 <= self.m <= self.n <= self.T:
            raise ConfigError(f"need 0 <= m <= n <= T, got m={self.m} n={self.n} T={self.T}")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ConfigError("iou_threshold must lie in [0, 1]")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        return self


@dataclass
class ToloConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)

    def validate(self) -> "ToloConfig":
        self.engine.validate()
        self.weights.validate()
        self.guidance.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ToloConfig":
        unknown = set(data) - {"engine", "weights", "guidance"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        engine = _build(EngineConfig, data.get("engine", {}))
        engine.layer_resolutions = [tuple(int(v) for v in res) for res in engine.layer_resolutions]
        return cls(
            engine=engine,
            weights=_build(LossWeights, data.get("weights", {})),
            guidance=_build(GuidanceConfig, data.get("guidance", {})),
        ).validate()

    def with_overrides(self, **overrides: Any) -> "ToloConfig":
        """Return a copy with guidance fields replaced; None values are ignored"""
        updates = {key: value for key, value in overrides.items() if value is not None}
        return replace(self, guidance=replace(self.guidance, **updates)).validate()


def _build(kind, values: Dict[str, Any]):
    known = {f.name for f in fields(kind)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    try:
        return kind(**values)
    except TypeError as e:
        raise ConfigError(f"invalid {kind.__name__}: {e}") from e


def load_config(path: Optional[str] = None) -> ToloConfig:
    """Load a JSON config document, or the defaults when no path is given"""
    if path is None:
        return ToloConfig().validate()
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    logger.debug("loaded config from %s", path)
    return ToloConfig.from_dict(data)


def database_url() -> str:
    return os.getenv("DATABASE_URL", DEFAULT_DATABASE_URL)


def color_table_path() -> Path:
    return Path(os.getenv("TOLO_COLOR_TABLE", str(BUNDLED_COLOR_TABLE)))
