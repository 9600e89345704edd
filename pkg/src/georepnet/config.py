"""Configuration dataclasses and their canonical JSON form.

Every ``from_dict`` rejects unknown keys and validates invariants before
anything is built from the config.
"""

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigurationError

EMA_FACTORS = (4, 8, 16, 32)
FORMULATIONS = ("full-2d", "axial-1d")

# softplus(x) == 1
UNIT_SOFTPLUS_RAW = math.log(math.e - 1.0)


def canonical_json(obj):
    """Sorted keys, no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def _check_keys(cls, data):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{cls.__name__} expects a JSON object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")


@dataclass(frozen=True)
class DGPGConfig:
    num_heads: int = 4
    lambda0: float = 5.0
    gamma: float = 3.0
    w1_raw: float = UNIT_SOFTPLUS_RAW
    w2_raw: float = UNIT_SOFTPLUS_RAW
    freq_count: int = 4
    formulation: str = "full-2d"

    def __post_init__(self):
        if not isinstance(self.num_heads, int) or self.num_heads < 1:
            raise ConfigurationError(f"num_heads must be a positive int, got {self.num_heads!r}")
        if not self.lambda0 > 0:
            raise ConfigurationError(f"lambda0 must be > 0, got {self.lambda0}")
        if not self.gamma >= 0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")
        for name in ("lambda0", "gamma", "w1_raw", "w2_raw"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite")
        if not isinstance(self.freq_count, int) or self.freq_count < 1:
            raise ConfigurationError(f"freq_count must be a positive int, got {self.freq_count!r}")
        if self.formulation not in FORMULATIONS:
            raise ConfigurationError(f"formulation must be one of {FORMULATIONS}, got {self.formulation!r}")

    @classmethod
    def from_dict(cls, data):
        _check_keys(cls, data)
        return cls(**data)


@dataclass(frozen=True)
class GEMAConfig:
    num_heads: int = 4
    head_dim: int = 8
    ema_factor: int = 4
    enable_gsa: bool = True
    enable_ema: bool = True

    def __post_init__(self):
        if not isinstance(self.num_heads, int) or self.num_heads < 1:
            raise ConfigurationError(f"num_heads must be a positive int, got {self.num_heads!r}")
        if not isinstance(self.head_dim, int) or self.head_dim < 2 or self.head_dim % 2:
            raise ConfigurationError(f"head_dim must be a positive even int, got {self.head_dim!r}")
        if self.ema_factor not in EMA_FACTORS:
            raise ConfigurationError(f"ema_factor must be one of {EMA_FACTORS}, got {self.ema_factor!r}")
        if self.enable_ema and self.channels % self.ema_factor:
            raise ConfigurationError(
                f"{self.channels} channels not divisible by ema_factor {self.ema_factor}"
            )

    @property
    def channels(self):
        return self.num_heads * self.head_dim

    @classmethod
    def from_dict(cls, data):
        _check_keys(cls, data)
        return cls(**data)


@dataclass(frozen=True)
class GeoRepNetConfig:
    stage_widths: tuple = (32, 64, 128, 256)
    stage_depths: tuple = (1, 2, 4, 1)
    num_classes: int = 9
    input_size: tuple = (64, 64)
    enable_dgpg: bool = True
    dgpg: DGPGConfig = field(default_factory=DGPGConfig)
    gema: GEMAConfig = field(default_factory=GEMAConfig)

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(self.stage_widths))
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        object.__setattr__(self, "input_size", tuple(self.input_size))
        if len(self.stage_widths) != 4 or len(self.stage_depths) != 4:
            raise ConfigurationError("stage_widths and stage_depths need exactly four entries")
        if any(not isinstance(w, int) or w < 1 for w in self.stage_widths):
            raise ConfigurationError(f"stage widths must be positive ints, got {self.stage_widths}")
        if any(not isinstance(d, int) or d < 1 for d in self.stage_depths):
            raise ConfigurationError(f"stage depths must be positive ints, got {self.stage_depths}")
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes!r}")
        if len(self.input_size) != 2 or any(not isinstance(s, int) or s < 32 or s % 32 for s in self.input_size):
            raise ConfigurationError(f"input_size must be two multiples of 32, got {self.input_size}")
        if self.uses_gema:
            if self.gema.channels != self.stage_widths[0]:
                raise ConfigurationError(
                    f"num_heads * head_dim = {self.gema.channels} must equal the stage-1 width "
                    f"{self.stage_widths[0]}"
                )
        if self.enable_gsa:
            if self.dgpg.num_heads != self.gema.num_heads:
                raise ConfigurationError("dgpg.num_heads must equal gema.num_heads")
            if self.dgpg.freq_count * 2 != self.gema.head_dim:
                raise ConfigurationError("dgpg.freq_count must be gema.head_dim / 2")

    @property
    def enable_gsa(self):
        return self.gema.enable_gsa

    @property
    def enable_ema(self):
        return self.gema.enable_ema

    @property
    def uses_gema(self):
        return self.gema.enable_gsa or self.gema.enable_ema

    @property
    def injection_resolution(self):
        return self.input_size[0] // 4, self.input_size[1] // 4

    def with_toggles(self, dgpg=None, gsa=None, ema=None, factor=None):
        gema = self.gema
        changes = {}
        if gsa is not None:
            changes["enable_gsa"] = gsa
        if ema is not None:
            changes["enable_ema"] = ema
        if factor is not None:
            changes["ema_factor"] = factor
        if changes:
            gema = replace(gema, **changes)
        return replace(self, gema=gema, enable_dgpg=self.enable_dgpg if dgpg is None else dgpg)

    def to_dict(self):
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["stage_depths"] = list(self.stage_depths)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, data):
        _check_keys(cls, data)
        data = dict(data)
        if "dgpg" in data:
            data["dgpg"] = DGPGConfig.from_dict(data["dgpg"])
        if "gema" in data:
            data["gema"] = GEMAConfig.from_dict(data["gema"])
        return cls(**data)


def micro_config(**overrides):
    """The small configuration used for gradient checks and fusion tests."""
    cfg = GeoRepNetConfig(
        stage_widths=(8, 16, 32, 64),
        stage_depths=(1, 1, 1, 1),
        input_size=(32, 32),
        dgpg=DGPGConfig(num_heads=2, freq_count=2),
        gema=GEMAConfig(num_heads=2, head_dim=4, ema_factor=4),
    )
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 1e-4
    lr_min: float = 0.0
    seed: int = 0
    class_weighting: bool = False

    def __post_init__(self):
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if not self.base_lr > 0:
            raise ConfigurationError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 <= self.lr_min <= self.base_lr:
            raise ConfigurationError("lr_min must lie in [0, base_lr]")
        if not isinstance(self.seed, int):
            raise ConfigurationError("seed must be an int")

    @classmethod
    def from_dict(cls, data):
        _check_keys(cls, data)
        return cls(**data)


FULL_SCALE_TRAIN = TrainConfig(epochs=150, batch_size=16, base_lr=1e-4)


@dataclass(frozen=True)
class RunConfig:
    """Contents of a run configuration file: ``{"model": {...}, "train": {...}}``."""

    model: GeoRepNetConfig = field(default_factory=GeoRepNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return {"model": self.model.to_dict(), "train": asdict(self.train)}

    def to_json(self):
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, data):
        _check_keys(cls, data)
        return cls(
            model=GeoRepNetConfig.from_dict(data.get("model", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
        )

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())
