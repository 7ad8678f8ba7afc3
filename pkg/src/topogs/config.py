"""Pipeline configuration: one nested, fully resolved tree persisted as YAML."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .appearance import AppearanceConfig
from .core import ConfigError, InvalidInputError
from .energy import APPEARANCE_SMOOTH, LossWeights
from .packing import SORTINGS
from .registration import RegistrationConfig, TrainSchedule
from .scenegen import SceneConfig


@dataclass
class PackingConfig:
    sorting: str = "combined"
    morton_bits: int = 10
    persistent_fraction: float = 1.0  # 1.0 = alive for the whole sequence

    def __post_init__(self):
        if self.sorting not in SORTINGS:
            raise ConfigError(f"packing.sorting must be one of {SORTINGS}")
        if not 1 <= self.morton_bits <= 21:
            raise ConfigError("packing.morton_bits must be in 1..21")
        if not 0 < self.persistent_fraction <= 1:
            raise ConfigError("packing.persistent_fraction must be in (0, 1]")


@dataclass
class CodecConfig:
    qp: float = 15.0
    gop: int = 20

    def __post_init__(self):
        if self.qp < 0:
            raise ConfigError("codec.qp must be >= 0")
        if self.gop < 1:
            raise ConfigError("codec.gop must be >= 1")


@dataclass
class EvalConfig:
    psnr_cap: float = 99.0
    views: list = field(default_factory=list)  # empty = every view


@dataclass
class PipelineConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    appearance: AppearanceConfig = field(default_factory=AppearanceConfig)
    packing: PackingConfig = field(default_factory=PackingConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.apply_seed(self.seed)

    def apply_seed(self, seed: int):
        """The pipeline seed drives every stochastic stage."""
        self.seed = int(seed)
        self.scene.seed = self.seed
        self.registration.seed = self.seed
        self.appearance.seed = self.seed

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "scene": self.scene.to_dict()}
        for name in ("registration", "appearance", "packing", "codec", "eval"):
            d[name] = _plain(asdict(getattr(self, name)))
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "PipelineConfig":
        d = copy.deepcopy(d or {})
        if not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            scene = SceneConfig.from_dict(d.get("scene", {}) or {})
            reg = dict(d.get("registration", {}) or {})
            weights = _build(LossWeights, reg.pop("weights", {}) or {}, "registration.weights")
            schedule = _build(TrainSchedule, reg.pop("schedule", {}) or {}, "registration.schedule")
            registration = _build(RegistrationConfig, reg, "registration", weights=weights, schedule=schedule)
            appearance = _build(AppearanceConfig, d.get("appearance", {}) or {}, "appearance")
            packing = _build(PackingConfig, d.get("packing", {}) or {}, "packing")
            codec = _build(CodecConfig, d.get("codec", {}) or {}, "codec")
            ev = _build(EvalConfig, d.get("eval", {}) or {}, "eval")
        except (InvalidInputError, TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None
        seed = d.get("seed", scene.seed)
        return cls(int(seed), scene, registration, appearance, packing, codec, ev)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if hasattr(x, "item"):
        return x.item()
    return x


def _build(cls, d: dict, where: str, **nested):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**d, **nested)


# ---------------------------------------------------------------------------
# presets

def desk_scene() -> dict:
    return {"template": "sheet", "frames": 20, "views": 8, "resolution": [128, 128],
            "motion": {"translate": [0.008, 0.0, 0.0], "rotate_deg": 0.6},
            "events": [{"frame": 6, "kind": "appear", "region": "patch"},
                       {"frame": 12, "kind": "disappear", "region": "hole"}]}


PRESETS = {
    # published iteration counts and weights
    "full": {},
    # CPU-sized schedule for 8 views at 128x128
    "desk": {
        "scene": desk_scene(),
        "registration": {"schedule": {"init_iters": 200, "track_iters": 60, "candidate_insert_iter": 30,
                                      "maintenance_period": 15, "divergence_window": 40, "views_per_iter": 4,
                                      "lr": {"position": 2e-3, "position_final": 2e-4}}},
        # short per-frame budgets leave slow Adam drift in the barely-constrained SH bands;
        # a stiffer temporal term keeps those samples still between frames
        "appearance": {"iters": 20, "warmup_iters": 80, "divergence_window": 40,
                       "lambda_smooth": APPEARANCE_SMOOTH, "lambda_temporal": 1.0},
    },
}


def preset(name: str) -> PipelineConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PipelineConfig.from_dict(PRESETS[name])


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("motion", "lr"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, preset_name: str | None = None, overrides=(), seed: int | None = None) -> PipelineConfig:
    """Resolve preset <- file <- key=value overrides <- seed."""
    d = copy.deepcopy(PRESETS[preset_name]) if preset_name else {}
    if preset_name and preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}")
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must hold a mapping")
        d = _merge(d, loaded)
    for item in overrides:
        d = _merge(d, parse_override(item))
    if seed is not None:
        d["seed"] = int(seed)
    return PipelineConfig.from_dict(d)


def parse_override(item: str) -> dict:
    """'a.b.c=value' -> {'a': {'b': {'c': value}}}; value parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {item!r}: {e}") from None
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {item!r} has an empty key")
    out = value
    for p in reversed(parts):
        out = {p: out}
    return out


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def save_config(path, cfg: PipelineConfig) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump_config(cfg))


def read_config(path) -> PipelineConfig:
    return load_config(path)


def is_config(x) -> bool:
    return is_dataclass(x) and isinstance(x, PipelineConfig)
