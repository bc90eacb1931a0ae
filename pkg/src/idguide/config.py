"""INI run configuration with typed defaults for every key.

Sections and defaults::

    [data]      seed=0 height=16 width=16 frames=8 identities=8
                clips_per_identity=8 heldout_per_identity=3
    [model]     latent_hw=4 latent_channels=8 model_dim=32 heads=2
                adapter_blocks=2 face_encoder_blocks=2 face_tokens=4 d_id=8
                sigma_data=1.0 use_temporal=true alignment=full
                ae_patch=4 ae_hidden=64 embedder_hidden=16
    [schedule]  steps=18 sigma_min=0.02 sigma_max=80 rho=7 s_churn=40
                s_noise=1.003 s_tmin=0.05 s_tmax=50
    [guidance]  enabled=true lr=0.01 k_steps=10 sigma_low=0 sigma_high=inf
                persistent_state=false reoptimize_correction=false
    [train]     seed=0 epochs=20 lr=0.002 sigma_min=0.02 sigma_max=80
                ae_steps=1500 ae_lr=0.01 ae_batch=32 emb_steps=300 emb_lr=0.01
                emb_batch=32 margin=0.3 pretrain_seed=1
    [eval]      seed=100 split=heldout max_clips=0 alpha=0.05

``max_clips=0`` means every clip in the split. Guidance runs only at noise
levels inside ``[sigma_low, sigma_high]``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import DataConfig
from .models import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection(DataConfig):
    seed: int = 0

    def data_config(self) -> DataConfig:
        kw = asdict(self)
        kw.pop("seed")
        return DataConfig(**kw)


@dataclass
class ModelSection:
    latent_hw: int = 4
    latent_channels: int = 8
    model_dim: int = 32
    heads: int = 2
    adapter_blocks: int = 2
    face_encoder_blocks: int = 2
    face_tokens: int = 4
    d_id: int = 8
    sigma_data: float = 1.0
    use_temporal: bool = True
    alignment: str = "full"
    ae_patch: int = 4
    ae_hidden: int = 64
    embedder_hidden: int = 16

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class ScheduleSection:
    steps: int = 18
    sigma_min: float = 0.02
    sigma_max: float = 80.0
    rho: float = 7.0
    s_churn: float = 40.0
    s_noise: float = 1.003
    s_tmin: float = 0.05
    s_tmax: float = 50.0


@dataclass
class GuidanceSection:
    enabled: bool = True
    lr: float = 0.01
    k_steps: int = 10
    sigma_low: float = 0.0
    sigma_high: float = math.inf
    persistent_state: bool = False
    reoptimize_correction: bool = False


@dataclass
class TrainSection(TrainConfig):
    pretrain_seed: int = 1

    def train_config(self) -> TrainConfig:
        kw = asdict(self)
        kw.pop("pretrain_seed")
        return TrainConfig(**kw)


@dataclass
class EvalSection:
    seed: int = 100
    split: str = "heldout"
    max_clips: int = 0
    alpha: float = 0.05


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    SECTIONS = ("data", "model", "schedule", "guidance", "train", "eval")

    def to_text(self) -> str:
        """Effective configuration as INI text; parses back to an equal config."""
        lines = []
        for name in self.SECTIONS:
            lines.append(f"[{name}]")
            for key, value in asdict(getattr(self, name)).items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in RunConfig.SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, section)
        defaults = asdict(target)
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _convert(raw, defaults[key], f"{section}.{key}"))
    try:
        cfg.data.data_config().validate()
        cfg.model.model_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))
