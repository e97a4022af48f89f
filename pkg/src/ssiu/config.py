"""Run configuration: dataclasses, strict dict/YAML round-trip and dotted overrides."""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .blocks import ESAMConfig, MoEFSConfig, MSGMConfig


class ConfigError(ValueError):
    """Field-level configuration problem. ``field`` holds the dotted path."""

    def __init__(self, field_path, message):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass
class SSIUConfig:
    scale: int = 4
    channels: int = 64
    num_stages: int = 9
    moe_taps: tuple = (3, 6, 9)
    msgm: MSGMConfig = field(default_factory=MSGMConfig)
    esam: ESAMConfig = field(default_factory=ESAMConfig)
    moe: MoEFSConfig = field(default_factory=MoEFSConfig)
    attention_mode: str = "sparse"
    use_moe_fs: bool = True

    def __post_init__(self):
        self.moe_taps = tuple(int(t) for t in self.moe_taps)

    def validate(self):
        if self.scale not in (2, 3, 4):
            raise ConfigError("model.scale", f"must be one of 2, 3, 4, got {self.scale}")
        if self.channels < 1:
            raise ConfigError("model.channels", "must be >= 1")
        if self.num_stages < 0:
            raise ConfigError("model.num_stages", "must be >= 0")
        if self.attention_mode not in ("sparse", "dense"):
            raise ConfigError("model.attention_mode", "must be 'sparse' or 'dense'")
        try:
            self.msgm.validate()
            self.esam.validate(self.channels)
            self.moe.validate()
        except ValueError as e:
            raise ConfigError("model." + str(e).split(" ")[0], str(e)) from None
        if self.use_moe_fs:
            taps = self.moe_taps
            if self.num_stages < 3:
                raise ConfigError("model.num_stages", "MoE-FS needs at least 3 stages")
            if len(taps) != self.moe.num_experts:
                raise ConfigError("model.moe_taps", f"needs {self.moe.num_experts} entries, got {len(taps)}")
            if any(b <= a for a, b in zip(taps, taps[1:])) or taps[0] < 1:
                raise ConfigError("model.moe_taps", "must be strictly increasing stage indices >= 1")
            if taps[-1] != self.num_stages:
                raise ConfigError("model.moe_taps", "last tap must be the final stage")
        return self


@dataclass
class TrainConfig:
    batch_size: int = 40
    patch_lr: int = 64
    total_iters: int = 5000
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    schedule: str = "cosine"
    lambda_f: float = 0.01
    fft_mode: str = "complex"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None
    seed: int = 0
    checkpoint_every: int = 1000
    validate_every: Optional[int] = None
    log_every: int = 10
    num_workers: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if self.patch_lr < 1:
            raise ConfigError("train.patch_lr", "must be >= 1")
        if self.total_iters < 1:
            raise ConfigError("train.total_iters", "must be >= 1")
        if not self.lr_init >= self.lr_final > 0:
            raise ConfigError("train.lr_init", "need lr_init >= lr_final > 0")
        if self.schedule != "cosine":
            raise ConfigError("train.schedule", "only 'cosine' is supported")
        if self.lambda_f < 0:
            raise ConfigError("train.lambda_f", "must be >= 0")
        if self.fft_mode not in ("complex", "amplitude"):
            raise ConfigError("train.fft_mode", "must be 'complex' or 'amplitude'")
        if self.checkpoint_every < 1:
            raise ConfigError("train.checkpoint_every", "must be >= 1")
        return self


@dataclass
class DataConfig:
    train_root: Optional[str] = None
    train_split: str = "train"
    val_root: Optional[str] = None
    val_split: str = "val"
    max_images: Optional[int] = None
    regenerate_cache: bool = False

    def validate(self, require_train=True):
        if require_train:
            if not self.train_root:
                raise ConfigError("data.train_root", "is required")
            if not Path(self.train_root).is_dir():
                raise ConfigError("data.train_root", f"directory {self.train_root!r} does not exist")
        if self.val_root and not Path(self.val_root).is_dir():
            raise ConfigError("data.val_root", f"directory {self.val_root!r} does not exist")
        return self


@dataclass
class RunConfig:
    model: SSIUConfig = field(default_factory=SSIUConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def validate(self, require_train_data=True):
        self.model.validate()
        self.train.validate()
        self.data.validate(require_train=require_train_data)
        return self


def to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v

    return conv(cfg)


def from_dict(cls, data: dict, prefix=""):
    """Build dataclass ``cls`` from ``data``; unknown keys are errors."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", f"expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(prefix + unknown[0], "unknown key")
    kwargs = {}
    for name, value in data.items():
        sub = _DATACLASS_FIELDS.get((cls, name))
        if sub is not None:
            kwargs[name] = from_dict(sub, value, prefix + name + ".")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(prefix.rstrip(".") or "<root>", str(e)) from None


_DATACLASS_FIELDS = {
    (RunConfig, "model"): SSIUConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "data"): DataConfig,
    (SSIUConfig, "msgm"): MSGMConfig,
    (SSIUConfig, "esam"): ESAMConfig,
    (SSIUConfig, "moe"): MoEFSConfig,
}


def dump_yaml(cfg) -> str:
    """Canonical text form (sorted keys, block style)."""
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(path, "is not a mapping")
        node[keys[-1]] = yaml.safe_load(raw)
    return data


def load_run_config(path=None, overrides=()) -> RunConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
    data = apply_overrides(data, overrides)
    return from_dict(RunConfig, data)


def model_config_from_dict(data: dict) -> SSIUConfig:
    return from_dict(SSIUConfig, data, "model.")


def default_config_path(scale: int = 4) -> Path:
    return Path(__file__).parent / "configs" / f"ssiu_x{scale}.yaml"
