"""Flat ``key = value`` experiment configs (a TOML subset without tables)."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, fields, asdict
from pathlib import Path
from typing import Optional

import tomli

from .model import ViTConfig, PRESETS
from .train import TrainConfig, TrainingError


class ConfigFileError(ValueError):
    """Malformed config; ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: Optional[int] = None):
        self.path, self.line, self.message = path, line, message
        where = f"{path or '<config>'}" + (f":{line}" if line else "")
        super().__init__(f"{where}: {message}")


@dataclass
class ExperimentConfig:
    # model
    preset: str = "toy"
    image_side: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    classes: int = 10
    channels: int = 3
    use_cls_token: bool = True
    qkv_bias: bool = True
    # training
    mode: str = "svite"
    epochs: int = 40
    batch_size: int = 32
    lr_ref: float = 0.016
    warmup_epochs: int = 5
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    delta_t: int = 100
    t_end_fraction: float = 0.8
    alpha: float = 0.5
    sparsity: float = 0.5
    data_sparsity: float = 0.0
    seed: int = 0
    grad_clip: float = 5.0
    oneshot_at: float = 0.5
    gmp_events: int = 20
    # selector
    tau: float = 1.0
    scorer_hidden: int = 16
    # data
    dataset: str = "synthetic"
    train_size: int = 1600
    val_size: int = 500
    data_seed: int = 0
    noise: float = 1.2
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_val_images: str = ""
    idx_val_labels: str = ""
    # output
    out_dir: str = "runs/default"

    def vit_config(self) -> ViTConfig:
        names = {f.name for f in fields(ViTConfig)}
        return ViTConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ExperimentConfig":
        if name not in PRESETS:
            raise ConfigFileError(f"unknown preset {name!r}")
        return cls(preset=name, **{**PRESETS[name].to_dict(), **overrides})


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _key_line(text: str, key: str) -> Optional[int]:
    pat = re.compile(rf"^\s*[\"']?{re.escape(key)}[\"']?\s*=")
    for i, line in enumerate(text.splitlines(), start=1):
        if pat.match(line):
            return i
    return None


def _coerce(key: str, value, text: str, path):
    want = _TYPES[key]
    line = _key_line(text, key)
    if want == "bool":
        if not isinstance(value, bool):
            raise ConfigFileError(f"{key} must be true or false, got {value!r}", path, line)
        return value
    if want == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigFileError(f"{key} must be an integer, got {value!r}", path, line)
        return value
    if want == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigFileError(f"{key} must be a number, got {value!r}", path, line)
        return float(value)
    if not isinstance(value, str):
        raise ConfigFileError(f"{key} must be a string, got {value!r}", path, line)
    return value


def parse_config(text: str, path=None) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigFileError(f"syntax error: {e}", path, int(m.group(1)) if m else None) from None
    values = {}
    preset_name = raw.get("preset")
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigFileError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}", path,
                                  _key_line(text, "preset"))
        values.update(PRESETS[preset_name].to_dict())
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigFileError(f"tables are not supported ([{key}]); use flat keys", path,
                                  _key_line(text, f"[{key}]") or _table_line(text, key))
        if key not in _TYPES:
            raise ConfigFileError(f"unknown key {key!r}", path, _key_line(text, key))
        values[key] = _coerce(key, value, text, path)
    cfg = ExperimentConfig(**values)
    try:
        cfg.vit_config()
        cfg.train_config()
    except (ValueError, TrainingError) as e:
        msg = str(e)
        key = next((k for k in raw if re.search(rf"\b{re.escape(k)}\b", msg)), None)
        raise ConfigFileError(msg, path, _key_line(text, key) if key else None) from None
    if cfg.dataset not in ("synthetic", "idx"):
        raise ConfigFileError("dataset must be 'synthetic' or 'idx'", path, _key_line(text, "dataset"))
    return cfg


def _table_line(text: str, key: str) -> Optional[int]:
    for i, line in enumerate(text.splitlines(), start=1):
        if line.strip().startswith("[") and key in line:
            return i
    return None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return parse_config(path.read_text(), path)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ConfigFileError(f"cannot write non-finite value {value}")
        return repr(value)
    return json.dumps(value)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in cfg.to_dict().items())


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
