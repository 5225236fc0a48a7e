"""Experiment configuration: dataclasses, presets and file/override parsing.

A config file is either JSON or ``key=value`` lines (``#`` comments allowed).
Keys are dotted paths into :class:`ExperimentConfig`, e.g.
``model.hidden_dim=32`` or ``target.generator=shifted_variant``. Values are
parsed as JSON when possible and kept as strings otherwise.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import DatasetSpec
from .diffusion import EVAL_CFG_SCALE, NoiseSchedule, build_schedule
from .model import ModelSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def build(self) -> NoiseSchedule:
        return build_schedule(self.kind, self.T, self.beta_start, self.beta_end)


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    target: DatasetSpec = field(default_factory=lambda: DatasetSpec(generator="shifted_variant"))
    n_train: int = 4096
    n_eval: int = 512
    split_seed: int = 0
    method: Any = "difffit-best"       # preset id or a PEFTMethod dict
    steps: int = 5000
    batch_size: int = 64
    base_lr: float = 1e-4
    lr_multiplier: float | None = None  # None: the method's default policy
    label_dropout: float = 0.1
    lambda_vlb: float = 0.001
    log_every: int = 50
    eval_every: int = 0                 # 0: evaluate only at the end
    eval_samples: int = 256
    cfg_scale: float = EVAL_CFG_SCALE
    project_dim: int | None = 32
    sample_every: int = 0
    grid_samples: int = 16
    seed: int = 0
    out: str = "runs/run"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["data"] = self.data.to_dict()
        d["target"] = self.target.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "model" in d:
                d["model"] = ModelSpec.from_dict(d["model"])
            if "schedule" in d:
                d["schedule"] = ScheduleConfig(**d["schedule"])
            for k in ("data", "target"):
                if k in d:
                    d[k] = DatasetSpec.from_dict(d[k])
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def replace(self, **overrides) -> "ExperimentConfig":
        return apply_overrides(self, overrides)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_kv_lines(lines) -> dict:
    out = {}
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line {raw.strip()!r} (expected key=value)")
        k, v = line.split("=", 1)
        out[k.strip()] = _parse_value(v.strip())
    return out


def _set_dotted(d: dict, key: str, value):
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if not isinstance(cur.get(p), dict):
            raise ConfigError(f"{key!r} does not address a nested config section")
        cur = cur[p]
    cur[parts[-1]] = value


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    d = cfg.to_dict()
    for k, v in overrides.items():
        _set_dotted(d, k, v)
    return ExperimentConfig.from_dict(d)


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    if path is not None:
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            try:
                flat = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"invalid JSON config: {e}") from e
            if not isinstance(flat, dict):
                raise ConfigError("JSON config must be an object")
            cfg = ExperimentConfig.from_dict(_deep_merge(cfg.to_dict(), flat))
        else:
            cfg = apply_overrides(cfg, parse_kv_lines(text.splitlines()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


DESK_MODEL = ModelSpec(image_size=8, channels=3, patch_size=2, hidden_dim=32, depth=4, num_heads=2,
                       num_classes=4, freq_dim=64)
DESK_SCHEDULE = ScheduleConfig("linear", 100, 1e-3, 0.2)


def desk_config(**overrides) -> ExperimentConfig:
    """Small model and a 100-step schedule sized for single-core CPU runs."""
    cfg = ExperimentConfig(model=DESK_MODEL, schedule=DESK_SCHEDULE, n_train=4096, n_eval=512,
                           steps=3000, base_lr=1e-3, eval_samples=256)
    return apply_overrides(cfg, overrides) if overrides else cfg


PRESET_CONFIGS = {"default": ExperimentConfig, "desk": desk_config}
