"""Run configuration: a JSON-backed dataclass tree covering every tunable.

Validation collects all violations and reports them together rather than
stopping at the first.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .backbone import FUSION_KINDS, BlockConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid config:\n" + "\n".join(f"  - {v}" for v in self.violations))


@dataclass
class DataConfig:
    n_speakers: int = 20
    n_texts: int = 50
    n_bins: int = 16
    base_frames: int = 4


@dataclass
class SamplingConfig:
    num_steps: int = 32
    cfg_scale: float = 3.0


@dataclass
class EvalConfig:
    n_requests: int = 50
    ablation_scale: float = 0.4  # step-budget factor for ablation trainings
    ablation_requests: int = 30


@dataclass
class RunConfig:
    seed: int = 42
    scale_factor: float = 1.0
    corpus_path: str = "corpus.bin"
    out_dir: str = "runs"
    model: BlockConfig = field(default_factory=BlockConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        v = []
        if self.scale_factor <= 0:
            v.append(f"scale_factor must be > 0, got {self.scale_factor}")
        if self.data.n_speakers < 1:
            v.append("data.n_speakers must be >= 1")
        if self.data.n_texts < 1:
            v.append("data.n_texts must be >= 1")
        if self.data.n_bins < 16:
            v.append("data.n_bins must be >= 16 for the bump layout")
        if self.data.base_frames < 1:
            v.append("data.base_frames must be >= 1")
        if self.model.n_bins != self.data.n_bins:
            v.append(
                f"model.n_bins ({self.model.n_bins}) must equal data.n_bins ({self.data.n_bins})"
            )
        if self.model.fusion not in FUSION_KINDS:
            v.append(f"model.fusion must be one of {FUSION_KINDS}")
        if self.model.d_model % self.model.n_heads != 0:
            v.append("model.d_model must be divisible by model.n_heads")
        if self.model.n_layers % 2 != 0:
            v.append("model.n_layers must be even")
        if self.sampling.num_steps < 1:
            v.append("sampling.num_steps must be >= 1")
        if self.sampling.cfg_scale < 0:
            v.append("sampling.cfg_scale must be >= 0")
        if not 0 <= self.train.p_drop < 1:
            v.append("train.p_drop must lie in [0, 1)")
        if any(s < 1 for s in self.train.stage_steps):
            v.append("train.stage_steps must all be >= 1")
        if any(lr <= 0 for lr in self.train.stage_lrs):
            v.append("train.stage_lrs must all be > 0")
        if self.train.batch_size < 1:
            v.append("train.batch_size must be >= 1")
        if v:
            raise ConfigError(v)
        return self


_SECTIONS = {
    "model": BlockConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "sampling": SamplingConfig,
    "evaluation": EvalConfig,
}


def _build_section(cls, payload, where, violations):
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, val in payload.items():
        if key not in names:
            violations.append(f"unknown field {where}.{key}")
            continue
        if isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        violations.append(f"{where}: {exc}")
        return cls()


def config_from_dict(payload: dict) -> RunConfig:
    violations = []
    kwargs = {}
    for key, val in payload.items():
        if key in _SECTIONS:
            if not isinstance(val, dict):
                violations.append(f"section {key} must be an object")
                continue
            kwargs[key] = _build_section(_SECTIONS[key], val, key, violations)
        elif key in ("seed", "scale_factor", "corpus_path", "out_dir"):
            kwargs[key] = val
        else:
            violations.append(f"unknown field {key}")
    if violations:
        raise ConfigError(violations)
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"not valid JSON: {exc}"]) from exc
    return config_from_dict(payload)


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as f:
        json.dump(asdict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
