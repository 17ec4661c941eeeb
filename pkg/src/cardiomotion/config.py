"""Run configuration: one JSON-serializable object covering every stage.

Defaults reproduce the reference setup (11x11 windows, 4x128 LSTM,
1024/256/64 auto-encoder, combined features). Any subset of keys may be
overridden from a JSON file; unknown keys are rejected to catch typos.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import InvalidParameter
from .varflow import FlowParams


@dataclass(frozen=True)
class MatchingConfig:
    # cine wall motion stays within a few px/frame, so the pipeline default
    # search radius is small; None falls back to half the image
    patch_size: int = 4
    nu: float = 1.4
    radius: int | None = 12
    threshold: float = 0.5


@dataclass(frozen=True)
class FlowConfig:
    alpha: float = 0.05
    beta: float = 0.02
    delta: float = 1.0
    gamma: float = 0.7
    sigma: float = 0.8
    epsilon: float = 1e-3
    levels: int | None = None
    outer_iters: int = 5
    solver_iters: int = 30
    omega: float = 1.6

    def params(self) -> FlowParams:
        return FlowParams(**asdict(self))


@dataclass(frozen=True)
class FeatureConfig:
    window: int = 11
    mode: str = "combined"         # local_only | global_only | combined


@dataclass(frozen=True)
class NeuralConfig:
    hidden_dim: int = 128
    lstm_layers: int = 4
    dropout: float = 0.5
    sae_dims: tuple = (1024, 256, 64)
    lstm_epochs: int = 6
    lstm_lr: float = 1e-3
    lstm_batch: int = 32
    sae_epochs: int = 10
    sae_lr: float = 1e-3
    finetune_epochs: int = 30
    finetune_lr: float = 1e-3
    opt_rho: float = 0.9
    opt_eps: float = 1e-8
    batch: int = 128


@dataclass(frozen=True)
class PipelineConfig:
    pixel_cap: int = 2000          # balanced training pixels per subject
    segment_fraction: float = 0.05
    decision_threshold: float = 0.5
    roi_size: int = 64


_SECTIONS = {
    "matching": MatchingConfig,
    "flow": FlowConfig,
    "features": FeatureConfig,
    "neural": NeuralConfig,
    "pipeline": PipelineConfig,
}


@dataclass(frozen=True)
class Config:
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    neural: NeuralConfig = field(default_factory=NeuralConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["neural"]["sae_dims"] = list(self.neural.sae_dims)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        if not isinstance(data, dict):
            raise InvalidParameter("config must be a JSON object")
        sections = {}
        for name, value in data.items():
            if name not in _SECTIONS:
                raise InvalidParameter(f"unknown config section {name!r}")
            section_cls = _SECTIONS[name]
            known = {f.name for f in fields(section_cls)}
            unknown = set(value) - known
            if unknown:
                raise InvalidParameter(f"unknown keys in {name!r}: {sorted(unknown)}")
            if name == "neural" and "sae_dims" in value:
                value = dict(value, sae_dims=tuple(value["sae_dims"]))
            sections[name] = section_cls(**value)
        return cls(**sections)

    @classmethod
    def from_json(cls, path) -> "Config":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidParameter(f"config file is not valid JSON: {exc}") from exc
        return cls.from_dict(data)
