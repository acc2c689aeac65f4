"""Run configuration: nested YAML file, dotted overrides, deterministic echo."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .numerics import ContractError
from .pipeline import VARIANTS, TrainConfig


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | movielens-1m
    path: str | None = None
    label_rule: str = "ml-1m"
    encoding: str = "latin-1"
    min_history: int = 5
    n_users: int = 200
    n_items: int = 120
    n_genres: int = 8


@dataclass
class LmSection:
    d_model: int = 48
    n_heads: int = 2
    n_layers: int = 2
    context: int = 512
    pretrain_prompts: int = 400
    pretrain_k: int = 8
    pretrain_epochs: int = 1
    lr: float = 3e-3


@dataclass
class CrmSection:
    d_e: int = 16
    d_h: int = 32
    hidden: int = 32
    aggregator: str = "attention"
    epochs: int = 12
    lr: float = 1e-2
    max_len: int = 32


@dataclass
class SubrSection:
    d_q: int | None = None
    vectors: str | None = None  # optional import file, item_id<TAB>v1,v2,...
    field: str = "genres"


@dataclass
class EvalSection:
    max_samples: int | None = 500
    sweep_k: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    sweep_l: list[int] = field(default_factory=lambda: [8, 16, 32])
    heterogeneity_k: list[int] = field(default_factory=lambda: [5, 10, 15, 20])
    case_study: int = 3


@dataclass
class RunConfig:
    seed: int = 0
    template: str = "movielens"
    data: DataSection = field(default_factory=DataSection)
    lm: LmSection = field(default_factory=LmSection)
    crm: CrmSection = field(default_factory=CrmSection)
    subr: SubrSection = field(default_factory=SubrSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        # the trainer's seed is derived from the root seed, never set directly
        del d["train"]["seed"]
        return d

    def echo(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def section_digest(self, *sections: str) -> str:
        d = self.to_dict()
        payload = {s: d[s] for s in sections}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        cfg = cls()
        data = dict(data or {})
        train = dict(data.pop("train", None) or {})
        if "variant" in train:
            cfg.apply_variant(train.pop("variant"))
        for key, value in data.items():
            set_path(cfg, key, value)
        for key, value in train.items():
            set_path(cfg, f"train.{key}", value)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))

    def apply_variant(self, variant: str) -> None:
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant {variant!r}; known: {sorted(VARIANTS)}")
        self.train.variant = variant
        for key, value in VARIANTS[variant].items():
            setattr(self.train, key, value)


def set_path(obj: Any, key: str, value: Any) -> None:
    """Assign ``value`` at a dotted path, recursing into nested sections and dicts."""
    if key == "train.seed":
        raise ContractError("train.seed is derived from the root seed; set 'seed' instead")
    if key == "train.variant" and isinstance(obj, RunConfig):
        obj.apply_variant(str(value))
        return
    head, _, rest = key.partition(".")
    if isinstance(value, dict) and not rest:
        target = getattr(obj, head, None) if dataclasses.is_dataclass(obj) else None
        if target is None or not dataclasses.is_dataclass(target):
            raise ContractError(f"config key {head!r} is not a section")
        for k, v in value.items():
            set_path(target, k, v)
        return
    if not dataclasses.is_dataclass(obj) or head not in {f.name for f in dataclasses.fields(obj)}:
        raise ContractError(f"unknown config key {key!r}")
    if rest:
        set_path(getattr(obj, head), rest, value)
        return
    current = getattr(obj, head)
    setattr(obj, head, _coerce(value, current, key))


def _coerce(value: Any, current: Any, key: str) -> Any:
    if isinstance(value, str) and not isinstance(current, str):
        value = yaml.safe_load(value)
        if current is None or value is None:
            return value
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ContractError(f"config key {key!r} expects true/false, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool) and isinstance(value, float):
        raise ContractError(f"config key {key!r} expects an integer, got {value!r}")
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return value
