"""Experiment configuration: a versioned, diff-able plain-text format.

One ``key = value`` assignment per line; dots nest sections
(``train.steps = 500``). Values are ints, floats, booleans, bare strings,
or comma-separated lists. ``#`` starts a comment. Two configs hash
identically exactly when their parsed content is identical, regardless of
key order or formatting.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import ClassSpec, chest_longtail_specs, tail8_specs

__all__ = [
    "CONFIG_VERSION",
    "parse_config_text",
    "canonical_config_text",
    "config_hash",
    "ExperimentConfig",
    "load_experiment_config",
    "class_specs_from_config",
]

CONFIG_VERSION = 1


def _parse_scalar(raw: str):
    raw = raw.strip()
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def _parse_value(raw: str):
    raw = raw.strip()
    if "," in raw:
        return [_parse_scalar(part) for part in raw.split(",") if part.strip() != ""]
    return _parse_scalar(raw)


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_render_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> dict[str, object]:
    """Flat dict of dotted keys to parsed values."""
    result: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in result:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        result[key] = _parse_value(raw)
    return result


def canonical_config_text(flat: dict[str, object]) -> str:
    return "".join(f"{key} = {_render_value(flat[key])}\n" for key in sorted(flat))


def config_hash(flat: dict[str, object]) -> str:
    return hashlib.sha256(canonical_config_text(flat).encode("utf-8")).hexdigest()


@dataclass
class ExperimentConfig:
    """Typed view of a full experiment; every field round-trips losslessly."""

    seeds: list[int] = field(default_factory=lambda: [0])

    corpus_profile: str = "chest-longtail"
    corpus_size: int = 2000
    corpus_test_size: int = 1000
    corpus_dimension: int = 2
    corpus_embedding_dim: int = 16
    corpus_noise_scale: float = 0.05

    partition_method: str = "label-tier"
    partition_experts: int = 4

    backbone_hidden_dim: int = 32
    backbone_blocks: int = 2
    backbone_time_embed_dim: int = 8

    adapter_dim: int = 16
    adapter_placement: str = "all"
    adapter_nonlinearity: str = "gelu"

    train_pretrain_steps: int = 300
    train_pretrain_lr: float = 0.01
    train_steps: int = 500
    train_batch_size: int = 8
    train_lr: float = 0.02
    train_resample: bool = False
    train_quota: int = 3
    train_cond_dropout: float = 0.1
    train_trace_interval: int = 0

    sample_steps: int = 16
    sample_guidance_scale: float = 5.0
    sample_per_class: int = 50

    metrics_k: int = 5

    explicit_classes: dict[str, object] = field(default_factory=dict)

    _KEYS = {
        "seeds": "seeds",
        "corpus.profile": "corpus_profile",
        "corpus.size": "corpus_size",
        "corpus.test_size": "corpus_test_size",
        "corpus.dimension": "corpus_dimension",
        "corpus.embedding_dim": "corpus_embedding_dim",
        "corpus.noise_scale": "corpus_noise_scale",
        "partition.method": "partition_method",
        "partition.experts": "partition_experts",
        "backbone.hidden_dim": "backbone_hidden_dim",
        "backbone.blocks": "backbone_blocks",
        "backbone.time_embed_dim": "backbone_time_embed_dim",
        "adapter.dim": "adapter_dim",
        "adapter.placement": "adapter_placement",
        "adapter.nonlinearity": "adapter_nonlinearity",
        "train.pretrain_steps": "train_pretrain_steps",
        "train.pretrain_lr": "train_pretrain_lr",
        "train.steps": "train_steps",
        "train.batch_size": "train_batch_size",
        "train.lr": "train_lr",
        "train.resample": "train_resample",
        "train.quota": "train_quota",
        "train.cond_dropout": "train_cond_dropout",
        "train.trace_interval": "train_trace_interval",
        "sample.steps": "sample_steps",
        "sample.guidance_scale": "sample_guidance_scale",
        "sample.per_class": "sample_per_class",
        "metrics.k": "metrics_k",
    }

    @classmethod
    def from_flat(cls, flat: dict[str, object]) -> "ExperimentConfig":
        version = flat.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version}")
        cfg = cls()
        for key, value in flat.items():
            if key == "version":
                continue
            if key.startswith("class."):
                cfg.explicit_classes[key] = value
                continue
            if key not in cls._KEYS:
                raise ValueError(f"unknown config key {key!r}")
            attr = cls._KEYS[key]
            if attr == "seeds":
                cfg.seeds = [int(v) for v in (value if isinstance(value, list) else [value])]
            else:
                current = getattr(cfg, attr)
                if isinstance(current, bool):
                    if not isinstance(value, bool):
                        raise ValueError(f"{key}: expected true/false, got {value!r}")
                    setattr(cfg, attr, value)
                elif isinstance(current, int):
                    setattr(cfg, attr, int(value))
                elif isinstance(current, float):
                    setattr(cfg, attr, float(value))
                else:
                    setattr(cfg, attr, str(value))
        cfg.validate()
        return cfg

    def to_flat(self) -> dict[str, object]:
        flat: dict[str, object] = {"version": CONFIG_VERSION, "seeds": list(self.seeds)}
        for key, attr in self._KEYS.items():
            if key == "seeds":
                continue
            flat[key] = getattr(self, attr)
        flat.update(self.explicit_classes)
        return flat

    def to_text(self) -> str:
        return canonical_config_text(self.to_flat())

    def hash(self) -> str:
        return config_hash(self.to_flat())

    @property
    def root_seed(self) -> int:
        return self.seeds[0]

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.sample_guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.train_quota > self.train_batch_size:
            raise ValueError("train.quota exceeds train.batch_size")


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_flat(parse_config_text(Path(path).read_text()))


def class_specs_from_config(cfg: ExperimentConfig, total: int | None = None) -> list[ClassSpec]:
    """Class specs from a named profile or explicit ``class.<id>.*`` keys."""
    total = cfg.corpus_size if total is None else total
    if cfg.explicit_classes:
        by_id: dict[int, dict[str, object]] = {}
        for key, value in cfg.explicit_classes.items():
            _, cid, attr = key.split(".", 2)
            by_id.setdefault(int(cid), {})[attr] = value
        specs = []
        for cid in sorted(by_id):
            entry = by_id[cid]
            mean = entry["mean"]
            mean = tuple(float(m) for m in (mean if isinstance(mean, list) else [mean]))
            specs.append(
                ClassSpec(
                    class_id=cid,
                    mean=mean,
                    scale=float(entry["scale"]),
                    count=int(entry["count"]),
                    is_healthy=bool(entry.get("healthy", False)),
                )
            )
        return specs
    if cfg.corpus_profile == "chest-longtail":
        return chest_longtail_specs(total, cfg.corpus_dimension)
    if cfg.corpus_profile == "tail8":
        return tail8_specs(total, cfg.corpus_dimension)
    raise ValueError(f"unknown corpus profile {cfg.corpus_profile!r}")
