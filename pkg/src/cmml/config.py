"""Run configuration: one YAML file per run, with dotted-key overrides.

Every section maps onto a dataclass; unknown keys are rejected with their full
key path so typos fail loudly instead of silently falling back to defaults.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import yaml

from .data import SyntheticSpec, TemplateSchema, synthetic_schema
from .encoders import EncoderConfig
from .icar import CDRConfig
from .model import SWITCHES, ModelConfig
from .numerics import ConfigurationError
from .trainer import TrainConfig


@dataclass
class SyntheticSection:
    M: int = 3
    C: int = 3
    latent_dim: int = 32
    noise_std: float = 2.0
    n_samples: int = 2500
    seed: int = 0
    feature_dim: int = 512
    class_sep: float = 1.0
    n_attributes: int = 3


@dataclass
class DataSection:
    path: Optional[str] = None  # JSONL dataset; None means generate synthetic data
    test_path: Optional[str] = None
    n_train: int = 2000  # leading samples used for training, the rest for testing
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)


@dataclass
class ModelSection:
    d: int = 64
    d_r: int = 128
    image_tokens: int = 8
    text_tokens: Union[int, str] = "auto"  # "auto": total word count of the templates
    channels: int = 32
    hidden: int = 64
    heads: int = 4
    L: int = 5
    r: int = 4
    n_context: Union[int, str] = "mean"
    dropout: float = 0.5
    dtype: str = "float32"
    switches: list = field(default_factory=list)


@dataclass
class MemorySection:
    slots: int = 64
    decay: float = 0.2
    update_epochs: int = 25


@dataclass
class LossSection:
    tau: float = 0.07
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0


@dataclass
class TrainSection:
    epochs: int = 50
    lr: float = 5e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    decay: float = 0.8
    decay_every: int = 5
    batch_size: int = 64


@dataclass
class AblationSection:
    switches: list = field(
        default_factory=lambda: ["no_memory", "no_context_tokens", "no_icma", "no_instance_adaptive", "no_cdr"]
    )


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/cmml"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    memory: MemorySection = field(default_factory=MemorySection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    # -- derived objects -------------------------------------------------
    def synthetic_spec(self) -> SyntheticSpec:
        s = self.data.synthetic
        S = (self.model.image_tokens,) * (s.M - 1) + (self.text_token_count(synthetic_schema(s.n_attributes)),)
        return SyntheticSpec(
            M=s.M, C=s.C, S=S, latent_dim=s.latent_dim, noise_std=s.noise_std,
            n_samples=s.n_samples, seed=s.seed, feature_dim=s.feature_dim,
            class_sep=s.class_sep, n_attributes=s.n_attributes,
        )

    def text_token_count(self, schema: TemplateSchema) -> int:
        if self.model.text_tokens == "auto":
            return sum(len(t.split()) for _, t in schema.entries)
        return int(self.model.text_tokens)

    def model_config(
        self, schema: TemplateSchema, feature_dims: Sequence[int], n_classes: int
    ) -> ModelConfig:
        m = self.model
        S = (m.image_tokens,) * len(feature_dims) + (self.text_token_count(schema),)
        enc = EncoderConfig(
            d=m.d, d_r=m.d_r, S=S, channels=m.channels, hidden=m.hidden,
            feature_dims=tuple(feature_dims), heads=m.heads,
        )
        cfg = ModelConfig(
            encoder=enc, n_classes=n_classes, L=m.L, r=m.r, n_context=m.n_context,
            dropout=m.dropout, memory_slots=self.memory.slots, memory_decay=self.memory.decay,
            cdr=CDRConfig(self.loss.tau, self.loss.alpha, self.loss.beta, self.loss.gamma),
            schema=[tuple(e) for e in schema.entries], dtype=m.dtype,
        )
        return cfg

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.epochs, lr=t.lr, weight_decay=t.weight_decay, warmup_epochs=t.warmup_epochs,
            decay=t.decay, decay_every=t.decay_every, memory_epochs=self.memory.update_epochs,
            batch_size=t.batch_size, seed=self.seed,
        )

    def validate(self) -> None:
        m = self.model
        if m.d <= 0 or m.d % m.heads:
            raise ConfigurationError(f"model.d={m.d} is not divisible by model.heads={m.heads}")
        if m.d % m.r:
            raise ConfigurationError(f"model.d={m.d} is not divisible by model.r={m.r}")
        if (m.d // m.r) % m.heads:
            raise ConfigurationError(
                f"model.d/model.r={m.d // m.r} is not divisible by model.heads={m.heads}"
            )
        if not 0.0 <= self.memory.decay <= 1.0:
            raise ConfigurationError(f"memory.decay (lambda) must lie in [0, 1], got {self.memory.decay}")
        if self.loss.tau <= 0:
            raise ConfigurationError(f"loss.tau must be positive, got {self.loss.tau}")
        if m.text_tokens != "auto" and (not isinstance(m.text_tokens, int) or m.text_tokens < 1):
            raise ConfigurationError("model.text_tokens must be 'auto' or a positive integer")
        if isinstance(m.n_context, str) and m.n_context != "mean":
            raise ConfigurationError("model.n_context must be 'mean' or an integer")
        if m.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"model.dtype must be float32 or float64, got {m.dtype!r}")
        for where, names in (("model.switches", m.switches), ("ablation.switches", self.ablation.switches)):
            bad = sorted(set(names) - SWITCHES)
            if bad:
                raise ConfigurationError(f"{where}: unknown switch(es) {bad}; known: {sorted(SWITCHES)}")
        try:
            self.train_config().validate()
        except ConfigurationError as exc:
            raise ConfigurationError(f"train: {exc}") from None
        try:
            self.synthetic_spec().validate()
        except ValueError as exc:
            raise ConfigurationError(f"data.synthetic: {exc}") from None
        if self.data.n_train < 0:
            raise ConfigurationError("data.n_train must be >= 0")


# -- parsing ---------------------------------------------------------------

def _check_type(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    if origin is Union:
        for option in typing.get_args(hint):
            try:
                return _check_type(value, option, path)
            except ConfigurationError:
                pass
        raise ConfigurationError(f"{path}: {value!r} does not match {hint}")
    if hint is type(None):
        if value is None:
            return None
        raise ConfigurationError(f"{path}: expected null, got {value!r}")
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif hint is list or origin is list:
        if isinstance(value, list):
            return list(value)
    else:
        return value
    name = getattr(hint, "__name__", str(hint))
    raise ConfigurationError(f"{path}: expected {name}, got {value!r}")


def _build(cls, raw: Any, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path or '<root>'}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        where = ", ".join(f"{path}.{k}" if path else str(k) for k in unknown)
        raise ConfigurationError(f"unknown configuration key(s): {where}")
    kwargs = {}
    for name, value in raw.items():
        sub = f"{path}.{name}" if path else name
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, sub)
        else:
            kwargs[name] = _check_type(value, hint, sub)
    return cls(**kwargs)


def _apply_override(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} must look like key.path=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        child = node.setdefault(p, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"override {key}: {p} is not a section")
        node = child
    node[parts[-1]] = yaml.safe_load(text)


def parse_config(raw: Optional[dict], overrides: Sequence[str] = ()) -> RunConfig:
    raw = dict(raw or {})
    for a in overrides:
        _apply_override(raw, a)
    cfg = _build(RunConfig, raw, "")
    cfg.validate()
    return cfg


def load_config(path: Union[str, Path, None], overrides: Sequence[str] = ()) -> RunConfig:
    """Read a YAML run config; ``None`` means all defaults."""
    raw: Optional[dict] = None
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML: {exc}") from None
        if raw is not None and not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    return parse_config(raw, overrides)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
