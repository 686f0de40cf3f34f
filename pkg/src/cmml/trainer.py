"""Training loop, schedules, checkpoints and per-pattern evaluation."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from .data import AvailabilityMask, RawSample, enumerate_patterns, iter_batches, sample_dropout_mask
from .metrics import MetricReport, accuracy, macro_ovr_auc
from .model import CMML, Batch, ModelConfig, mask_tensor, tensorize
from .numerics import ConfigurationError, cosine_similarity

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cmml-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_TERMS = ("L_ce", "L_sim", "L_sam", "L_proto")


class TrainingDivergence(RuntimeError):
    def __init__(self, term: str, epoch: int, step: int, value: float):
        super().__init__(f"{term} became non-finite ({value}) at epoch {epoch}, step {step}")
        self.term = term
        self.epoch = epoch
        self.step = step


class FingerprintMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 5e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    decay: float = 0.8
    decay_every: int = 5
    memory_epochs: int = 25
    batch_size: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigurationError(
                f"warmup_epochs={self.warmup_epochs} must lie in [0, epochs={self.epochs}]"
            )
        for name in ("lr", "decay", "decay_every", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.memory_epochs < 0:
            raise ConfigurationError("memory_epochs must be >= 0")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """LR used throughout 1-based ``epoch``: linear ramp to ``lr``, then step decay."""
    if epoch <= cfg.warmup_epochs:
        return cfg.lr * epoch / cfg.warmup_epochs
    return cfg.lr * cfg.decay ** ((epoch - cfg.warmup_epochs) // cfg.decay_every)


def build_model(cfg: ModelConfig, switches: Sequence[str] = (), seed: int = 0) -> CMML:
    """Construct a model whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = CMML(cfg, switches)
    model.seed_dropout(seed)
    return model


def _config_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj), default=list))


def fingerprint(model_cfg: ModelConfig, data_fields: Optional[dict] = None) -> str:
    """sha256 over the model config and the dataset's structural fields."""
    payload = {"model": _config_dict(model_cfg), "data": data_fields}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def data_fields_for(model_cfg: ModelConfig) -> dict:
    """Dataset structure a model expects, in ``DatasetManifest.fingerprint_fields`` form."""
    enc = model_cfg.encoder
    return {
        "M": enc.M,
        "C": model_cfg.n_classes,
        "vector_lengths": list(enc.feature_dims),
        "schema": [list(e) for e in model_cfg.schema],
    }


@dataclass
class TrainState:
    model: CMML
    optimizer: torch.optim.Optimizer
    train_cfg: TrainConfig
    epoch: int = 0
    data_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    log: list[dict] = field(default_factory=list)
    data_fingerprint: Optional[dict] = None


def make_optimizer(model: CMML, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=cfg.weight_decay
    )


def init_state(model: CMML, cfg: TrainConfig, data_fields: Optional[dict] = None) -> TrainState:
    cfg.validate()
    return TrainState(
        model, make_optimizer(model, cfg), cfg, 0, np.random.default_rng(cfg.seed), [], data_fields
    )


def _as_batch(data: Union[Batch, Sequence[RawSample]], cfg: ModelConfig) -> Batch:
    return data if isinstance(data, Batch) else tensorize(list(data), cfg)


def _check_finite(losses: dict, epoch: int, step: int) -> None:
    for name in LOSS_TERMS + ("L_total",):
        v = losses[name]
        if not torch.isfinite(v).all():
            raise TrainingDivergence(name, epoch, step, float(v.detach()))


def run_epoch(state: TrainState, data: Batch) -> dict:
    model, cfg = state.model, state.train_cfg
    epoch = state.epoch + 1
    lr = learning_rate(cfg, epoch)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    model.train()
    n = len(data)
    order = state.data_rng.permutation(n)
    warm = epoch <= cfg.warmup_epochs
    update_banks = model.has_memory and not model.memory_frozen() and epoch <= cfg.memory_epochs
    sums = dict.fromkeys(LOSS_TERMS + ("L_total",), 0.0)
    seen = 0
    for step, idx in enumerate(iter_batches(n, cfg.batch_size, order)):
        batch = data.select(idx)
        b = len(batch)
        if warm:
            mask = torch.ones(b, model.M, dtype=torch.bool)
        else:
            mask = mask_tensor([sample_dropout_mask(model.M, state.data_rng) for _ in range(b)])
        if warm and not bool(mask.all()):
            raise AssertionError("modality dropout must be disabled during warm-up")
        out = model(batch, mask)
        losses = model.losses(out, batch.labels)
        _check_finite(losses, epoch, step)
        state.optimizer.zero_grad(set_to_none=True)
        losses["L_total"].backward()
        state.optimizer.step()
        if update_banks:
            model.update_memory(out)
        for k in sums:
            sums[k] += float(losses[k].detach()) * b
        seen += b
    if model.has_memory and epoch >= cfg.memory_epochs:
        model.freeze_memory()
    state.epoch = epoch
    record = {"epoch": epoch, "lr": lr}
    record.update({k: (v / seen if seen else 0.0) for k, v in sums.items()})
    state.log.append(record)
    return record


def train(
    config: TrainConfig,
    model: CMML,
    dataset: Union[Batch, Sequence[RawSample]],
    *,
    state: Optional[TrainState] = None,
    until_epoch: Optional[int] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainState:
    """Train ``model`` in place; pass a restored ``state`` to resume.

    ``until_epoch`` stops early (for checkpointing mid-run); the schedule always
    refers to ``config.epochs``.
    """
    data = _as_batch(dataset, model.cfg)
    if state is None:
        state = init_state(model, config, data_fields_for(model.cfg))
    elif state.model is not model:
        raise ValueError("resume state belongs to a different model")
    stop = config.epochs if until_epoch is None else min(until_epoch, config.epochs)
    while state.epoch < stop:
        record = run_epoch(state, data)
        log.info("epoch %d: %s", record["epoch"], record)
        if on_epoch is not None:
            on_epoch(record)
    return state


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(state: TrainState, path: Union[str, Path], switches: Sequence[str] = ()) -> None:
    model = state.model
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": _config_dict(model.cfg),
        "switches": sorted(model.switches),
        "train_config": dataclasses.asdict(state.train_cfg),
        "fingerprint": fingerprint(model.cfg, state.data_fingerprint),
        "data_fields": state.data_fingerprint,
        "epoch": state.epoch,
        "state_dict": model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "data_rng": state.data_rng.bit_generator.state,
        "dropout_rng": model.dropout_generator.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
        "log": state.log,
    }
    torch.save(blob, Path(path))


def model_config_from_dict(obj: dict) -> ModelConfig:
    from .encoders import EncoderConfig
    from .icar import CDRConfig

    obj = copy.deepcopy(obj)
    enc = obj.pop("encoder")
    enc["S"] = tuple(enc["S"])
    enc["feature_dims"] = tuple(enc["feature_dims"])
    cdr = obj.pop("cdr")
    obj["schema"] = [tuple(e) for e in obj["schema"]]
    return ModelConfig(encoder=EncoderConfig(**enc), cdr=CDRConfig(**cdr), **obj)


def load_checkpoint(path: Union[str, Path]) -> TrainState:
    path = Path(path)
    blob = torch.load(path, weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if blob["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob['version']}")
    cfg = model_config_from_dict(blob["model_config"])
    model = CMML(cfg, blob["switches"])
    model.load_state_dict(blob["state_dict"])
    model.dropout_generator.bit_generator.state = blob["dropout_rng"]
    train_cfg = TrainConfig(**blob["train_config"])
    optimizer = make_optimizer(model, train_cfg)
    optimizer.load_state_dict(blob["optimizer"])
    rng = np.random.default_rng()
    rng.bit_generator.state = blob["data_rng"]
    torch.set_rng_state(blob["torch_rng"])
    state = TrainState(model, optimizer, train_cfg, blob["epoch"], rng, list(blob["log"]), blob["data_fields"])
    expected = fingerprint(cfg, state.data_fingerprint)
    if blob["fingerprint"] != expected:
        raise FingerprintMismatch("checkpoint fingerprint does not match its stored configuration")
    return state


def check_compatible(state: TrainState, data_fields: dict) -> None:
    """Refuse datasets whose structure differs from what the model was trained on."""
    ours = fingerprint(state.model.cfg, state.data_fingerprint)
    theirs = fingerprint(state.model.cfg, data_fields)
    if ours != theirs:
        diffs = [
            k for k in sorted(set(data_fields) | set(state.data_fingerprint or {}))
            if (state.data_fingerprint or {}).get(k) != data_fields.get(k)
        ]
        raise FingerprintMismatch(
            f"dataset does not match the checkpoint (fingerprint {theirs[:12]} != {ours[:12]}; "
            f"differing fields: {', '.join(diffs) or 'unknown'})"
        )


# -- evaluation ------------------------------------------------------------

def _pattern_masks(M: int, patterns) -> list[AvailabilityMask]:
    if patterns is None:
        return enumerate_patterns(M)
    return [p if isinstance(p, AvailabilityMask) else AvailabilityMask.from_pattern(p, M) for p in patterns]


@torch.no_grad()
def predict(model: CMML, data: Batch, mask: AvailabilityMask, batch_size: int = 512):
    """Class probabilities and fused features for every sample under one fixed mask."""
    was_training = model.training
    model.eval()
    probs, fused = [], []
    try:
        for idx in iter_batches(len(data), batch_size):
            batch = data.select(idx)
            m = mask_tensor([mask] * len(batch))
            out = model(batch, m)
            probs.append(torch.softmax(out.logits.double(), dim=1))
            fused.append(out.fused)
    finally:
        model.train(was_training)
    if not probs:
        return np.zeros((0, model.cfg.n_classes)), np.zeros((0, model.cfg.encoder.d))
    return torch.cat(probs).numpy(), torch.cat(fused).double().numpy()


def evaluate(
    model: CMML,
    dataset: Union[Batch, Sequence[RawSample]],
    patterns=None,
    batch_size: int = 512,
) -> MetricReport:
    data = _as_batch(dataset, model.cfg)
    labels = data.labels.numpy()
    report = MetricReport()
    for mask in _pattern_masks(model.M, patterns):
        probs, _ = predict(model, data, mask, batch_size)
        report.rows.append((mask.pattern(), accuracy(probs, labels), macro_ovr_auc(probs, labels, model.cfg.n_classes)))
    return report


@dataclass
class Completion:
    features: dict[int, torch.Tensor]  # modality -> Z_bar, (B, S_j, d)
    fidelity: dict[int, float]  # modality -> mean token cosine with the encoder output


@torch.no_grad()
def complete_features(model: CMML, dataset, mask: AvailabilityMask) -> Completion:
    """Completed features of the masked-out modalities, compared with the true encodings."""
    data = _as_batch(dataset, model.cfg)
    if not mask.missing:
        return Completion({}, {})
    if model.baseline:
        raise ConfigurationError("the zero-imputation baseline does not complete features")
    was_training = model.training
    model.eval()
    try:
        out = model(data, mask_tensor([mask] * len(data)))
    finally:
        model.train(was_training)
    feats, fid = {}, {}
    for j in mask.missing:
        z = out.completed[j]
        feats[j] = z
        fid[j] = float(cosine_similarity(out.originals[j], z).mean())
    return Completion(feats, fid)


def completion_fidelity(model: CMML, dataset) -> float:
    """Mean fidelity over every (pattern, missing modality) pair."""
    data = _as_batch(dataset, model.cfg)
    vals = []
    for mask in enumerate_patterns(model.M):
        vals.extend(complete_features(model, data, mask).fidelity.values())
    return float(np.mean(vals))


def write_log(records: Sequence[dict], path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_log(path: Union[str, Path]) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def loss_is_finite(record: dict) -> bool:
    return all(math.isfinite(record[k]) for k in LOSS_TERMS + ("L_total",))
