"""The full pipeline: encode, complete, enrich, align, fuse and classify."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .completion import (
    CRTA,
    AdditiveEmbeddings,
    ContextTokens,
    MissingTokenInit,
    assemble_input,
    context_token_count,
    token_key_mask,
)
from .data import AvailabilityMask, RawSample, TemplateSchema, render_attributes
from .encoders import EncoderConfig, build_encoders, embed_text
from .icar import (
    Alignment,
    CDRConfig,
    Classifier,
    ReferenceFormulation,
    compute_prototypes,
    proto_cl,
    sample_cl,
    total_loss,
)
from .memory import MemoryBank, MemoryEnrichment, batch_similarity_loss
from .numerics import ConfigurationError, attach_dropout_generator

SWITCHES = frozenset(
    {"no_memory", "no_context_tokens", "no_icma", "no_instance_adaptive", "no_cdr", "baseline"}
)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_classes: int = 3
    L: int = 5
    r: int = 4
    n_context: Union[str, int] = "mean"
    dropout: float = 0.5
    memory_slots: int = 64
    memory_decay: float = 0.2
    cdr: CDRConfig = field(default_factory=CDRConfig)
    schema: list = field(default_factory=list)
    dtype: str = "float64"

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def validate(self) -> None:
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.encoder.validate()
        self.cdr.validate()
        if self.encoder.d % self.r:
            raise ConfigurationError(f"d={self.encoder.d} is not divisible by r={self.r}")
        if (self.encoder.d // self.r) % self.encoder.heads:
            raise ConfigurationError(
                f"bottleneck width d/r={self.encoder.d // self.r} is not divisible by heads={self.encoder.heads}"
            )
        if not 0.0 <= self.memory_decay <= 1.0:
            raise ConfigurationError(f"memory decay lambda must lie in [0, 1], got {self.memory_decay}")
        if self.L < 1 or self.memory_slots < 1 or self.n_classes < 2:
            raise ConfigurationError("L, memory_slots must be >= 1 and n_classes >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")

    @property
    def template_schema(self) -> TemplateSchema:
        return TemplateSchema([tuple(e) for e in self.schema])

    def context_count(self) -> int:
        if self.n_context == "mean":
            return context_token_count(self.encoder.S)
        return int(self.n_context)


@dataclass
class Batch:
    images: list[torch.Tensor]  # (B, feature_dim) per image modality
    text: torch.Tensor  # (B, S_M, d_r) frozen text embeddings
    labels: torch.Tensor  # (B,)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def select(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Batch([x[idx] for x in self.images], self.text[idx], self.labels[idx])


def tensorize(samples: Sequence[RawSample], cfg: ModelConfig) -> Batch:
    """Stack payloads and run the frozen text embedder once per sample."""
    enc = cfg.encoder
    schema = cfg.template_schema
    n_img = enc.M - 1
    if samples and samples[0].M != enc.M:
        raise ConfigurationError(f"samples have {samples[0].M} modalities, model expects {enc.M}")
    images = [
        torch.as_tensor(
            np.stack([s.image_features[m] for s in samples]) if samples else np.zeros((0, enc.feature_dims[m])),
            dtype=cfg.torch_dtype,
        )
        for m in range(n_img)
    ]
    text = np.zeros((len(samples), enc.S[-1], enc.d_r))
    for i, s in enumerate(samples):
        text[i] = embed_text(render_attributes(s.attributes, schema), enc.d_r, enc.S[-1])
    labels = torch.as_tensor([s.label for s in samples], dtype=torch.long)
    return Batch(images, torch.as_tensor(text, dtype=cfg.torch_dtype), labels)


def mask_tensor(masks: Sequence[AvailabilityMask]) -> torch.Tensor:
    return torch.as_tensor([m.flags for m in masks], dtype=torch.bool)


@dataclass
class ModelOutput:
    originals: list[torch.Tensor]  # encoder tokens x_j from the raw payloads
    available: list[torch.Tensor]  # x_j with missing modalities zeroed
    mask: torch.Tensor
    logits: torch.Tensor
    fused: torch.Tensor
    completed: list[torch.Tensor] = field(default_factory=list)  # Z_bar_j, rows of missing_index[j]
    feature_set: list[torch.Tensor] = field(default_factory=list)
    aligned: list[torch.Tensor] = field(default_factory=list)
    z_modal: list[torch.Tensor] = field(default_factory=list)
    prior: Optional[torch.Tensor] = None
    reference: Optional[torch.Tensor] = None
    crta_input: Optional[torch.Tensor] = None
    missing_index: list[torch.Tensor] = field(default_factory=list)


class CMML(nn.Module):
    def __init__(self, cfg: ModelConfig, switches: Sequence[str] = ()):
        super().__init__()
        cfg.validate()
        unknown = set(switches) - SWITCHES
        if unknown:
            raise ConfigurationError(f"unknown ablation switch(es): {sorted(unknown)}")
        self.cfg = cfg
        self.switches = frozenset(switches)
        enc = cfg.encoder
        d, S, M = enc.d, list(enc.S), enc.M
        self.S = S
        self.M = M
        self.encoders = build_encoders(enc)
        self.classifier = Classifier(d, cfg.n_classes, cfg.dropout)
        self.baseline = "baseline" in self.switches
        self.use_cdr = "no_cdr" not in self.switches and not self.baseline
        self.use_memory = "no_memory" not in self.switches and not self.baseline
        if self.baseline:
            self.to(cfg.torch_dtype)
            self.seed_dropout(0)
            return
        self.n_context = 0 if "no_context_tokens" in self.switches else cfg.context_count()
        self.missing_init = MissingTokenInit(S, d, enc.heads)
        self.embeddings = AdditiveEmbeddings(S, d)
        self.context = ContextTokens(self.n_context, d) if self.n_context else None
        self.crta = CRTA(d, cfg.L, cfg.r, enc.heads, cfg.dropout)
        if self.use_memory:
            self.banks = nn.ModuleList([MemoryBank(cfg.memory_slots, d, cfg.memory_decay) for _ in S])
            self.enrich = nn.ModuleList([MemoryEnrichment(d, enc.heads) for _ in S])
        self.use_icma = "no_icma" not in self.switches
        self.instance_adaptive = (
            self.use_icma and self.n_context > 0 and "no_instance_adaptive" not in self.switches
        )
        if self.instance_adaptive:
            self.reference = ReferenceFormulation(d, enc.heads)
        if self.use_icma:
            self.align = Alignment(M, d, enc.heads)
        self.to(cfg.torch_dtype)
        self.seed_dropout(0)

    def seed_dropout(self, seed: int) -> None:
        self.dropout_generator = np.random.default_rng(seed)
        attach_dropout_generator(self, self.dropout_generator)

    # -- forward ---------------------------------------------------------
    def encode(self, batch: Batch) -> list[torch.Tensor]:
        xs = [enc(img) for enc, img in zip(self.encoders[:-1], batch.images)]
        xs.append(self.encoders[-1](batch.text))
        return xs

    def forward(self, batch: Batch, mask: torch.Tensor) -> ModelOutput:
        if mask.shape != (len(batch), self.M):
            raise ValueError(f"mask shape {tuple(mask.shape)} != ({len(batch)}, {self.M})")
        if not bool(mask.any(dim=1).all()):
            raise ValueError("every sample needs at least one available modality")
        originals = self.encode(batch)
        # Absent payloads are replaced before anything downstream sees them.
        avail = [
            torch.where(mask[:, j, None, None], x, torch.zeros((), dtype=x.dtype))
            for j, x in enumerate(originals)
        ]
        if self.baseline:
            fused, logits = self.classifier(avail)
            return ModelOutput(originals, avail, mask, logits, fused, feature_set=avail, aligned=avail)

        b = len(batch)
        missing_idx = [torch.nonzero(~mask[:, j]).squeeze(1) for j in range(self.M)]
        kv = torch.cat(avail, dim=1)
        keys = token_key_mask(mask, self.S)
        x_tilde = []
        for j in range(self.M):
            idx = missing_idx[j]
            if idx.numel() == 0:
                x_tilde.append(avail[j])
                continue
            x_hat = self.missing_init.synthesize(j, kv[idx], keys[idx])
            x_tilde.append(avail[j].index_copy(0, idx, x_hat))
        ctx = self.context(b) if self.context is not None else None
        f = assemble_input(x_tilde, mask, self.embeddings, ctx)
        out = self.crta(f, self.n_context, self.S)
        Z_modal = out.Z_modal

        completed, feature_set = [], []
        for j in range(self.M):
            idx = missing_idx[j]
            if idx.numel() == 0:
                completed.append(avail[j][:0])
                feature_set.append(avail[j])
                continue
            Z = Z_modal[j][idx]
            Zbar = self.enrich[j](self.banks[j], Z) if self.use_memory else Z
            completed.append(Zbar)
            feature_set.append(avail[j].index_copy(0, idx, Zbar))

        prior = out.Z_context if self.n_context else None
        reference = None
        if self.use_icma:
            if self.instance_adaptive:
                reference = self.reference(prior, Z_modal)
            elif prior is not None:
                reference = prior
            else:
                # Without context tokens the CRTA's modal outputs serve as the reference.
                reference = torch.cat(Z_modal, dim=1)
            aligned = self.align(feature_set, reference)
        else:
            aligned = feature_set
        fused, logits = self.classifier(aligned)
        return ModelOutput(
            originals, avail, mask, logits, fused, completed, feature_set, aligned,
            Z_modal, prior, reference, f, missing_idx,
        )

    # -- losses ----------------------------------------------------------
    def losses(
        self, out: ModelOutput, labels: torch.Tensor, targets: Optional[Sequence[torch.Tensor]] = None
    ) -> dict[str, torch.Tensor]:
        """All loss terms. ``targets`` overrides the completion targets, which
        default to the detached encodings of the missing rows."""
        cdr = self.cfg.cdr
        zero = out.logits.sum() * 0.0
        l_ce = F.cross_entropy(out.logits, labels)
        l_sim = zero
        if not self.baseline:
            if targets is None:
                targets = self.completion_targets(out)
            l_sim = batch_similarity_loss(targets, out.completed)
        l_sam = l_proto = zero
        if self.use_cdr and not self.baseline:
            protos = compute_prototypes(out.fused, labels, self.cfg.n_classes)
            l_sam = sample_cl(out.fused, labels, protos, cdr.tau)
            l_proto = proto_cl(out.fused, labels, protos, cdr.tau)
        weights = cdr if self.use_cdr else CDRConfig(cdr.tau, cdr.alpha, 0.0, 0.0)
        if self.baseline:
            weights = CDRConfig(cdr.tau, 0.0, 0.0, 0.0)
        return {
            "L_ce": l_ce,
            "L_sim": l_sim,
            "L_sam": l_sam,
            "L_proto": l_proto,
            "L_total": total_loss(l_ce, l_sim, l_sam, l_proto, weights),
        }

    @staticmethod
    def completion_targets(out: ModelOutput) -> list[torch.Tensor]:
        return [x.detach()[idx] for x, idx in zip(out.originals, out.missing_index)]

    # -- memory ----------------------------------------------------------
    @property
    def has_memory(self) -> bool:
        return not self.baseline and self.use_memory

    def update_memory(self, out: ModelOutput) -> None:
        """Moving-average writes from available modalities, sample by sample in batch order."""
        if not self.has_memory:
            return
        mask = out.mask.numpy()
        xs = [x.detach().numpy() for x in out.originals]
        for i in range(mask.shape[0]):
            for j in np.flatnonzero(mask[i]):
                self.banks[j].update(xs[j][i])

    def freeze_memory(self) -> None:
        if self.has_memory:
            for bank in self.banks:
                bank.freeze()

    def memory_frozen(self) -> bool:
        return self.has_memory and all(b.frozen for b in self.banks)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def ablate(cfg: ModelConfig, switches: Sequence[str] = ()) -> CMML:
    """Build a model variant with the named components removed."""
    return CMML(cfg, switches)
