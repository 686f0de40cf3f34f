"""Context-guided alignment, fusion/classification and class-aware contrastive refinement."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import DTYPE, Dropout, MultiHeadCrossAttention, init_parameters, pairwise_cosine


@dataclass
class CDRConfig:
    tau: float = 0.07
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError(f"temperature tau must be positive, got {self.tau}")


class ReferenceFormulation(nn.Module):
    """e_inst = e_prior + CA(e_prior, concat(Z_1..Z_M))."""

    def __init__(self, d: int, heads: int = 4):
        super().__init__()
        self.attn = MultiHeadCrossAttention(d, heads)

    def forward(self, prior: torch.Tensor, modal: Sequence[torch.Tensor]) -> torch.Tensor:
        return prior + self.attn(prior, torch.cat(list(modal), dim=-2))


def formulate_reference(prior, modal, module: ReferenceFormulation) -> torch.Tensor:
    return module(prior, modal)


class Alignment(nn.Module):
    """F_j = F_j + MHCA_j(F_j, reference) with a separate attention per modality."""

    def __init__(self, M: int, d: int, heads: int = 4):
        super().__init__()
        self.attn = nn.ModuleList([MultiHeadCrossAttention(d, heads) for _ in range(M)])

    def forward(self, features: Sequence[torch.Tensor], reference: torch.Tensor) -> list[torch.Tensor]:
        return [f + attn(f, reference) for f, attn in zip(features, self.attn)]


def align(features, reference, module: Alignment) -> list[torch.Tensor]:
    return module(features, reference)


def global_average_pool(features: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean over the token axis of the token-wise concatenation."""
    return torch.cat(list(features), dim=-2).mean(dim=-2)


class Classifier(nn.Module):
    def __init__(self, d: int, n_classes: int, dropout: float = 0.5):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(d, d, dtype=DTYPE),
            nn.ReLU(),
            Dropout(dropout),
            nn.Linear(d, n_classes, dtype=DTYPE),
        )
        init_parameters(self)

    def forward(self, features: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        fused = global_average_pool(features)
        return fused, self.mlp(fused)


def fuse_and_classify(features, classifier: Classifier):
    return classifier(features)


@dataclass
class Prototypes:
    P: torch.Tensor  # (C, d)
    present: torch.Tensor  # (C,) bool


def compute_prototypes(fused: torch.Tensor, labels: torch.Tensor, n_classes: int) -> Prototypes:
    """Per-class batch mean of fused features; absent classes get a zero row and present=False."""
    onehot = F.one_hot(labels, n_classes).to(fused.dtype)  # (B, C)
    counts = onehot.sum(dim=0)
    present = counts > 0
    P = (onehot.T @ fused) / counts.clamp(min=1.0).unsqueeze(1)
    return Prototypes(P, present)


def masked_contrastive_loss(
    anchors: torch.Tensor,
    candidates: torch.Tensor,
    positive: torch.Tensor,
    negative: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """Generalized contrastive loss with the sets given as (N_A, K) boolean masks.

    Per anchor: -log( sum_pos exp(cos/tau) / sum_{pos u neg} exp(cos/tau) ).
    Anchors without positives are dropped; no valid anchor gives 0.
    """
    logits = pairwise_cosine(anchors, candidates) / tau
    neg_inf = torch.finfo(logits.dtype).min
    num = torch.logsumexp(logits.masked_fill(~positive, neg_inf), dim=1)
    den = torch.logsumexp(logits.masked_fill(~(positive | negative), neg_inf), dim=1)
    valid = positive.any(dim=1)
    if not bool(valid.any()):
        return logits.sum() * 0.0
    per_anchor = (den - num)[valid]
    return per_anchor.mean()


def contrastive_loss(
    anchors: Sequence[torch.Tensor],
    positives: Sequence[Sequence[torch.Tensor]],
    negatives: Sequence[Sequence[torch.Tensor]],
    tau: float,
) -> torch.Tensor:
    """List form: ``positives[i]`` / ``negatives[i]`` hold the vectors of anchor i's sets."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    cands, pos_rows, neg_rows = [], [], []
    for pos, neg in zip(positives, negatives):
        pos_rows.append((len(cands), len(pos)))
        cands.extend(pos)
        neg_rows.append((len(cands), len(neg)))
        cands.extend(neg)
    A = torch.stack(list(anchors))
    if not cands:
        return A.sum() * 0.0
    K = len(cands)
    pmask = torch.zeros(len(anchors), K, dtype=torch.bool)
    nmask = torch.zeros(len(anchors), K, dtype=torch.bool)
    for i, ((ps, pn), (ns, nn_)) in enumerate(zip(pos_rows, neg_rows)):
        pmask[i, ps : ps + pn] = True
        nmask[i, ns : ns + nn_] = True
    return masked_contrastive_loss(A, torch.stack(cands), pmask, nmask, tau)


def sample_cl(fused: torch.Tensor, labels: torch.Tensor, protos: Prototypes, tau: float) -> torch.Tensor:
    """Anchors are samples; positive is the own-class prototype, negatives the other present ones."""
    C = protos.P.shape[0]
    own = F.one_hot(labels, C).bool()
    positive = own & protos.present.unsqueeze(0)
    negative = (~own) & protos.present.unsqueeze(0)
    return masked_contrastive_loss(fused, protos.P, positive, negative, tau)


def proto_cl(fused: torch.Tensor, labels: torch.Tensor, protos: Prototypes, tau: float) -> torch.Tensor:
    """Anchors are present prototypes; positives are same-label samples, negatives the other prototypes."""
    C = protos.P.shape[0]
    idx = torch.nonzero(protos.present).squeeze(1)
    anchors = protos.P[idx]
    candidates = torch.cat([fused, protos.P], dim=0)
    B = fused.shape[0]
    same = labels.unsqueeze(0) == idx.unsqueeze(1)  # (A, B)
    other = (idx.unsqueeze(1) != torch.arange(C).unsqueeze(0)) & protos.present.unsqueeze(0)
    positive = torch.cat([same, torch.zeros_like(other)], dim=1)
    negative = torch.cat([torch.zeros(len(idx), B, dtype=torch.bool), other], dim=1)
    return masked_contrastive_loss(anchors, candidates, positive, negative, tau)


def total_loss(l_ce, l_sim, l_sam, l_proto, cfg: CDRConfig):
    return l_ce + cfg.alpha * l_sim + cfg.beta * l_sam + cfg.gamma * l_proto
