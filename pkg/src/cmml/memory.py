"""Modality-specific memory banks: moving-average writes, soft-attention reads."""
from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .numerics import COS_EPS, DTYPE, INIT_STD, MultiHeadCrossAttention, cosine_similarity, pairwise_cosine, softmax

log = logging.getLogger(__name__)


class MemoryBank(nn.Module):
    """N_t slots of width d. Contents are state, not parameters: no gradient reaches them."""

    def __init__(self, n_slots: int, d: int, decay: float = 0.2, generator: torch.Generator | None = None):
        super().__init__()
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"decay rate must lie in [0, 1], got {decay}")
        self.decay = decay
        self.register_buffer("slots", torch.randn(n_slots, d, dtype=DTYPE, generator=generator) * INIT_STD)
        self.register_buffer("frozen_flag", torch.zeros((), dtype=torch.bool))

    @property
    def n_slots(self) -> int:
        return self.slots.shape[0]

    @property
    def frozen(self) -> bool:
        return bool(self.frozen_flag)

    def freeze(self) -> None:
        self.frozen_flag.fill_(True)

    def update(self, tokens) -> list[int]:
        """Write each token into its most cosine-similar slot, in token order.

        Returns the slot index touched by each token (empty when frozen).
        """
        if self.frozen:
            log.debug("memory bank is frozen; update skipped")
            return []
        x = np.asarray(tokens.detach() if isinstance(tokens, torch.Tensor) else tokens, dtype=np.float64)
        bank = self.slots.numpy()  # shares storage with the buffer
        norms = np.sqrt(np.einsum("ij,ij->i", bank, bank))
        tok_norms = np.sqrt(np.einsum("ij,ij->i", x, x))
        lam = self.decay
        touched = []
        for tok, tn in zip(x, tok_norms):
            sims = (bank @ tok) / (norms * tn + COS_EPS)
            b = int(sims.argmax())
            row = (1.0 - lam) * bank[b] + lam * tok
            bank[b] = row
            norms[b] = math.sqrt(row @ row)
            touched.append(b)
        return touched

    def retrieval_weights(self, Z: torch.Tensor) -> torch.Tensor:
        """Softmax over slots of cosine(Z_k, B_b); shape (..., S, N_t)."""
        return softmax(pairwise_cosine(Z, self.slots), axis=-1)

    def read(self, Z: torch.Tensor) -> torch.Tensor:
        """G_k = sum_b w_kb B_b."""
        return self.retrieval_weights(Z) @ self.slots


class MemoryEnrichment(nn.Module):
    """Z_bar = Z + MHCA(Z, G) with G read from the modality's bank."""

    def __init__(self, d: int, heads: int = 4):
        super().__init__()
        self.attn = MultiHeadCrossAttention(d, heads)

    def forward(self, bank: MemoryBank, Z: torch.Tensor) -> torch.Tensor:
        return Z + self.attn(Z, bank.read(Z))


def retrieve(bank: MemoryBank, Z: torch.Tensor, enrich: MemoryEnrichment) -> torch.Tensor:
    return enrich(bank, Z)


def similarity_loss(originals: Sequence[torch.Tensor], completed: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean over missing modalities of 1 - mean token cosine(original, completed); 0 if none."""
    if len(originals) == 0:
        return torch.zeros((), dtype=DTYPE)
    terms = [1.0 - cosine_similarity(x, z).mean() for x, z in zip(originals, completed)]
    return torch.stack(terms).mean()


def batch_similarity_loss(originals: Sequence[torch.Tensor], completed: Sequence[torch.Tensor]) -> torch.Tensor:
    """Batched form: ``originals[j]``/``completed[j]`` hold the rows where modality j is missing.

    Averaged over every (sample, missing modality) pair; 0 when nothing is missing.
    """
    per = [1.0 - cosine_similarity(x, z).mean(dim=-1) for x, z in zip(originals, completed) if len(z)]
    if not per:
        return sum(z.sum() for z in completed) * 0.0
    per = torch.cat(per)
    return per.mean()
