"""Missing-token initialization, additive embeddings and the cascaded residual
transformer autoencoder that synthesizes absent modalities."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .data import AvailabilityMask
from .numerics import DTYPE, INIT_STD, ConfigurationError, MultiHeadCrossAttention, TransformerBlock


def _param(*shape: int) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, dtype=DTYPE) * INIT_STD)


def token_key_mask(mask: torch.Tensor, S: Sequence[int]) -> torch.Tensor:
    """Expand a (B, M) availability mask to a (B, sum S) per-token mask."""
    return torch.cat([mask[:, j : j + 1].expand(-1, s) for j, s in enumerate(S)], dim=1)


class MissingTokenInit(nn.Module):
    """x_hat_o = CA(e_o, concat of available tokens), one seed and attention per modality."""

    def __init__(self, S: Sequence[int], d: int, heads: int = 4):
        super().__init__()
        self.S = list(S)
        self.seeds = nn.ParameterList([_param(s, d) for s in S])
        self.attn = nn.ModuleList([MultiHeadCrossAttention(d, heads) for _ in S])

    def forward(self, tokens: Sequence[torch.Tensor], mask: torch.Tensor) -> list[torch.Tensor]:
        """Synthesize a candidate for every modality; callers keep it only where missing.

        ``tokens`` must already have missing modalities zeroed; they are also
        excluded from the keys, so absent payloads cannot leak in.
        """
        kv = torch.cat(list(tokens), dim=1)
        keys = token_key_mask(mask, self.S)
        return [self.synthesize(j, kv, keys) for j in range(len(self.S))]

    def synthesize(self, j: int, kv: torch.Tensor, keys: Optional[torch.Tensor] = None) -> torch.Tensor:
        seed = self.seeds[j].unsqueeze(0).expand(kv.shape[0], -1, -1)
        return self.attn[j](seed, kv, keys)


def init_missing_tokens(
    mask: AvailabilityMask,
    tokens: Sequence[torch.Tensor],
    init: MissingTokenInit,
    order: Optional[Sequence[int]] = None,
) -> dict[int, torch.Tensor]:
    """Single-sample form: map each missing modality o to its S_o x d initial tokens.

    ``order`` permutes how the available modalities are concatenated as keys.
    """
    avail = mask.available
    if not avail:
        raise ValueError("at least one modality must be available")
    order = list(avail) if order is None else [j for j in order if j in avail]
    kv = torch.cat([tokens[j] for j in order], dim=0).unsqueeze(0)
    out = {}
    for o in mask.missing:
        out[o] = init.attn[o](init.seeds[o].unsqueeze(0), kv)[0]
    return out


class AdditiveEmbeddings(nn.Module):
    """Position, modal-type and missing-state embeddings per modality."""

    def __init__(self, S: Sequence[int], d: int):
        super().__init__()
        self.pos = nn.ParameterList([_param(s, d) for s in S])
        self.mtype = nn.ParameterList([_param(s, d) for s in S])
        # index 0: missing, index 1: available
        self.mstate = nn.ParameterList([_param(2, s, d) for s in S])

    def forward(self, j: int, tokens: torch.Tensor, available: torch.Tensor) -> torch.Tensor:
        """f_j = x_tilde_j + e_pos + e_mt + e_ms[delta_j] for a (B, S_j, d) batch."""
        ms = torch.where(available[:, None, None], self.mstate[j][1], self.mstate[j][0])
        return tokens + self.pos[j] + self.mtype[j] + ms


class ContextTokens(nn.Module):
    def __init__(self, n_tokens: int, d: int):
        super().__init__()
        self.n_tokens = n_tokens
        self.tokens = _param(n_tokens, d)

    def forward(self, batch: int) -> torch.Tensor:
        return self.tokens.unsqueeze(0).expand(batch, -1, -1)


def context_token_count(S: Sequence[int]) -> int:
    """Mean token count over modalities, rounded half up."""
    return int(sum(S) / len(S) + 0.5)


def assemble_input(
    tokens: Sequence[torch.Tensor],
    mask: torch.Tensor,
    embeddings: AdditiveEmbeddings,
    context: Optional[torch.Tensor],
) -> torch.Tensor:
    """[e_c; f_1; ...; f_M] with each f_j built from the chosen (original or synthesized) tokens."""
    parts = [embeddings(j, t, mask[:, j]) for j, t in enumerate(tokens)]
    if context is not None and context.shape[1] > 0:
        parts.insert(0, context)
    return torch.cat(parts, dim=1)


class RTA(nn.Module):
    """Encoder block d -> d/r followed by decoder block d/r -> d."""

    def __init__(self, d: int, r: int = 4, heads: int = 4, dropout: float = 0.5):
        super().__init__()
        if d % r:
            raise ConfigurationError(f"d={d} is not divisible by the bottleneck ratio r={r}")
        if (d // r) % heads:
            raise ConfigurationError(f"bottleneck width {d // r} is not divisible by heads={heads}")
        self.encoder = TransformerBlock(d, d // r, heads, dropout)
        self.decoder = TransformerBlock(d // r, d, heads, dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


@dataclass
class CompletionOutput:
    Z: torch.Tensor
    Z_context: torch.Tensor
    Z_modal: list[torch.Tensor]
    f: torch.Tensor
    stages: list[torch.Tensor]
    stage_inputs: list[torch.Tensor]


class CRTA(nn.Module):
    """L residual transformer autoencoders whose outputs accumulate.

    z_1 = phi_1(f), z_l = phi_l(f + z_1 + ... + z_{l-1}); the output is the sum of all z_l.
    """

    def __init__(self, d: int, L: int = 5, r: int = 4, heads: int = 4, dropout: float = 0.5):
        super().__init__()
        self.stages = nn.ModuleList([RTA(d, r, heads, dropout) for _ in range(L)])

    def forward(self, f: torch.Tensor, n_context: int, S: Sequence[int]) -> CompletionOutput:
        acc = torch.zeros_like(f)
        zs, inputs = [], []
        for l, phi in enumerate(self.stages):
            inp = f if l == 0 else f + acc
            z = phi(inp)
            inputs.append(inp)
            zs.append(z)
            acc = acc + z
        Z = acc
        Z_ctx = Z[:, :n_context]
        modal = list(torch.split(Z[:, n_context:], list(S), dim=1))
        return CompletionOutput(Z, Z_ctx, modal, f, zs, inputs)


def crta_forward(f: torch.Tensor, stack: CRTA, n_context: int, S: Sequence[int]) -> CompletionOutput:
    return stack(f, n_context, S)


def context_prior(output: CompletionOutput) -> torch.Tensor:
    return output.Z_context
