"""Per-modality token encoders and the frozen text embedder."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import TemplateSchema, render_attributes
from .numerics import DTYPE, ConfigurationError, DimensionError, init_parameters


@dataclass
class EncoderConfig:
    d: int = 64
    d_r: int = 128
    S: tuple[int, ...] = (8, 8, 12)
    channels: int = 32
    hidden: int = 64
    feature_dims: tuple[int, ...] = (512, 512)
    heads: int = 4

    def validate(self) -> None:
        if self.d <= 0 or self.d % self.heads:
            raise ConfigurationError(f"d={self.d} must be positive and divisible by heads={self.heads}")
        if any(s < 1 for s in self.S):
            raise ConfigurationError("every modality needs at least one token")
        if len(self.feature_dims) != len(self.S) - 1:
            raise ConfigurationError("need one feature length per image modality")

    @property
    def M(self) -> int:
        return len(self.S)


def _token_key(token: str) -> str:
    return token.strip(".,;:!?").lower()


@lru_cache(maxsize=65536)
def _token_vector(token: str, d_r: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
    vec = np.random.default_rng(seed).standard_normal(d_r) / np.sqrt(d_r)
    vec.setflags(write=False)
    return vec


def embed_text(text: str, d_r: int, length: int) -> np.ndarray:
    """Deterministic stand-in for a frozen language model.

    Whitespace tokens (lowercased, edge punctuation stripped) are hashed to fixed
    pseudo-random vectors; the sequence is truncated or zero-padded to ``length``.
    """
    out = np.zeros((length, d_r))
    tokens = [t for t in (_token_key(w) for w in text.split()) if t]
    for i, tok in enumerate(tokens[:length]):
        out[i] = _token_vector(tok, d_r)
    return out


class ImageEncoder(nn.Module):
    """Toy E_m (two-layer perceptron reshaped to tokens) followed by FC + ReLU to d."""

    def __init__(self, feature_dim: int, n_tokens: int, channels: int, hidden: int, d: int):
        super().__init__()
        self.feature_dim = feature_dim
        self.n_tokens = n_tokens
        self.channels = channels
        self.backbone = nn.Sequential(
            nn.Linear(feature_dim, hidden, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(hidden, n_tokens * channels, dtype=DTYPE),
        )
        self.proj = nn.Linear(channels, d, dtype=DTYPE)
        init_parameters(self, std=1.0 / np.sqrt(max(feature_dim, hidden, channels)))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.feature_dim:
            raise DimensionError(
                f"feature vector has length {features.shape[-1]}, expected {self.feature_dim}"
            )
        squeeze = features.dim() == 1
        if squeeze:
            features = features.unsqueeze(0)
        tokens = self.backbone(features).reshape(-1, self.n_tokens, self.channels)
        out = torch.relu(self.proj(tokens))
        return out.squeeze(0) if squeeze else out


class TabularEncoder(nn.Module):
    """FC + ReLU projection of frozen text embeddings (the embedder owns no parameters)."""

    def __init__(self, d_r: int, d: int):
        super().__init__()
        self.d_r = d_r
        self.proj = nn.Linear(d_r, d, dtype=DTYPE)
        init_parameters(self, std=1.0 / np.sqrt(d_r))

    def forward(self, text_embedding: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.proj(text_embedding))

    def encode(
        self, attributes: Sequence[tuple[str, str]], schema: TemplateSchema, length: int
    ) -> torch.Tensor:
        text = render_attributes(attributes, schema)
        emb = torch.from_numpy(embed_text(text, self.d_r, length)).to(DTYPE)
        return self(emb)


def build_encoders(cfg: EncoderConfig) -> nn.ModuleList:
    cfg.validate()
    mods: list[nn.Module] = [
        ImageEncoder(cfg.feature_dims[m], cfg.S[m], cfg.channels, cfg.hidden, cfg.d)
        for m in range(cfg.M - 1)
    ]
    mods.append(TabularEncoder(cfg.d_r, cfg.d))
    return nn.ModuleList(mods)


def encode_image_modality(encoder: ImageEncoder, feature_vector) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(feature_vector), dtype=DTYPE)
    return encoder(x)


def encode_tabular_modality(
    encoder: TabularEncoder, attributes, schema: TemplateSchema, length: int
) -> torch.Tensor:
    return encoder.encode(attributes, schema, length)
