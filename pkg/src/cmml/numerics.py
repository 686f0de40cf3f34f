"""Differentiable building blocks shared by every other module.

Modules are built in float64 (models may cast themselves to float32 for
training); torch autograd supplies the reverse-mode gradients and
:func:`grad_check` verifies them against central finite differences.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

DTYPE = torch.float64
COS_EPS = 1e-8
INIT_STD = 0.02


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    # torch's kernel subtracts the row max first; -inf entries (masked keys) become exact zeros.
    return torch.softmax(x, dim=axis)


class Dropout(nn.Module):
    """Inverted dropout whose masks come from a numpy generator owned by the model.

    Keeping the generator explicit lets checkpoints capture it, and random bytes
    are much cheaper than torch's bernoulli sampling on CPU. The keep
    probability is quantized to multiples of 1/256.
    """

    def __init__(self, p: float = 0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {p}")
        self.p = p
        self.threshold = int(round((1.0 - p) * 256))
        self.generator: Optional[np.random.Generator] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.p == 0.0:
            return x
        if self.generator is None:
            raise RuntimeError("dropout generator not attached; call attach_dropout_generator")
        n = x.numel()
        raw = np.frombuffer(self.generator.bytes(n), dtype=np.uint8)
        scale = np.float64(256.0 / self.threshold)
        keep = (raw < self.threshold) * scale
        return x * torch.from_numpy(keep.reshape(x.shape)).to(x.dtype)

    def extra_repr(self) -> str:
        return f"p={self.p}"


def attach_dropout_generator(module: nn.Module, generator: np.random.Generator) -> None:
    for sub in module.modules():
        if isinstance(sub, Dropout):
            sub.generator = generator


def cosine_similarity(
    u: torch.Tensor, v: torch.Tensor, dim: int = -1, eps: float = COS_EPS
) -> torch.Tensor:
    """u.v / (|u||v| + eps), clamped to [-1, 1]. Two zero vectors give 0."""
    num = (u * v).sum(dim=dim)
    den = torch.linalg.vector_norm(u, dim=dim) * torch.linalg.vector_norm(v, dim=dim)
    return torch.clamp(num / (den + eps), -1.0, 1.0)


def pairwise_cosine(
    a: torch.Tensor, b: torch.Tensor, eps: float = COS_EPS
) -> torch.Tensor:
    """Cosine similarity between every row of ``a`` (..., n, d) and ``b`` (..., m, d)."""
    num = a @ b.transpose(-1, -2)
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    den = na.unsqueeze(-1) * nb.unsqueeze(-2)
    return torch.clamp(num / (den + eps), -1.0, 1.0)


def init_parameters(module: nn.Module, std: float = INIT_STD) -> None:
    """normal(std) for projection weights, zeros for biases, ones/zeros for LayerNorm."""
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            nn.init.normal_(sub.weight, std=std)
            if sub.bias is not None:
                nn.init.zeros_(sub.bias)
        elif isinstance(sub, nn.LayerNorm):
            nn.init.ones_(sub.weight)
            nn.init.zeros_(sub.bias)


class MultiHeadCrossAttention(nn.Module):
    """Scaled dot-product attention with learned Q/K/V/output projections.

    ``query`` is (B, S_q, q_dim) and ``kv`` is (B, S_kv, kv_dim); 2-D inputs are
    treated as a batch of one. ``key_mask`` (B, S_kv) marks keys that may be
    attended to. Rows of every head's attention matrix sum to one.
    """

    def __init__(
        self,
        dim: int,
        heads: int = 4,
        q_dim: Optional[int] = None,
        kv_dim: Optional[int] = None,
        dropout: float = 0.0,
    ):
        super().__init__()
        if dim % heads != 0:
            raise ConfigurationError(f"dim {dim} is not divisible by heads {heads}")
        q_dim = dim if q_dim is None else q_dim
        kv_dim = dim if kv_dim is None else kv_dim
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(q_dim, dim, dtype=DTYPE)
        # A key bias only shifts every score in a row equally, which softmax ignores.
        self.k_proj = nn.Linear(kv_dim, dim, bias=False, dtype=DTYPE)
        self.v_proj = nn.Linear(kv_dim, dim, dtype=DTYPE)
        self.out_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.dropout = Dropout(dropout)
        self.last_attention: Optional[torch.Tensor] = None
        init_parameters(self)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, s, _ = x.shape
        return x.reshape(b, s, self.heads, self.head_dim).transpose(1, 2)

    def attention_weights(
        self, query: torch.Tensor, kv: torch.Tensor, key_mask: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(kv))
        scores = matmul(q * (1.0 / math.sqrt(self.head_dim)), k.transpose(-1, -2))
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        return softmax(scores, axis=-1)

    def forward(
        self, query: torch.Tensor, kv: torch.Tensor, key_mask: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        squeeze = query.dim() == 2
        if squeeze:
            query, kv = query.unsqueeze(0), kv.unsqueeze(0)
            if key_mask is not None:
                key_mask = key_mask.unsqueeze(0)
        attn = self.attention_weights(query, kv, key_mask)
        self.last_attention = attn.detach()
        v = self._split(self.v_proj(kv))
        out = matmul(attn, v).transpose(1, 2).reshape(query.shape[0], query.shape[1], self.dim)
        out = self.dropout(self.out_proj(out))
        return out.squeeze(0) if squeeze else out


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block mapping d_in -> d_out.

    The width change happens inside the Q/K/V projections; when d_in != d_out
    the residual path goes through a bias-free linear shortcut.
    """

    def __init__(self, d_in: int, d_out: int, heads: int = 4, dropout: float = 0.5):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_in, dtype=DTYPE)
        self.attn = MultiHeadCrossAttention(d_out, heads, q_dim=d_in, kv_dim=d_in)
        self.shortcut = (
            nn.Identity() if d_in == d_out else nn.Linear(d_in, d_out, bias=False, dtype=DTYPE)
        )
        self.norm2 = nn.LayerNorm(d_out, dtype=DTYPE)
        self.ffn = nn.Sequential(
            nn.Linear(d_out, 4 * d_out, dtype=DTYPE),
            nn.GELU(),
            Dropout(dropout),
            nn.Linear(4 * d_out, d_out, dtype=DTYPE),
        )
        self.drop = Dropout(dropout)
        init_parameters(self)

    def residual_output_layers(self) -> list[nn.Linear]:
        return [self.attn.out_proj, self.ffn[-1]]

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.norm1(x)
        y = self.shortcut(x) + self.drop(self.attn(h, h, key_mask))
        return y + self.drop(self.ffn(self.norm2(y)))


def _central(f, flat, i: int, h: float) -> float:
    orig = flat[i].item()
    flat[i] = orig + h
    fp = f().item()
    flat[i] = orig - h
    fm = f().item()
    flat[i] = orig
    if not (math.isfinite(fp) and math.isfinite(fm)):
        raise NumericError("objective became non-finite under perturbation")
    return (fp - fm) / (2 * h)


def _stepped_derivative(f, flat, i: int, steps: Sequence[float], f_err: float) -> float:
    """Central difference at the largest step that the next smaller step confirms.

    Two estimates confirm each other when they differ by no more than their
    combined roundoff, roughly ``f_err / h`` each. Large steps keep roundoff
    low for parameters with vanishing gradients; smaller steps take over where
    curvature or a nearby kink biases the large ones. Only finite differences
    enter the choice.
    """
    est = [_central(f, flat, i, h) for h in steps]
    for k in range(len(steps) - 1):
        if abs(est[k] - est[k + 1]) <= f_err / steps[k] + f_err / steps[k + 1]:
            return est[k]
    return est[-1]


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    h: Union[float, Sequence[float]] = 1e-4,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between autograd and central differences.

    For every parameter tensor the error is ``|analytic - fd| / (|fd| + 1e-8)``
    with norms taken over the checked elements. ``max_elements`` caps how many
    randomly chosen entries of each tensor are perturbed. Passing a decreasing
    sequence of steps as ``h`` selects the step per element (see
    :func:`_stepped_derivative`).
    """
    steps = [h] if isinstance(h, (int, float)) else list(h)
    if not steps or any(s <= 0 for s in steps):
        raise ValueError(f"finite-difference steps must be positive, got {h}")
    params = list(params)
    out = f()
    if not torch.isfinite(out).all():
        raise NumericError(f"objective is not finite: {out.item()}")
    if out.requires_grad:
        grads = torch.autograd.grad(out, params, allow_unused=True)
    else:
        grads = [None] * len(params)
    analytic = [
        torch.zeros_like(p) if g is None else g.detach().clone() for p, g in zip(params, grads)
    ]

    # Rounding error of one objective evaluation, a few ulps of its value.
    f_err = 16 * np.finfo(np.float64).eps * max(1.0, abs(out.item()))
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.view(-1)
            n = flat.numel()
            idx: Sequence[int]
            if max_elements is not None and n > max_elements:
                idx = rng.choice(n, size=max_elements, replace=False).tolist()
            else:
                idx = range(n)
            a_sel, fd_sel = [], []
            for i in idx:
                if len(steps) == 1:
                    fd_sel.append(_central(f, flat, i, steps[0]))
                else:
                    fd_sel.append(_stepped_derivative(f, flat, i, steps, f_err))
                a_sel.append(a.view(-1)[i].item())
            if not a_sel:
                continue
            diff = np.linalg.norm(np.subtract(a_sel, fd_sel))
            err = diff / (np.linalg.norm(fd_sel) + 1e-8)
            worst = max(worst, float(err))
    return worst
