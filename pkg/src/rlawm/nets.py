"""Shared network building blocks: pre-LN self-attention stacks, seeded init,
sinusoidal time embedding.
"""

import math

import torch
import torch.nn as nn

from .seeding import torch_gen


class SelfAttentionBlock(nn.Module):
    """Pre-LN transformer block: MHSA + 4x MLP, residual on both."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width),
            nn.GELU(),
            nn.Linear(4 * width, width),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class TransformerStack(nn.Module):
    def __init__(self, layers: int, width: int, heads: int):
        super().__init__()
        self.blocks = nn.ModuleList(SelfAttentionBlock(width, heads) for _ in range(layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


def time_embedding(tau: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of a scalar time in [0, 1]; tau shape (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=tau.dtype, device=tau.device) / max(half, 1)
    )
    ang = tau[:, None] * 1000.0 * freqs[None, :]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


def seeded_init_(module: nn.Module, seed: int) -> None:
    """Deterministically initialize all parameters of `module` from `seed`.

    Weight tensors (dim >= 2) get fan-in scaled normals, everything else zeros,
    LayerNorm weights one. Registration order is fixed per architecture, so the
    same (architecture, seed) always yields bit-identical parameters.
    """
    g = torch_gen(seed)
    ln_weights = {id(m.weight) for m in module.modules() if isinstance(m, nn.LayerNorm)}
    for p in module.parameters():
        with torch.no_grad():
            if id(p) in ln_weights:
                p.fill_(1.0)
            elif p.dim() >= 2:
                fan_in = p.shape[1] * (p[0][0].numel() if p.dim() > 2 else 1)
                p.normal_(0.0, 1.0 / math.sqrt(max(fan_in, 1)), generator=g)
            else:
                p.zero_()


def zero_init_(layer: nn.Module) -> None:
    """Zero a layer's weight/bias in place (used for contracts requiring exact
    zero contribution at initialization)."""
    with torch.no_grad():
        for p in layer.parameters():
            p.zero_()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
