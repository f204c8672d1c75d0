"""Transformer pieces shared by the text and vision towers.

Parameter names follow the OpenAI CLIP state-dict layout (``attn.in_proj_weight``,
``mlp.c_fc`` ...) so external weights map onto these modules by key prefix only.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import torch
import torch.nn.functional as F
from torch import nn


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


def vv_attention(v: torch.Tensor, return_weights: bool = False):
    """Self-attention with query and key both replaced by the values.

    ``v`` has shape ``(..., n, d_h)``; returns ``softmax(v v^T / sqrt(d_h)) v`` and,
    optionally, the row-stochastic weight matrix.
    """
    v = torch.as_tensor(v)
    scores = v @ v.transpose(-2, -1) / math.sqrt(v.shape[-1])
    weights = scores.softmax(dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class Attention(nn.Module):
    """Multi-head attention that can run either as standard QKV or as V-V attention."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.in_proj_weight = nn.Parameter(torch.empty(3 * width, width))
        self.in_proj_bias = nn.Parameter(torch.zeros(3 * width))
        self.out_proj = nn.Linear(width, width)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, _ = t.shape
        return t.view(b, n, self.heads, -1).transpose(1, 2)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None, mode: str = "qkv",
                weights_out: list | None = None) -> torch.Tensor:
        b, n, w = x.shape
        q, k, v = F.linear(x, self.in_proj_weight, self.in_proj_bias).chunk(3, dim=-1)
        v = self._split(v)
        if mode == "vv":
            out, attn = vv_attention(v, return_weights=True)
        elif mode == "qkv":
            q, k = self._split(q), self._split(k)
            scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
            if mask is not None:
                scores = scores + mask
            attn = scores.softmax(dim=-1)
            out = attn @ v
        else:
            raise ValueError(f"unknown attention mode {mode!r}")
        if weights_out is not None:
            weights_out.append(attn.detach())
        out = out.transpose(1, 2).reshape(b, n, w)
        return self.out_proj(out)


class ResidualBlock(nn.Module):
    def __init__(self, width: int, heads: int, activation: str = "gelu"):
        super().__init__()
        self.attn = Attention(width, heads)
        self.ln_1 = nn.LayerNorm(width)
        act = QuickGELU() if activation == "quick_gelu" else nn.GELU()
        self.mlp = nn.Sequential(OrderedDict([
            ("c_fc", nn.Linear(width, 4 * width)),
            ("gelu", act),
            ("c_proj", nn.Linear(4 * width, width)),
        ]))
        self.ln_2 = nn.LayerNorm(width)

    def forward(self, x, mask=None, mode="qkv", weights_out=None):
        x = x + self.attn(self.ln_1(x), mask=mask, mode=mode, weights_out=weights_out)
        return x + self.mlp(self.ln_2(x))


class Transformer(nn.Module):
    def __init__(self, width: int, layers: int, heads: int, activation: str = "gelu"):
        super().__init__()
        self.width = width
        self.layers = layers
        self.resblocks = nn.ModuleList(ResidualBlock(width, heads, activation) for _ in range(layers))

    def init_clip_style(self, generator: torch.Generator) -> None:
        attn_std = self.width ** -0.5
        proj_std = attn_std * (2 * self.layers) ** -0.5
        fc_std = (2 * self.width) ** -0.5
        for block in self.resblocks:
            _normal(block.attn.in_proj_weight, attn_std, generator)
            _normal(block.attn.out_proj.weight, proj_std, generator)
            _normal(block.mlp.c_fc.weight, fc_std, generator)
            _normal(block.mlp.c_proj.weight, proj_std, generator)
            for lin in (block.attn.out_proj, block.mlp.c_fc, block.mlp.c_proj):
                nn.init.zeros_(lin.bias)
            nn.init.zeros_(block.attn.in_proj_bias)


@torch.no_grad()
def _normal(t: torch.Tensor, std: float, generator: torch.Generator) -> None:
    t.copy_(torch.randn(t.shape, generator=generator, dtype=torch.float64) * std)
