"""Frozen text encoder with deep-text prompt tuning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import Transformer, _normal
from .prompts import PromptBank, TokenSequence, compose_sequence, sequence_embeddings


class TextTower(nn.Module):
    def __init__(self, vocab_size: int, width: int, layers: int, heads: int, embed_dim: int,
                 context_length: int, tokenizer, activation: str = "gelu", temperature: float = 0.07):
        super().__init__()
        self.tokenizer = tokenizer
        self.context_length = context_length
        self.layers = layers
        self.token_embedding = nn.Embedding(vocab_size, width)
        self.positional_embedding = nn.Parameter(torch.empty(context_length, width))
        self.transformer = Transformer(width, layers, heads, activation)
        self.ln_final = nn.LayerNorm(width)
        self.text_projection = nn.Parameter(torch.empty(width, embed_dim))
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / temperature)))

    @property
    def width(self) -> int:
        return self.token_embedding.weight.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.text_projection.shape[1]

    @property
    def temperature(self) -> float:
        return float(1.0 / self.logit_scale.detach().exp())

    def init_toy(self, generator: torch.Generator) -> None:
        _normal(self.token_embedding.weight, 0.02, generator)
        _normal(self.positional_embedding, 0.01, generator)
        self.transformer.init_clip_style(generator)
        _normal(self.text_projection, self.width ** -0.5, generator)

    def _causal_mask(self, n: int, dtype, device) -> torch.Tensor:
        return torch.full((n, n), float("-inf"), dtype=dtype, device=device).triu(1)

    def forward(self, x: torch.Tensor, eot_index: torch.Tensor, deep: list[torch.Tensor] = (),
                weights_out: list | None = None) -> torch.Tensor:
        """Encode token embeddings ``x`` of shape ``(B, n, width)`` (start-of-text at position 0).

        ``deep[0]`` is inserted right after start-of-text; ``deep[i]`` overwrites those
        same positions at the input of layer ``i + 1``. Returns unit vectors ``(B, D)``.
        """
        b = x.shape[0]
        p = deep[0].shape[0] if len(deep) else 0
        if len(deep) > self.layers:
            raise ValueError(f"{len(deep)} deep prompt layers given for a {self.layers}-layer tower")
        if p:
            x = torch.cat([x[:, :1], deep[0].unsqueeze(0).expand(b, -1, -1), x[:, 1:]], dim=1)
            eot_index = eot_index + p
        n = x.shape[1]
        if n > self.context_length:
            raise ValueError(f"sequence of {n} tokens exceeds context length {self.context_length}")
        x = x + self.positional_embedding[:n]
        mask = self._causal_mask(n, x.dtype, x.device)
        for i, block in enumerate(self.transformer.resblocks):
            if 0 < i < len(deep):
                x = torch.cat([x[:, :1], deep[i].unsqueeze(0).expand(b, -1, -1), x[:, 1 + p:]], dim=1)
            x = block(x, mask=mask, weights_out=weights_out)
        x = self.ln_final(x)
        pooled = x[torch.arange(b), eot_index] @ self.text_projection
        return F.normalize(pooled, dim=-1)


@dataclass
class GlocalTextEmbeddings:
    g_n: torch.Tensor
    g_a: torch.Tensor
    l_n: torch.Tensor
    l_a: torch.Tensor

    def items(self):
        return (("global_normal", self.g_n), ("global_anomaly", self.g_a),
                ("local_normal", self.l_n), ("local_anomaly", self.l_a))


def _deep_tokens(bank: PromptBank, depth: int | None) -> list[torch.Tensor]:
    depth = len(bank.deep) if depth is None else depth
    return list(bank.deep)[:depth]


def encode_prompt(tower: TextTower, seq: TokenSequence, bank: PromptBank, depth: int | None = None) -> torch.Tensor:
    """Encode a single composed prompt to a unit vector of the joint dimension.

    Only the first ``depth`` deep-token layers are used (all of them by default).
    """
    emb = sequence_embeddings(seq, bank, tower.token_embedding).unsqueeze(0)
    eot = torch.tensor([emb.shape[1] - 1])
    return tower(emb, eot, _deep_tokens(bank, depth))[0]


def encode_all(tower: TextTower, bank: PromptBank, cfg, depth: int | None = None) -> GlocalTextEmbeddings:
    """Encode the four glocal prompts in one padded batch."""
    seqs = [compose_sequence(bank, br, pol, cfg.prompt_ordering, tower.context_length)
            for br in ("global", "local") for pol in ("normal", "anomaly")]
    embs = [sequence_embeddings(s, bank, tower.token_embedding) for s in seqs]
    n = max(e.shape[0] for e in embs)
    # Causal attention: zero padding after end-of-text cannot reach the pooled position.
    padded = torch.stack([F.pad(e, (0, 0, 0, n - e.shape[0])) for e in embs])
    eot = torch.tensor([e.shape[0] - 1 for e in embs])
    out = tower(padded, eot, _deep_tokens(bank, depth))
    return GlocalTextEmbeddings(g_n=out[0], g_a=out[1], l_n=out[2], l_a=out[3])
