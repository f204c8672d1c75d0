"""Object-agnostic global/local prompt banks and prompt composition.

Each branch (global, local) owns a normal bank ``N`` (E rows) and an anomaly
bank ``A`` (L rows). The anomaly prompt is the normal prompt plus a suffix::

    normal   [SOT] N_1..N_E [object] [EOT]
    anomaly  [SOT] N_1..N_E A_1..A_L [damaged] [object] [EOT]      (N-A-obj)
             [SOT] A_1..A_L N_1..N_E [damaged] [object] [EOT]      (A-N-obj)
             [SOT] N_1..N_E [damaged] [object] A_1..A_L [EOT]      (N-obj-A)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
import torch
from torch import nn

from .config import BANK_KEYS, RunConfig, deep_key

BRANCHES = ("global", "local")
POLARITIES = ("normal", "anomaly")
FIXED_WORDS = ("object", "damaged")


class ByteTokenizer:
    """Byte-level vocabulary (256 byte ids) plus start/end-of-text specials."""

    vocab_size = 258
    sot = 256
    eot = 257

    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(text.encode("utf-8"))


class CallableTokenizer:
    """Adapts an external tokenizer function ``str -> list[int]`` (e.g. CLIP BPE)."""

    def __init__(self, fn: Callable[[str], list[int]], sot: int, eot: int, vocab_size: int):
        self.fn = fn
        self.sot = sot
        self.eot = eot
        self.vocab_size = vocab_size

    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(int(i) for i in self.fn(text))


@dataclass(frozen=True)
class FixedSlot:
    ids: tuple[int, ...]
    word: str


@dataclass(frozen=True)
class BankSlot:
    bank: str  # attribute name on PromptBank, e.g. "global_normal"
    row: int


Slot = Union[FixedSlot, BankSlot]


@dataclass(frozen=True)
class TokenSequence:
    slots: tuple[Slot, ...]
    branch: str
    polarity: str

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def num_tokens(self) -> int:
        """Token positions occupied; a fixed word may span several vocabulary tokens."""
        return sum(len(s.ids) if isinstance(s, FixedSlot) else 1 for s in self.slots)

    def bank_rows(self, bank: str) -> list[int]:
        return [s.row for s in self.slots if isinstance(s, BankSlot) and s.bank == bank]


class PromptBank(nn.Module):
    """All trainable state: four prompt banks plus per-layer deep-text tokens."""

    def __init__(self, normal_len: int, anomaly_len: int, deep_len: int, deep_depth: int, width: int,
                 frozen_word_ids: dict[str, tuple[int, ...]] | None = None,
                 special_ids: tuple[int, int] = (ByteTokenizer.sot, ByteTokenizer.eot),
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.global_normal = nn.Parameter(torch.zeros(normal_len, width, dtype=dtype))
        self.global_anomaly = nn.Parameter(torch.zeros(anomaly_len, width, dtype=dtype))
        self.local_normal = nn.Parameter(torch.zeros(normal_len, width, dtype=dtype))
        self.local_anomaly = nn.Parameter(torch.zeros(anomaly_len, width, dtype=dtype))
        self.deep = nn.ParameterList(
            nn.Parameter(torch.zeros(deep_len, width, dtype=dtype)) for _ in range(deep_depth)
        )
        if frozen_word_ids is None:
            tok = ByteTokenizer()
            frozen_word_ids = {w: tok.encode(w) for w in FIXED_WORDS}
        self.frozen_word_ids = dict(frozen_word_ids)
        self.special_ids = tuple(special_ids)

    @property
    def width(self) -> int:
        return self.global_normal.shape[1]

    def bank(self, branch: str, polarity: str) -> nn.Parameter:
        if branch not in BRANCHES or polarity not in POLARITIES:
            raise ValueError(f"unknown bank ({branch!r}, {polarity!r})")
        return getattr(self, f"{branch}_{polarity}")

    def arrays(self) -> dict[str, np.ndarray]:
        from .config import bank_to_arrays

        return bank_to_arrays(self)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], cfg: RunConfig, tokenizer=None) -> "PromptBank":
        first = arrays["prompt.global.normal"]
        dtype = torch.float32 if first.dtype == np.float32 else torch.float64
        bank = cls(cfg.normal_prompt_len, cfg.anomaly_prompt_len, cfg.deep_prompt_len,
                   cfg.deep_prompt_depth, first.shape[1], dtype=dtype, **_tokenizer_kwargs(tokenizer))
        with torch.no_grad():
            for key, attr in BANK_KEYS.items():
                getattr(bank, attr).copy_(torch.from_numpy(arrays[key]))
            for i, tok in enumerate(bank.deep, start=1):
                tok.copy_(torch.from_numpy(arrays[deep_key(i)]))
        return bank


def _tokenizer_kwargs(tokenizer) -> dict:
    if tokenizer is None:
        return {}
    return dict(
        frozen_word_ids={w: tokenizer.encode(w) for w in FIXED_WORDS},
        special_ids=(tokenizer.sot, tokenizer.eot),
    )


def init_bank(cfg: RunConfig, tower, noise: float | None = None) -> PromptBank:
    """Initialise every bank from the carrier phrase's frozen token embeddings plus Gaussian noise.

    Carrier token embeddings are tiled to fill each bank; deterministic under ``cfg.seed``.
    """
    noise = cfg.init_noise if noise is None else noise
    tok = tower.tokenizer
    table = tower.token_embedding.weight.detach()
    carrier = list(tok.encode(cfg.carrier_phrase)) or [0]
    gen = torch.Generator().manual_seed(cfg.seed)

    bank = PromptBank(cfg.normal_prompt_len, cfg.anomaly_prompt_len, cfg.deep_prompt_len,
                      cfg.deep_prompt_depth, table.shape[1], dtype=table.dtype, **_tokenizer_kwargs(tok))

    def fill(param: torch.Tensor):
        ids = torch.tensor([carrier[i % len(carrier)] for i in range(param.shape[0])])
        base = table[ids]
        eps = torch.randn(param.shape, generator=gen, dtype=torch.float64).to(param.dtype)
        with torch.no_grad():
            param.copy_(base + noise * eps)

    for attr in BANK_KEYS.values():
        fill(getattr(bank, attr))
    for tok_param in bank.deep:
        fill(tok_param)
    return bank


def compose_sequence(bank: PromptBank, branch: str, polarity: str, ordering: str = "N-A-obj",
                     context_length: int | None = None) -> TokenSequence:
    """Lay out the slots of one prompt; see the module docstring for the orderings."""
    if ordering not in ("N-A-obj", "A-N-obj", "N-obj-A"):
        raise ValueError(f"unknown prompt ordering {ordering!r}")
    words = bank.frozen_word_ids
    sot, eot = bank.special_ids
    n_bank = f"{branch}_normal"
    a_bank = f"{branch}_anomaly"
    bank.bank(branch, "normal")  # validates branch
    n_block = [BankSlot(n_bank, i) for i in range(bank.bank(branch, "normal").shape[0])]
    obj = FixedSlot(words["object"], "object")

    if polarity == "normal":
        body = n_block + [obj]
    elif polarity == "anomaly":
        a_block = [BankSlot(a_bank, j) for j in range(bank.bank(branch, "anomaly").shape[0])]
        dmg = FixedSlot(words["damaged"], "damaged")
        if ordering == "N-A-obj":
            body = n_block + a_block + [dmg, obj]
        elif ordering == "A-N-obj":
            body = a_block + n_block + [dmg, obj]
        else:
            body = n_block + [dmg, obj] + a_block
    else:
        raise ValueError(f"unknown polarity {polarity!r}")

    seq = TokenSequence((FixedSlot((sot,), "<sot>"), *body, FixedSlot((eot,), "<eot>")), branch, polarity)
    if context_length is not None and seq.num_tokens > context_length:
        raise ValueError(f"prompt of {seq.num_tokens} tokens exceeds context length {context_length}")
    return seq


def sequence_embeddings(seq: TokenSequence, bank: PromptBank, token_embedding: nn.Embedding) -> torch.Tensor:
    """Token-level input embeddings ``(num_tokens, width)`` for ``seq``; bank rows stay differentiable."""
    pieces = []
    for slot in seq.slots:
        if isinstance(slot, FixedSlot):
            ids = torch.tensor(slot.ids, device=token_embedding.weight.device)
            pieces.append(token_embedding(ids))
        else:
            pieces.append(getattr(bank, slot.bank)[slot.row : slot.row + 1])
    return torch.cat(pieces, dim=0)
