"""Backbone providers: the built-in toy towers and named-array weight archives.

Archive layout (``.npz``): every frozen tensor under ``text.<name>`` or
``vision.<name>``, where ``<name>`` is the module's state-dict key, plus a
``meta`` JSON string holding the tower hyperparameters.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .prompts import ByteTokenizer, CallableTokenizer
from .text import TextTower
from .vision import VisionTower

TOY_BACKBONE_SEED = 20241016


@dataclass
class Backbone:
    text: TextTower
    vision: VisionTower
    meta: dict

    @property
    def temperature(self) -> float:
        return self.text.temperature

    @property
    def dtype(self) -> torch.dtype:
        return self.text.token_embedding.weight.dtype

    def freeze(self) -> "Backbone":
        for tower in (self.text, self.vision):
            tower.eval()
            for p in tower.parameters():
                p.requires_grad_(False)
        return self

    def checksum(self) -> str:
        """SHA-256 over every frozen tensor, in sorted key order."""
        h = hashlib.sha256()
        for prefix, tower in (("text", self.text), ("vision", self.vision)):
            for key, t in sorted(tower.state_dict().items()):
                h.update(f"{prefix}.{key}".encode())
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


TOY_TEXT = dict(vocab_size=258, width=64, layers=2, heads=4, embed_dim=32, context_length=77,
                activation="gelu", temperature=0.07, tokenizer="byte")
TOY_VISION = dict(width=64, layers=4, heads=4, patch_size=8, image_size=32, embed_dim=32,
                  activation="gelu", mean=[0.5, 0.5, 0.5], std=[0.5, 0.5, 0.5])


def build_toy(dtype: torch.dtype = torch.float64, seed: int = TOY_BACKBONE_SEED) -> Backbone:
    """Randomly initialised small towers; the weights depend only on ``seed``, never on the run seed."""
    gen = torch.Generator().manual_seed(seed)
    text = TextTower(**_text_kwargs(TOY_TEXT), tokenizer=ByteTokenizer())
    vision = VisionTower(**_vision_kwargs(TOY_VISION))
    text.init_toy(gen)
    vision.init_toy(gen)
    meta = {"name": "toy", "text": dict(TOY_TEXT), "vision": dict(TOY_VISION)}
    return Backbone(text.to(dtype), vision.to(dtype), meta).freeze()


def _text_kwargs(meta: dict) -> dict:
    keys = ("vocab_size", "width", "layers", "heads", "embed_dim", "context_length", "activation", "temperature")
    return {k: meta[k] for k in keys if k in meta}


def _vision_kwargs(meta: dict) -> dict:
    kw = {k: meta[k] for k in ("width", "layers", "heads", "patch_size", "image_size", "embed_dim", "activation")}
    kw["mean"] = tuple(meta.get("mean", (0.5, 0.5, 0.5)))
    kw["std"] = tuple(meta.get("std", (0.5, 0.5, 0.5)))
    return kw


def save_archive(backbone: Backbone, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for prefix, tower in (("text", backbone.text), ("vision", backbone.vision)):
        for key, t in tower.state_dict().items():
            arrays[f"{prefix}.{key}"] = t.detach().cpu().numpy()
    arrays["meta"] = np.array(json.dumps(backbone.meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def make_tokenizer(kind: str):
    if kind == "byte":
        return ByteTokenizer()
    if kind == "clip_bpe":
        return clip_bpe_tokenizer()
    raise ValueError(f"unknown tokenizer kind {kind!r}")


def clip_bpe_tokenizer() -> CallableTokenizer:
    """CLIP's byte-pair tokenizer, taken from an installed ``open_clip`` or ``clip`` package."""
    try:
        from open_clip.tokenizer import SimpleTokenizer  # type: ignore
    except ImportError:
        try:
            from clip.simple_tokenizer import SimpleTokenizer  # type: ignore
        except ImportError as exc:
            raise RuntimeError(
                "archives with tokenizer 'clip_bpe' need the open_clip or clip package installed"
            ) from exc
    tok = SimpleTokenizer()
    return CallableTokenizer(tok.encode, tok.encoder["<|startoftext|>"], tok.encoder["<|endoftext|>"],
                             len(tok.encoder))


def load_archive(path: str | os.PathLike, dtype: torch.dtype | None = None) -> Backbone:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"backbone archive not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    if "meta" not in arrays:
        raise ValueError(f"backbone archive {path} has no 'meta' entry")
    meta = json.loads(str(arrays.pop("meta")))
    text = TextTower(**_text_kwargs(meta["text"]), tokenizer=make_tokenizer(meta["text"].get("tokenizer", "byte")))
    vision = VisionTower(**_vision_kwargs(meta["vision"]))
    for prefix, tower in (("text", text), ("vision", vision)):
        state = {k[len(prefix) + 1:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix + ".")}
        tower.load_state_dict(state, strict=True)
    if dtype is None:
        dtype = torch.from_numpy(arrays["text.token_embedding.weight"][:1]).dtype
    return Backbone(text.to(dtype), vision.to(dtype), meta).freeze()


_TEXT_ROOT_KEYS = ("token_embedding.", "positional_embedding", "transformer.", "ln_final.", "text_projection",
                   "logit_scale")


def convert_clip_state_dict(state: dict, activation: str = "quick_gelu",
                            mean=(0.48145466, 0.4578275, 0.40821073),
                            std=(0.26862954, 0.26130258, 0.27577711)) -> tuple[dict, dict]:
    """Map an OpenAI-layout CLIP ViT state dict onto archive keys.

    Returns ``(arrays, meta)`` ready for ``np.savez(path, **arrays, meta=json.dumps(meta))``.
    """
    arrays = {}
    for key, value in state.items():
        arr = value.detach().cpu().float().numpy() if torch.is_tensor(value) else np.asarray(value)
        if key.startswith("visual."):
            arrays["vision." + key[len("visual."):]] = arr
        elif key.startswith(_TEXT_ROOT_KEYS):
            arrays["text." + key] = arr
    v_width = arrays["vision.conv1.weight"].shape[0]
    patch = arrays["vision.conv1.weight"].shape[-1]
    n_pos = arrays["vision.positional_embedding"].shape[0]
    grid = int(round((n_pos - 1) ** 0.5))
    v_layers = len({k.split(".")[3] for k in arrays if k.startswith("vision.transformer.resblocks.")})
    t_width = arrays["text.ln_final.weight"].shape[0]
    t_layers = len({k.split(".")[3] for k in arrays if k.startswith("text.transformer.resblocks.")})
    logit_scale = float(arrays["text.logit_scale"])
    meta = {
        "name": "clip",
        "text": dict(vocab_size=arrays["text.token_embedding.weight"].shape[0], width=t_width, layers=t_layers,
                     heads=t_width // 64, embed_dim=arrays["text.text_projection"].shape[1],
                     context_length=arrays["text.positional_embedding"].shape[0], activation=activation,
                     temperature=float(np.exp(-logit_scale)), tokenizer="clip_bpe"),
        "vision": dict(width=v_width, layers=v_layers, heads=v_width // 64, patch_size=patch,
                       image_size=grid * patch, embed_dim=arrays["vision.proj"].shape[1], activation=activation,
                       mean=list(mean), std=list(std)),
    }
    return arrays, meta


def resolve_backbone(spec: str, dtype: torch.dtype | None = None) -> Backbone:
    """``"toy"`` or ``"archive:PATH"``."""
    if spec == "toy":
        return build_toy(dtype or torch.float64)
    if spec.startswith("archive:"):
        return load_archive(spec[len("archive:"):], dtype)
    raise ValueError(f"unknown backbone provider {spec!r}; expected 'toy' or 'archive:PATH'")
