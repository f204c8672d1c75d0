"""Frozen ViT image encoder with a V-V attention stream for patch features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import Transformer, _normal, vv_attention  # noqa: F401  (re-exported)


class VisionTower(nn.Module):
    def __init__(self, width: int, layers: int, heads: int, patch_size: int, image_size: int,
                 embed_dim: int, activation: str = "gelu",
                 mean: tuple[float, float, float] = (0.5, 0.5, 0.5),
                 std: tuple[float, float, float] = (0.5, 0.5, 0.5)):
        super().__init__()
        self.layers = layers
        self.patch_size = patch_size
        self.image_size = image_size
        self.conv1 = nn.Conv2d(3, width, kernel_size=patch_size, stride=patch_size, bias=False)
        self.class_embedding = nn.Parameter(torch.empty(width))
        grid = image_size // patch_size
        self.positional_embedding = nn.Parameter(torch.empty(grid * grid + 1, width))
        self.ln_pre = nn.LayerNorm(width)
        self.transformer = Transformer(width, layers, heads, activation)
        self.ln_post = nn.LayerNorm(width)
        self.proj = nn.Parameter(torch.empty(width, embed_dim))
        self.register_buffer("mean", torch.tensor(mean), persistent=False)
        self.register_buffer("std", torch.tensor(std), persistent=False)
        self._pos_cache: dict[tuple[int, int], torch.Tensor] = {}

    @property
    def width(self) -> int:
        return self.class_embedding.shape[0]

    def init_toy(self, generator: torch.Generator) -> None:
        scale = self.width ** -0.5
        fan_in = 3 * self.patch_size ** 2
        _normal(self.conv1.weight, fan_in ** -0.5, generator)
        _normal(self.class_embedding, scale, generator)
        _normal(self.positional_embedding, scale, generator)
        self.transformer.init_clip_style(generator)
        _normal(self.proj, scale, generator)

    def positional_for(self, grid_hw: tuple[int, int]) -> torch.Tensor:
        """Positional embeddings for a patch grid, bicubically resampled if it differs from native."""
        native = self.image_size // self.patch_size
        if grid_hw == (native, native):
            return self.positional_embedding
        if grid_hw not in self._pos_cache:
            pos = self.positional_embedding.detach()
            cls_pos, patch_pos = pos[:1], pos[1:]
            patch_pos = patch_pos.reshape(1, native, native, -1).permute(0, 3, 1, 2)
            patch_pos = F.interpolate(patch_pos, size=grid_hw, mode="bicubic", align_corners=False)
            patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(grid_hw[0] * grid_hw[1], -1)
            self._pos_cache[grid_hw] = torch.cat([cls_pos, patch_pos])
        return self._pos_cache[grid_hw]

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` in [0, 1] -> channel-normalised."""
        return (images - self.mean.view(1, 3, 1, 1)) / self.std.view(1, 3, 1, 1)

    def _project(self, tokens: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.ln_post(tokens) @ self.proj, dim=-1)

    def forward(self, images: torch.Tensor, tap_layers=(), vv_start: int | None = None,
                with_patches: bool = True, weights_out: list | None = None):
        """Encode normalised images ``(B, 3, H, W)``.

        Returns ``(global (B, D), [grid (B, H', W', D) per tap layer])``. The class token
        comes from the plain QKV stream; patch grids come from a parallel stream that
        switches to V-V attention from layer ``vv_start`` (1-based) onward.
        """
        b, _, h, w = images.shape
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {(h, w)} not divisible by patch size {self.patch_size}")
        gh, gw = h // self.patch_size, w // self.patch_size
        x = self.conv1(images.to(self.conv1.weight.dtype)).flatten(2).transpose(1, 2)
        cls = self.class_embedding.to(x.dtype).expand(b, 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_for((gh, gw))
        x = self.ln_pre(x)

        taps = set(tap_layers)
        vv_start = self.layers + 1 if vv_start is None else vv_start
        grids = []
        qkv_x, vv_x = x, None
        for i, block in enumerate(self.transformer.resblocks, start=1):
            if with_patches and i >= vv_start:
                if vv_x is None:
                    vv_x = qkv_x
                vv_x = block(vv_x, mode="vv", weights_out=weights_out)
            qkv_x = block(qkv_x, weights_out=weights_out)
            if with_patches and i in taps:
                src = vv_x if vv_x is not None else qkv_x
                grids.append(self._project(src[:, 1:]).reshape(b, gh, gw, -1))
        global_emb = self._project(qkv_x[:, 0])
        return global_emb, grids


@dataclass
class VisualFeatures:
    global_embedding: torch.Tensor  # (D,) or (B, D)
    patch_grids: list[torch.Tensor]  # each (H', W', D) or (B, H', W', D)


def to_batch(image) -> torch.Tensor:
    """``H x W x 3`` (or ``B x H x W x 3``) normalised array -> ``B x 3 x H x W`` tensor."""
    t = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def encode_image(tower: VisionTower, image, cfg, with_patches: bool = True) -> VisualFeatures:
    """Encode one channel-normalised ``H x W x 3`` image (or a batch ``B x H x W x 3``)."""
    arr = image if torch.is_tensor(image) else np.asarray(image)
    if tuple(arr.shape[-3:-1]) != tuple(cfg.image_resolution):
        raise ValueError(f"image resolution {tuple(arr.shape[-3:-1])} does not match config {cfg.image_resolution}")
    if not bool(np.isfinite(np.asarray(arr)).all()):
        raise ValueError("image contains non-finite pixels")
    single = arr.ndim == 3
    g, grids = tower(to_batch(arr), cfg.patch_tap_layers, cfg.vv_start_depth, with_patches=with_patches)
    if single:
        return VisualFeatures(g[0], [gr[0] for gr in grids])
    return VisualFeatures(g, grids)
