"""Anomaly probabilities, per-layer similarity maps and the smoothed localization map."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import convolve1d


@dataclass
class AnomalyMap:
    map: np.ndarray  # H x W, non-negative
    image_score: float
    per_layer_maps: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def _t(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def class_probability(t_n, t_a, f, tau: float):
    """Softmax over the two text classes of ``<t_c, f> / tau``; returns ``(p_n, p_a)``.

    ``f`` may carry leading batch/grid dimensions; the text vectors broadcast over them.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    t_n, t_a, f = _t(t_n), _t(t_a), _t(f)
    for name, v in (("t_n", t_n), ("t_a", t_a), ("f", f)):
        if bool((v.norm(dim=-1) == 0).any()):
            raise ValueError(f"zero-norm input {name}")
    logits = torch.stack([f @ t_n, f @ t_a], dim=-1) / tau
    probs = logits.softmax(dim=-1)
    return probs[..., 0], probs[..., 1]


def local_similarity_maps(l_n, l_a, grid, tau: float):
    """Per-patch normal/anomaly probabilities for a ``(..., H', W', D)`` patch grid."""
    grid = _t(grid)
    if grid.shape[-1] != _t(l_n).shape[-1] or grid.shape[-1] != _t(l_a).shape[-1]:
        raise ValueError(f"prompt dimension {_t(l_n).shape[-1]} does not match grid depth {grid.shape[-1]}")
    return class_probability(l_n, l_a, grid, tau)


def upsample(m, target: tuple[int, int]):
    """Bilinear upsampling (corner alignment off) of ``(..., H', W')`` to ``(..., H, W)``."""
    m = _t(m)
    h, w = m.shape[-2:]
    th, tw = target
    if th < h or tw < w:
        raise ValueError(f"upsample target {target} is smaller than source {(h, w)}")
    if (th, tw) == (h, w):
        return m
    lead = m.shape[:-2]
    out = F.interpolate(m.reshape(-1, 1, h, w), size=(th, tw), mode="bilinear", align_corners=False)
    return out.reshape(*lead, th, tw)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Unit-sum sampled Gaussian with radius ``ceil(3 sigma)``; ``sigma == 0`` gives a delta."""
    if sigma <= 0:
        return np.ones(1)
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(m: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filter over the last two axes with reflective (edge-inclusive) padding."""
    k = gaussian_kernel1d(sigma)
    out = np.asarray(m, dtype=np.float64)
    if k.size == 1:
        return out.copy()
    out = convolve1d(out, k, axis=-1, mode="reflect")
    return convolve1d(out, k, axis=-2, mode="reflect")


def anomaly_map(per_layer, target: tuple[int, int], sigma: float, normalize_by_layers: bool = False) -> np.ndarray:
    """Smoothed sum over tap layers of ``(1 - Up(S_n)) / 2 + Up(S_a) / 2``."""
    per_layer = list(per_layer)
    if not per_layer:
        raise ValueError("anomaly_map needs at least one layer")
    total = None
    for s_n, s_a in per_layer:
        term = 0.5 * (1.0 - upsample(s_n, target)) + 0.5 * upsample(s_a, target)
        total = term if total is None else total + term
    if normalize_by_layers:
        total = total / len(per_layer)
    return gaussian_smooth(total.detach().cpu().numpy(), sigma)


def image_score(p_a_global: float, amap: np.ndarray | AnomalyMap, fusion: str = "text_only",
                normalizer: float = 1.0) -> float:
    """Image-level score; ``normalizer`` is the tap-layer count so the map term lies in [0, 1]."""
    if fusion == "text_only":
        return float(p_a_global)
    if fusion == "text_plus_map_max":
        m = amap.map if isinstance(amap, AnomalyMap) else np.asarray(amap)
        return 0.5 * float(p_a_global) + 0.5 * float(m.max()) / normalizer
    raise ValueError(f"unknown score fusion {fusion!r}")
