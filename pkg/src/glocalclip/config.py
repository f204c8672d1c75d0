"""Run configuration, seeding and the prompt checkpoint archive."""

from __future__ import annotations

import dataclasses
import json
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

ORDERINGS = ("N-A-obj", "A-N-obj", "N-obj-A")
FUSIONS = ("text_only", "text_plus_map_max")


class ConfigError(ValueError):
    """Raised for malformed config documents or violated config invariants."""

    def __init__(self, message: str, constraint: str | None = None):
        super().__init__(message)
        self.constraint = constraint


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    normal_prompt_len: int = 13
    anomaly_prompt_len: int = 10
    deep_prompt_len: int = 4
    deep_prompt_depth: int = 12
    vv_start_depth: int = 6
    patch_tap_layers: tuple[int, ...] = (6, 12, 18, 24)
    margin: float = 0.0
    lambda_gcl: float = 1.0
    sigma: float = 8.0
    epochs: int = 15
    learning_rate: float = 0.001
    adam_betas: tuple[float, float] = (0.5, 0.999)
    image_resolution: tuple[int, int] = (518, 518)
    prompt_ordering: str = "N-A-obj"
    score_fusion: str = "text_only"
    aupro_fpr_cap: float = 0.3
    seed: int = 0
    batch_size: int = 8
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    dice_eps: float = 1e-5
    init_noise: float = 0.02
    carrier_phrase: str = "a photo of a"
    normalize_map_by_layers: bool = False

    def __post_init__(self):
        # JSON gives lists; keep the dataclass hashable and comparable.
        object.__setattr__(self, "patch_tap_layers", tuple(int(x) for x in self.patch_tap_layers))
        object.__setattr__(self, "adam_betas", tuple(float(x) for x in self.adam_betas))
        res = self.image_resolution
        if isinstance(res, int):
            res = (res, res)
        object.__setattr__(self, "image_resolution", tuple(int(x) for x in res))
        self.validate()

    def validate(
        self,
        text_layers: int | None = None,
        vision_layers: int | None = None,
        context_length: int | None = None,
        reserved_tokens: int = 2,
    ) -> None:
        """Check the config's internal invariants, and the backbone-dependent ones when sizes are given."""
        def fail(name: str, msg: str):
            raise ConfigError(f"invariant '{name}' violated: {msg}", constraint=name)

        for name in ("normal_prompt_len", "anomaly_prompt_len", "deep_prompt_len",
                     "deep_prompt_depth", "vv_start_depth", "epochs", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                fail(name, f"must be a positive integer, got {v!r}")
        taps = self.patch_tap_layers
        if not taps or any(t < 1 for t in taps) or list(taps) != sorted(set(taps)):
            fail("patch_tap_layers", f"must be a non-empty ascending list of layer indices, got {list(taps)}")
        if self.vv_start_depth > max(taps):
            fail("vv_start_depth", f"{self.vv_start_depth} exceeds the deepest tap layer {max(taps)}")
        if self.margin < 0:
            fail("margin", "must be non-negative")
        if self.lambda_gcl < 0:
            fail("lambda_gcl", "must be non-negative")
        if self.sigma < 0:
            fail("sigma", "must be non-negative")
        if self.learning_rate < 0:
            fail("learning_rate", "must be non-negative")
        if len(self.adam_betas) != 2 or not all(0 < b < 1 for b in self.adam_betas):
            fail("adam_betas", f"must be two reals in (0, 1), got {self.adam_betas}")
        if len(self.image_resolution) != 2 or min(self.image_resolution) < 1:
            fail("image_resolution", f"must be a positive integer pair, got {self.image_resolution}")
        if self.prompt_ordering not in ORDERINGS:
            fail("prompt_ordering", f"must be one of {ORDERINGS}, got {self.prompt_ordering!r}")
        if self.score_fusion not in FUSIONS:
            fail("score_fusion", f"must be one of {FUSIONS}, got {self.score_fusion!r}")
        if not 0 < self.aupro_fpr_cap <= 1:
            fail("aupro_fpr_cap", "must lie in (0, 1]")
        if self.init_noise < 0:
            fail("init_noise", "must be non-negative")

        if text_layers is not None and self.deep_prompt_depth > text_layers:
            fail("deep_prompt_depth", f"{self.deep_prompt_depth} exceeds the {text_layers}-layer text tower")
        if vision_layers is not None and max(taps) > vision_layers:
            fail("patch_tap_layers", f"layer {max(taps)} exceeds the {vision_layers}-layer vision tower")
        if context_length is not None:
            need = self.deep_prompt_len + self.normal_prompt_len + self.anomaly_prompt_len + reserved_tokens
            if need > context_length:
                fail("context_length", f"prompt needs {need} tokens, context holds {context_length}")

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError(f"config document must be a JSON object, got {type(doc).__name__}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"malformed config value: {exc}") from exc

    @classmethod
    def toy(cls, **overrides: Any) -> "RunConfig":
        """Settings sized for the built-in toy backbone (2-layer text, 4-layer vision, 32x32 input)."""
        base = dict(
            deep_prompt_depth=2,
            vv_start_depth=2,
            patch_tap_layers=(2, 4),
            image_resolution=(32, 32),
            sigma=1.0,
        )
        base.update(overrides)
        return cls(**base)


def load_config(path: str | os.PathLike, backbone=None) -> RunConfig:
    """Read a JSON config; unset keys take defaults.

    When ``backbone`` (anything with ``text`` and ``vision`` towers) is given,
    the backbone-dependent invariants are checked too.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config document {path}: {exc}") from exc
    cfg = RunConfig.from_dict(doc)
    if backbone is not None:
        check_against_backbone(cfg, backbone)
    return cfg


def check_against_backbone(cfg: RunConfig, backbone) -> None:
    cfg.validate(
        text_layers=backbone.text.layers,
        vision_layers=backbone.vision.layers,
        context_length=backbone.text.context_length,
    )
    if any(r % backbone.vision.patch_size for r in cfg.image_resolution):
        raise ConfigError(
            f"invariant 'image_resolution' violated: {cfg.image_resolution} not divisible "
            f"by patch size {backbone.vision.patch_size}",
            constraint="image_resolution",
        )


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


# -- checkpoint archive -------------------------------------------------------

BANK_KEYS = {
    "prompt.global.normal": "global_normal",
    "prompt.global.anomaly": "global_anomaly",
    "prompt.local.normal": "local_normal",
    "prompt.local.anomaly": "local_anomaly",
}


def deep_key(i: int) -> str:
    return f"deep.layer.{i}"


def bank_to_arrays(bank) -> dict[str, np.ndarray]:
    arrays = {key: getattr(bank, attr).detach().cpu().numpy().copy() for key, attr in BANK_KEYS.items()}
    for i, tok in enumerate(bank.deep, start=1):
        arrays[deep_key(i)] = tok.detach().cpu().numpy().copy()
    return arrays


def save_checkpoint(bank, path: str | os.PathLike, cfg: RunConfig) -> Path:
    """Write the prompt bank as a named-array ``.npz`` archive plus a config copy."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = bank_to_arrays(bank)
    arrays["config"] = np.array(cfg.to_json())
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], RunConfig]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    if "config" not in arrays:
        raise CheckpointError(f"checkpoint {path} is missing key 'config'")
    cfg = RunConfig.from_dict(json.loads(str(arrays.pop("config"))))
    return arrays, cfg


def expected_shapes(cfg: RunConfig, width: int) -> dict[str, tuple[int, int]]:
    e, a, p = cfg.normal_prompt_len, cfg.anomaly_prompt_len, cfg.deep_prompt_len
    shapes = {
        "prompt.global.normal": (e, width),
        "prompt.global.anomaly": (a, width),
        "prompt.local.normal": (e, width),
        "prompt.local.anomaly": (a, width),
    }
    for i in range(1, cfg.deep_prompt_depth + 1):
        shapes[deep_key(i)] = (p, width)
    return shapes


def validate_arrays(arrays: dict[str, np.ndarray], cfg: RunConfig, width: int | None = None) -> None:
    if width is None:
        if "prompt.global.normal" not in arrays:
            raise CheckpointError("checkpoint is missing key 'prompt.global.normal'")
        width = arrays["prompt.global.normal"].shape[-1]
    for key, shape in expected_shapes(cfg, width).items():
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing key {key!r}")
        if tuple(arrays[key].shape) != shape:
            raise CheckpointError(
                f"shape mismatch for {key!r}: stored {tuple(arrays[key].shape)}, config expects {shape}"
            )


def load_checkpoint(path: str | os.PathLike, cfg: RunConfig | None = None, width: int | None = None,
                    tokenizer=None):
    """Load a checkpoint into a fresh :class:`PromptBank`.

    Shapes are checked against ``cfg`` (defaults to the config copy stored in the
    archive). Returns ``(bank, cfg)``.
    """
    from .prompts import PromptBank

    arrays, stored_cfg = read_checkpoint_arrays(path)
    cfg = cfg or stored_cfg
    validate_arrays(arrays, cfg, width)
    return PromptBank.from_arrays(arrays, cfg, tokenizer), cfg
