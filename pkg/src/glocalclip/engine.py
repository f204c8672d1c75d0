"""Training loop over prompt parameters, evaluation, single-image inference and embedding dumps."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from .backbone import Backbone
from .config import RunConfig, check_against_backbone, load_checkpoint, save_checkpoint
from .data import DatasetError, DatasetIndex, SampleEntry, _open_mask, _open_rgb, load_sample
from .losses import LossReport, gcl_total, global_loss, local_loss, total_loss
from .metrics import EvalReport, class_metrics
from .prompts import PromptBank, init_bank
from .scoring import AnomalyMap, anomaly_map, class_probability, image_score, local_similarity_maps
from .text import GlocalTextEmbeddings, encode_all

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    bank: PromptBank
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    history: list[LossReport] = field(default_factory=list)


@dataclass
class TrainResult:
    bank: PromptBank
    history: list[LossReport]
    epoch_means: list[float]
    initial_loss: float
    checkpoint: Path | None = None
    seconds: float = 0.0


def load_batch(entries: Sequence[SampleEntry], cfg: RunConfig, backbone: Backbone):
    """Stack samples into ``(images B x 3 x H x W, masks B x H x W, labels B)`` tensors."""
    mean = tuple(backbone.vision.mean.tolist())
    std = tuple(backbone.vision.std.tolist())
    samples = [load_sample(e, cfg.image_resolution, mean, std) for e in entries]
    dtype = backbone.dtype
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).to(dtype)
    masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float64)).to(dtype)
    labels = torch.tensor([s.label for s in samples], dtype=dtype)
    return images, masks, labels


def batch_loss(backbone: Backbone, bank: PromptBank, cfg: RunConfig, images, masks, labels):
    """Differentiable total loss for one batch; returns ``(total, LossReport)``."""
    emb = encode_all(backbone.text, bank, cfg)
    with torch.no_grad():
        g, grids = backbone.vision(images, cfg.patch_tap_layers, cfg.vv_start_depth)
    tau = backbone.temperature
    _, p_a = class_probability(emb.g_n, emb.g_a, g, tau)
    l_global = global_loss(p_a, labels)
    per_layer = []
    for grid in grids:
        s_n, s_a = local_similarity_maps(emb.l_n, emb.l_a, grid, tau)
        per_layer.append(local_loss(s_n, s_a, masks, cfg.image_resolution,
                                    cfg.focal_gamma, cfg.focal_alpha, cfg.dice_eps))
    return total_loss(l_global, per_layer, gcl_total(emb, cfg.margin), cfg.lambda_gcl)


def _check_train_index(index: DatasetIndex) -> None:
    if not len(index):
        raise DatasetError("training index is empty")
    for e in index.entries:
        if e.label == 1 and e.mask is None:
            raise DatasetError(f"anomalous training sample without a mask: {e.image if isinstance(e.image, str) else '<array>'}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train(cfg: RunConfig, index: DatasetIndex, backbone: Backbone, out_dir: str | os.PathLike | None = None,
          snapshot_dir: str | os.PathLike | None = None, bank: PromptBank | None = None,
          on_step: Callable[[TrainState, LossReport], None] | None = None) -> TrainResult:
    """Optimise the prompt bank with Adam; the backbone stays frozen.

    Writes ``checkpoint.npz`` and ``loss_history.json`` under ``out_dir`` when given,
    and one ``epoch_XX.npz`` per epoch under ``snapshot_dir``.
    """
    check_against_backbone(cfg, backbone)
    _check_train_index(index)
    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    bank = bank if bank is not None else init_bank(cfg, backbone.text)
    opt = torch.optim.Adam(bank.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    state = TrainState(bank, opt)
    rng = np.random.default_rng(cfg.seed)

    # Samples are decoded once; the loop only re-batches them.
    images, masks, labels = load_batch(index.entries, cfg, backbone)

    with torch.no_grad():
        try:
            init_loss = float(batch_loss(backbone, bank, cfg, images, masks, labels)[0])
        except FloatingPointError as exc:
            if out_dir is not None:
                _write_history(Path(out_dir), [], failed_step=0)
            raise TrainingError(f"non-finite loss before the first step: {exc}") from exc

    epoch_means = []
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        epoch_losses = []
        for idx in _batches(len(index), cfg.batch_size, rng):
            idx = torch.from_numpy(idx)
            opt.zero_grad()
            try:
                total, report = batch_loss(backbone, bank, cfg, images[idx], masks[idx], labels[idx])
            except FloatingPointError as exc:
                if out_dir is not None:
                    _write_history(Path(out_dir), state.history, failed_step=state.step + 1)
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {state.step + 1}: {exc}") from exc
            total.backward()
            opt.step()
            state.step += 1
            state.history.append(report)
            epoch_losses.append(report.total)
            if on_step is not None:
                on_step(state, report)
        epoch_means.append(float(np.mean(epoch_losses)))
        log.info("epoch %d/%d  mean loss %.4f", epoch, cfg.epochs, epoch_means[-1])
        if snapshot_dir is not None:
            save_checkpoint(bank, Path(snapshot_dir) / f"epoch_{epoch:02d}.npz", cfg)

    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = save_checkpoint(bank, out_dir / "checkpoint.npz", cfg)
        _write_history(out_dir, state.history, epoch_means=epoch_means, initial_loss=init_loss)
    return TrainResult(bank, state.history, epoch_means, init_loss, ckpt, time.perf_counter() - t0)


def _write_history(out_dir: Path, history, failed_step: int | None = None, **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"steps": [r.to_dict() for r in history], **extra}
    if failed_step is not None:
        doc["failed_step"] = failed_step
    (out_dir / "loss_history.json").write_text(json.dumps(doc, indent=1), encoding="utf-8")


# -- inference -------------------------------------------------------------------

@torch.no_grad()
def text_embeddings(backbone: Backbone, bank: PromptBank, cfg: RunConfig) -> GlocalTextEmbeddings:
    return encode_all(backbone.text, bank, cfg)


@torch.no_grad()
def predict(backbone: Backbone, emb: GlocalTextEmbeddings, cfg: RunConfig, images: torch.Tensor) -> list[AnomalyMap]:
    """Anomaly maps and image scores for a batch of normalised images ``(B, 3, H, W)``."""
    tau = backbone.temperature
    g, grids = backbone.vision(images, cfg.patch_tap_layers, cfg.vv_start_depth)
    _, p_a = class_probability(emb.g_n, emb.g_a, g, tau)
    layer_maps = [local_similarity_maps(emb.l_n, emb.l_a, grid, tau) for grid in grids]
    out = []
    for b in range(images.shape[0]):
        per_layer = [(s_n[b], s_a[b]) for s_n, s_a in layer_maps]
        amap = anomaly_map(per_layer, cfg.image_resolution, cfg.sigma, cfg.normalize_map_by_layers)
        normalizer = 1.0 if cfg.normalize_map_by_layers else float(len(per_layer))
        score = image_score(float(p_a[b]), amap, cfg.score_fusion, normalizer)
        out.append(AnomalyMap(amap, score, [(s_n.numpy(), s_a.numpy()) for s_n, s_a in per_layer]))
    return out


def _ref_str(ref) -> str | None:
    return ref if isinstance(ref, str) or ref is None else "<in-memory>"


def evaluate(cfg: RunConfig, index: DatasetIndex, backbone: Backbone, bank: PromptBank,
             report_dir: str | os.PathLike | None = None, batch_size: int = 32) -> EvalReport:
    """Score every entry, then compute per-class metrics and their unweighted mean.

    With ``report_dir``: writes ``report.json``, ``report.txt``, ``maps.npz`` and
    ``predictions.jsonl`` (the inputs of ``visualize``).
    """
    check_against_backbone(cfg, backbone)
    entries = sorted(index.entries, key=SampleEntry.key)
    emb = text_embeddings(backbone, bank, cfg)
    results, masks = [], []
    for i in range(0, len(entries), batch_size):
        chunk = entries[i : i + batch_size]
        images, m, _ = load_batch(chunk, cfg, backbone)
        results.extend(predict(backbone, emb, cfg, images))
        masks.extend(m.numpy().astype(np.uint8))

    per_class = {}
    for cls in sorted({e.class_name for e in entries}):
        ids = [k for k, e in enumerate(entries) if e.class_name == cls]
        per_class[cls] = class_metrics(
            [results[k].image_score for k in ids],
            [entries[k].label for k in ids],
            [results[k].map for k in ids],
            [masks[k] for k in ids],
            cfg.aupro_fpr_cap,
        )
    report = EvalReport(per_class, len(entries))

    if report_dir is not None:
        report_dir = Path(report_dir)
        report_dir.mkdir(parents=True, exist_ok=True)
        (report_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        (report_dir / "report.txt").write_text(report.to_table() + "\n", encoding="utf-8")
        with open(report_dir / "maps.npz", "wb") as fh:
            np.savez_compressed(fh, **{f"map_{k:05d}": r.map.astype(np.float32) for k, r in enumerate(results)})
        with open(report_dir / "predictions.jsonl", "w", encoding="utf-8") as fh:
            for k, (e, r) in enumerate(zip(entries, results)):
                fh.write(json.dumps({"key": f"map_{k:05d}", "image": _ref_str(e.image), "mask": _ref_str(e.mask),
                                     "label": e.label, "class": e.class_name, "score": r.image_score}) + "\n")
    return report


def infer(cfg: RunConfig, backbone: Backbone, bank: PromptBank, image_path: str | os.PathLike,
          out_dir: str | os.PathLike | None = None) -> AnomalyMap:
    """Single-image pipeline; optionally writes ``<stem>_heatmap.png`` and ``<stem>_composite.png``."""
    check_against_backbone(cfg, backbone)
    entry = SampleEntry(str(image_path), None, 0, "infer")
    images, _, _ = load_batch([entry], cfg, backbone)
    result = predict(backbone, text_embeddings(backbone, bank, cfg), cfg, images)[0]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = Path(image_path).stem
        Image.fromarray(heatmap_u8(result.map), mode="L").save(out_dir / f"{stem}_heatmap.png")
        composite(_open_rgb(str(image_path)), result.map).save(out_dir / f"{stem}_composite.png")
    return result


# -- visual outputs ----------------------------------------------------------------

def heatmap_u8(amap: np.ndarray) -> np.ndarray:
    """Per-image min-max normalisation to 8 bits."""
    m = np.asarray(amap, dtype=np.float64)
    lo, hi = m.min(), m.max()
    scaled = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    return np.round(scaled * 255).astype(np.uint8)


def _colorize(u8: np.ndarray) -> np.ndarray:
    """Blue (low) to red (high) ramp."""
    t = u8.astype(np.float64) / 255.0
    rgb = np.stack([t, 1 - np.abs(2 * t - 1), 1 - t], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def composite(image: Image.Image, amap: np.ndarray, mask: np.ndarray | None = None) -> Image.Image:
    """Side-by-side panel: input, heatmap overlay, and the ground-truth mask when given."""
    h, w = amap.shape
    base = np.asarray(image.convert("RGB").resize((w, h), Image.BILINEAR), dtype=np.float64)
    heat = _colorize(heatmap_u8(amap)).astype(np.float64)
    panels = [base, 0.5 * base + 0.5 * heat]
    if mask is not None:
        m = (np.asarray(mask) > 0).astype(np.float64) * 255
        panels.append(np.repeat(m[..., None], 3, axis=-1))
    return Image.fromarray(np.round(np.concatenate(panels, axis=1)).astype(np.uint8), mode="RGB")


def visualize(report_dir: str | os.PathLike, out_dir: str | os.PathLike) -> list[Path]:
    """Render heatmap and composite PNGs for every prediction saved by :func:`evaluate`."""
    report_dir, out_dir = Path(report_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with np.load(report_dir / "maps.npz") as maps, open(report_dir / "predictions.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            amap = maps[rec["key"]]
            name = f"{rec['class']}_{rec['key']}"
            heat_path = out_dir / f"{name}_heatmap.png"
            Image.fromarray(heatmap_u8(amap), mode="L").save(heat_path)
            written.append(heat_path)
            if rec["image"] and rec["image"] != "<in-memory>" and os.path.isfile(rec["image"]):
                mask = None
                if rec["mask"] and os.path.isfile(rec["mask"]):
                    mask = np.asarray(Image.fromarray(
                        np.round(_open_mask(rec["mask"]) * 255).astype(np.uint8)).resize(amap.shape[::-1], Image.NEAREST))
                comp_path = out_dir / f"{name}_composite.png"
                composite(_open_rgb(rec["image"]), amap, mask).save(comp_path)
                written.append(comp_path)
    return written


# -- embedding dump --------------------------------------------------------------

def embedding_records(backbone: Backbone, bank: PromptBank, cfg: RunConfig, epoch: int | None = None) -> list[dict]:
    emb = text_embeddings(backbone, bank, cfg)
    recs = []
    for label, vec in emb.items():
        rec = {"label": label, "vector": [float(x) for x in vec.tolist()]}
        if epoch is not None:
            rec["epoch"] = epoch
        recs.append(rec)
    return recs


def dump_embeddings(backbone: Backbone, checkpoint: str | os.PathLike, path: str | os.PathLike,
                    history_dir: str | os.PathLike | None = None) -> Path:
    """Write the four prompt embeddings (plus per-epoch snapshots, if given) as a JSON array."""
    bank, cfg = load_checkpoint(checkpoint, tokenizer=backbone.text.tokenizer)
    records = embedding_records(backbone, bank, cfg)
    if history_dir is not None:
        for snap in sorted(Path(history_dir).glob("epoch_*.npz")):
            epoch = int(snap.stem.split("_")[1])
            snap_bank, snap_cfg = load_checkpoint(snap, tokenizer=backbone.text.tokenizer)
            records.extend(embedding_records(backbone, snap_bank, snap_cfg, epoch))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(records, indent=1), encoding="utf-8")
    return path
