"""Image-level AUROC/AP and pixel-level AUROC/AUPRO."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import label as cc_label
from scipy.stats import rankdata

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class MetricError(ValueError):
    pass


def _flat(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores vs {y.size} labels")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate: P(s+ > s-) + P(s+ == s-) / 2."""
    s, y = _flat(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum of (recall step x precision) over descending thresholds, ties grouped."""
    s, y = _flat(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive label")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    precision = tp[ends] / (ends + 1)
    recall = tp[ends] / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _capped_area(x: np.ndarray, y: np.ndarray, cap: float) -> float:
    """Trapezoidal area under a non-decreasing-x curve on [0, cap], divided by cap."""
    inside = x <= cap
    xs, ys = x[inside], y[inside]
    area = float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))
    if xs[-1] < cap and xs.size < x.size:
        x0, y0 = xs[-1], ys[-1]
        x1, y1 = x[xs.size], y[xs.size]
        y_cap = y0 + (y1 - y0) * (cap - x0) / (x1 - x0)
        area += (cap - x0) * (y0 + y_cap) / 2.0
    return area / cap


def pro_curve(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-region-overlap vs false-positive-rate curve over every distinct map value.

    Regions are the 8-connected components of each mask. Returns ``(fpr, pro)``
    starting at ``(0, 0)`` and ending at ``(1, 1)``.
    """
    values, pro_w, is_neg = [], [], []
    n_regions = 0
    for m, gt in zip(maps, masks):
        m = np.asarray(m, dtype=np.float64)
        gt = np.asarray(gt).astype(bool)
        if m.shape != gt.shape:
            raise MetricError(f"map {m.shape} and mask {gt.shape} differ in shape")
        lab, n = cc_label(gt, structure=EIGHT_CONNECTED)
        areas = np.bincount(lab.ravel(), minlength=n + 1).astype(np.float64)
        w = np.zeros(lab.shape)
        w[gt] = 1.0 / areas[lab[gt]]
        values.append(m.ravel())
        pro_w.append(w.ravel())
        is_neg.append(~gt.ravel())
        n_regions += n
    values = np.concatenate(values)
    pro_w = np.concatenate(pro_w)
    is_neg = np.concatenate(is_neg)
    n_neg = int(is_neg.sum())
    if n_regions == 0:
        raise MetricError("AUPRO needs at least one anomalous pixel")
    if n_neg == 0:
        raise MetricError("AUPRO needs at least one normal pixel")
    order = np.argsort(-values, kind="mergesort")
    values = values[order]
    ends = np.r_[np.flatnonzero(np.diff(values)), values.size - 1]
    fpr = np.cumsum(is_neg[order])[ends] / n_neg
    pro = np.cumsum(pro_w[order])[ends] / n_regions
    return np.r_[0.0, fpr], np.r_[0.0, pro]


def aupro(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], fpr_cap: float = 0.3) -> float:
    """Area under the PRO curve for FPR in [0, fpr_cap], normalised by fpr_cap."""
    if not 0 < fpr_cap <= 1:
        raise MetricError("fpr_cap must lie in (0, 1]")
    fpr, pro = pro_curve(maps, masks)
    return float(np.clip(_capped_area(fpr, pro, fpr_cap), 0.0, 1.0))


@dataclass
class ClassMetrics:
    image_auroc: Optional[float] = None
    image_ap: Optional[float] = None
    pixel_auroc: Optional[float] = None
    pixel_aupro: Optional[float] = None
    n_samples: int = 0


METRIC_NAMES = ("image_auroc", "image_ap", "pixel_auroc", "pixel_aupro")


def class_metrics(scores, labels, maps, masks, fpr_cap: float = 0.3) -> ClassMetrics:
    """Metrics for one class; any metric whose labels/masks are one-sided is left as ``None``."""
    labels = np.asarray(labels).astype(int)
    out = ClassMetrics(n_samples=int(labels.size))
    if 0 < labels.sum() < labels.size:
        out.image_auroc = auroc(scores, labels)
    if labels.sum() > 0:
        out.image_ap = average_precision(scores, labels)
    if maps is not None and len(maps):
        pix = np.concatenate([np.asarray(m).ravel() for m in maps])
        gt = np.concatenate([np.asarray(m).ravel() for m in masks]).astype(bool)
        if 0 < gt.sum() < gt.size:
            out.pixel_auroc = auroc(pix, gt)
            out.pixel_aupro = aupro(maps, masks, fpr_cap)
    return out


@dataclass
class EvalReport:
    per_class: dict[str, ClassMetrics]
    sample_count: int
    mean: dict[str, Optional[float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.mean:
            self.mean = {}
            for name in METRIC_NAMES:
                vals = [getattr(m, name) for m in self.per_class.values() if getattr(m, name) is not None]
                self.mean[name] = float(np.mean(vals)) if vals else None

    @property
    def image_auroc(self):
        return self.mean["image_auroc"]

    @property
    def image_ap(self):
        return self.mean["image_ap"]

    @property
    def pixel_auroc(self):
        return self.mean["pixel_auroc"]

    @property
    def pixel_aupro(self):
        return self.mean["pixel_aupro"]

    def to_dict(self) -> dict:
        return {
            "mean": dict(self.mean),
            "per_class": {k: asdict(v) for k, v in sorted(self.per_class.items())},
            "sample_count": self.sample_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        per_class = {k: ClassMetrics(**v) for k, v in d["per_class"].items()}
        return cls(per_class, int(d["sample_count"]), dict(d["mean"]))

    def to_table(self) -> str:
        """Plain-text table pairing image (AUROC, AP) with pixel (AUROC, PRO), in percent."""
        def pair(a, b):
            fmt = lambda v: "  -  " if v is None else f"{100 * v:5.1f}"
            return f"({fmt(a)}, {fmt(b)})"

        rows = [(name, m.n_samples, m) for name, m in sorted(self.per_class.items())]
        width = max([len("class"), len("mean")] + [len(r[0]) for r in rows])
        lines = [f"{'class':<{width}}  {'n':>5}  {'image (AUROC, AP)':>18}  {'pixel (AUROC, PRO)':>18}"]
        for name, n, m in rows:
            lines.append(f"{name:<{width}}  {n:>5}  {pair(m.image_auroc, m.image_ap):>18}  "
                         f"{pair(m.pixel_auroc, m.pixel_aupro):>18}")
        mn = self.mean
        lines.append(f"{'mean':<{width}}  {self.sample_count:>5}  {pair(mn['image_auroc'], mn['image_ap']):>18}  "
                     f"{pair(mn['pixel_auroc'], mn['pixel_aupro']):>18}")
        return "\n".join(lines)
