"""Dataset indexing (MVTec layout / flat JSONL), sample loading and synthetic blob data."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

ImageRef = Union[str, np.ndarray]


class DatasetError(ValueError):
    pass


@dataclass
class SampleEntry:
    image: ImageRef  # file path, or an in-memory uint8 H x W x 3 array
    mask: ImageRef | None
    label: int
    class_name: str
    defect: str = "good"

    def key(self) -> tuple:
        """Order key that depends only on content, never on list position."""
        if isinstance(self.image, str):
            ref = self.image
        else:
            ref = hashlib.sha1(np.ascontiguousarray(self.image).tobytes()).hexdigest()
        return (self.class_name, self.defect, ref)


@dataclass
class DatasetIndex:
    entries: list[SampleEntry]
    classes: list[str]
    source: str  # "disk" or "synthetic"

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, class_name: str) -> list[SampleEntry]:
        return [e for e in self.entries if e.class_name == class_name]


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 channel-normalised float
    mask: np.ndarray  # H x W in {0, 1}
    label: int


def _list_images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTS)


def _index_mvtec_class(class_dir: Path, class_name: str) -> list[SampleEntry]:
    test_dir = class_dir / "test"
    entries = []
    for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        defect = defect_dir.name
        for img in _list_images(defect_dir):
            if defect == "good":
                entries.append(SampleEntry(str(img), None, 0, class_name, "good"))
                continue
            mask = class_dir / "ground_truth" / defect / f"{img.stem}_mask.png"
            if not mask.is_file():
                raise DatasetError(f"mask referenced by {img} is missing: {mask}")
            entries.append(SampleEntry(str(img), str(mask), 1, class_name, defect))
    return entries


def index_dataset(root: str | os.PathLike, layout: str = "mvtec") -> DatasetIndex:
    """Scan a dataset tree into a deterministically ordered index.

    ``mvtec``: ``<root>/<class>/test/<defect>/*`` with masks at
    ``<root>/<class>/ground_truth/<defect>/<stem>_mask.png``; a root that itself
    contains ``test/`` is treated as a single class.
    ``flat-jsonl``: ``root`` is a ``.jsonl`` file (or a directory holding ``index.jsonl``)
    with records ``{"image", "mask", "label", "class"}``; relative paths resolve
    against the file's directory.
    """
    root = Path(root)
    if not root.exists():
        raise DatasetError(f"dataset root does not exist: {root}")
    if layout == "mvtec":
        if (root / "test").is_dir():
            entries = _index_mvtec_class(root, root.name)
        else:
            entries = []
            for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
                if (class_dir / "test").is_dir():
                    entries.extend(_index_mvtec_class(class_dir, class_dir.name))
    elif layout == "flat-jsonl":
        entries = _index_jsonl(root / "index.jsonl" if root.is_dir() else root)
    else:
        raise DatasetError(f"unknown layout {layout!r}")
    if not entries:
        raise DatasetError(f"no samples found under {root} ({layout} layout)")
    entries.sort(key=SampleEntry.key)
    classes = sorted({e.class_name for e in entries})
    return DatasetIndex(entries, classes, "disk")


def _index_jsonl(path: Path) -> list[SampleEntry]:
    if not path.is_file():
        raise DatasetError(f"flat-jsonl index not found: {path}")
    base = path.parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image, label, cls = rec["image"], int(rec["label"]), str(rec["class"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad record ({exc})") from exc
            if label not in (0, 1):
                raise DatasetError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
            image = str((base / image).resolve()) if not os.path.isabs(image) else image
            if not os.path.isfile(image):
                raise DatasetError(f"{path}:{lineno}: unreadable image {image}")
            mask = rec.get("mask")
            if mask is not None:
                mask = str((base / mask).resolve()) if not os.path.isabs(mask) else mask
                if not os.path.isfile(mask):
                    raise DatasetError(f"{path}:{lineno}: mask referenced but missing: {mask}")
            entries.append(SampleEntry(image, mask, label, cls, "good" if label == 0 else "anomaly"))
    return entries


def _open_rgb(ref: ImageRef) -> Image.Image:
    if isinstance(ref, np.ndarray):
        return Image.fromarray(np.ascontiguousarray(ref, dtype=np.uint8)).convert("RGB")
    try:
        with Image.open(ref) as im:
            return im.convert("RGB")
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {ref}: {exc}") from exc


def _open_mask(ref: ImageRef) -> np.ndarray:
    """Mask as floats in [0, 1]."""
    if isinstance(ref, np.ndarray):
        arr = np.asarray(ref)
    else:
        try:
            with Image.open(ref) as im:
                arr = np.asarray(im.convert("L"))
        except (OSError, ValueError) as exc:
            raise DatasetError(f"cannot decode mask {ref}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr.max(axis=-1)
    arr = arr.astype(np.float64)
    if arr.size and arr.max() > 1:
        arr = arr / 255.0
    return arr


def resize_mask(mask: np.ndarray, resolution: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize then threshold at 0.5; output is uint8 in {0, 1}."""
    h, w = resolution
    im = Image.fromarray(np.asarray(mask, dtype=np.float32), mode="F")
    out = np.asarray(im.resize((w, h), Image.NEAREST))
    return (out >= 0.5).astype(np.uint8)


def load_sample(entry: SampleEntry, resolution: tuple[int, int],
                mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> Sample:
    """Bilinear-resize and channel-normalise the image; nearest-resize and binarise the mask."""
    h, w = resolution
    im = _open_rgb(entry.image)
    src_size = im.size
    img = np.asarray(im.resize((w, h), Image.BILINEAR), dtype=np.float64) / 255.0
    img = (img - np.asarray(mean)) / np.asarray(std)
    if entry.label == 0 or entry.mask is None:
        mask = np.zeros((h, w), dtype=np.uint8)
    else:
        raw = _open_mask(entry.mask)
        if (raw.shape[1], raw.shape[0]) != src_size:
            raise DatasetError(f"mask shape {raw.shape} does not match image size {src_size[::-1]}")
        if not np.isfinite(raw).all():
            raise DatasetError("mask contains non-finite values")
        mask = resize_mask(raw, resolution)
    return Sample(img, mask, int(entry.label))


# -- synthetic blob defects ----------------------------------------------------

def _texture(rng: np.random.Generator, resolution: tuple[int, int]) -> np.ndarray:
    """Smooth random field with values in [0.3, 0.7], slightly tinted per channel."""
    h, w = resolution
    s = max(h, w) / 16.0
    noise = rng.standard_normal((h, w, 3))
    field = gaussian_filter(noise, sigma=(s, s, 0), mode="wrap")
    field = field / (np.abs(field).max() + 1e-12)
    tint = rng.uniform(-0.05, 0.05, size=3)
    return np.clip(0.5 + 0.1 * field + tint, 0.3, 0.7)


def ellipse_mask(resolution: tuple[int, int], cy: float, cx: float, ry: float, rx: float,
                 theta: float) -> np.ndarray:
    h, w = resolution
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _blob_params(rng: np.random.Generator, resolution: tuple[int, int], radius_range: tuple[float, float]):
    h, w = resolution
    lo, hi = radius_range
    n = int(rng.integers(1, 4))
    blobs = []
    for _ in range(n):
        ry = rng.uniform(lo, hi) * h
        rx = rng.uniform(lo, hi) * w
        cy = rng.uniform(0.15, 0.85) * h
        cx = rng.uniform(0.15, 0.85) * w
        theta = rng.uniform(0, np.pi)
        # dark stain, well below the texture's [0.3, 0.7] range
        color = rng.uniform(0.0, 0.1, size=3)
        blobs.append((cy, cx, max(ry, 1.0), max(rx, 1.0), theta, color))
    return blobs


def synth_blobs(n_normal: int, n_anomalous: int, resolution: tuple[int, int] | int = (32, 32),
                seed: int = 0, class_name: str = "blobs",
                radius_range: tuple[float, float] = (0.12, 0.3)) -> DatasetIndex:
    """Deterministic in-memory dataset: smooth textures, anomalies carry 1-3 elliptical blobs.

    Blob radii are drawn from ``radius_range`` as fractions of the image side.
    """
    if n_normal < 0 or n_anomalous < 0:
        raise ValueError("sample counts must be non-negative")
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_normal + n_anomalous):
        anomalous = i >= n_normal
        img = _texture(rng, resolution)
        mask = np.zeros(resolution, dtype=bool)
        if anomalous:
            for cy, cx, ry, rx, theta, color in _blob_params(rng, resolution, radius_range):
                m = ellipse_mask(resolution, cy, cx, ry, rx, theta)
                if not m.any():  # degenerate sliver: paint the centre pixel
                    m[min(int(cy), resolution[0] - 1), min(int(cx), resolution[1] - 1)] = True
                img[m] = color
                mask |= m
        img8 = np.round(img * 255).astype(np.uint8)
        entries.append(SampleEntry(img8, mask.astype(np.uint8) * 255 if anomalous else None,
                                   int(anomalous), class_name, "blob" if anomalous else "good"))
    return DatasetIndex(entries, [class_name], "synthetic")


def write_mvtec(index: DatasetIndex, root: str | os.PathLike) -> Path:
    """Materialise an in-memory index as an MVTec-layout tree of PNG files."""
    root = Path(root)
    counters: dict[tuple[str, str], int] = {}
    for e in index.entries:
        k = (e.class_name, e.defect)
        n = counters.get(k, 0)
        counters[k] = n + 1
        stem = f"{n:03d}"
        img_dir = root / e.class_name / "test" / e.defect
        img_dir.mkdir(parents=True, exist_ok=True)
        _open_rgb(e.image).save(img_dir / f"{stem}.png")
        if e.label == 1 and e.mask is not None:
            gt_dir = root / e.class_name / "ground_truth" / e.defect
            gt_dir.mkdir(parents=True, exist_ok=True)
            m = (_open_mask(e.mask) >= 0.5).astype(np.uint8) * 255
            Image.fromarray(m, mode="L").save(gt_dir / f"{stem}_mask.png")
    return root
