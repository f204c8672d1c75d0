import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from glocalclip import index_dataset, load_sample, synth_blobs
from glocalclip.data import DatasetError, SampleEntry, _blob_params, ellipse_mask, resize_mask, write_mvtec

MVTEC_CLASSES = ["bottle", "cable", "capsule", "carpet", "grid", "hazelnut", "leather", "metal_nut", "pill",
                 "screw", "tile", "toothbrush", "transistor", "wood", "zipper"]


def save_rgb(path, arr=None, size=(16, 16)):
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.full((*size, 3), 128, np.uint8) if arr is None else arr
    Image.fromarray(arr).save(path)
    return path


def save_mask(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)
    return path


def make_class(root, name, defect="scratch"):
    save_rgb(root / name / "test" / "good" / "000.png")
    save_rgb(root / name / "test" / defect / "000.png")
    m = np.zeros((16, 16), np.uint8)
    m[4:8, 4:8] = 255
    save_mask(root / name / "ground_truth" / defect / "000_mask.png", m)


def test_minimal_mvtec_tree(tmp_path):
    make_class(tmp_path, "bottle")
    idx = index_dataset(tmp_path)
    assert len(idx) == 2
    assert sorted(e.label for e in idx.entries) == [0, 1]
    assert idx.classes == ["bottle"] and idx.source == "disk"
    good = next(e for e in idx.entries if e.label == 0)
    bad = next(e for e in idx.entries if e.label == 1)
    assert good.mask is None and good.defect == "good"
    assert bad.mask.endswith("ground_truth/scratch/000_mask.png")


def test_single_class_root(tmp_path):
    make_class(tmp_path, "bottle")
    idx = index_dataset(tmp_path / "bottle")
    assert idx.classes == ["bottle"] and len(idx) == 2


def test_full_benchmark_layout_has_15_classes(tmp_path):
    for name in MVTEC_CLASSES:
        make_class(tmp_path, name)
    (tmp_path / "license.txt").write_text("x")
    idx = index_dataset(tmp_path)
    assert len(idx.classes) == 15
    assert idx.classes == sorted(MVTEC_CLASSES)


def test_scan_is_stable(tmp_path):
    for name in ("b", "a"):
        make_class(tmp_path, name)
    assert index_dataset(tmp_path).entries == index_dataset(tmp_path).entries
    keys = [e.key() for e in index_dataset(tmp_path).entries]
    assert keys == sorted(keys)


def test_index_errors(tmp_path):
    with pytest.raises(DatasetError, match="no samples"):
        index_dataset(tmp_path)
    with pytest.raises(DatasetError, match="does not exist"):
        index_dataset(tmp_path / "nope")
    save_rgb(tmp_path / "c" / "test" / "crack" / "000.png")
    with pytest.raises(DatasetError, match="mask"):
        index_dataset(tmp_path)
    with pytest.raises(DatasetError, match="layout"):
        index_dataset(tmp_path, layout="coco")


def test_jsonl_layout(tmp_path):
    save_rgb(tmp_path / "img" / "a.png")
    save_rgb(tmp_path / "img" / "b.png")
    save_mask(tmp_path / "img" / "b_mask.png", np.full((16, 16), 255))
    recs = [{"image": "img/a.png", "mask": None, "label": 0, "class": "x"},
            {"image": "img/b.png", "mask": "img/b_mask.png", "label": 1, "class": "x"}]
    (tmp_path / "index.jsonl").write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    for root in (tmp_path, tmp_path / "index.jsonl"):
        idx = index_dataset(root, layout="flat-jsonl")
        by_label = sorted(idx.entries, key=lambda e: e.label)
        assert [e.label for e in by_label] == [0, 1]
        assert by_label[0].mask is None
        assert by_label[1].mask == str((tmp_path / "img" / "b_mask.png").resolve())


@pytest.mark.parametrize("rec,msg", [
    ({"image": "missing.png", "mask": None, "label": 0, "class": "x"}, "unreadable"),
    ({"image": "a.png", "mask": "gone.png", "label": 1, "class": "x"}, "missing"),
    ({"image": "a.png", "label": 3, "class": "x"}, "label"),
    ({"mask": None, "label": 0}, "bad record"),
])
def test_jsonl_errors(tmp_path, rec, msg):
    save_rgb(tmp_path / "a.png")
    (tmp_path / "index.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(DatasetError, match=msg):
        index_dataset(tmp_path, layout="flat-jsonl")


def test_empty_jsonl(tmp_path):
    (tmp_path / "index.jsonl").write_text("\n")
    with pytest.raises(DatasetError, match="no samples"):
        index_dataset(tmp_path, layout="flat-jsonl")


def test_white_mask_stays_all_ones(tmp_path):
    img = save_rgb(tmp_path / "a.png", size=(20, 20))
    m = save_mask(tmp_path / "m.png", np.full((20, 20), 255))
    for res in [(7, 7), (20, 20), (64, 48)]:
        s = load_sample(SampleEntry(str(img), str(m), 1, "x"), res)
        assert s.mask.shape == res and s.mask.dtype == np.uint8 and s.mask.min() == 1


def test_normal_entry_gets_zero_mask(tmp_path):
    img = save_rgb(tmp_path / "a.png")
    s = load_sample(SampleEntry(str(img), None, 0, "x"), (8, 8))
    assert s.mask.shape == (8, 8) and not s.mask.any() and s.label == 0


def nearest_oracle(src, out_h, out_w):
    """Pixel-centre nearest neighbour: output (i, j) samples source floor((i + 0.5) * scale)."""
    h, w = src.shape
    out = np.zeros((out_h, out_w), src.dtype)
    for i in range(out_h):
        for j in range(out_w):
            out[i, j] = src[min(int((i + 0.5) * h / out_h), h - 1), min(int((j + 0.5) * w / out_w), w - 1)]
    return out


def test_square_mask_halving(tmp_path):
    src = np.zeros((100, 100), np.uint8)
    src[30:40, 50:60] = 255
    img = save_rgb(tmp_path / "a.png", size=(100, 100))
    m = save_mask(tmp_path / "m.png", src)
    s = load_sample(SampleEntry(str(img), str(m), 1, "x"), (50, 50))
    assert s.mask.sum() == 25
    ys, xs = np.nonzero(s.mask)
    assert (ys.min(), ys.max(), xs.min(), xs.max()) == (15, 19, 25, 29)
    assert np.array_equal(s.mask, (nearest_oracle(src, 50, 50) >= 128).astype(np.uint8))


@settings(max_examples=60, deadline=None)
@given(h=st.integers(2, 40), w=st.integers(2, 40), oh=st.integers(1, 50), ow=st.integers(1, 50),
       seed=st.integers(0, 1000))
def test_resize_mask_binary_property(h, w, oh, ow, seed):
    src = np.random.default_rng(seed).random((h, w))
    out = resize_mask(src, (oh, ow))
    assert out.shape == (oh, ow)
    assert set(np.unique(out)) <= {0, 1}


def test_image_is_normalised(tmp_path):
    img = save_rgb(tmp_path / "a.png", np.full((8, 8, 3), 255, np.uint8))
    s = load_sample(SampleEntry(str(img), None, 0, "x"), (8, 8))
    assert np.allclose(s.image, 1.0)
    s = load_sample(SampleEntry(str(img), None, 0, "x"), (8, 8), mean=(0.25,) * 3, std=(0.25,) * 3)
    assert np.allclose(s.image, 3.0)


def test_decode_and_corrupt_mask_errors(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="decode"):
        load_sample(SampleEntry(str(bad), None, 0, "x"), (8, 8))
    img = save_rgb(tmp_path / "a.png", size=(16, 16))
    m = save_mask(tmp_path / "m.png", np.zeros((10, 12)))
    with pytest.raises(DatasetError, match="does not match"):
        load_sample(SampleEntry(str(img), str(m), 1, "x"), (8, 8))
    m.write_bytes(b"junk")
    with pytest.raises(DatasetError, match="decode"):
        load_sample(SampleEntry(str(img), str(m), 1, "x"), (8, 8))


def test_synth_deterministic():
    a, b = synth_blobs(4, 4, seed=0), synth_blobs(4, 4, seed=0)
    for x, y in zip(a.entries, b.entries):
        assert np.array_equal(x.image, y.image)
        assert (x.mask is None and y.mask is None) or np.array_equal(x.mask, y.mask)
    c = synth_blobs(4, 4, seed=1)
    assert not np.array_equal(a.entries[0].image, c.entries[0].image)


def test_synth_normal_only():
    idx = synth_blobs(5, 0, seed=3)
    assert len(idx) == 5 and all(e.label == 0 and e.mask is None for e in idx.entries)
    assert idx.source == "synthetic"
    for e in idx.entries:
        s = load_sample(e, (32, 32))
        assert not s.mask.any()


def test_synth_masks_match_rasterised_blobs():
    """Replay the generator's random stream and rasterise its blobs independently."""
    from glocalclip.data import _texture

    res, seed, n_normal, n_anom = (32, 32), 11, 3, 6
    idx = synth_blobs(n_normal, n_anom, res, seed=seed)
    rng = np.random.default_rng(seed)
    for i, e in enumerate(idx.entries):
        field = _texture(rng, res)
        if i < n_normal:
            assert e.mask is None
            assert np.array_equal(e.image, np.round(field * 255).astype(np.uint8))
            continue
        expect = np.zeros(res, bool)
        for cy, cx, ry, rx, theta, _ in _blob_params(rng, res, (0.12, 0.3)):
            yy, xx = np.mgrid[0:res[0], 0:res[1]] + 0.5
            u = (np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)) / rx
            v = (-np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy)) / ry
            expect |= u * u + v * v <= 1
        mask = e.mask > 0
        assert mask.sum() >= 1
        assert np.array_equal(mask, expect)
        # every blob pixel differs from the clean texture there
        clean = np.round(field * 255).astype(np.uint8)
        assert (np.abs(e.image.astype(int) - clean.astype(int)).max(axis=-1)[mask] > 0).all()
        assert np.array_equal(e.image[~mask], clean[~mask])


def test_ellipse_mask_circle_area():
    m = ellipse_mask((101, 101), 50.5, 50.5, 20, 20, 0.0)
    assert abs(m.sum() - np.pi * 400) < 40


def test_write_mvtec_round_trip(tmp_path):
    idx = synth_blobs(3, 2, seed=2)
    write_mvtec(idx, tmp_path)
    disk = index_dataset(tmp_path)
    assert len(disk) == 5 and disk.classes == ["blobs"]
    mem = sorted(idx.entries, key=lambda e: e.label)
    got = sorted(disk.entries, key=lambda e: (e.label, e.image))
    for a, b in zip(sorted(load_sample(e, (32, 32)).mask.sum() for e in mem),
                    sorted(load_sample(e, (32, 32)).mask.sum() for e in got)):
        assert a == b
