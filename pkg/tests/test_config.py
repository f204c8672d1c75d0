import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from glocalclip import RunConfig, init_bank, load_checkpoint, load_config, save_checkpoint
from glocalclip.config import CheckpointError, ConfigError, check_against_backbone, read_checkpoint_arrays


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return p


def test_empty_document_gives_published_defaults(tmp_path):
    cfg = load_config(write(tmp_path, {}))
    assert (cfg.normal_prompt_len, cfg.anomaly_prompt_len, cfg.sigma, cfg.lambda_gcl) == (13, 10, 8, 1)
    assert cfg.learning_rate == 0.001
    assert cfg.epochs == 15
    assert cfg.image_resolution == (518, 518)
    assert cfg.patch_tap_layers == (6, 12, 18, 24)
    assert cfg.vv_start_depth == 6
    assert cfg.adam_betas == (0.5, 0.999)
    assert cfg.deep_prompt_len == 4 and cfg.deep_prompt_depth == 12
    assert cfg.margin == 0 and cfg.aupro_fpr_cap == 0.3
    assert cfg.prompt_ordering == "N-A-obj" and cfg.score_fusion == "text_only"
    assert cfg.batch_size == 8


def test_single_override_changes_only_that_key(tmp_path):
    cfg = load_config(write(tmp_path, {"seed": 7}))
    assert cfg == RunConfig().replace(seed=7)
    assert load_config(write(tmp_path, {"seed": 0})) == RunConfig()


def test_depth_beyond_text_tower_rejected(tmp_path):
    cfg = load_config(write(tmp_path, {"deep_prompt_depth": 99}))
    with pytest.raises(ConfigError) as exc:
        cfg.validate(text_layers=12)
    assert exc.value.constraint == "deep_prompt_depth"


def test_backbone_invariants_checked_on_load(tmp_path, backbone):
    with pytest.raises(ConfigError, match="deep_prompt_depth"):
        load_config(write(tmp_path, {"deep_prompt_depth": 99}), backbone=backbone)
    with pytest.raises(ConfigError, match="patch_tap_layers"):
        check_against_backbone(RunConfig.toy(patch_tap_layers=[2, 5]), backbone)
    with pytest.raises(ConfigError, match="image_resolution"):
        check_against_backbone(RunConfig.toy(image_resolution=[30, 30]), backbone)
    check_against_backbone(RunConfig.toy(), backbone)


@pytest.mark.parametrize("doc,constraint", [
    ({"vv_start_depth": 30}, "vv_start_depth"),
    ({"patch_tap_layers": [12, 6]}, "patch_tap_layers"),
    ({"margin": -1}, "margin"),
    ({"prompt_ordering": "obj-N-A"}, "prompt_ordering"),
    ({"adam_betas": [0.5, 1.0]}, "adam_betas"),
    ({"aupro_fpr_cap": 0}, "aupro_fpr_cap"),
    ({"normal_prompt_len": 0}, "normal_prompt_len"),
])
def test_invariant_violations_are_named(tmp_path, doc, constraint):
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, doc))
    assert exc.value.constraint == constraint
    assert constraint in str(exc.value)


def test_context_length_invariant():
    cfg = RunConfig(normal_prompt_len=40, anomaly_prompt_len=33)
    with pytest.raises(ConfigError, match="context_length"):
        cfg.validate(context_length=77)
    RunConfig().validate(text_layers=12, vision_layers=24, context_length=77)


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.json")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(write(tmp_path, "{not json"))
    with pytest.raises(ConfigError, match="unknown config keys"):
        load_config(write(tmp_path, {"sigmaa": 3}))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, [1, 2]))


def test_json_round_trip():
    cfg = RunConfig.toy(seed=3, margin=0.5)
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_checkpoint_round_trip_is_bit_exact(tmp_path, backbone, toy_cfg):
    bank = init_bank(toy_cfg, backbone.text)
    path = save_checkpoint(bank, tmp_path / "ck.npz", toy_cfg)
    loaded, cfg = load_checkpoint(path)
    assert cfg == toy_cfg
    a, b = bank.arrays(), loaded.arrays()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype
        assert a[k].tobytes() == b[k].tobytes()


def test_checkpoint_key_scheme(tmp_path, backbone, toy_cfg):
    path = save_checkpoint(init_bank(toy_cfg, backbone.text), tmp_path / "ck.npz", toy_cfg)
    with np.load(path) as npz:
        keys = set(npz.files)
        shapes = {k: npz[k].shape for k in npz.files}
    w = backbone.text.width
    assert keys == {"prompt.global.normal", "prompt.global.anomaly", "prompt.local.normal",
                    "prompt.local.anomaly", "deep.layer.1", "deep.layer.2", "config"}
    assert shapes["prompt.global.normal"] == (13, w)
    assert shapes["prompt.local.anomaly"] == (10, w)
    assert shapes["deep.layer.2"] == (4, w)


def _rewrite(tmp_path, path, mutate):
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    mutate(arrays)
    out = tmp_path / "bad.npz"
    np.savez(out, **arrays)
    return out


def test_missing_key_rejected(tmp_path, backbone, toy_cfg):
    path = save_checkpoint(init_bank(toy_cfg, backbone.text), tmp_path / "ck.npz", toy_cfg)
    bad = _rewrite(tmp_path, path, lambda a: a.pop("prompt.local.anomaly"))
    with pytest.raises(CheckpointError, match="prompt.local.anomaly"):
        load_checkpoint(bad)


def test_shape_mismatch_rejected(tmp_path, backbone, toy_cfg):
    path = save_checkpoint(init_bank(toy_cfg, backbone.text), tmp_path / "ck.npz", toy_cfg)

    def drop_row(a):
        a["prompt.global.normal"] = a["prompt.global.normal"][:12]

    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_checkpoint(_rewrite(tmp_path, path, drop_row))


def test_checkpoint_without_config_rejected(tmp_path, backbone, toy_cfg):
    path = save_checkpoint(init_bank(toy_cfg, backbone.text), tmp_path / "ck.npz", toy_cfg)
    with pytest.raises(CheckpointError, match="config"):
        read_checkpoint_arrays(_rewrite(tmp_path, path, lambda a: a.pop("config")))


def test_seeded_initialisation_is_reproducible(backbone):
    for seed in (0, 5):
        cfg = RunConfig.toy(seed=seed)
        a, b = init_bank(cfg, backbone.text).arrays(), init_bank(cfg, backbone.text).arrays()
        assert all(np.array_equal(a[k], b[k]) for k in a)
    a = init_bank(RunConfig.toy(seed=0), backbone.text).arrays()
    b = init_bank(RunConfig.toy(seed=1), backbone.text).arrays()
    assert not np.array_equal(a["prompt.global.normal"], b["prompt.global.normal"])


@settings(max_examples=40, deadline=None)
@given(e=st.integers(1, 20), a=st.integers(1, 20), p=st.integers(1, 8), depth=st.integers(1, 2),
       seed=st.integers(0, 2**31 - 1))
def test_round_trip_property(tmp_path_factory, backbone, e, a, p, depth, seed):
    cfg = RunConfig.toy(normal_prompt_len=e, anomaly_prompt_len=a, deep_prompt_len=p,
                        deep_prompt_depth=depth, seed=seed)
    bank = init_bank(cfg, backbone.text)
    path = save_checkpoint(bank, tmp_path_factory.mktemp("rt") / "c.npz", cfg)
    loaded, _ = load_checkpoint(path)
    for k, v in bank.arrays().items():
        assert np.array_equal(v, loaded.arrays()[k])
    for (_, x), (_, y) in zip(bank.named_parameters(), loaded.named_parameters()):
        assert torch.equal(x, y)
