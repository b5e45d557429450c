"""Config document parsing, canonical serialization, and hashing."""

import json

import pytest

from pmlm.config import (
    ConfigError,
    Paths,
    RunConfig,
    config_hash,
    default_run_config,
    load_run_config,
    parse_run_config,
    serialize_run_config,
)
from pmlm.model import ModelConfig


def test_default_round_trip():
    cfg = default_run_config()
    doc = json.loads(serialize_run_config(cfg))
    assert parse_run_config(doc) == cfg


def test_serialization_is_canonical():
    text = serialize_run_config(default_run_config())
    assert text.endswith("\n")
    doc = json.loads(text)
    assert text == json.dumps(doc, sort_keys=True, indent=2) + "\n"


def test_masking_is_a_top_level_group():
    doc = json.loads(serialize_run_config(default_run_config()))
    assert set(doc) == {"model", "train", "masking", "finetune", "paths"}
    assert "masking" not in doc["train"]
    assert doc["masking"]["token_mask_pct"] == 0.15


def test_empty_document_gives_defaults():
    assert parse_run_config({}) == default_run_config()


def test_partial_document_keeps_other_defaults():
    cfg = parse_run_config({"model": {"hidden_size": 64, "num_heads": 2}})
    assert cfg.model.hidden_size == 64
    assert cfg.model.vocab_size == ModelConfig().vocab_size
    assert cfg.train == default_run_config().train


def test_unknown_top_level_group_is_named():
    with pytest.raises(ConfigError, match="trian"):
        parse_run_config({"trian": {}})


@pytest.mark.parametrize(
    "doc,needle",
    [
        ({"model": {"hiden_size": 64}}, r"model.*hiden_size"),
        ({"train": {"lr": 0.1}}, r"train.*lr"),
        ({"masking": {"pct": 0.1}}, r"masking.*pct"),
        ({"finetune": {"dropout": 0.1}}, r"finetune.*dropout"),
        ({"paths": {"output": "x"}}, r"paths.*output"),
        ({"train": {"phase1": {"len": 8}}}, r"train\.phase1.*len"),
        ({"masking": {"token_split": {"mask_pct": 1.0}}}, r"masking\.token_split.*mask_pct"),
    ],
)
def test_unknown_keys_are_named_at_every_level(doc, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_run_config(doc)


def test_masking_under_train_is_rejected_with_guidance():
    with pytest.raises(ConfigError, match="top-level masking group"):
        parse_run_config({"train": {"masking": {"token_mask_pct": 0.2}}})


def test_group_must_be_an_object():
    with pytest.raises(ConfigError, match="model.*object"):
        parse_run_config({"model": 3})


def test_root_must_be_an_object():
    with pytest.raises(ConfigError, match="root"):
        parse_run_config([1, 2])


def test_semantic_errors_become_config_errors():
    with pytest.raises(ConfigError, match="divisible"):
        parse_run_config({"model": {"hidden_size": 30, "num_heads": 4}})
    with pytest.raises(ConfigError, match="momentum"):
        parse_run_config({"train": {"momentum": 1.5}})


def test_load_run_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "nope.json")


def test_load_run_config_bad_json(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_run_config(path)


def test_load_run_config_round_trip(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(serialize_run_config(default_run_config()))
    assert load_run_config(path) == default_run_config()


def test_config_hash_shape_and_stability():
    cfg = default_run_config()
    h = config_hash(cfg)
    assert len(h) == 8
    assert all(c in "0123456789abcdef" for c in h)
    assert config_hash(cfg) == h
    reparsed = parse_run_config(json.loads(serialize_run_config(cfg)))
    assert config_hash(reparsed) == h


def test_config_hash_tracks_values():
    a = default_run_config()
    b = parse_run_config({"train": {"seed": 1}})
    assert config_hash(a) != config_hash(b)


def test_paths_defaults():
    p = Paths()
    assert p.corpus is None and p.vocab is None and p.out_dir == "runs"
    assert RunConfig().paths == p
