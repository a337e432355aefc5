"""Configuration schema, canonical hashing, and resolution into runtime objects."""

import json

import pytest

from meldlab.config import (
    ConfigError,
    canonical_json,
    config_hash,
    default_config,
    load_config,
    resolve_config,
    validate_config,
    world_hash,
)
from meldlab.methods import default_mask_ranges
from meldlab.synthworld import world_spec_to_dict

from fd_cases import tiny_world


def minimal_doc():
    return {
        "world": world_spec_to_dict(tiny_world(seed=3)),
        "data": {"train": 8, "val": 2, "test": 2},
    }


# -- validation ---------------------------------------------------------------------


def test_default_config_validates_and_resolves():
    doc = default_config()
    validate_config(doc)
    rc = resolve_config(doc)
    assert rc.sizes == (80, 10, 10)
    assert rc.world.num_classes == 6
    assert rc.world.num_sensors == 8
    assert rc.methods == ("F",)


def test_missing_required_section_is_reported():
    doc = minimal_doc()
    del doc["data"]
    with pytest.raises(ConfigError, match="data"):
        validate_config(doc)


def test_errors_name_the_json_path():
    doc = minimal_doc()
    doc["data"]["train"] = "ten"
    with pytest.raises(ConfigError, match=r"\$\.data\.train"):
        validate_config(doc)


def test_unknown_top_level_key_is_rejected():
    doc = minimal_doc()
    doc["typo"] = 1
    with pytest.raises(ConfigError, match="typo"):
        validate_config(doc)


def test_unknown_method_id_is_rejected():
    doc = minimal_doc()
    doc["methods"] = ["Z"]
    with pytest.raises(ConfigError, match=r"\$\.methods"):
        validate_config(doc)


def test_unknown_schedule_strategy_is_rejected():
    doc = minimal_doc()
    doc["training"] = {"schedule": {"strategy": "wobble"}}
    with pytest.raises(ConfigError, match="strategy"):
        validate_config(doc)


def test_mask_ratio_outside_unit_interval_is_rejected():
    doc = minimal_doc()
    doc["mask_ranges"] = {"a": [0.0, 1.5]}
    with pytest.raises(ConfigError, match=r"\$\.mask_ranges"):
        validate_config(doc)


# -- canonical encoding and hashing -------------------------------------------------


def test_canonical_json_sorts_keys_and_drops_whitespace():
    assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'


def test_config_hash_ignores_key_order_but_not_values():
    doc = default_config()
    shuffled = json.loads(json.dumps(doc))
    shuffled = dict(reversed(list(shuffled.items())))
    assert config_hash(doc) == config_hash(shuffled)
    changed = json.loads(json.dumps(doc))
    changed["training"]["lr"] = 0.002
    assert config_hash(doc) != config_hash(changed)


def test_world_hash_tracks_only_the_dataset_inputs():
    doc = default_config()
    tweaked = json.loads(json.dumps(doc))
    tweaked["training"]["lr"] = 0.5
    assert world_hash(doc) == world_hash(tweaked)
    resized = json.loads(json.dumps(doc))
    resized["data"]["train"] = 81
    assert world_hash(doc) != world_hash(resized)


# -- resolution ---------------------------------------------------------------------


def test_minimal_document_resolves_with_reference_defaults():
    rc = resolve_config(minimal_doc())
    assert rc.sizes == (8, 2, 2)
    assert (rc.model.embed_dim, rc.model.num_blocks,
            rc.model.num_heads, rc.model.ffn_hidden) == (64, 2, 4, 256)
    assert rc.loop.lr == 0.001
    assert rc.loop.max_epoch == 50
    assert rc.loop.schedule.strategy == "increase"
    assert rc.loop.schedule.lambda0 == 0.01
    assert rc.loop.schedule.gamma == 1.05
    assert rc.loop.schedule.max_epoch == 50
    assert rc.probe_epochs == 20
    assert rc.threshold == 0.5
    assert rc.sweep_sizes == (1, 2)
    assert rc.methods == ("F",)
    assert rc.seeds == (1, 2, 3)
    assert rc.hash == config_hash(rc.doc)


def test_schedule_horizon_follows_the_training_epochs():
    doc = minimal_doc()
    doc["training"] = {"max_epoch": 7}
    rc = resolve_config(doc)
    assert rc.loop.max_epoch == 7
    assert rc.loop.schedule.max_epoch == 7


def test_missing_mask_ranges_fall_back_to_the_world_default():
    rc = resolve_config(minimal_doc())
    assert rc.mask_ranges == default_mask_ranges(rc.world)


def test_partial_mask_ranges_pad_missing_groups_with_zero():
    doc = minimal_doc()
    doc["mask_ranges"] = {"a": [0.1, 0.3]}
    rc = resolve_config(doc)
    assert rc.mask_ranges == {"a": (0.1, 0.3), "b": (0.0, 0.0)}


def test_mask_ranges_for_an_unknown_group_are_rejected():
    doc = minimal_doc()
    doc["mask_ranges"] = {"z": [0.1, 0.3]}
    with pytest.raises(ConfigError, match="unknown group"):
        resolve_config(doc)


def test_inverted_mask_range_is_rejected():
    doc = minimal_doc()
    doc["mask_ranges"] = {"a": [0.4, 0.1]}
    with pytest.raises(ConfigError, match="lower bound"):
        resolve_config(doc)


# -- file loading -------------------------------------------------------------------


def test_load_config_round_trips_a_valid_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(minimal_doc()), encoding="utf-8")
    assert load_config(path) == minimal_doc()


def test_load_config_rejects_broken_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(path)


def test_load_config_rejects_non_object_documents(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError, match="top level"):
        load_config(path)


def test_load_config_missing_file_raises_file_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.json")
