"""Experiment configuration: JSON schema, defaults, canonical hashing, and
resolution into the runtime objects the trainer consumes.

The hash is taken over the canonical JSON encoding (sorted keys, tight
separators), so two files that differ only in key order or whitespace get
the same run directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import jsonschema

from .methods import METHOD_IDS, ModelConfig, default_mask_ranges
from .selfdistill import SCHEDULE_STRATEGIES, ScheduleSpec, TrainLoopConfig
from .synthworld import WorldSpec, default_world_spec, world_spec_from_dict, world_spec_to_dict


class ConfigError(ValueError):
    """The configuration document failed validation; message carries the path."""


_RATIO_RANGE = {
    "type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
    "minItems": 2, "maxItems": 2,
}

_WORLD_SCHEMA = {
    "type": "object",
    "properties": {
        "num_classes": {"type": "integer", "minimum": 1},
        "num_sensors": {"type": "integer", "minimum": 1},
        "sensor_groups": {
            "type": "object", "minProperties": 1,
            "additionalProperties": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        },
        "frames_per_clip": {"type": "integer", "minimum": 1},
        "feature_dim_raw": {"type": "integer", "minimum": 1},
        "coverage": {"type": "array",
                     "items": {"type": "array", "items": {"type": "integer", "enum": [0, 1]}}},
        "redundancy_pairs": {"type": "array",
                             "items": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                       "minItems": 2, "maxItems": 2}},
        "background_sensors": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "noise_sigma": {"type": "number", "minimum": 0},
        "event_rate": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "min_events": {"type": "integer", "minimum": 1},
        "max_concurrent": {"type": "integer", "minimum": 1},
        "event_len_range": {"type": "array", "items": {"type": "integer", "minimum": 1},
                            "minItems": 2, "maxItems": 2},
        "event_amp_range": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                            "minItems": 2, "maxItems": 2},
        "fragment_keep": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "rendering": {"type": "string", "enum": ["linear", "energy"]},
        "sign_flip_prob": {"type": "number", "minimum": 0, "maximum": 1},
        "coverage_gain": {"type": ["array", "null"],
                          "items": {"type": "array", "items": {"type": "number", "minimum": 0}}},
        "signature_share": {
            "type": "array",
            "items": {"type": "array", "minItems": 3, "maxItems": 3},
        },
        "seed": {"type": "integer", "minimum": 0},
    },
    "required": ["num_classes", "num_sensors", "sensor_groups", "frames_per_clip",
                 "feature_dim_raw", "coverage", "seed"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "world": _WORLD_SCHEMA,
        "data": {
            "type": "object",
            "properties": {
                "train": {"type": "integer", "minimum": 1},
                "val": {"type": "integer", "minimum": 1},
                "test": {"type": "integer", "minimum": 1},
            },
            "required": ["train", "val", "test"],
            "additionalProperties": False,
        },
        "model": {
            "type": "object",
            "properties": {
                "embed_dim": {"type": "integer", "minimum": 1},
                "num_blocks": {"type": "integer", "minimum": 0},
                "num_heads": {"type": "integer", "minimum": 1},
                "ffn_hidden": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "training": {
            "type": "object",
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "max_epoch": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr_decay_mode": {"type": "string", "enum": ["anneal", "literal", "none"]},
                "ema_decay": {"type": "number", "minimum": 0, "maximum": 1},
                "normalize_by_masked_count": {"type": "boolean"},
                "probe_epochs": {"type": "integer", "minimum": 1},
                "schedule": {
                    "type": "object",
                    "properties": {
                        "strategy": {"type": "string", "enum": list(SCHEDULE_STRATEGIES)},
                        "lambda0": {"type": "number", "minimum": 0},
                        "gamma": {"type": "number", "minimum": 1},
                    },
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "mask_ranges": {
            "type": ["object", "null"],
            "additionalProperties": _RATIO_RANGE,
        },
        "eval": {
            "type": "object",
            "properties": {
                "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "tie_seed": {"type": "integer", "minimum": 0},
                "sweep_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                "minItems": 1},
            },
            "additionalProperties": False,
        },
        "methods": {"type": "array", "items": {"type": "string", "enum": list(METHOD_IDS)},
                    "minItems": 1},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
    },
    "required": ["world", "data"],
    "additionalProperties": False,
}


def default_config() -> dict:
    """The reference configuration as a plain JSON-ready document."""
    return {
        "world": world_spec_to_dict(default_world_spec()),
        "data": {"train": 80, "val": 10, "test": 10},
        "model": {"embed_dim": 64, "num_blocks": 2, "num_heads": 4, "ffn_hidden": 256},
        "training": {
            "lr": 0.001, "weight_decay": 0.001, "max_epoch": 50, "batch_size": 4,
            "lr_decay_mode": "anneal", "ema_decay": 0.95,
            "normalize_by_masked_count": False, "probe_epochs": 20,
            "schedule": {"strategy": "increase", "lambda0": 0.01, "gamma": 1.05},
        },
        "mask_ranges": None,
        "eval": {"threshold": 0.5, "tie_seed": 0, "sweep_sizes": [1, 2]},
        "methods": ["F"],
        "seeds": [1, 2, 3],
    }


def validate_config(doc: dict) -> None:
    """Raise ConfigError naming the offending path on the first violation."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{e.json_path}: {e.message}")


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc: dict) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def world_hash(doc: dict) -> str:
    """Hash of the parts that determine dataset bytes: world spec + sizes."""
    return hashlib.sha256(canonical_json(
        {"world": doc["world"], "data": doc["data"]}).encode("utf-8")).hexdigest()


@dataclass
class ResolvedConfig:
    doc: dict
    world: WorldSpec
    sizes: tuple[int, int, int]
    model: ModelConfig
    loop: TrainLoopConfig
    mask_ranges: dict[str, tuple[float, float]]
    probe_epochs: int
    threshold: float
    tie_seed: int
    sweep_sizes: tuple[int, ...]
    methods: tuple[str, ...]
    seeds: tuple[int, ...]

    @property
    def hash(self) -> str:
        return config_hash(self.doc)


def resolve_config(doc: dict) -> ResolvedConfig:
    """Validate, then materialize runtime objects with defaults filled in."""
    validate_config(doc)
    base = default_config()
    world = world_spec_from_dict(doc["world"])
    data = doc["data"]
    model_doc = {**base["model"], **doc.get("model", {})}
    train_doc = {**base["training"], **doc.get("training", {})}
    sched_doc = {**base["training"]["schedule"], **train_doc.get("schedule", {})}
    eval_doc = {**base["eval"], **doc.get("eval", {})}
    schedule = ScheduleSpec(strategy=sched_doc["strategy"], lambda0=sched_doc["lambda0"],
                            gamma=sched_doc["gamma"], max_epoch=train_doc["max_epoch"])
    loop = TrainLoopConfig(
        lr=train_doc["lr"], weight_decay=train_doc["weight_decay"],
        max_epoch=train_doc["max_epoch"], batch_size=train_doc["batch_size"],
        lr_decay_mode=train_doc["lr_decay_mode"], schedule=schedule,
        ema_decay=train_doc["ema_decay"],
        normalize_by_masked_count=train_doc["normalize_by_masked_count"])
    ranges_doc = doc.get("mask_ranges")
    if ranges_doc is None:
        mask_ranges = default_mask_ranges(world)
    else:
        unknown = set(ranges_doc) - set(world.sensor_groups)
        if unknown:
            raise ConfigError(f"$.mask_ranges: unknown group(s) {sorted(unknown)}")
        mask_ranges = {g: (float(lo), float(hi)) for g, (lo, hi) in ranges_doc.items()}
        for g in world.sensor_groups:
            mask_ranges.setdefault(g, (0.0, 0.0))
    for g, (lo, hi) in mask_ranges.items():
        if lo > hi:
            raise ConfigError(f"$.mask_ranges.{g}: lower bound {lo} exceeds upper {hi}")
    return ResolvedConfig(
        doc=doc, world=world, sizes=(data["train"], data["val"], data["test"]),
        model=ModelConfig(**model_doc), loop=loop, mask_ranges=mask_ranges,
        probe_epochs=train_doc["probe_epochs"],
        threshold=eval_doc["threshold"], tie_seed=eval_doc["tie_seed"],
        sweep_sizes=tuple(eval_doc["sweep_sizes"]),
        methods=tuple(doc.get("methods", base["methods"])),
        seeds=tuple(doc.get("seeds", base["seeds"])))


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"$: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError("$: top level must be an object")
    return doc
