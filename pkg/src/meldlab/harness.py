"""Experiment harness: deterministic end-to-end runs on top of the library.

A run is keyed by (config hash, method, seed). Rerunning the same key
rewrites the same directory with byte-identical artifacts. Datasets are
derived from the world spec alone, so every method and seed sees the same
clips; set MELD_LAB_CACHE to share generated datasets across processes.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from statistics import mean, stdev

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .classifier import class_weights, write_preds_jsonl
from .config import ResolvedConfig, load_config, resolve_config, world_hash
from .infotheory import classify_roles, discretize_world, mutual_information
from .metrics import (MetricsReport, score_detection, score_tagging,
                      sensor_reduction_sweep, write_sweep_csv)
from .methods import MethodArtifacts, build_model, train_method
from .selfdistill import EpochStats, validation_loss
from .synthworld import DatasetError, DatasetSplit, generate_dataset, load_dataset, save_dataset

CACHE_ENV = "MELD_LAB_CACHE"


def dataset_for(rc: ResolvedConfig) -> DatasetSplit:
    """Generate the dataset, or reuse a cached copy keyed by its content hash."""
    cache = os.environ.get(CACHE_ENV)
    if not cache:
        return generate_dataset(rc.world, rc.sizes)
    key = world_hash(rc.doc)[:16]
    dest = Path(cache) / key
    if (dest / "checksums.txt").exists():
        try:
            return load_dataset(dest)
        except DatasetError:
            shutil.rmtree(dest)  # stale or corrupt cache entry; rebuild
    split = generate_dataset(rc.world, rc.sizes)
    tmp = Path(cache) / f"{key}.tmp-{os.getpid()}"
    tmp.mkdir(parents=True, exist_ok=True)
    save_dataset(split, tmp)
    try:
        os.rename(tmp, dest)
    except OSError:
        shutil.rmtree(tmp)  # another process won the race
    return split


def run_seed(seed: int, config_digest: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, int(config_digest[:8], 16)]))


def _json_dump(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


HISTORY_COLUMNS = ("epoch", "step", "loss", "task_loss", "distill_loss",
                   "lambda", "lr", "val_task_loss")


def write_history_csv(path, rows: list[EpochStats]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(HISTORY_COLUMNS) + "\n")
        for r in rows:
            f.write(f"{r.epoch},{r.step},{r.loss!r},{r.task_loss!r},"
                    f"{r.distill!r},{r.lam!r},{r.lr!r},{r.val_task_loss!r}\n")


@dataclass
class RunRecord:
    method: str
    seed: int
    config_hash: str
    run_dir: str
    wall_time_sec: float
    best_epoch: int
    best_val: float
    steps: int
    metrics: dict


def run_dir_for(out_root, rc: ResolvedConfig, method: str, seed: int) -> Path:
    return Path(out_root) / f"{rc.hash[:12]}-{method}-s{seed}"


def evaluate_split(model, split: DatasetSplit, rc: ResolvedConfig) -> dict:
    """Score the test split and recompute the unmasked validation loss."""
    frame_scores = model.predict(split.test, batch_size=rc.loop.batch_size)
    bag_scores = frame_scores.mean(axis=1)
    frame_labels = np.stack([c.strong_labels for c in split.test])
    weak_labels = np.stack([c.weak_label for c in split.test])
    detection = score_detection(frame_scores, frame_labels, rc.tie_seed)
    tagging = score_tagging(bag_scores, weak_labels, rc.tie_seed)
    val = validation_loss(model, split.val, class_weights(split.class_counts),
                          rc.loop.batch_size)
    return {"detection": detection, "tagging": tagging, "validation_loss": val,
            "frame_scores": frame_scores, "bag_scores": bag_scores}


def _metrics_doc(detection: MetricsReport, tagging: MetricsReport, val: float) -> dict:
    return {"detection": detection.to_dict(), "tagging": tagging.to_dict(),
            "validation_loss": val}


def run_training(doc: dict, method: str, seed: int, out_root,
                 split: DatasetSplit | None = None) -> RunRecord:
    """Train one (method, seed) pair and write the full artifact set."""
    rc = resolve_config(doc)
    run_dir = run_dir_for(out_root, rc, method, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    if split is None:
        split = dataset_for(rc)
    rng = run_seed(seed, rc.hash)
    t0 = time.monotonic()
    art = train_method(method, split, rc.model, rc.loop, rng,
                       probe_epochs=rc.probe_epochs, mask_ranges=rc.mask_ranges)
    wall = time.monotonic() - t0

    _json_dump(run_dir / "config.json", doc)
    write_history_csv(run_dir / "history.csv", art.result.history)
    if art.pretrain_history is not None:
        write_history_csv(run_dir / "pretrain.csv", art.pretrain_history)
    save_checkpoint(art.result.best_params, run_dir / "best.ckpt")
    save_checkpoint(art.result.final_params, run_dir / "last.ckpt")
    _json_dump(run_dir / "best.meta.json", {
        "epoch": art.result.best_epoch, "val_task_loss": art.result.best_val,
        "seed": seed, "method": method, "config_hash": rc.hash})

    art.model.load_params(art.result.best_params)
    scored = evaluate_split(art.model, split, rc)
    _json_dump(run_dir / "metrics.json",
               _metrics_doc(scored["detection"], scored["tagging"], scored["validation_loss"]))
    write_preds_jsonl(run_dir / "preds.jsonl", [c.clip_id for c in split.test],
                      scored["bag_scores"], scored["frame_scores"], alpha=rc.threshold)

    record = RunRecord(
        method=method, seed=seed, config_hash=rc.hash, run_dir=str(run_dir),
        wall_time_sec=wall, best_epoch=art.result.best_epoch,
        best_val=art.result.best_val, steps=art.result.steps,
        metrics=_metrics_doc(scored["detection"], scored["tagging"],
                             scored["validation_loss"]))
    _json_dump(run_dir / "run_record.json", {
        "method": method, "seed": seed, "config_hash": rc.hash,
        "wall_time_sec": wall, "best_epoch": record.best_epoch,
        "best_val": record.best_val, "steps": record.steps})
    return record


def _restore_run(run_dir) -> tuple[ResolvedConfig, DatasetSplit, object, dict]:
    """Rebuild the trained model for a finished run directory."""
    run_dir = Path(run_dir)
    doc = load_config(run_dir / "config.json")
    rc = resolve_config(doc)
    with open(run_dir / "best.meta.json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    split = dataset_for(rc)
    store = load_checkpoint(run_dir / "best.ckpt")
    model = build_model(meta["method"], rc.world, rc.model,
                        np.random.default_rng(0), mask_ranges=rc.mask_ranges)
    model.load_params(store)
    return rc, split, model, meta


def run_eval(run_dir, out_dir=None) -> dict:
    """Rescore a finished run from its checkpoint; rewrites metrics/preds."""
    rc, split, model, _ = _restore_run(run_dir)
    out = Path(out_dir) if out_dir else Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    scored = evaluate_split(model, split, rc)
    doc = _metrics_doc(scored["detection"], scored["tagging"], scored["validation_loss"])
    _json_dump(out / "metrics.json", doc)
    write_preds_jsonl(out / "preds.jsonl", [c.clip_id for c in split.test],
                      scored["bag_scores"], scored["frame_scores"], alpha=rc.threshold)
    return doc


def run_sweep(run_dir, out_dir=None, sizes=None) -> dict:
    """Sensor-reduction sweep over a finished run; writes sweep.csv."""
    rc, split, model, _ = _restore_run(run_dir)
    out = Path(out_dir) if out_dir else Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame_labels = np.stack([c.strong_labels for c in split.test])

    def predict_fn(removed):
        return model.predict(split.test, removal=removed, batch_size=rc.loop.batch_size)

    result = sensor_reduction_sweep(predict_fn, frame_labels, rc.world.num_sensors,
                                    sizes=sizes or rc.sweep_sizes, tie_seed=rc.tie_seed)
    write_sweep_csv(out / "sweep.csv", result)
    summary = {"baseline_map": result.baseline_map,
               "baseline_roauc": result.baseline_roauc,
               "by_size": {str(k): v for k, v in result.summary.items()}}
    _json_dump(out / "sweep_summary.json", summary)
    return summary


def run_info(doc: dict, out_dir) -> dict:
    """Exact information analysis of the configured world."""
    rc = resolve_config(doc)
    world = discretize_world(rc.world)
    report = classify_roles(world)
    payload = report.to_dict()
    payload["total_information_bits"] = mutual_information(world)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _json_dump(out / "info_report.json", payload)
    return payload


# ---------------------------------------------------------------------------
# multi-method comparison


def _compare_worker(args) -> dict:
    doc, method, seed, out_root = args
    rec = run_training(doc, method, seed, out_root)
    return {"method": rec.method, "seed": rec.seed,
            "detection_map": rec.metrics["detection"]["macro_map"],
            "detection_roauc": rec.metrics["detection"]["macro_roauc"],
            "tagging_map": rec.metrics["tagging"]["macro_map"],
            "tagging_roauc": rec.metrics["tagging"]["macro_roauc"],
            "validation_loss": rec.metrics["validation_loss"],
            "best_epoch": rec.best_epoch, "wall_time_sec": rec.wall_time_sec}


COMPARE_COLUMNS = ("method", "seed", "detection_map", "detection_roauc",
                   "tagging_map", "tagging_roauc", "validation_loss",
                   "best_epoch", "wall_time_sec")


def write_comparison_csv(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(COMPARE_COLUMNS) + "\n")
        for r in rows:
            f.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c])
                             for c in COMPARE_COLUMNS) + "\n")


def summarize_comparison(rows: list[dict]) -> list[dict]:
    """Per-method mean and standard error over seeds, in method order."""
    out = []
    for method in sorted({r["method"] for r in rows}):
        sub = [r for r in rows if r["method"] == method]
        entry = {"method": method, "runs": len(sub)}
        for col in ("detection_map", "detection_roauc", "tagging_map",
                    "tagging_roauc", "validation_loss"):
            vals = [r[col] for r in sub]
            entry[f"{col}_mean"] = mean(vals)
            entry[f"{col}_se"] = (stdev(vals) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out.append(entry)
    return out


def write_summary_csv(path, summary: list[dict]) -> None:
    if not summary:
        raise ValueError("write_summary_csv: empty summary")
    cols = list(summary[0].keys())
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for row in summary:
            f.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                             for c in cols) + "\n")


def run_compare(doc: dict, out_root, methods=None, seeds=None, threads: int = 1) -> list[dict]:
    """Train every (method, seed) pair and tabulate the comparison."""
    rc = resolve_config(doc)
    methods = tuple(methods) if methods else rc.methods
    seeds = tuple(seeds) if seeds else rc.seeds
    if os.environ.get(CACHE_ENV):
        dataset_for(rc)  # warm the cache before any workers fork
    jobs = [(doc, m, s, str(out_root)) for m in methods for s in seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_compare_worker, jobs))
    else:
        rows = [_compare_worker(j) for j in jobs]
    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(out / "comparison.csv", rows)
    write_summary_csv(out / "comparison_summary.csv", summarize_comparison(rows))
    return rows
