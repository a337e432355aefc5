"""Ranking metrics and the sensor reduction sweep.

Average precision is non-interpolated: mean of precision-at-k over the
positions of positives in the score-sorted list. Ties are broken by a
seeded shuffle before a stable sort, so tied blocks land in a random but
reproducible order. ROAUC uses midranks, which handles ties exactly.

Classes that cannot be scored (no positives for AP, a single label value
for ROAUC) are skipped and recorded; macro averages run over the rest.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from statistics import median

import numpy as np
from scipy.stats import rankdata

DEFAULT_TIE_SEED = 0


def average_precision(scores, labels, tie_rng: np.random.Generator) -> float | None:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"average_precision: {scores.shape} scores vs {labels.shape} labels")
    positives = int(labels.sum())
    if positives == 0:
        return None
    perm = tie_rng.permutation(scores.shape[0])
    order = np.argsort(-scores[perm], kind="stable")
    ranked = labels[perm][order]
    hits = np.cumsum(ranked)
    precision = hits / np.arange(1, ranked.shape[0] + 1)
    return float(precision[ranked == 1].sum() / positives)


def roauc(scores, labels) -> float | None:
    """Probability a random positive outscores a random negative (ties at 1/2)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"roauc: {scores.shape} scores vs {labels.shape} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(scores.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    task: str                               # "tagging" | "detection"
    per_class_ap: list[float | None]
    per_class_roauc: list[float | None]
    skipped_classes: list[int]
    macro_map: float
    macro_roauc: float

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "per_class_ap": self.per_class_ap,
            "per_class_roauc": self.per_class_roauc,
            "skipped_classes": self.skipped_classes,
            "macro_map": self.macro_map,
            "macro_roauc": self.macro_roauc,
        }


def _score(scores: np.ndarray, labels: np.ndarray, task: str,
           tie_seed: int) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ValueError(f"metrics: scores {scores.shape} vs labels {labels.shape}")
    num_classes = scores.shape[1]
    per_ap: list[float | None] = []
    per_auc: list[float | None] = []
    skipped: set[int] = set()
    for c in range(num_classes):
        rng = np.random.default_rng(np.random.SeedSequence([tie_seed, c]))
        ap = average_precision(scores[:, c], labels[:, c], rng)
        auc = roauc(scores[:, c], labels[:, c])
        if ap is None or auc is None:
            skipped.add(c)
        per_ap.append(ap)
        per_auc.append(auc)
    kept_ap = [v for v in per_ap if v is not None]
    kept_auc = [v for v in per_auc if v is not None]
    if not kept_ap or not kept_auc:
        raise ValueError("metrics: every class was skipped; nothing to average")
    return MetricsReport(task=task, per_class_ap=per_ap, per_class_roauc=per_auc,
                         skipped_classes=sorted(skipped),
                         macro_map=float(np.mean(kept_ap)),
                         macro_roauc=float(np.mean(kept_auc)))


def score_tagging(bag_scores: np.ndarray, weak_labels: np.ndarray,
                  tie_seed: int = DEFAULT_TIE_SEED) -> MetricsReport:
    """Clip-level scoring: one score row per clip."""
    return _score(bag_scores, weak_labels, "tagging", tie_seed)


def score_detection(frame_scores: np.ndarray, frame_labels: np.ndarray,
                    tie_seed: int = DEFAULT_TIE_SEED) -> MetricsReport:
    """Frame-level scoring: rows are all frames of all clips, flattened."""
    frame_scores = np.asarray(frame_scores, dtype=np.float64)
    frame_labels = np.asarray(frame_labels)
    if frame_scores.ndim == 3:
        frame_scores = frame_scores.reshape(-1, frame_scores.shape[-1])
        frame_labels = frame_labels.reshape(-1, frame_labels.shape[-1])
    return _score(frame_scores, frame_labels, "detection", tie_seed)


# ---------------------------------------------------------------------------
# sensor reduction without retraining


@dataclass
class SweepRow:
    removed: tuple[int, ...]
    detection_map: float
    detection_roauc: float


@dataclass
class SweepResult:
    baseline_map: float
    baseline_roauc: float
    rows: list[SweepRow]
    summary: dict[int, dict[str, float]] = field(default_factory=dict)

    def maps_for_size(self, size: int) -> list[float]:
        return [r.detection_map for r in self.rows if len(r.removed) == size]


def sensor_reduction_sweep(predict_fn, frame_labels: np.ndarray, num_sensors: int,
                           sizes=(1, 2), tie_seed: int = DEFAULT_TIE_SEED) -> SweepResult:
    """Score every removal subset of each size with the same trained model.

    ``predict_fn(removed)`` maps a sensor index tuple to frame scores; the
    empty tuple is the untouched baseline and must never be degraded by the
    sweep machinery itself.
    """
    for size in sizes:
        if not 0 < size < num_sensors:
            raise ValueError(f"sensor_reduction_sweep: removal size {size} "
                             f"out of range for {num_sensors} sensors")
    base = score_detection(predict_fn(()), frame_labels, tie_seed)
    rows: list[SweepRow] = []
    for size in sizes:
        for combo in itertools.combinations(range(num_sensors), size):
            rep = score_detection(predict_fn(combo), frame_labels, tie_seed)
            rows.append(SweepRow(removed=combo, detection_map=rep.macro_map,
                                 detection_roauc=rep.macro_roauc))
    summary: dict[int, dict[str, float]] = {}
    for size in sizes:
        maps = [r.detection_map for r in rows if len(r.removed) == size]
        summary[size] = {"min": float(min(maps)), "median": float(median(maps)),
                         "max": float(max(maps))}
    return SweepResult(baseline_map=base.macro_map, baseline_roauc=base.macro_roauc,
                       rows=rows, summary=summary)


def write_sweep_csv(path, result: SweepResult) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("removed,size,detection_map,detection_roauc\n")
        f.write(f",0,{result.baseline_map!r},{result.baseline_roauc!r}\n")
        for row in result.rows:
            ids = " ".join(str(i) for i in row.removed)
            f.write(f"{ids},{len(row.removed)},{row.detection_map!r},{row.detection_roauc!r}\n")
