"""Masked self-distillation training: sensor masking, an EMA target encoder,
the distillation loss, the guidance-weight schedule, and the train loop.

One step: sample a sensor mask, run the online encoder on masked features
and the classifier on top (weak-label loss), run the target encoder on the
full features under stop-gradient, penalize the embedding gap on masked
sensors, take an AdamW step, then let the target trail the online weights
by exponential moving average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, NumericError, ParamStore, Tensor
from .classifier import bag_pool, class_weights, weighted_bce


class MaskError(ValueError):
    """A sensor mask request is degenerate or inconsistent."""


class TrainingError(RuntimeError):
    """Training aborted; the message carries the diagnostic."""


# ---------------------------------------------------------------------------
# sensor masks


@dataclass
class MaskMatrix:
    """Which sensors stay visible this step.

    Masking is all-or-nothing per sensor: a masked sensor's whole embedding
    column is zeroed. Ratios are drawn per sensor group; within each group
    exactly floor((1 - kappa) * group_size) sensors are kept.
    """

    kept: np.ndarray                       # (S,) bool
    kappa_by_group: dict[str, float] = field(default_factory=dict)
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def num_sensors(self) -> int:
        return int(self.kept.shape[0])

    @property
    def kept_count(self) -> int:
        return int(self.kept.sum())

    @property
    def masked_count(self) -> int:
        return self.num_sensors - self.kept_count

    def keep_columns(self) -> np.ndarray:
        return self.kept.astype(np.float64)


def sample_mask(groups: dict[str, tuple[int, ...]],
                ranges: dict[str, tuple[float, float]],
                rng: np.random.Generator) -> MaskMatrix:
    """Draw kappa_g uniformly per group, keep floor((1-kappa_g)*S_g) sensors
    uniformly without replacement. Rejects a mask that keeps nothing."""
    total = sum(len(m) for m in groups.values())
    kept = np.zeros(total, dtype=bool)
    kappas: dict[str, float] = {}
    for name, members in groups.items():
        if not members:
            raise MaskError(f"sample_mask: group '{name}' is empty")
        lo, hi = ranges.get(name, (0.0, 0.0))
        if not 0.0 <= lo <= hi <= 1.0:
            raise MaskError(f"sample_mask: bad ratio range ({lo}, {hi}) for group '{name}'")
        kappa = float(rng.uniform(lo, hi))
        n_keep = int(math.floor((1.0 - kappa) * len(members)))
        keep_local = rng.choice(len(members), size=n_keep, replace=False)
        for j in keep_local:
            kept[members[int(j)]] = True
        kappas[name] = kappa
    if not kept.any():
        raise MaskError("sample_mask: every sensor masked; normalizer would be zero")
    return MaskMatrix(kept=kept, kappa_by_group=kappas, ranges=dict(ranges))


def removal_mask(num_sensors: int, removed) -> MaskMatrix:
    """Inference-time mask that hides an explicit sensor set."""
    removed = set(int(r) for r in removed)
    for r in removed:
        if not 0 <= r < num_sensors:
            raise MaskError(f"removal_mask: sensor {r} out of range")
    if len(removed) >= num_sensors:
        raise MaskError("removal_mask: cannot remove every sensor")
    kept = np.ones(num_sensors, dtype=bool)
    kept[list(removed)] = False
    return MaskMatrix(kept=kept)


def apply_mask(phi: Tensor, mask: "MaskMatrix | np.ndarray") -> Tensor:
    """Zero the embeddings of masked sensors: (B, T, S, D) Hadamard columns."""
    cols = mask.keep_columns() if isinstance(mask, MaskMatrix) else np.asarray(mask, dtype=np.float64)
    b, t, s, d = phi.shape
    if cols.shape != (s,):
        raise MaskError(f"apply_mask: mask covers {cols.shape[0]} sensors, features have {s}")
    wide = np.broadcast_to(cols[:, None], (b, t, s, d))
    return ad.mul(phi, Tensor(np.array(wide)))


# ---------------------------------------------------------------------------
# distillation loss


def distill_loss(online_z: Tensor, target_z: Tensor, mask: MaskMatrix,
                 normalize_by_masked_count: bool = False) -> Tensor:
    """Mean squared embedding gap on masked sensors.

    Per clip: (1/T) * (1/normalizer) * sum over frames and masked sensors of
    the squared L2 gap; batches average over clips. The normalizer is the
    kept-sensor count (the masked count behind the flag).
    """
    if online_z.shape != target_z.shape:
        raise MaskError(f"distill_loss: shapes {online_z.shape} vs {target_z.shape}")
    b, t, s, e = online_z.shape
    if mask.num_sensors != s:
        raise MaskError(f"distill_loss: mask covers {mask.num_sensors} sensors, embeddings have {s}")
    norm = mask.masked_count if normalize_by_masked_count else mask.kept_count
    if norm == 0:
        raise MaskError("distill_loss: zero normalizer")
    selector = 1.0 - mask.keep_columns()
    wide = np.broadcast_to(selector[:, None], (b, t, s, e))
    gap = ad.mul(ad.sub(ad.stop_gradient(target_z), online_z), Tensor(np.array(wide)))
    return ad.scale(ad.l2_sq(gap), 1.0 / (b * t * norm))


# ---------------------------------------------------------------------------
# online / target pair


@dataclass
class OnlineTargetPair:
    online: ParamStore
    target: ParamStore
    names: list[str]
    decay: float


def make_target(online: ParamStore, names, decay: float) -> OnlineTargetPair:
    """Target starts as an exact copy of the tracked online parameters and
    never receives gradients."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"make_target: decay {decay} outside [0, 1]")
    names = sorted(names)
    target = ParamStore()
    for n in names:
        target.add(n, online[n].data.copy(), requires_grad=False)
    return OnlineTargetPair(online=online, target=target, names=names, decay=decay)


def ema_update(pair: OnlineTargetPair) -> None:
    """zeta <- rho * zeta + (1 - rho) * theta, elementwise, after the
    optimizer step. Replaying this recurrence from a recorded trajectory
    must reproduce the target bit-exactly."""
    rho = pair.decay
    for n in pair.names:
        src = pair.online[n]
        dst = pair.target[n]
        if src.data.shape != dst.data.shape:
            raise ValueError(f"ema_update: shape mismatch for '{n}'")
        dst.data = rho * dst.data + (1.0 - rho) * src.data


# ---------------------------------------------------------------------------
# guidance weight schedule


SCHEDULE_STRATEGIES = ("increase", "decrease", "constant", "off")


@dataclass(frozen=True)
class ScheduleSpec:
    strategy: str = "increase"
    lambda0: float = 0.01
    gamma: float = 1.05
    max_epoch: int = 50

    def __post_init__(self):
        if self.strategy not in SCHEDULE_STRATEGIES:
            raise ValueError(f"ScheduleSpec: unknown strategy '{self.strategy}'")
        if self.gamma < 1.0:
            raise ValueError("ScheduleSpec: gamma must be >= 1")
        if self.lambda0 < 0.0:
            raise ValueError("ScheduleSpec: lambda0 must be >= 0")
        if self.max_epoch < 1:
            raise ValueError("ScheduleSpec: max_epoch must be >= 1")


def lambda_at(schedule: ScheduleSpec, epoch: int) -> float:
    """Guidance weight at an epoch: growing lambda0*gamma^n, the mirrored
    decreasing curve, their running-sum constant, or hard zero."""
    if epoch < 0:
        raise ValueError(f"lambda_at: negative epoch {epoch}")
    s = schedule
    if s.strategy == "off":
        return 0.0
    if s.strategy == "increase":
        return s.lambda0 * s.gamma ** epoch
    if s.strategy == "decrease":
        return s.lambda0 * s.gamma ** (s.max_epoch - epoch)
    total = sum(s.lambda0 * s.gamma ** k for k in range(s.max_epoch + 1))
    return total / s.max_epoch


# ---------------------------------------------------------------------------
# train step / loop


@dataclass
class StepStats:
    loss: float
    task_loss: float
    distill: float
    lam: float


@dataclass
class EpochStats:
    epoch: int
    step: int
    loss: float
    task_loss: float
    distill: float
    lam: float
    lr: float
    val_task_loss: float


@dataclass
class TrainLoopConfig:
    lr: float = 0.001
    weight_decay: float = 0.001
    max_epoch: int = 50
    batch_size: int = 4
    lr_decay_mode: str = "anneal"   # anneal | literal | none
    schedule: ScheduleSpec = ScheduleSpec()
    ema_decay: float = 0.95
    normalize_by_masked_count: bool = False

    def lr_factor(self) -> float:
        if self.lr_decay_mode == "anneal":
            return 0.1 ** (1.0 / self.max_epoch)
        if self.lr_decay_mode == "literal":
            return 0.1
        if self.lr_decay_mode == "none":
            return 1.0
        raise ValueError(f"unknown lr_decay_mode '{self.lr_decay_mode}'")


@dataclass
class TrainResult:
    best_params: ParamStore
    best_epoch: int
    best_val: float
    history: list[EpochStats]
    final_params: ParamStore
    target: ParamStore | None
    steps: int


def stack_batch(clips) -> tuple[np.ndarray, np.ndarray]:
    """(B, T, S, F) features and (B, C) weak labels from a clip batch."""
    feats = np.stack([np.transpose(c.features, (1, 0, 2)) for c in clips])
    weak = np.stack([np.asarray(c.weak_label, dtype=np.float64) for c in clips])
    return feats, weak


def train_step(model, optimizer: AdamW, pair: OnlineTargetPair | None,
               feats: np.ndarray, weak: np.ndarray, weights: np.ndarray,
               lam: float, rng: np.random.Generator,
               normalize_by_masked_count: bool = False) -> StepStats:
    """One optimization step; see the module docstring for the sequence."""
    mask = sample_mask(model.groups, model.mask_ranges, rng)
    posteriors, online_z = model.forward(feats, mask=mask)
    task = weighted_bce(bag_pool(posteriors), weak, weights)
    loss = task
    distill_val = 0.0
    if lam > 0.0 and mask.masked_count > 0 and pair is not None:
        with ad.no_grad():
            target_z = model.encode(feats, store=pair.target)
        guide = distill_loss(online_z, target_z, mask, normalize_by_masked_count)
        loss = ad.add(task, ad.scale(guide, lam))
        distill_val = guide.item()
    ad.backward(loss)
    for n in optimizer.names:
        p = optimizer.params[n]
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    optimizer.step()
    if pair is not None:
        ema_update(pair)  # post-step weights
    return StepStats(loss=loss.item(), task_loss=task.item(), distill=distill_val, lam=lam)


def validation_loss(model, clips, weights: np.ndarray, batch_size: int) -> float:
    """Mean weak-label loss over clips, no masking, guidance excluded."""
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(clips), batch_size):
            batch = clips[i:i + batch_size]
            feats, weak = stack_batch(batch)
            posteriors, _ = model.forward(feats, mask=None)
            lg = weighted_bce(bag_pool(posteriors), weak, weights).item()
            total += lg * len(batch)
    return total / len(clips)


def train_loop(model, split, cfg: TrainLoopConfig, rng: np.random.Generator) -> TrainResult:
    """Epoch loop with shuffled batches, per-epoch unmasked validation, and
    best-validation snapshotting. Divergence aborts with a diagnostic."""
    weights = class_weights(split.class_counts)
    optimizer = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                      names=model.trainable_names)
    pair = None
    if model.has_target:
        pair = make_target(model.params, model.encoder_names, cfg.ema_decay)
    factor = cfg.lr_factor()
    history: list[EpochStats] = []
    best_val = np.inf
    best_epoch = -1
    best_params = model.params.copy()
    steps = 0
    train_clips = split.train
    for epoch in range(cfg.max_epoch):
        lr = cfg.lr * factor ** epoch
        optimizer.lr = lr
        lam = lambda_at(cfg.schedule, epoch)
        order = rng.permutation(len(train_clips))
        sums = np.zeros(3)
        n_batches = 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_clips[j] for j in order[i:i + cfg.batch_size]]
            feats, weak = stack_batch(batch)
            try:
                stats = train_step(model, optimizer, pair, feats, weak, weights,
                                   lam, rng, cfg.normalize_by_masked_count)
            except NumericError as e:
                raise TrainingError(
                    f"diverged at epoch {epoch} step {steps}: {e}") from e
            sums += (stats.loss, stats.task_loss, stats.distill)
            n_batches += 1
            steps += 1
        val = validation_loss(model, split.val, weights, cfg.batch_size)
        if not np.isfinite(val):
            raise TrainingError(f"diverged at epoch {epoch}: non-finite validation loss")
        history.append(EpochStats(
            epoch=epoch, step=steps,
            loss=sums[0] / n_batches, task_loss=sums[1] / n_batches,
            distill=sums[2] / n_batches, lam=lam, lr=lr, val_task_loss=val))
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = model.params.copy()
    return TrainResult(best_params=best_params, best_epoch=best_epoch,
                       best_val=float(best_val), history=history,
                       final_params=model.params,
                       target=pair.target if pair else None, steps=steps)
