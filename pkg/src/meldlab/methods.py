"""Method registry: eight training recipes over the same sensor world.

A  late fusion        per-sensor classifiers, posteriors averaged
B  concat             one classifier over concatenated embeddings
C  coupled fusion     mean-field coupling pass, then concat classifier
D  sensor transformer sensor-axis attention, then concat classifier
E  masked pretraining two stages: label-free masked distillation with
                      complementary target masks, then a frozen-encoder probe
F  guided distillation D plus masking and the distillation loss, jointly
G  F without guidance  masking kept, distillation weight pinned to zero
H  guided coupling     F with the coupling pass instead of attention

D and F share one code path; F degenerates to D exactly when the mask
ranges collapse to zero and the schedule is off.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import fusion
from .autodiff import AdamW, NumericError, ParamStore, Tensor
from .classifier import classify, init_concat_head
from .selfdistill import (EpochStats, MaskMatrix, ScheduleSpec, TrainLoopConfig,
                          TrainResult, TrainingError, apply_mask, distill_loss,
                          ema_update, make_target, removal_mask, sample_mask,
                          train_loop)
from .synthworld import LabelAccessLog, WorldSpec, track_labels

METHOD_IDS = ("A", "B", "C", "D", "E", "F", "G", "H")

METHOD_NAMES = {
    "A": "late fusion",
    "B": "concat",
    "C": "coupled fusion",
    "D": "sensor transformer",
    "E": "masked pretraining + probe",
    "F": "guided masked distillation",
    "G": "masking without guidance",
    "H": "guided coupling",
}


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    ffn_hidden: int = 256
    zero_out_proj: bool = False  # curriculum/test hook: blocks start as identity


def default_mask_ranges(world: WorldSpec) -> dict[str, tuple[float, float]]:
    """Every group draws from [0, 2/S]: at most about two of the S sensors
    masked per step."""
    hi = min(1.0, 2.0 / world.num_sensors)
    return {name: (0.0, hi) for name in world.sensor_groups}


def degenerate_mask_ranges(world: WorldSpec) -> dict[str, tuple[float, float]]:
    return {name: (0.0, 0.0) for name in world.sensor_groups}


class SensorFusionModel:
    """Shared wiring: grouped projection, optional sensor masking, a fusion
    stage, and a classifier head. Subclasses define the fusion stage and
    (for late fusion) the head."""

    method_id = "?"

    def __init__(self, world: WorldSpec, cfg: ModelConfig, rng: np.random.Generator,
                 mask_ranges: dict[str, tuple[float, float]], has_target: bool):
        self.world = world
        self.cfg = cfg
        self.groups = dict(world.sensor_groups)
        self.mask_ranges = dict(mask_ranges)
        self.has_target = has_target
        self.params = ParamStore()
        fusion.init_projection(self.params, rng, self.groups,
                               world.feature_dim_raw, cfg.embed_dim)
        self._init_fusion(rng)
        self._init_head(rng)
        self.trainable_names = self.params.names()

    # subclass hooks -------------------------------------------------------
    def _init_fusion(self, rng):
        pass

    def _init_head(self, rng):
        init_concat_head(self.params, rng, self.world.num_sensors * self.fused_dim(),
                         self.world.num_classes)

    def fused_dim(self) -> int:
        return self.cfg.embed_dim

    def _fuse(self, phi: Tensor, store: ParamStore) -> Tensor:
        return phi

    def posteriors_from(self, z: Tensor) -> Tensor:
        return classify(z, self.params)

    # shared API -----------------------------------------------------------
    @property
    def encoder_names(self) -> list[str]:
        return [n for n in self.params.names() if not n.startswith("head")]

    @property
    def head_names(self) -> list[str]:
        return [n for n in self.params.names() if n.startswith("head")]

    def encode(self, feats: np.ndarray, store: ParamStore | None = None,
               mask=None) -> Tensor:
        store = self.params if store is None else store
        phi = fusion.project(feats, store, self.groups)
        if mask is not None:
            phi = apply_mask(phi, mask)
        return self._fuse(phi, store)

    def forward(self, feats: np.ndarray, mask=None) -> tuple[Tensor, Tensor]:
        z = self.encode(feats, mask=mask)
        return self.posteriors_from(z), z

    def predict(self, clips, removal=(), batch_size: int = 8) -> np.ndarray:
        """(N, T, C) frame posteriors; ``removal`` hides sensors at inference."""
        keep = removal_mask(self.world.num_sensors, removal) if removal else None
        outs = []
        with ad.no_grad():
            for i in range(0, len(clips), batch_size):
                feats = np.stack([np.transpose(c.features, (1, 0, 2))
                                  for c in clips[i:i + batch_size]])
                posteriors, _ = self.forward(feats, mask=keep)
                outs.append(posteriors.data)
        return np.concatenate(outs, axis=0)

    def load_params(self, store: ParamStore) -> None:
        if store.names() != self.params.names():
            raise ValueError("load_params: parameter manifest mismatch")
        for n in self.params.names():
            if store[n].data.shape != self.params[n].data.shape:
                raise ValueError(f"load_params: shape mismatch for '{n}'")
            self.params[n].data = store[n].data.copy()
        self.params.step_count = store.step_count


class LateFusionModel(SensorFusionModel):
    method_id = "A"

    def _init_head(self, rng):
        d, c = self.cfg.embed_dim, self.world.num_classes
        for s in range(self.world.num_sensors):
            self.params.add(f"head/{s}/weight", ad.glorot_uniform(rng, (d, c)))
            self.params.add(f"head/{s}/bias", np.zeros(c))

    def posteriors_from(self, z: Tensor) -> Tensor:
        b, t, s, d = z.shape
        c = self.world.num_classes
        outs = []
        for si in range(s):
            zs = ad.reshape(ad.take(z, [si], axis=2), (b, t, d))
            logits = ad.matmul(zs, self.params[f"head/{si}/weight"])
            bias = ad.reshape(self.params[f"head/{si}/bias"], (1, 1, c))
            logits = ad.add(logits, ad.broadcast_to(bias, logits.shape))
            outs.append(ad.reshape(ad.sigmoid(logits), (b, t, 1, c)))
        return ad.reduce_mean(ad.concat(outs, axis=2), axis=2)


class ConcatModel(SensorFusionModel):
    method_id = "B"


class CoupledFusionModel(SensorFusionModel):
    """Mean-field coupling pass; doubles as the guided variant (H)."""

    method_id = "C"

    def _init_fusion(self, rng):
        fusion.init_crf(self.params, rng, self.world.num_sensors, self.cfg.embed_dim)

    def _fuse(self, phi, store):
        return fusion.crf_fuse(phi, store)


class TransFusionModel(SensorFusionModel):
    """Sensor-axis transformer over identity-encoded embeddings (D, E, F, G)."""

    method_id = "D"

    def _init_fusion(self, rng):
        width, _ = fusion.model_dim(self.cfg.embed_dim, self.world.num_sensors,
                                    self.cfg.num_heads)
        fusion.init_multitrans(self.params, rng, width, self.cfg.num_blocks,
                               self.cfg.num_heads, self.cfg.ffn_hidden,
                               zero_out_proj=self.cfg.zero_out_proj)

    def fused_dim(self) -> int:
        width, _ = fusion.model_dim(self.cfg.embed_dim, self.world.num_sensors,
                                    self.cfg.num_heads)
        return width

    def _fuse(self, phi, store):
        x = fusion.sensor_encode(phi, self.cfg.num_heads)
        return fusion.multitrans(x, store, self.cfg.num_blocks, self.cfg.num_heads)


def build_model(method_id: str, world: WorldSpec, cfg: ModelConfig,
                rng: np.random.Generator,
                mask_ranges: dict[str, tuple[float, float]] | None = None) -> SensorFusionModel:
    """Instantiate the model for a method with its default masking behavior."""
    if method_id not in METHOD_IDS:
        raise ValueError(f"build_model: unknown method '{method_id}'")
    masked = method_id in ("E", "F", "G", "H")
    if mask_ranges is None:
        mask_ranges = default_mask_ranges(world) if masked else degenerate_mask_ranges(world)
    has_target = method_id in ("E", "F", "G", "H")
    if method_id == "A":
        model = LateFusionModel(world, cfg, rng, mask_ranges, has_target)
    elif method_id == "B":
        model = ConcatModel(world, cfg, rng, mask_ranges, has_target)
    elif method_id in ("C", "H"):
        model = CoupledFusionModel(world, cfg, rng, mask_ranges, has_target)
    else:
        model = TransFusionModel(world, cfg, rng, mask_ranges, has_target)
    model.method_id = method_id
    return model


# ---------------------------------------------------------------------------
# two-stage masked pretraining (method E)


def msm_pretrain(model: SensorFusionModel, clips, cfg: TrainLoopConfig,
                 rng: np.random.Generator) -> list[EpochStats]:
    """Stage 1: minimize the distillation loss alone. The online encoder sees
    a sampled mask, the target encoder sees its complement, and no label
    field is ever read."""
    names = model.encoder_names
    optimizer = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                      names=names)
    pair = make_target(model.params, names, cfg.ema_decay)
    factor = cfg.lr_factor()
    history: list[EpochStats] = []
    steps = 0
    for epoch in range(cfg.max_epoch):
        optimizer.lr = cfg.lr * factor ** epoch
        order = rng.permutation(len(clips))
        total = 0.0
        n_batches = 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [clips[j] for j in order[i:i + cfg.batch_size]]
            feats = np.stack([np.transpose(c.features, (1, 0, 2)) for c in batch])
            mask = sample_mask(model.groups, model.mask_ranges, rng)
            online_z = model.encode(feats, mask=mask)
            with ad.no_grad():
                target_z = model.encode(feats, store=pair.target,
                                        mask=MaskMatrix(kept=~mask.kept))
            try:
                loss = distill_loss(online_z, target_z, mask,
                                    cfg.normalize_by_masked_count)
                ad.backward(loss)
            except NumericError as e:
                raise TrainingError(f"diverged at pretrain epoch {epoch}: {e}") from e
            for n in optimizer.names:
                p = optimizer.params[n]
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            optimizer.step()
            ema_update(pair)
            total += loss.item()
            n_batches += 1
            steps += 1
        history.append(EpochStats(
            epoch=epoch, step=steps, loss=total / n_batches,
            task_loss=float("nan"), distill=total / n_batches,
            lam=0.0, lr=optimizer.lr, val_task_loss=float("nan")))
    return history


def freeze_encoder(model: SensorFusionModel) -> None:
    """Lock the encoder for the probe stage: only the head stays trainable,
    masking and the target pair are switched off."""
    for n in model.encoder_names:
        model.params[n].requires_grad = False
    model.trainable_names = model.head_names
    model.has_target = False
    model.mask_ranges = degenerate_mask_ranges(model.world)


@dataclass
class MethodArtifacts:
    method_id: str
    model: SensorFusionModel
    result: TrainResult
    pretrain_history: list[EpochStats] | None = None
    label_log: LabelAccessLog | None = None


def adapt_loop_config(method_id: str, cfg: TrainLoopConfig) -> TrainLoopConfig:
    """Methods without guidance run the same loop with the schedule off."""
    if method_id in ("A", "B", "C", "D", "G"):
        return replace(cfg, schedule=replace(cfg.schedule, strategy="off"))
    return cfg


def train_method(method_id: str, split, model_cfg: ModelConfig,
                 loop_cfg: TrainLoopConfig, rng: np.random.Generator,
                 probe_epochs: int = 20,
                 mask_ranges: dict[str, tuple[float, float]] | None = None) -> MethodArtifacts:
    """Build and train one method end to end on a dataset split. An explicit
    ``mask_ranges`` only applies to the methods that mask."""
    if method_id not in ("E", "F", "G", "H"):
        mask_ranges = None
    model = build_model(method_id, split.spec, model_cfg, rng, mask_ranges=mask_ranges)
    if method_id == "E":
        tracked, log = track_labels(split.train)
        stage1 = replace(loop_cfg, schedule=replace(loop_cfg.schedule, strategy="off"))
        pre_hist = msm_pretrain(model, tracked, stage1, rng)
        if log.total:
            raise TrainingError(
                f"label contract violated: {log.total} label reads during pretraining")
        freeze_encoder(model)
        encoder_snapshot = {n: model.params[n].data.copy() for n in model.encoder_names}
        probe = replace(stage1, max_epoch=probe_epochs)
        result = train_loop(model, split, probe, rng)
        for n, before in encoder_snapshot.items():
            if not np.array_equal(model.params[n].data, before):
                raise TrainingError(f"frozen encoder parameter '{n}' changed during probe")
        return MethodArtifacts(method_id, model, result, pre_hist, log)
    result = train_loop(model, split, adapt_loop_config(method_id, loop_cfg), rng)
    return MethodArtifacts(method_id, model, result)
