"""Weak-label task head: frame posteriors, bag pooling, losses, thresholds.

Training supervision is clip-level only (a class is present iff it is active
in any frame); frame-level labels are reserved for evaluation and for the
diagnostic strong loss.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

PROB_CLAMP = 1e-7
DEFAULT_THRESHOLD = 0.5


def init_concat_head(store: ParamStore, rng: np.random.Generator,
                     in_dim: int, num_classes: int, prefix: str = "head") -> None:
    store.add(f"{prefix}/weight", ad.glorot_uniform(rng, (in_dim, num_classes)))
    store.add(f"{prefix}/bias", np.zeros(num_classes))


def classify(z: Tensor, store: ParamStore, prefix: str = "head") -> Tensor:
    """(B, T, S, E) fused embeddings -> (B, T, C) posteriors.

    Per-sensor embeddings are concatenated (length S*E) and pushed through
    one linear + sigmoid layer; every output is strictly inside (0, 1).
    """
    b, t, s, e = z.shape
    flat = ad.reshape(z, (b, t, s * e))
    logits = ad.matmul(flat, store[f"{prefix}/weight"])
    wide = ad.reshape(store[f"{prefix}/bias"], (1, 1, logits.shape[-1]))
    return ad.sigmoid(ad.add(logits, ad.broadcast_to(wide, logits.shape)))


def bag_pool(frame_posteriors: Tensor) -> Tensor:
    """Mean over the frame axis: (..., T, C) -> (..., C)."""
    return ad.reduce_mean(frame_posteriors, axis=-2)


def class_weights(class_counts: np.ndarray) -> np.ndarray:
    """w_c = 1 / (train event instances of class c)."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if (counts < 1).any():
        raise ValueError("class_weights: every class needs at least one train instance")
    return 1.0 / counts


def _bce_terms(p: Tensor, y: np.ndarray) -> Tensor:
    p = ad.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"bce: probabilities {p.shape} vs labels {y.shape}")
    yt = Tensor(y)
    ones = Tensor(np.ones_like(y))
    pos = ad.mul(yt, ad.log(p))
    neg_ = ad.mul(ad.sub(ones, yt), ad.log(ad.sub(ones, p)))
    return ad.add(pos, neg_)


def weighted_bce(bag_posterior: Tensor, weak_label: np.ndarray,
                 weights: np.ndarray) -> Tensor:
    """Class-weighted binary cross-entropy on bag posteriors.

    Accepts (C,) or (B, C); batches average over clips. Probabilities are
    clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    terms = _bce_terms(bag_posterior, weak_label)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), terms.shape)
    weighted = ad.mul(Tensor(np.array(w)), terms)
    per_clip = ad.reduce_sum(weighted, axis=-1)
    return ad.neg(ad.reduce_mean(per_clip))


def strong_bce(frame_posteriors: Tensor, strong_labels: np.ndarray) -> Tensor:
    """Frame-wise BCE averaged over frames and classes. Diagnostic only;
    training never reads frame labels."""
    terms = _bce_terms(frame_posteriors, strong_labels)
    return ad.neg(ad.reduce_mean(terms))


def threshold_activity(probs: np.ndarray, alpha: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Binary activity decisions, strictly greater than alpha."""
    return (np.asarray(probs) > alpha).astype(np.int8)


def write_preds_jsonl(path, clip_ids, bag_probs: np.ndarray,
                      frame_probs: np.ndarray, alpha: float = DEFAULT_THRESHOLD) -> None:
    """One JSON line per clip: bag posterior, frame posteriors, packed
    thresholded activity (big-endian bit order, row-major frames x classes)."""
    bag_probs = np.asarray(bag_probs)
    frame_probs = np.asarray(frame_probs)
    with open(path, "w", encoding="utf-8") as f:
        for i, cid in enumerate(clip_ids):
            activity = threshold_activity(frame_probs[i], alpha)
            packed = np.packbits(activity.astype(np.uint8).reshape(-1))
            f.write(json.dumps({
                "clip_id": cid,
                "bag_posterior": [float(x) for x in bag_probs[i]],
                "frame_posteriors": [[float(x) for x in row] for row in frame_probs[i]],
                "activity_packed_hex": packed.tobytes().hex(),
                "alpha": alpha,
            }, sort_keys=True) + "\n")
