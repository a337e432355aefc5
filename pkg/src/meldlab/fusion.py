"""Sensor fusion encoders: shared projections, a sensor-axis transformer,
and a mean-field coupling alternative.

Layout convention everywhere: (B, T, S, E) with B clips, T frames, S sensors.
Attention mixes the sensor axis only; frames never attend to each other and
there is no positional encoding (sensor identity enters through an appended
one-hot instead).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


def model_dim(embed_dim: int, num_sensors: int, num_heads: int) -> tuple[int, int]:
    """Width after sensor encoding and the zero padding that makes it divide
    by the head count. Returns (width, pad)."""
    base = embed_dim + num_sensors
    pad = (-base) % num_heads
    return base + pad, pad


def _add_bias(x: Tensor, b: Tensor) -> Tensor:
    wide = ad.reshape(b, (1,) * (x.ndim - 1) + (b.shape[-1],))
    return ad.add(x, ad.broadcast_to(wide, x.shape))


# ---------------------------------------------------------------------------
# shared per-group projection


def init_projection(store: ParamStore, rng: np.random.Generator,
                    groups: dict[str, tuple[int, ...]],
                    feat_dim: int, embed_dim: int) -> None:
    for name in groups:
        store.add(f"project/{name}/weight", ad.glorot_uniform(rng, (feat_dim, embed_dim)))
        store.add(f"project/{name}/bias", np.zeros(embed_dim))


def project(features: np.ndarray, store: ParamStore,
            groups: dict[str, tuple[int, ...]]) -> Tensor:
    """(B, T, S, F) raw features -> (B, T, S, D), one shared linear map per group."""
    parts = []
    order: list[int] = []
    for name, members in groups.items():
        sub = Tensor(features[:, :, list(members), :])
        w = store[f"project/{name}/weight"]
        parts.append(_add_bias(ad.matmul(sub, w), store[f"project/{name}/bias"]))
        order.extend(members)
    cat = ad.concat(parts, axis=2) if len(parts) > 1 else parts[0]
    inv = np.empty(len(order), dtype=np.intp)
    inv[np.asarray(order)] = np.arange(len(order))
    if np.array_equal(inv, np.arange(len(order))):
        return cat
    return ad.take(cat, inv, axis=2)


# ---------------------------------------------------------------------------
# sensor identity encoding


def sensor_encode(phi: Tensor, num_heads: int) -> Tensor:
    """Append onehot_S(s) to every sensor's embedding, zero-padded so the
    final width divides by the head count. The one-hot always occupies the
    trailing S coordinates."""
    b, t, s, d = phi.shape
    _, pad = model_dim(d, s, num_heads)
    parts = [phi]
    if pad:
        parts.append(Tensor(np.zeros((b, t, s, pad))))
    onehot = np.broadcast_to(np.eye(s), (b, t, s, s))
    parts.append(Tensor(np.array(onehot)))
    return ad.concat(parts, axis=-1)


# ---------------------------------------------------------------------------
# multihead self-attention over the sensor axis


def init_multitrans(store: ParamStore, rng: np.random.Generator, width: int,
                    num_blocks: int, num_heads: int, ffn_hidden: int,
                    zero_out_proj: bool = False, prefix: str = "trans") -> None:
    if width % num_heads != 0:
        raise ValueError(f"init_multitrans: width {width} not divisible by {num_heads} heads")
    d_k = width // num_heads
    # final norm bounds the residual stream, keeping embedding-gap penalties
    # on a fixed scale no matter how long training runs
    store.add(f"{prefix}/ln_out/gain", np.ones(width))
    store.add(f"{prefix}/ln_out/bias", np.zeros(width))
    for i in range(num_blocks):
        base = f"{prefix}/{i}"
        store.add(f"{base}/ln1/gain", np.ones(width))
        store.add(f"{base}/ln1/bias", np.zeros(width))
        for h in range(num_heads):
            store.add(f"{base}/attn/wq{h}", ad.glorot_uniform(rng, (width, d_k)))
            store.add(f"{base}/attn/wk{h}", ad.glorot_uniform(rng, (width, d_k)))
            store.add(f"{base}/attn/wv{h}", ad.glorot_uniform(rng, (width, d_k)))
        wo = np.zeros((width, width)) if zero_out_proj else ad.glorot_uniform(rng, (width, width))
        store.add(f"{base}/attn/wo", wo)
        store.add(f"{base}/ln2/gain", np.ones(width))
        store.add(f"{base}/ln2/bias", np.zeros(width))
        store.add(f"{base}/ffn/w1", ad.glorot_uniform(rng, (width, ffn_hidden)))
        store.add(f"{base}/ffn/b1", np.zeros(ffn_hidden))
        w2 = np.zeros((ffn_hidden, width)) if zero_out_proj else ad.glorot_uniform(rng, (ffn_hidden, width))
        store.add(f"{base}/ffn/w2", w2)
        store.add(f"{base}/ffn/b2", np.zeros(width))


def mhsa(x: Tensor, store: ParamStore, prefix: str, num_heads: int) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated, output
    projected. Q = K = V = x; attention runs across sensors within a frame."""
    width = x.shape[-1]
    if width % num_heads != 0:
        raise ValueError(f"mhsa: width {width} not divisible by {num_heads} heads")
    d_k = width // num_heads
    scale = 1.0 / float(np.sqrt(d_k))
    heads = []
    for h in range(num_heads):
        q = ad.matmul(x, store[f"{prefix}/wq{h}"])
        k = ad.matmul(x, store[f"{prefix}/wk{h}"])
        v = ad.matmul(x, store[f"{prefix}/wv{h}"])
        scores = ad.scale(ad.matmul(q, ad.transpose_last2(k)), scale)
        heads.append(ad.matmul(ad.softmax(scores, axis=-1), v))
    return ad.matmul(ad.concat(heads, axis=-1), store[f"{prefix}/wo"])


def transformer_block(x: Tensor, store: ParamStore, prefix: str, num_heads: int) -> Tensor:
    """Pre-norm residual block: x + MHSA(LN(x)), then + FFN(LN(.))."""
    attn_in = ad.layer_norm(x, store[f"{prefix}/ln1/gain"], store[f"{prefix}/ln1/bias"])
    h = ad.add(x, mhsa(attn_in, store, f"{prefix}/attn", num_heads))
    ffn_in = ad.layer_norm(h, store[f"{prefix}/ln2/gain"], store[f"{prefix}/ln2/bias"])
    z = _add_bias(ad.matmul(ffn_in, store[f"{prefix}/ffn/w1"]), store[f"{prefix}/ffn/b1"])
    z = _add_bias(ad.matmul(ad.gelu(z), store[f"{prefix}/ffn/w2"]), store[f"{prefix}/ffn/b2"])
    return ad.add(h, z)


def multitrans(x: Tensor, store: ParamStore, num_blocks: int, num_heads: int,
               prefix: str = "trans") -> Tensor:
    """Stack of pre-norm sensor-axis transformer blocks with a final norm."""
    for i in range(num_blocks):
        x = transformer_block(x, store, f"{prefix}/{i}", num_heads)
    return ad.layer_norm(x, store[f"{prefix}/ln_out/gain"], store[f"{prefix}/ln_out/bias"])


# ---------------------------------------------------------------------------
# mean-field coupling fusion (one iteration)


def init_crf(store: ParamStore, rng: np.random.Generator, num_sensors: int,
             embed_dim: int, prefix: str = "crf") -> None:
    store.add(f"{prefix}/log_alpha", np.zeros(num_sensors))
    for u in range(num_sensors):
        for v in range(num_sensors):
            if u != v:
                store.add(f"{prefix}/couple/{u}_{v}",
                          ad.glorot_uniform(rng, (embed_dim, embed_dim)))


def crf_fuse(phi: Tensor, store: ParamStore, prefix: str = "crf") -> Tensor:
    """One mean-field refinement pass:
    z_v = z_v + (1/alpha_v) * sum_{u != v} z_u W_{u,v}, alpha_v = exp(a_v)."""
    b, t, s, d = phi.shape
    if s == 1:
        return phi  # no neighbors to couple
    singles = [ad.take(phi, [u], axis=2) for u in range(s)]
    cols = []
    for v in range(s):
        total = None
        for u in range(s):
            if u == v:
                continue
            term = ad.matmul(singles[u], store[f"{prefix}/couple/{u}_{v}"])
            total = term if total is None else ad.add(total, term)
        cols.append(total)
    messages = ad.concat(cols, axis=2)
    coef = ad.exp(ad.neg(store[f"{prefix}/log_alpha"]))
    coef = ad.broadcast_to(ad.reshape(coef, (1, 1, s, 1)), (b, t, s, d))
    return ad.add(phi, ad.mul(coef, messages))
