"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Everything in this package trains through this module: matrix products,
softmax attention, layer normalization, the reductions behind the losses,
and an AdamW optimizer with decoupled weight decay. Desk scale on purpose:
numpy arrays, 64-bit precision, no broadcasting beyond equal shapes and
scalars (a few fused ops broadcast internally), and loud failure on any
non-finite value or gradient.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """A value or gradient stopped being finite."""


class CheckpointError(ValueError):
    """A parameter checkpoint file is malformed, corrupt, or unsupported."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph construction inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense float64 array plus an optional gradient slot.

    Tensors are immutable by convention: ops never write into ``data`` of
    their inputs. ``requires_grad`` marks graph participation; internal
    nodes inherit it from their parents.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "op")

    def __init__(self, data, requires_grad=False, *, _parents=(), _grad_fn=None, _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"{_op}: non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._grad_fn = _grad_fn
        self.op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar; scalars route through scale/add-constant
    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, shape):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(shape, float(x)))


def _node(data, parents, grad_fn, op):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _grad_fn=grad_fn, _op=op)
    return Tensor(data, _op=op)


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def grad_fn(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def grad_fn(g):
        return (g if a.requires_grad else None, -g if b.requires_grad else None)

    return _node(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of equal-shape tensors."""
    _same_shape(a, b, "hadamard")

    def grad_fn(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), grad_fn, "hadamard")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def grad_fn(g):
        return (g * s,)

    return _node(x.data * s, (x,), grad_fn, "scale")


def neg(x: Tensor) -> Tensor:
    def grad_fn(g):
        return (-g,)

    return _node(-x.data, (x,), grad_fn, "neg")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), grad_fn, "sigmoid")


_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def grad_fn(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _node(xd * cdf, (x,), grad_fn, "gelu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def grad_fn(g):
        return (g * out,)

    return _node(out, (x,), grad_fn, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise NumericError("log: non-positive input")

    def grad_fn(g):
        return (g / x.data,)

    return _node(np.log(x.data), (x,), grad_fn, "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero where the clamp binds."""
    lo, hi = float(lo), float(hi)

    def grad_fn(g):
        inside = (x.data >= lo) & (x.data <= hi)
        return (g * inside,)

    return _node(np.clip(x.data, lo, hi), (x,), grad_fn, "clip")


# ---------------------------------------------------------------------------
# shape and structure ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims must match unless b is 2-d."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {ad.shape} x {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions disagree: {ad.shape} x {bd.shape}")

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return (ga, gb)

    return _node(ad @ bd, (a, b), grad_fn, "matmul")


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"transpose_last2: need at least 2-d, got {x.shape}")

    def grad_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return _node(np.swapaxes(x.data, -1, -2), (x,), grad_fn, "transpose_last2")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def grad_fn(g):
        return (g.reshape(x.data.shape),)

    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from None
    return _node(out, (x,), grad_fn, "reshape")


def concat(parts, axis: int) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    datas = [p.data for p in parts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def grad_fn(g):
        pieces = np.split(g, sizes, axis=axis)
        return tuple(piece if p.requires_grad else None for p, piece in zip(parts, pieces))

    return _node(out, parts, grad_fn, "concat")


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Select slices along an axis; gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"take: indices must be 1-d, got {idx.shape}")

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _node(np.take(x.data, idx, axis=axis), (x,), grad_fn, "take")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {e}") from None

    def grad_fn(g):
        gx = g
        extra = gx.ndim - x.data.ndim
        if extra:
            gx = gx.sum(axis=tuple(range(extra)))
        squeeze = tuple(i for i, n in enumerate(x.data.shape) if n == 1 and gx.shape[i] != 1)
        if squeeze:
            gx = gx.sum(axis=squeeze, keepdims=True)
        return (gx,)

    return _node(np.array(out), (x,), grad_fn, "broadcast_to")


def stop_gradient(x: Tensor) -> Tensor:
    """Value passthrough that the backward pass never crosses."""
    return Tensor(x.data, _op="stop_gradient")


# ---------------------------------------------------------------------------
# normalization and reductions


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis."""
    xd = x.data
    ax = axis if axis >= 0 else xd.ndim + axis
    if not 0 <= ax < xd.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {xd.shape}")
    if xd.shape[ax] == 0:
        raise ShapeError("softmax: empty axis")
    m = xd.max(axis=ax, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=ax, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return (y * (g - dot),)

    return _node(y, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean, unit (population) variance."""
    xd = x.data
    n = xd.shape[-1]
    if n < 2:
        raise ShapeError(f"layer_norm: last axis must have size >= 2, got {xd.shape}")
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({n},), "
                         f"got {gain.data.shape} and {bias.data.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx, gg, gb)

    return _node(out, (x, gain, bias), grad_fn, "layer_norm")


def _normalize_axes(shape, axis, op):
    if axis is None:
        return tuple(range(len(shape)))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a if a >= 0 else len(shape) + a for a in axes)
    for a in axes:
        if not 0 <= a < len(shape):
            raise ShapeError(f"{op}: axis {axis} out of range for shape {shape}")
    if len(set(axes)) != len(axes):
        raise ShapeError(f"{op}: repeated axis in {axis}")
    return axes


def _check_nonempty(shape, axes, op):
    count = 1
    for a in axes:
        count *= shape[a]
    if count == 0:
        raise ShapeError(f"{op}: empty reduction")
    return count


def _unreduce(g, shape, axes):
    expanded = list(g.shape)
    for a in sorted(axes):
        expanded.insert(a, 1)
    return np.broadcast_to(g.reshape(expanded), shape)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    axes = _normalize_axes(x.data.shape, axis, "reduce_sum")
    _check_nonempty(x.data.shape, axes, "reduce_sum")

    def grad_fn(g):
        return (np.array(_unreduce(g, x.data.shape, axes)),)

    return _node(x.data.sum(axis=axes), (x,), grad_fn, "reduce_sum")


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    axes = _normalize_axes(x.data.shape, axis, "reduce_mean")
    count = _check_nonempty(x.data.shape, axes, "reduce_mean")

    def grad_fn(g):
        return (_unreduce(g, x.data.shape, axes) / count,)

    return _node(x.data.mean(axis=axes), (x,), grad_fn, "reduce_mean")


def l2_sq(x: Tensor, axis=None) -> Tensor:
    """Sum of squares over the given axes."""
    axes = _normalize_axes(x.data.shape, axis, "l2_sq")
    _check_nonempty(x.data.shape, axes, "l2_sq")

    def grad_fn(g):
        return (2.0 * x.data * _unreduce(g, x.data.shape, axes),)

    return _node((x.data * x.data).sum(axis=axes), (x,), grad_fn, "l2_sq")


# ---------------------------------------------------------------------------
# backward


def _toposort(root: Tensor):
    """Parents-before-children order over the grad-requiring subgraph."""
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor, params: "ParamStore | None" = None) -> None:
    """Populate ``grad`` on every grad-requiring leaf reachable from ``loss``.

    ``loss`` must be scalar. Leaf gradients are assigned, not accumulated,
    so repeated calls overwrite rather than stack (grads are reset every
    optimizer step anyway). If ``params`` is given, any of its tensors the
    graph never reached get an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g  # leaf
                continue
            for p, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if not np.isfinite(pg).all():
                    raise NumericError(f"{node.op}: non-finite gradient")
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
    if params is not None:
        for _, p in params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints


class ParamStore:
    """Named parameter tensors with deterministic lexicographic iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step_count = 0

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def names_with_prefix(self, prefix: str) -> list[str]:
        return [n for n in self.names() if n.startswith(prefix)]

    def copy(self, requires_grad: bool | None = None) -> "ParamStore":
        out = ParamStore()
        out.step_count = self.step_count
        for name, p in self.items():
            rg = p.requires_grad if requires_grad is None else requires_grad
            out.add(name, p.data.copy(), requires_grad=rg)
        return out

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, p.data.shape) for name, p in self.items()]

    def total_size(self) -> int:
        return sum(p.data.size for _, p in self.items())


class AdamW:
    """Adam with decoupled weight decay over a ParamStore.

    update: m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2
            w <- w - lr * mhat / (sqrt(vhat) + eps) - lr * wd * w
    Gradients are cleared and step_count incremented on every step.
    """

    def __init__(self, params: ParamStore, lr: float = 1e-3, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8,
                 names=None):
        self.params = params
        self.names = sorted(names) if names is not None else params.names()
        for n in self.names:
            if n not in params:
                raise ValueError(f"adamw: unknown parameter '{n}'")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self._m = {n: np.zeros_like(params[n].data) for n in self.names}
        self._v = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self) -> None:
        self.params.step_count += 1
        t = self.params.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in self.names:
            p = self.params[name]
            if p.grad is None:
                raise ValueError(f"adamw_step: missing gradient for parameter '{name}'")
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.epsilon)
            p.data = p.data - self.lr * update - self.lr * self.weight_decay * p.data
            if not np.isfinite(p.data).all():
                raise NumericError(f"adamw_step: non-finite parameter '{name}'")
            p.grad = None


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int | None = None,
                   fan_out: int | None = None) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    shape = tuple(int(s) for s in shape)
    fi = int(fan_in) if fan_in is not None else int(shape[0])
    fo = int(fan_out) if fan_out is not None else int(shape[-1])
    a = np.sqrt(6.0 / (fi + fo))
    return rng.uniform(-a, a, size=shape)


CHECKPOINT_MAGIC = b"MLDC"
CHECKPOINT_VERSION = 1


def save_checkpoint(store: ParamStore, path) -> None:
    """Write one file: magic, version, JSON manifest, then raw <f8 data."""
    manifest = []
    blobs = []
    offset = 0
    for name, p in store.items():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    data = b"".join(blobs)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "step_count": store.step_count,
        "data_crc32": format(zlib.crc32(data) & 0xFFFFFFFF, "08x"),
        "params": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(data)


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        header = json.loads(raw[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad manifest: {e}") from None
    data = raw[header_end:]
    crc = format(zlib.crc32(data) & 0xFFFFFFFF, "08x")
    if crc != header.get("data_crc32"):
        raise CheckpointError(f"{path}: checksum mismatch")
    store = ParamStore()
    store.step_count = int(header.get("step_count", 0))
    for entry in header["params"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated data for '{entry['name']}'")
        arr = np.frombuffer(data[start:end], dtype="<f8").reshape(shape).copy()
        store.add(entry["name"], arr)
    return store
