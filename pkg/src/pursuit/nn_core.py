"""A small reverse-mode autodiff tape over numpy arrays, plus the layers we need.

Every op records its parents and a closure mapping the output gradient to
parent gradients. Parameters live in a :class:`ParamStore`; the leaf tensors
it hands out write their gradients straight into the store's grad slots.
Values are float32 by default; everything also runs in float64, which the
gradient checks use.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
import json
import math
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError

DTYPE = np.float32

_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "sink", "consumed", "op")

    def __init__(self, data, parents=(), backward_fn=None, sink=None, op="leaf"):
        self.data = data
        self.parents = parents
        self.backward_fn = backward_fn
        self.sink = sink
        self.consumed = False
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.sink is not None or bool(self.parents)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def backward(self, grad=None) -> None:
        if self.consumed:
            raise ContractError("backward called twice on the same tape")
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.sink is not None:
                node.sink += g.astype(node.sink.dtype, copy=False)
            if node.backward_fn is not None:
                for p, pg in zip(node.parents, node.backward_fn(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    if id(p) in grads:
                        grads[id(p)] = grads[id(p)] + pg
                    else:
                        grads[id(p)] = pg
            node.backward_fn = None
            node.parents = ()
        self.consumed = True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite values produced by {op}")
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(out, tuple(parents), fn, op=op)
    return Tensor(out, op=op)


# ----------------------------------------------------------------------- ops


def dense(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ContractError(f"dense: input width {x.shape[-1]} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ContractError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
    xd, wd = x.data, weight.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("dense", out, parents, back)


def _pad_hw(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return a
    B, C, H, W = a.shape
    out = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=a.dtype)
    out[:, :, ph : ph + H, pw : pw + W] = a
    return out


def conv2d(x, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero padding that keeps H and W.

    ``x`` is (batch, C_in, H, W), ``kernels`` is (C_out, C_in, kh, kw) with odd kh, kw.
    """
    x = as_tensor(x)
    if x.data.ndim != 4 or kernels.data.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise ContractError(f"conv2d: incompatible input {x.shape} and kernels {kernels.shape}")
    cout, cin, kh, kw = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError("conv2d: kernel sizes must be odd")
    B, _, H, W = x.shape
    ph, pw = kh // 2, kw // 2
    xp = _pad_hw(x.data, ph, pw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B, C, H, W, kh, kw
    out = np.tensordot(win, kernels.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    flipped = kernels.data[:, :, ::-1, ::-1]

    def back(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        # input gradient is a same-size correlation of g with the flipped kernels
        gwin = sliding_window_view(_pad_hw(g, ph, pw), (kh, kw), axis=(2, 3))
        gx = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        return (gx, gk) if bias is None else (gx, gk, g.sum(axis=(0, 2, 3)))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make("conv2d", np.ascontiguousarray(out), parents, back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", x.data * mask, (x,), lambda g: (g * mask,))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    y = _softmax(x.data)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), back)


def attention(keys: Tensor, values: Tensor, query: Tensor) -> tuple[Tensor, np.ndarray]:
    """Softmax attention with scaled dot-product similarity.

    keys (B, T, d), values (B, T, d_v), query (B, d) -> output (B, d_v) and
    the weights (B, T), which sum to one along T.
    """
    if keys.data.ndim != 3 or values.data.ndim != 3 or query.data.ndim != 2:
        raise ContractError("attention: expected keys (B,T,d), values (B,T,dv), query (B,d)")
    B, T, d = keys.shape
    if T == 0:
        raise ValueError("attention over an empty source")
    if values.shape[:2] != (B, T) or query.shape != (B, d):
        raise ContractError(f"attention: shapes {keys.shape}, {values.shape}, {query.shape} do not match")
    scale = 1.0 / math.sqrt(d)
    kd, vd, qd = keys.data, values.data, query.data
    a = _softmax(np.einsum("btd,bd->bt", kd, qd) * scale)
    out = np.einsum("bt,btv->bv", a, vd)

    def back(g):
        gv = a[:, :, None] * g[:, None, :]
        ga = np.einsum("btv,bv->bt", vd, g)
        gs = a * (ga - (a * ga).sum(axis=1, keepdims=True)) * scale
        gk = gs[:, :, None] * qd[:, None, :]
        gq = np.einsum("bt,btd->bd", gs, kd)
        return gk, gv, gq

    return _make("attention", out, (keys, values, query), back), a


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def mean_spatial(x: Tensor) -> Tensor:
    """Global average pool: (B, C, H, W) -> (B, C)."""
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))
    return _make("mean_spatial", out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return _make("concat", out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


def mul_const(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=x.data.dtype)
    return _make("mul_const", x.data * c, (x,), lambda g: (g * c,))


def gather_rows(x: Tensor, idx) -> Tensor:
    """``x[b, idx[b]]`` for a (B, A) tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _make("gather", out, (x,), back)


def weighted_sum(x: Tensor, w) -> Tensor:
    """Scalar ``sum(x * w)`` for a constant ``w``; handy for gradient checks."""
    w = np.asarray(w, dtype=np.float64)
    out = np.asarray(np.sum(x.data.astype(np.float64) * w))
    return _make("weighted_sum", out, (x,), lambda g: ((g * w).astype(x.data.dtype),))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error, accumulated in float64."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ContractError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data.astype(np.float64) - target.astype(np.float64)
    n = diff.size
    out = np.asarray(np.mean(diff * diff))
    return _make("mse", out, (pred,), lambda g: ((2.0 * g * diff / n).astype(pred.data.dtype),))


# ------------------------------------------------------------------ params


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" or "conv"
    fan_in: int
    fan_out: int
    kernel: int = 1
    activation: str | None = "relu"


def check_layers(specs: Sequence[LayerSpec]) -> None:
    for a, b in zip(specs, specs[1:]):
        if a.fan_out != b.fan_in:
            raise ContractError(f"layer widths do not compose: {a} -> {b}")


class ParamStore:
    """Named float parameters with matching gradient slots and free-form metadata."""

    def __init__(self, meta: dict | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.meta: dict = dict(meta or {})

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def add_uniform(self, name: str, shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        self.add(name, rng.uniform(-bound, bound, size=shape).astype(DTYPE))

    def add_zeros(self, name: str, shape) -> None:
        self.add(name, np.zeros(shape, dtype=DTYPE))

    def add_layers(self, prefix: str, specs: Sequence[LayerSpec], rng: np.random.Generator) -> None:
        check_layers(specs)
        for i, sp in enumerate(specs):
            if sp.kind == "dense":
                self.add_uniform(f"{prefix}.{i}.w", (sp.fan_in, sp.fan_out), sp.fan_in, sp.fan_out, rng)
            elif sp.kind == "conv":
                k = sp.kernel
                self.add_uniform(
                    f"{prefix}.{i}.w", (sp.fan_out, sp.fan_in, k, k), sp.fan_in * k * k, sp.fan_out * k * k, rng
                )
            else:
                raise ContractError(f"unknown layer kind {sp.kind!r}")
            self.add_zeros(f"{prefix}.{i}.b", (sp.fan_out,))

    def forward_layers(self, prefix: str, specs: Sequence[LayerSpec], x) -> Tensor:
        x = as_tensor(x)
        for i, sp in enumerate(specs):
            op = dense if sp.kind == "dense" else conv2d
            x = op(x, self[f"{prefix}.{i}.w"], self[f"{prefix}.{i}.b"])
            if sp.activation == "relu":
                x = relu(x)
        return x

    def __getitem__(self, name: str) -> Tensor:
        return Tensor(self.params[name], sink=self.grads[name], op=name)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore(json.loads(json.dumps(self.meta)))
        for name, value in self.params.items():
            out.add(name, value.astype(dtype or value.dtype, copy=True))
        return out

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def grad_norm(store: ParamStore) -> float:
    return float(np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in store.grads.values())))


def sgd_step(store: ParamStore, lr: float, max_norm: float | None = None) -> None:
    """p <- p - lr * grad; with ``max_norm`` the whole gradient is first rescaled to at most that L2 norm."""
    step = lr
    if max_norm is not None:
        norm = grad_norm(store)
        if norm > max_norm:
            step = lr * max_norm / norm
    for name, p in store.params.items():
        p -= np.asarray(step, dtype=p.dtype) * store.grads[name]


def sync_copy(src: ParamStore, dst: ParamStore) -> None:
    if src.params.keys() != dst.params.keys():
        raise ContractError("sync_copy: parameter names differ")
    for name, p in src.params.items():
        if dst.params[name].shape != p.shape:
            raise ContractError(f"sync_copy: shape mismatch for {name!r}")
        np.copyto(dst.params[name], p)
    dst.meta = json.loads(json.dumps(src.meta))


# -------------------------------------------------------------- persistence

_MAGIC = "PARAMSTORE 1"


class CheckpointError(ValueError):
    pass


def dumps_params(store: ParamStore) -> bytes:
    lines = [_MAGIC]
    for key in sorted(store.meta):
        lines.append(f"meta {key} {json.dumps(store.meta[key], sort_keys=True)}")
    offset = 0
    payload = []
    for name, value in store.params.items():
        shape = ",".join(str(d) for d in value.shape) or "-"
        lines.append(f"param {name} {shape} {offset} {value.size}")
        offset += value.size
        payload.append(value.astype("<f4", copy=False).ravel())
    lines.append("end")
    body = np.concatenate(payload).tobytes() if payload else b""
    return ("\n".join(lines) + "\n").encode("utf-8") + body


def save_params(store: ParamStore, path) -> None:
    Path(path).write_bytes(dumps_params(store))


def loads_params(blob: bytes, source: str = "<bytes>") -> ParamStore:
    end = blob.find(b"\nend\n")
    if not blob.startswith(_MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{source}: missing or corrupt header")
    header = blob[: end + 1].decode("utf-8").splitlines()[1:]
    payload = blob[end + 5 :]
    store = ParamStore()
    total = len(payload) // 4
    for line in header:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            try:
                store.meta[key] = json.loads(value)
            except json.JSONDecodeError as exc:
                raise CheckpointError(f"{source}: bad metadata entry {key!r}") from exc
        elif kind == "param":
            try:
                name, shape_s, off_s, count_s = rest.split(" ")
                shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
                off, count = int(off_s), int(count_s)
            except ValueError as exc:
                raise CheckpointError(f"{source}: corrupt header line {line!r}") from exc
            if math.prod(shape) != count:
                raise CheckpointError(f"{source}: parameter {name!r} shape {shape} does not match count {count}")
            if off + count > total:
                raise CheckpointError(f"{source}: payload truncated inside parameter {name!r}")
            value = np.frombuffer(payload, dtype="<f4", count=count, offset=4 * off).astype(DTYPE).reshape(shape)
            store.add(name, value)
        else:
            raise CheckpointError(f"{source}: unknown header entry {line!r}")
    if len(payload) != 4 * sum(v.size for v in store.params.values()):
        raise CheckpointError(f"{source}: payload length does not match the header")
    return store


def load_params(path) -> ParamStore:
    return loads_params(Path(path).read_bytes(), str(path))


# --------------------------------------------------------- gradient checks


def gradient_check(
    loss_fn: Callable[[ParamStore], Tensor],
    store: ParamStore,
    h: float = 1e-6,
    max_entries: int | None = 40,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
) -> dict[str, float]:
    """Compare backprop gradients with central differences, per parameter.

    Runs in float64 on a copy of ``store``. Returns the norm-wise relative
    error ``|g_a - g_n| / max(|g_a|, |g_n|)`` for each checked parameter.
    """
    rng = rng or np.random.default_rng(0)
    st = store.copy(np.float64)
    st.zero_grad()
    loss_fn(st).backward()
    errors = {}
    for name in names or st.names():
        p = st.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        with no_grad():
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn(st).item()
                flat[i] = orig - h
                down = loss_fn(st).item()
                flat[i] = orig
                numeric[k] = (up - down) / (2 * h)
        analytic = st.grads[name].reshape(-1)[idx]
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        errors[name] = 0.0 if scale < 1e-10 else float(np.linalg.norm(analytic - numeric) / scale)
    return errors
