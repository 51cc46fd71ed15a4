"""Dense n-d arrays with a reverse-mode gradient tape, plus the optimizer bits.

Forward values are plain numpy; each op that touches a gradient-tracked input
records a backward closure on the implicit tape (the DAG of parent links).
float64 is used by gradient-check tests, float32 by training runs.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from typing import Iterable, Sequence

import numpy as np
from scipy import special


class ContractViolation(ValueError):
    """An op was called with inputs that break its contract."""


class NumericError(ArithmeticError):
    """An op produced a non-finite value."""


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    return data


class Tensor:
    """A numpy buffer plus optional gradient-tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Reverse-mode pass from a scalar loss; fills .grad on all tracked leaves."""
        if self.size != 1:
            raise ContractViolation(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # interior values are not leaves; free graph state as we go
                node._backward = None
                node._parents = ()
                node.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(_check_finite(data, op))
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _grad_target(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if _grad_target(a):
            a.accumulate(_unbroadcast(g, a.shape).astype(a.dtype))
        if _grad_target(b):
            b.accumulate(_unbroadcast(g, b.shape).astype(b.dtype))

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if _grad_target(a):
            a.accumulate(_unbroadcast(g, a.shape).astype(a.dtype))
        if _grad_target(b):
            b.accumulate(_unbroadcast(-g, b.shape).astype(b.dtype))

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if _grad_target(a):
            a.accumulate(_unbroadcast(g * b.data, a.shape).astype(a.dtype))
        if _grad_target(b):
            b.accumulate(_unbroadcast(g * a.data, b.shape).astype(b.dtype))

    return _make(a.data * b.data, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if _grad_target(a):
            a.accumulate(_unbroadcast(g / b.data, a.shape).astype(a.dtype))
        if _grad_target(b):
            b.accumulate(
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape).astype(b.dtype)
            )

    return _make(a.data / b.data, (a, b), bwd, "div")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        if _grad_target(a):
            a.accumulate(g * out_data)

    return _make(out_data, (a,), bwd, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if _grad_target(a):
            a.accumulate(g / a.data)

    return _make(np.log(a.data), (a,), bwd, "log")


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if _grad_target(a):
            a.accumulate(g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bwd, "abs")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = special.expit(a.data)

    def bwd(g):
        if _grad_target(a):
            a.accumulate(g * s * (1.0 - s))

    return _make(s, (a,), bwd, "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    # tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def bwd(g):
        if _grad_target(a):
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
            a.accumulate(g * da)

    return _make(0.5 * x * (1.0 + t), (a,), bwd, "gelu")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        if _grad_target(a):
            if axis is None:
                a.accumulate(np.broadcast_to(g, a.shape).astype(a.dtype))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate(np.broadcast_to(gg, a.shape).astype(a.dtype))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bwd(g):
        if _grad_target(a):
            if axis is None:
                a.accumulate((np.broadcast_to(g, a.shape) / count).astype(a.dtype))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate((np.broadcast_to(gg, a.shape) / count).astype(a.dtype))

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd, "mean")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if _grad_target(a):
            dot = (g * s).sum(axis=axis, keepdims=True)
            a.accumulate(s * (g - dot))

    return _make(s, (a,), bwd, "softmax")


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    if eps <= 0:
        raise ContractViolation("layer_norm eps must be > 0")
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    n = x.shape[-1]

    def bwd(g):
        if _grad_target(a):
            gxc = g * inv
            a.accumulate(
                gxc
                - gxc.mean(axis=-1, keepdims=True)
                - xc * inv**3 / n * (g * xc).sum(axis=-1, keepdims=True)
            )

    return _make(y, (a,), bwd, "layer_norm")


# ---------------------------------------------------------------------------
# shape and linear-algebra primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(
            f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bwd(g):
        if _grad_target(a):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate(_unbroadcast(ga, a.shape).astype(a.dtype))
        if _grad_target(b):
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate(_unbroadcast(gb, b.shape).astype(b.dtype))

    return _make(np.matmul(a.data, b.data), (a, b), bwd, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def bwd(g):
        if _grad_target(a):
            a.accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = np.argsort(ax)

    def bwd(g):
        if _grad_target(a):
            a.accumulate(np.transpose(g, inv))

    return _make(np.transpose(a.data, ax), (a,), bwd, "transpose")


def getitem(a, key) -> Tensor:
    """Basic (slice/int/ellipsis) indexing; no duplicate-index fancy paths."""
    a = as_tensor(a)

    def bwd(g):
        if _grad_target(a):
            full = np.zeros_like(a.data)
            full[key] = g
            a.accumulate(full)

    return _make(a.data[key], (a,), bwd, "slice")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if _grad_target(t):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                t.accumulate(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bwd, "concat")


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the first two axes of an (H, W, C) tensor by `pad` on each side."""
    a = as_tensor(a)
    widths = ((pad, pad), (pad, pad)) + ((0, 0),) * (a.ndim - 2)

    def bwd(g):
        if _grad_target(a):
            a.accumulate(g[pad : g.shape[0] - pad, pad : g.shape[1] - pad])

    return _make(np.pad(a.data, widths), (a,), bwd, "pad2d")


def embedding_lookup(table, idx) -> Tensor:
    """Gather rows of `table`; backward scatter-adds, so duplicate ids are fine."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        if _grad_target(table):
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table.accumulate(full)

    return _make(table.data[idx], (table,), bwd, "embedding_lookup")


def upsample_nearest(a, factor: int) -> Tensor:
    """Nearest-neighbor upsample of the first two axes of an (H, W, C) tensor."""
    a = as_tensor(a)
    h, w = a.shape[0], a.shape[1]

    def bwd(g):
        if _grad_target(a):
            gg = g.reshape(h, factor, w, factor, *a.shape[2:])
            a.accumulate(gg.sum(axis=(1, 3)))

    out = np.repeat(np.repeat(a.data, factor, axis=0), factor, axis=1)
    return _make(out, (a,), bwd, "upsample_nearest")


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamWState:
    """Per-parameter moment estimates and the shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: int = 0


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update in place: decoupled decay, bias-corrected moments."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        if g.shape != p.data.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} != param shape {p.data.shape} for '{name}'"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def cosine_schedule(step: int, total: int, warmup: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at `total`."""
    if not 0 <= step <= total or warmup > total:
        raise ContractViolation(f"bad schedule args step={step} total={total} warmup={warmup}")
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if total == warmup:
        return base_lr
    progress = (step - warmup) / (total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# checkpoint format: JSON header + concatenated little-endian raw buffers

_MAGIC = b"CFCK"


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]


def save_checkpoint(path, params: dict[str, Tensor], config: dict | None = None) -> None:
    names = sorted(params)
    header = {
        "config": config or {},
        "config_hash": config_hash(config or {}),
        "params": [
            {
                "name": n,
                "shape": list(params[n].shape),
                "dtype": params[n].dtype.name,
            }
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            arr = params[n].data
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ContractViolation(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        params: dict[str, Tensor] = {}
        for rec in header["params"]:
            dtype = np.dtype(rec["dtype"])
            count = int(np.prod(rec["shape"])) if rec["shape"] else 1
            buf = f.read(count * dtype.itemsize)
            arr = np.frombuffer(buf, dtype=dtype).reshape(rec["shape"]).copy()
            params[rec["name"]] = Tensor(arr, requires_grad=True)
    return params, header["config"]
