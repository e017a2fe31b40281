"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the active :class:`Tape` whenever one of their inputs
requires a gradient. ``backward`` replays the tape in exact reverse order and
accumulates gradients into leaf tensors (parameters); a tape can be replayed
only once.

    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)
    w.grad

Every op checks its output for NaN/Inf and raises :class:`NonFiniteError`
naming itself, so the first bad operation is reported rather than the loss.
Broadcasting is limited to size-1 axes (numpy rules); anything else needs an
explicit reshape.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NonFiniteError, ParseError, ShapeError, TapeError

_ACTIVE: list["Tape"] = []


def current_tape() -> Optional["Tape"]:
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node = None
        self._tape = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of operations; recording order is a topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def record(self, node: _Node) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); start a new tape")
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if self.consumed:
            raise TapeError("backward() already called on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        if loss._tape is not self:
            # loss not produced on this tape: nothing to propagate, but a tracked
            # leaf loss still receives its unit gradient
            if loss.requires_grad and loss._node is None:
                loss.grad = (0.0 if loss.grad is None else loss.grad) + np.ones_like(loss.data)
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None or p._tape is not self:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Run reverse mode on the tape that produced ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not recorded on any tape")
    tape.backward(loss)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    tape = current_tape()
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out._tape = None
    out.requires_grad = False
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(op, out, tuple(parents), backward)
        tape.record(node)
        out._node = node
        out._tape = tape
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(
        "mul", ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _result("reshape", data, (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _result("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def bw(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result("getitem", np.array(a.data[index]), (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    ax = axis % ts[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _result("concat", data, ts, bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope)
    return _result("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign to keep exp() bounded
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _result("log", y, (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(y > 0, 0.5 / y, 0.0)
    return _result("sqrt", y, (a,), lambda g: (g * inv,))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= lo
    return _result("clamp_min", np.where(mask, a.data, lo), (a,), lambda g: (g * mask,))


def softmax(a) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError("softmax needs at least one element on the last axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result("softmax", y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def masked_softmax(a, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked-out entries are exactly 0.

    The max used for stabilisation is taken over allowed entries only, so
    values at masked positions never influence the result.
    """
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs input {a.shape}")
    if not mask.any(axis=-1).all():
        raise ShapeError("masked_softmax: every row needs at least one allowed entry")
    x = a.data
    m = np.where(mask, x, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, x - m, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result("masked_softmax", y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (C, H, W) input with (F, C, kh, kw) kernels, zero padding."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    c, h, w = x.shape
    f, _, kh, kw = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel sizes must be odd")
    if stride < 1 or (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError(f"conv2d: geometry {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {padding} not divisible")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    kd = kernels.data

    def window(dy, dx):
        return (slice(None), slice(dy, dy + stride * (ho - 1) + 1, stride), slice(dx, dx + stride * (wo - 1) + 1, stride))

    out = np.zeros((f, ho, wo))
    for dy in range(kh):
        for dx in range(kw):
            xs = xp[window(dy, dx)].reshape(c, ho * wo)
            out += (kd[:, :, dy, dx] @ xs).reshape(f, ho, wo)

    def bw(g):
        g2 = g.reshape(f, ho * wo)
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for dy in range(kh):
            for dx in range(kw):
                sl = window(dy, dx)
                xs = xp[sl].reshape(c, ho * wo)
                gk[:, :, dy, dx] = g2 @ xs.T
                gxp[sl] += (kd[:, :, dy, dx].T @ g2).reshape(c, ho, wo)
        return gxp[:, padding : padding + h, padding : padding + w], gk

    return _result("conv2d", out, (x, kernels), bw)


def _patch_bounds(center, k, h, w):
    col, row = int(center[0]), int(center[1])
    r = k // 2
    r0, c0 = row - r, col - r
    sr0, sr1 = max(r0, 0), min(r0 + k, h)
    sc0, sc1 = max(c0, 0), min(c0 + k, w)
    return r0, c0, sr0, sr1, sc0, sc1


def gather_patches(fmap, centers: Sequence[tuple[int, int]], k: int) -> Tensor:
    """Flattened (N, C*k*k) zero-padded patches of a (C, H, W) map at (col, row) centers."""
    fmap = as_tensor(fmap)
    if k % 2 != 1:
        raise ShapeError("patch size must be odd")
    c, h, w = fmap.shape
    out = np.zeros((len(centers), c, k, k))
    spans = [_patch_bounds(ctr, k, h, w) for ctr in centers]
    for n, (r0, c0, sr0, sr1, sc0, sc1) in enumerate(spans):
        if sr0 < sr1 and sc0 < sc1:
            out[n, :, sr0 - r0 : sr1 - r0, sc0 - c0 : sc1 - c0] = fmap.data[:, sr0:sr1, sc0:sc1]

    def bw(g):
        g = g.reshape(len(centers), c, k, k)
        gm = np.zeros_like(fmap.data)
        for n, (r0, c0, sr0, sr1, sc0, sc1) in enumerate(spans):
            if sr0 < sr1 and sc0 < sc1:
                gm[:, sr0:sr1, sc0:sc1] += g[n, :, sr0 - r0 : sr1 - r0, sc0 - c0 : sc1 - c0]
        return (gm,)

    return _result("gather_patches", out.reshape(len(centers), c * k * k), (fmap,), bw)


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def lstm_cell(x, h, c, wx, wh, b) -> tuple[Tensor, Tensor]:
    """One LSTM step on row-batched inputs; gate blocks ordered (input, forget, cell, output)."""
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    u = h.shape[-1]
    if wx.shape != (x.shape[-1], 4 * u) or wh.shape != (u, 4 * u) or b.shape[-1] != 4 * u or c.shape != h.shape:
        raise ShapeError(
            f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape} vs wx {wx.shape}, wh {wh.shape}, b {b.shape}"
        )
    z = add(add(matmul(x, wx), matmul(h, wh)), b)
    i = sigmoid(z[:, :u])
    f = sigmoid(z[:, u : 2 * u])
    g = tanh(z[:, 2 * u : 3 * u])
    o = sigmoid(z[:, 3 * u :])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"DGANTNSR"
CHECKPOINT_VERSION = 1


def save_tensors(path, tensors: dict[str, "Tensor | np.ndarray"]) -> None:
    """Flat little-endian binary: header (magic, version, count), then per tensor
    (name length, utf-8 name, rank, dims, f64 data). Entries are written in
    sorted name order."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        value = tensors[name]
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a tensor checkpoint")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    return out
