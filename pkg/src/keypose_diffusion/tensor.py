"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op evaluates eagerly with numpy and, when any input
requires a gradient and taping is enabled, appends a node to the active
:class:`Tape`. :func:`backward` replays the tape once in reverse order.

Broadcasting follows numpy's trailing-axis rule; gradients flowing into a
broadcast operand are summed back to its shape.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError, FormatError, VersionMismatchError

_state = threading.local()


def _local():
    if not hasattr(_state, "tapes"):
        _state.tapes = [Tape()]
        _state.grad_enabled = True
        _state.dtype = np.dtype(np.float64)
    return _state


def set_default_dtype(dtype) -> None:
    """Set the dtype used for new tensors on this thread (float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _local().dtype = dtype


def get_default_dtype() -> np.dtype:
    return _local().dtype


@contextmanager
def default_dtype(dtype):
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextmanager
def no_grad():
    """Disable taping inside the block."""
    st = _local()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _local().grad_enabled


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the ops executed since the last backward pass.

    Use as a context manager to give a forward pass its own tape; otherwise
    a per-thread default tape is used.
    """

    nodes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()

    def __enter__(self) -> "Tape":
        _local().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local().tapes.pop()


def current_tape() -> Tape:
    return _local().tapes[-1]


class Tensor:
    """n-dimensional array that can take part in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out`` as a tensor and tape ``backward`` if any input needs grads.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    Exposed so other modules can define fused differentiable ops.
    """
    result = Tensor(out, dtype=out.dtype)
    if _local().grad_enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        current_tape().nodes.append(_Node(op, tuple(inputs), result, backward))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _coerce(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    return a, b


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return record("div", out, (a, b),
                  lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record("log", np.log(xd), (x,), lambda g: (g / xd,))


def tabs(x: Tensor) -> Tensor:
    xd = x.data
    return record("abs", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", x.data * mask, (x,), lambda g: (g * mask,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return record("gelu", out, (x,), backward)


def _sigmoid_np(xd: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(xd))
    return np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


# -- reductions and shape ops ---------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return record("sum", np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return record("getitem", np.asarray(x.data[index]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    return record("broadcast_to", np.broadcast_to(x.data, shape).copy(), (x,),
                  lambda g: (_unbroadcast(g, src),))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    shape, dtype = table.shape, table.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return record("embedding", table.data[ids], (table,), backward)


# -- linear algebra --------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold the batch axes into rows: one large GEMM instead of many small ones
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def backward(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return record("matmul", (a2 @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), backward)

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record("matmul", ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- normalisation -----------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (x,), backward)


LN_EPS = 1e-5


def normalize(x: Tensor, eps: float = LN_EPS) -> Tensor:
    """Zero-mean, unit-variance over the last axis (no affine)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return record("normalize", xhat, (x,), backward)


def layernorm(x: Tensor, gain, bias) -> Tensor:
    return add(mul(normalize(x), gain), bias)


def adaptive_layernorm(x: Tensor, scale, shift) -> Tensor:
    """Layer norm whose affine terms come from a conditioning signal.

    ``scale`` and ``shift`` broadcast over the token axis; the gain is
    ``1 + scale`` so zero conditioning output leaves the normalised input.
    """
    return add(mul(normalize(x), add(scale, 1.0)), shift)


# -- losses -------------------------------------------------------------------
def _reduce(x: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return mean(x)
    if reduction == "sum":
        return tsum(x)
    if reduction == "none":
        return x
    raise ValueError(f"unknown reduction {reduction!r}")


def l1_loss(pred, target, reduction: str = "mean") -> Tensor:
    pred, target = _coerce(pred, target)
    return _reduce(tabs(sub(pred, target)), reduction)


BCE_CLAMP = 1e-7


def bce_loss(prob, target, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7]."""
    prob, target = _coerce(prob, target)
    _broadcast_shape(prob, target, "bce_loss")
    pd, yd = prob.data, target.data
    p = np.clip(pd, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (pd >= BCE_CLAMP) & (pd <= 1.0 - BCE_CLAMP)
    out = -(yd * np.log(p) + (1.0 - yd) * np.log1p(-p))

    def backward(g):
        dp = g * (-(yd / p) + (1.0 - yd) / (1.0 - p)) * inside
        dy = g * (np.log1p(-p) - np.log(p))
        return _unbroadcast(dp, pd.shape), _unbroadcast(dy, yd.shape)

    return _reduce(record("bce", out, (prob, target), backward), reduction)


# -- backward ------------------------------------------------------------------
def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every taped tensor the loss depends on.

    Leaf gradients accumulate across calls; the tape is cleared afterwards.
    """
    tape = tape if tape is not None else current_tape()
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise ContractError("backward called with an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.output) for n in tape.nodes}
    try:
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    gi = np.asarray(gi, dtype=inp.dtype)
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    finally:
        tape.clear()


# -- optimisation -------------------------------------------------------------
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None],
              state: AdamState, lr: float, weight_decay: float = 0.0) -> AdamState:
    """One Adam update with decoupled weight decay, applied in place."""
    state.step += 1
    c1 = 1.0 - ADAM_BETA1**state.step
    c2 = 1.0 - ADAM_BETA2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise DimensionError(f"adam state for {name} has shape {m.shape}, param {p.shape}")
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype, copy=False)
    return state


class Adam:
    """Stateful wrapper around :func:`adam_step`."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state,
                  self.lr, self.weight_decay)


# -- gradient checking ---------------------------------------------------------
def numerical_grad(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar ``fn`` w.r.t. ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` using Euclidean norms."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom)


def check_gradients(fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                    eps: float = 1e-6) -> dict[str, float]:
    """Compare taped gradients with finite differences for each parameter.

    Returns the relative error per parameter name.
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = fn()
        backward(loss, tape)

    def value():
        with no_grad():
            return float(fn().data)

    errors = {}
    for name, p in params.items():
        numeric = numerical_grad(value, p.data, eps)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[name] = relative_error(analytic, numeric)
    return errors


# -- checkpoints ---------------------------------------------------------------
CHECKPOINT_MAGIC = b"KPCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray], metadata: bytes = b"") -> None:
    """Write parameters in the versioned little-endian container.

    Layout: magic, u32 version, u32 metadata length, metadata bytes, u32
    entry count, then per entry (sorted by name): u16 name length, name,
    u8 dtype code, u8 ndim, u32 extents, raw values.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(metadata)), metadata,
             struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = params[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"cannot store dtype {arr.dtype} for {name}")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], bytes]:
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_checkpoint(buf)


def parse_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], bytes]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        off = 12
        metadata = buf[off:off + meta_len]
        off += meta_len
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(buf):
                raise FormatError(f"checkpoint truncated inside entry {name!r}")
            params[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize,
                                         offset=off).reshape(shape).copy()
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"checkpoint corrupt or truncated: {exc}") from None
    if off != len(buf):
        raise FormatError("checkpoint has trailing bytes")
    return params, metadata
