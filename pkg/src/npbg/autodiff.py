"""Dense tensors with tape-based reverse-mode differentiation.

Images are channels-first ``[C, H, W]`` arrays. Operations executed while a
:class:`Tape` is active are recorded when any input requires a gradient;
:func:`backward` replays the record in reverse.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape():
    ...     loss = mean(mul(x, x))
    >>> backward(loss)
    >>> x.grad.tolist()
    [1.0, 2.0]
"""
from __future__ import annotations

import contextlib
import struct
import threading
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "default_dtype",
    "precision",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "elu",
    "sigmoid",
    "absolute",
    "mean",
    "total",
    "conv2d",
    "gated_conv",
    "downsample2x",
    "upsample2x",
    "concat_channels",
    "gather_rows",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


class Tensor:
    """A real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64) or not isinstance(data, np.ndarray):
            arr = arr.astype(default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


class Tape:
    """Ordered record of differentiable operations.

    A tape is single-use: :meth:`backward` consumes it.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        out._tape = self
        self.records.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp._tape is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
        self.records.clear()
        self.consumed = True
        return {key: grads[key] for key in leaves}


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Fill ``.grad`` on every leaf that requires it and consume the tape.

    Leaf gradients are replaced, not accumulated across calls.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise RuntimeError("backward() called on a tensor that was not recorded on a tape")
    return loss._tape.backward(loss)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    tapes = _tape_stack()
    if tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tapes[-1].record(out, inputs, vjp)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# elementwise ----------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,),
                 lambda g: (g * mask,))


def _elu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ELU and its derivative."""
    neg = np.minimum(x, 0)
    return np.maximum(x, 0) + np.expm1(neg), np.exp(neg)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form saturates to exactly 0/1 without overflow warnings
    half = x.dtype.type(0.5)
    return half + half * np.tanh(half * x)


def elu(a: Tensor) -> Tensor:
    out, slope = _elu(a.data)
    return _emit("elu", out, (a,), lambda g: (g * slope,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _emit("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape, dtype = a.shape, a.dtype
    return _emit("mean", np.asarray(a.data.mean(dtype=dtype)), (a,),
                 lambda g: (np.full(shape, g / n, dtype=dtype),))


def total(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return _emit("sum", np.asarray(a.data.sum(dtype=dtype)), (a,),
                 lambda g: (np.full(shape, g, dtype=dtype),))


# convolution ------------------------------------------------------------------

def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: int, op: str):
    if x.data.ndim != 3:
        raise ValueError(f"{op}: input must be [C, H, W], got shape {x.shape}")
    if w.data.ndim != 4:
        raise ValueError(f"{op}: weight must be [C_out, C_in, k, k], got shape {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if x.shape[0] != c_in:
        raise ValueError(f"{op}: input channels {x.shape[0]} != weight C_in {c_in}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"{op}: kernel must be square and odd, got {kh}x{kw}")
    if b is not None and b.shape != (c_out,):
        raise ValueError(f"{op}: bias shape {b.shape} != (C_out={c_out},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"{op}: stride must be >= 1 and padding >= 0")
    _, h, wd = x.shape
    for dim, n in (("height", h), ("width", wd)):
        span = n + 2 * padding - kh
        if span < 0 or span % stride:
            raise ValueError(
                f"{op}: {dim} {n} with padding {padding}, kernel {kh}, stride {stride} "
                "does not give an integral output extent")
    return (h + 2 * padding - kh) // stride + 1, (wd + 2 * padding - kh) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """``[C, H, W]`` -> ``[C*k*k, Ho*Wo]`` patch matrix."""
    c, h, w = x.shape
    if padding:
        xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x
        x = xp
    cols = np.empty((c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(-1, ho * wo)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    c, h, w = shape
    cols = cols.reshape(c, k, k, ho, wo)
    out = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    if padding:
        out = out[:, padding:-padding, padding:-padding]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a ``[C_in, H, W]`` input with ``[C_out, C_in, k, k]`` filters."""
    ho, wo = _check_conv(x, weight, bias, stride, padding, "conv2d")
    c_out, _, k, _ = weight.shape
    cols = _im2col(x.data, k, stride, padding, ho, wo)
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    in_shape = x.shape

    def vjp(g):
        g2 = g.reshape(c_out, -1)
        gx = _col2im(wmat.T @ g2, in_shape, k, stride, padding, ho, wo) if x.requires_grad else None
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out.reshape(c_out, ho, wo), inputs, vjp)


def gated_conv(x: Tensor, feature_weight: Tensor, gate_weight: Tensor,
               feature_bias: Tensor, gate_bias: Tensor,
               stride: int = 1, padding: int = 1) -> Tensor:
    """``elu(conv(x; feature)) * sigmoid(conv(x; gate))`` as one fused op."""
    if feature_weight.shape != gate_weight.shape:
        raise ValueError(
            f"gated_conv: feature weight {feature_weight.shape} != gate weight {gate_weight.shape}")
    ho, wo = _check_conv(x, feature_weight, feature_bias, stride, padding, "gated_conv")
    _check_conv(x, gate_weight, gate_bias, stride, padding, "gated_conv")
    c_out, _, k, _ = feature_weight.shape
    cols = _im2col(x.data, k, stride, padding, ho, wo)
    wmat = np.concatenate([feature_weight.data.reshape(c_out, -1),
                           gate_weight.data.reshape(c_out, -1)])
    pre = wmat @ cols
    pre[:c_out] += feature_bias.data[:, None]
    pre[c_out:] += gate_bias.data[:, None]
    feat, slope = _elu(pre[:c_out])
    gate = _sigmoid(pre[c_out:])
    out = feat * gate
    in_shape = x.shape

    def vjp(g):
        g2 = g.reshape(c_out, -1)
        dpre = np.empty_like(pre)
        np.multiply(g2 * gate, slope, out=dpre[:c_out])
        np.multiply(g2 * out, 1 - gate, out=dpre[c_out:])
        gx = _col2im(wmat.T @ dpre, in_shape, k, stride, padding, ho, wo) if x.requires_grad else None
        gw = dpre @ cols.T
        shape = feature_weight.shape
        return (gx, gw[:c_out].reshape(shape), gw[c_out:].reshape(shape),
                dpre[:c_out].sum(axis=1), dpre[c_out:].sum(axis=1))

    return _emit("gated_conv", out.reshape(c_out, ho, wo),
                 (x, feature_weight, gate_weight, feature_bias, gate_bias), vjp)


# resampling and layout --------------------------------------------------------

def _box_down(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    v = x.reshape(c, h // 2, 2, w // 2, 2)
    return (v[:, :, 0, :, 0] + v[:, :, 0, :, 1] + v[:, :, 1, :, 0] + v[:, :, 1, :, 1]) * x.dtype.type(0.25)


def _nearest_up(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def downsample2x(x: Tensor) -> Tensor:
    """2x2 box average."""
    if x.data.ndim != 3:
        raise ValueError(f"downsample2x: input must be [C, H, W], got shape {x.shape}")
    _, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample2x: extents must be even, got height {h}, width {w}")
    quarter = x.dtype.type(0.25)
    return _emit("downsample2x", _box_down(x.data), (x,),
                 lambda g: (_nearest_up(g) * quarter,))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour duplication."""
    if x.data.ndim != 3:
        raise ValueError(f"upsample2x: input must be [C, H, W], got shape {x.shape}")

    def vjp(g):
        c, h, w = g.shape
        return (g.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4)),)

    return _emit("upsample2x", _nearest_up(x.data), (x,), vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ValueError(f"concat_channels: inputs must be [C, H, W], got {a.shape} and {b.shape}")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"concat_channels: spatial extents differ, {a.shape[1:]} vs {b.shape[1:]}")
    ca = a.shape[0]
    return _emit("concat_channels", np.concatenate([a.data, b.data]), (a, b),
                 lambda g: (g[:ca], g[ca:]))


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Channels-first image whose pixel ``p`` is ``table[index[p]]`` (zero where ``index < 0``).

    The gradient scatters each pixel's upstream vector back onto its row;
    rows are accumulated in ascending pixel order.
    """
    if table.data.ndim != 2:
        raise ValueError(f"gather_rows: table must be [N, M], got shape {table.shape}")
    index = np.asarray(index)
    n, m = table.shape
    hit = index >= 0
    flat = np.where(hit, index, 0).ravel()
    out = table.data[flat].T.reshape((m,) + index.shape)
    out = out * hit.astype(table.dtype)

    def vjp(g):
        return (scatter_rows(g.reshape(m, -1), index.ravel(), n),)

    return _emit("gather_rows", out, (table,), vjp)


def scatter_rows(grad: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Sum columns of ``grad`` ([M, P]) into ``n`` rows by ``index``; negative indices drop."""
    keep = index >= 0
    idx = index[keep]
    cols = grad[:, keep]
    out = np.empty((n, grad.shape[0]), dtype=grad.dtype)
    for c in range(grad.shape[0]):
        out[:, c] = np.bincount(idx, weights=cols[c], minlength=n)
    return out


# checkpoints ----------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NPBGCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(fh: BinaryIO | str, tensors: Iterable[tuple[str, np.ndarray]]) -> None:
    """Write named arrays as little-endian float32 in the NPBGCKPT layout."""
    items = [(name, np.asarray(arr)) for name, arr in tensors]
    if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
        with open(fh, "wb") as f:
            return save_checkpoint(f, items)
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(fh: BinaryIO | str) -> dict[str, np.ndarray]:
    if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
        with open(fh, "rb") as f:
            return load_checkpoint(f)

    def read(n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise ValueError("truncated checkpoint")
        return buf

    if read(8) != CHECKPOINT_MAGIC:
        raise ValueError("not an NPBGCKPT checkpoint (bad magic)")
    version, count = struct.unpack("<II", read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (length,) = struct.unpack("<H", read(2))
        name = read(length).decode("utf-8")
        (rank,) = struct.unpack("<I", read(4))
        shape: Sequence[int] = struct.unpack(f"<{rank}I", read(4 * rank)) if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(read(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        if name in out:
            raise ValueError(f"duplicate tensor name {name!r} in checkpoint")
        out[name] = arr
    return out
