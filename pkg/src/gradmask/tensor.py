"""Dense tensor value type, raw numeric kernels and the GMT1 file format.

Every kernel is a pure function of immutable ``Tensor`` values.  Nothing in
here knows about gradients; :mod:`gradmask.autodiff` composes these kernels
into differentiable operations.
"""

from __future__ import annotations

import io
import math
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import DomainError, DTypeError, FormatError, ShapeError

EPS = 1e-12
MAX_RANK = 4
DTYPES = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}

_MAGIC = b"GMT1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class Tensor:
    """Immutable row-major array of float32 or float64 values, rank 0 to 4."""

    __slots__ = ("_arr",)

    def __init__(self, data, dtype=None):
        if dtype is not None:
            dtype = resolve_dtype(dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and data.dtype in _DTYPE_CODES:
            dtype = data.dtype
        else:
            dtype = DTYPES["float64"]
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        arr.flags.writeable = False
        self._arr = arr

    @classmethod
    def _wrap(cls, arr):
        # Kernel-internal constructor: takes ownership of a freshly computed array.
        t = cls.__new__(cls)
        arr = np.asarray(arr, order="C")
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        arr.flags.writeable = False
        t._arr = arr
        return t

    @property
    def shape(self):
        return self._arr.shape

    @property
    def dtype(self):
        return self._arr.dtype

    @property
    def data(self):
        """Read-only numpy view of the buffer."""
        return self._arr

    @property
    def rank(self):
        return self._arr.ndim

    @property
    def size(self):
        return self._arr.size

    def numpy(self):
        return self._arr.copy()

    def item(self):
        if self._arr.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._arr.reshape(-1)[0])

    def astype(self, dtype):
        return Tensor(self._arr, dtype=dtype)

    def __array__(self, dtype=None, copy=None):
        return self._arr if dtype is None else self._arr.astype(dtype)

    def __len__(self):
        return len(self._arr)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, data={self._arr.tolist()!r})"

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.dtype == other.dtype and self.shape == other.shape and self._arr.tobytes() == other._arr.tobytes()

    __hash__ = None


def resolve_dtype(dtype):
    if isinstance(dtype, str):
        dtype = {"f32": "float32", "f64": "float64"}.get(dtype, dtype)
        if dtype not in DTYPES:
            raise DTypeError(f"unsupported dtype {dtype!r}")
        return DTYPES[dtype]
    dtype = np.dtype(dtype)
    if dtype not in _DTYPE_CODES:
        raise DTypeError(f"unsupported dtype {dtype}")
    return dtype


def zeros(shape, dtype="float64"):
    return Tensor._wrap(np.zeros(shape, dtype=resolve_dtype(dtype)))


def ones(shape, dtype="float64"):
    return Tensor._wrap(np.ones(shape, dtype=resolve_dtype(dtype)))


def full(shape, value, dtype="float64"):
    return Tensor._wrap(np.full(shape, value, dtype=resolve_dtype(dtype)))


def _check_pair(a, b):
    if a.dtype != b.dtype:
        raise DTypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}

_UNARY = {
    "relu": lambda v: np.maximum(v, 0),
    "sigmoid": expit,
    "softplus": lambda v: np.logaddexp(v.dtype.type(0), v),
    "abs": np.abs,
    "sqrt_eps": lambda v: np.sqrt(v + v.dtype.type(EPS)),
    # helpers used by derivative rules
    "sign": np.sign,
    "step": lambda v: (v > 0).astype(v.dtype),
    "reciprocal": lambda v: v.dtype.type(1) / v,
    "neg": np.negative,
}


def elementwise(op, a, b=None):
    """Apply ``op`` elementwise.

    Binary ops (add, sub, mul) take a tensor or a Python scalar for ``b``;
    ``scale`` needs a scalar.  Unary ops ignore ``b``.
    """
    if op in _BINARY:
        if isinstance(b, Tensor):
            _check_pair(a, b)
            return Tensor._wrap(_BINARY[op](a.data, b.data))
        if b is None:
            raise ShapeError(f"{op} needs a second operand")
        return Tensor._wrap(_BINARY[op](a.data, a.dtype.type(b)))
    if op == "scale":
        if isinstance(b, Tensor):
            if b.size != 1:
                raise ShapeError("scale factor must be a scalar")
            b = b.item()
        return Tensor._wrap(a.data * a.dtype.type(b))
    if op in _UNARY:
        return Tensor._wrap(_UNARY[op](a.data))
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a, b):
    if a.rank != 2 or b.rank != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise DTypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return Tensor._wrap(a.data @ b.data)


def transpose(a):
    if a.rank != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got {a.shape}")
    return Tensor._wrap(a.data.T.copy())


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return Tensor._wrap(a.data.reshape(shape))


def conv_output_extent(n, k, stride, pad):
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"extent {n} with kernel {k}, stride {stride}, pad {pad} gives a non-integral output")
    return span // stride + 1


def _conv_windows(x, kh, kw, stride, pad):
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]  # C x H' x W' x kh x kw


def _check_conv(x_shape, w_shape, stride, pad):
    if len(x_shape) != 3 or len(w_shape) != 4:
        raise ShapeError(f"conv2d needs x C×H×W and w F×C×kh×kw, got {x_shape} and {w_shape}")
    if x_shape[0] != w_shape[1]:
        raise ShapeError(f"channel mismatch: input {x_shape[0]}, kernel {w_shape[1]}")
    kh, kw = w_shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}×{kw}")
    if stride < 1 or pad < 0:
        raise ShapeError("stride must be ≥ 1 and pad ≥ 0")
    return (conv_output_extent(x_shape[1], kh, stride, pad), conv_output_extent(x_shape[2], kw, stride, pad))


def conv2d(x, w, bias=None, stride=1, pad=0):
    """Zero-padded cross-correlation of ``x`` (C×H×W) with ``w`` (F×C×kh×kw)."""
    _check_conv(x.shape, w.shape, stride, pad)
    if x.dtype != w.dtype:
        raise DTypeError(f"dtype mismatch: {x.dtype} vs {w.dtype}")
    win = _conv_windows(x.data, w.shape[2], w.shape[3], stride, pad)
    out = np.tensordot(w.data, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {w.shape[0]} filters")
        out += bias.data[:, None, None]
    return Tensor._wrap(out)


def conv2d_input_grad(g, w, x_shape, stride=1, pad=0):
    """Adjoint of ``conv2d`` in its input: maps an output cotangent back to x's shape."""
    ho, wo = _check_conv(x_shape, w.shape, stride, pad)
    if g.shape != (w.shape[0], ho, wo):
        raise ShapeError(f"cotangent shape {g.shape} does not match conv output {(w.shape[0], ho, wo)}")
    c, h, wd = x_shape
    kh, kw = w.shape[2:]
    cols = np.tensordot(g.data, w.data, axes=([0], [0]))  # H' x W' x C x kh x kw
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for a in range(kh):
        for b in range(kw):
            xp[:, a:a + stride * ho:stride, b:b + stride * wo:stride] += cols[:, :, :, a, b].transpose(2, 0, 1)
    return Tensor._wrap(xp[:, pad:pad + h, pad:pad + wd])


def conv2d_weight_grad(x, g, w_shape, stride=1, pad=0):
    """Adjoint of ``conv2d`` in its kernel."""
    ho, wo = _check_conv(x.shape, w_shape, stride, pad)
    if g.shape != (w_shape[0], ho, wo):
        raise ShapeError(f"cotangent shape {g.shape} does not match conv output {(w_shape[0], ho, wo)}")
    win = _conv_windows(x.data, w_shape[2], w_shape[3], stride, pad)
    return Tensor._wrap(np.tensordot(g.data, win, axes=([1, 2], [1, 2])))


def maxpool2d(x, k, stride):
    """Windowed maximum over each channel.

    Returns the pooled tensor and the flat (row-major) index into ``x`` of
    every winner.  Ties go to the lowest flat index within the window.
    """
    if x.rank != 3:
        raise ShapeError(f"maxpool2d needs C×H×W input, got {x.shape}")
    c, h, w = x.shape
    if k < 1 or stride < 1 or k > h or k > w:
        raise ShapeError(f"pool window {k} does not fit input {h}×{w}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(1, 2))[:, ::stride, ::stride].reshape(c, ho, wo, k * k)
    local = np.argmax(win, axis=-1)  # first maximum wins
    rows = np.arange(ho)[None, :, None] * stride + local // k
    cols = np.arange(wo)[None, None, :] * stride + local % k
    idx = (np.arange(c)[:, None, None] * h + rows) * w + cols
    idx.flags.writeable = False
    return Tensor._wrap(x.data.reshape(-1)[idx]), idx


def gather(a, idx):
    """Pick flat positions ``idx`` (any integer array) out of ``a``."""
    return Tensor._wrap(a.data.reshape(-1)[idx])


def scatter_add(g, idx, shape):
    """Adjoint of :func:`gather`: sum ``g`` into a zero tensor of ``shape``."""
    out = np.zeros(math.prod(shape), dtype=g.dtype)
    np.add.at(out, np.asarray(idx).reshape(-1), g.data.reshape(-1))
    return Tensor._wrap(out.reshape(shape))


def reduce(op, x):
    if op == "sum":
        return Tensor._wrap(np.asarray(x.data.sum(), dtype=x.dtype))
    if op == "mean":
        if x.size == 0:
            raise DomainError("mean of an empty tensor is undefined")
        return Tensor._wrap(np.asarray(x.data.mean(), dtype=x.dtype))
    raise ValueError(f"unknown reduction {op!r}")


def broadcast_scalar(s, shape):
    if s.size != 1:
        raise ShapeError(f"expected a scalar, got shape {s.shape}")
    return Tensor._wrap(np.full(shape, s.data.reshape(-1)[0], dtype=s.dtype))


def channel_sum(x):
    """Sum a C×H×W tensor over its spatial axes, giving C values."""
    return Tensor._wrap(x.data.sum(axis=(1, 2)))


def channel_broadcast(v, h, w):
    return Tensor._wrap(np.broadcast_to(v.data[:, None, None], (v.shape[0], h, w)).copy())


# --- GMT1 format -----------------------------------------------------------

def encode_tensor(t):
    header = _MAGIC + struct.pack("<BB", _DTYPE_CODES[t.dtype], t.rank)
    header += struct.pack(f"<{t.rank}I", *t.shape)
    return header + t.data.astype(t.dtype.newbyteorder("<"), copy=False).tobytes(order="C")


def decode_tensor(buf, offset=0):
    """Decode one tensor from ``buf`` starting at ``offset``; returns (tensor, new_offset)."""
    view = memoryview(buf)
    if bytes(view[offset:offset + 4]) != _MAGIC:
        raise FormatError("bad magic bytes; not a GMT1 tensor")
    if len(view) < offset + 6:
        raise FormatError("truncated GMT1 header")
    code, rank = struct.unpack_from("<BB", view, offset + 4)
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    if rank > MAX_RANK:
        raise FormatError(f"rank {rank} exceeds maximum {MAX_RANK}")
    pos = offset + 6
    if len(view) < pos + 4 * rank:
        raise FormatError("truncated GMT1 extents")
    shape = struct.unpack_from(f"<{rank}I", view, pos)
    pos += 4 * rank
    dtype = _CODE_DTYPES[code]
    nbytes = math.prod(shape) * dtype.itemsize
    if len(view) < pos + nbytes:
        raise FormatError("truncated GMT1 payload")
    arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
    return Tensor._wrap(arr), pos + nbytes


def save_tensor(path, t):
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path):
    buf = Path(path).read_bytes()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return t


def write_tensors(stream: io.BufferedIOBase, tensors):
    for t in tensors:
        stream.write(encode_tensor(t))
