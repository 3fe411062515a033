"""Dense tensor helpers and the neural building blocks the rest of the package composes.

All feature maps use a (C, H, W) row-major layout and are plain ``numpy``
arrays. Two scalar precisions are supported: float32 for running models and
float64 for verification (gradient checks, oracle comparisons).
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, ShapeError

LEAKY_SLOPE = 0.1

_DTYPES = {32: np.float32, 64: np.float64}
_state = {"dtype": np.float32}


def get_dtype():
    return _state["dtype"]


def set_precision(bits: int) -> None:
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _state["dtype"] = _DTYPES[bits]


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default scalar precision."""
    previous = _state["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _state["dtype"] = previous


def as_tensor(x, dtype=None) -> np.ndarray:
    if isinstance(x, FeatureMap):
        x = x.data
    return np.asarray(x, dtype=dtype or get_dtype())


@dataclass
class FeatureMap:
    """A (C, H, W) feature tensor tagged with its pyramid level and frame offset."""

    data: np.ndarray
    level: int = 0
    frame_time: int = 0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"FeatureMap needs a rank-3 tensor, got shape {self.data.shape}")
        if self.level < 0:
            raise ValueError("level must be >= 0")

    @property
    def shape(self):
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


def _feature(x) -> np.ndarray:
    x = x.data if isinstance(x, FeatureMap) else np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) tensor, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# Convolution

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x, kernel, bias, stride):
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be (Cout, Cin, kh, kw), got {kernel.shape}")
    if kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[0]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {kernel.shape[0]} output channels")
    if stride < 1:
        raise ShapeError("stride must be >= 1")


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Return a (Cin, Ho, Wo, kh, kw) strided view of zero-padded ``x``."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0, method: str = "auto") -> np.ndarray:
    """2-D cross-correlation with zero padding.

    ``method="gemm"`` lowers to a single BLAS contraction; ``method="taps"``
    accumulates one kernel tap at a time in the same order as
    :func:`conv2d_naive`, which makes the two bit-identical in float64.
    ``"auto"`` picks taps for float64 inputs and gemm otherwise.
    """
    x = _feature(x)
    kernel = np.asarray(kernel)
    bias = None if bias is None else np.asarray(bias)
    _check_conv(x, kernel, bias, stride)
    cout, cin, kh, kw = kernel.shape
    if method == "auto":
        method = "taps" if x.dtype == np.float64 else "gemm"
    cols = im2col(x, kh, kw, stride, padding)
    if cols.shape[1] < 1 or cols.shape[2] < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape}")
    if method == "gemm":
        out = np.tensordot(kernel, cols, axes=([1, 2, 3], [0, 3, 4]))
        if bias is not None:
            out += bias[:, None, None]
        return out.astype(x.dtype, copy=False)
    if method != "taps":
        raise ValueError(f"unknown conv method {method!r}")
    ho, wo = cols.shape[1:3]
    out = np.zeros((cout, ho, wo), dtype=np.result_type(x, kernel))
    if bias is not None:
        out += bias[:, None, None]
    for ci in range(cin):
        for i in range(kh):
            for j in range(kw):
                out += kernel[:, ci, i, j, None, None] * cols[ci, None, :, :, i, j]
    return out


def conv2d_naive(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct six-loop reference convolution, accumulated in float64."""
    x = _feature(x).astype(np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = None if bias is None else np.asarray(bias, dtype=np.float64)
    _check_conv(x, kernel, bias, stride)
    cout, cin, kh, kw = kernel.shape
    _, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0 if bias is None else float(bias[co])
                for ci in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            y = oy * stride + i - padding
                            xx = ox * stride + j - padding
                            if 0 <= y < h and 0 <= xx < w:
                                acc += float(kernel[co, ci, i, j]) * float(x[ci, y, xx])
                            else:
                                acc += float(kernel[co, ci, i, j]) * 0.0
                out[co, oy, ox] = acc
    return out


# ---------------------------------------------------------------------------
# Pointwise and structural ops

def leaky_relu(x, slope: float = LEAKY_SLOPE) -> np.ndarray:
    x = np.asarray(x)
    return np.where(x > 0, x, slope * x)


def residual_block(x, w1, w2, b1=None, b2=None) -> np.ndarray:
    """``x + conv(act(conv(x)))`` with channel-preserving 3x3 convolutions."""
    x = _feature(x)
    for w in (w1, w2):
        w = np.asarray(w)
        if w.ndim != 4 or w.shape[0] != x.shape[0] or w.shape[1] != x.shape[0]:
            raise ShapeError(f"residual block needs ({x.shape[0]}, {x.shape[0]}, k, k) kernels, got {w.shape}")
    pad = np.asarray(w1).shape[-1] // 2
    hidden = leaky_relu(conv2d(x, w1, b1, 1, pad))
    return x + conv2d(hidden, w2, b2, 1, pad)


def _pad_even(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        x = np.pad(x, ((0, 0), (0, h % 2), (0, w % 2)), mode="edge")
    return x


def avg_pool2(x) -> np.ndarray:
    """2x2 mean pooling with stride 2; odd extents replicate the last row/column."""
    x = _pad_even(_feature(x))
    return ((x[:, 0::2, 0::2] + x[:, 0::2, 1::2]) + (x[:, 1::2, 0::2] + x[:, 1::2, 1::2])) * 0.25


def avg_pool2_naive(x) -> np.ndarray:
    x = _pad_even(_feature(x))
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2), dtype=x.dtype)
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                a = x[ch, 2 * i, 2 * j] + x[ch, 2 * i, 2 * j + 1]
                b = x[ch, 2 * i + 1, 2 * j] + x[ch, 2 * i + 1, 2 * j + 1]
                out[ch, i, j] = (a + b) * 0.25
    return out


def pixel_shuffle(x, r: int) -> np.ndarray:
    """Depth-to-space: (C*r*r, H, W) -> (C, r*H, r*W)."""
    x = _feature(x)
    c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"{c} channels not divisible by r^2={r * r}")
    out = x.reshape(c // (r * r), r, r, h, w).transpose(0, 3, 1, 4, 2)
    return out.reshape(c // (r * r), h * r, w * r)


def space_to_depth(x, r: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle`."""
    x = _feature(x)
    c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"spatial size {(h, w)} not divisible by {r}")
    out = x.reshape(c, h // r, r, w // r, r).transpose(0, 2, 4, 1, 3)
    return out.reshape(c * r * r, h // r, w // r)


def concat_channels(inputs) -> np.ndarray:
    arrays = [_feature(x) for x in inputs]
    if not arrays:
        raise ShapeError("nothing to concatenate")
    hw = arrays[0].shape[1:]
    for a in arrays[1:]:
        if a.shape[1:] != hw:
            raise ShapeError(f"spatial mismatch {a.shape[1:]} vs {hw}")
    return np.concatenate(arrays, axis=0)


def interp_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """(factor*n_in, n_in) linear interpolation matrix, half-pixel centers, edge clamped."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_upsample(x, factor: int = 2) -> np.ndarray:
    x = _feature(x)
    _, h, w = x.shape
    mh = interp_matrix(h, factor, x.dtype)
    mw = interp_matrix(w, factor, x.dtype)
    return np.einsum("ih,chw,jw->cij", mh, x, mw, optimize=True)


def bilinear_upsample2(x) -> np.ndarray:
    return bilinear_upsample(x, 2)


# ---------------------------------------------------------------------------
# Weight storage

_MAGIC = b"MUCW"
_VERSION = 1


class WeightStore(dict):
    """Ordered name -> tensor mapping with a bit-exact binary file format.

    Layout (little-endian): ``b"MUCW"``, u32 version, u32 count, then per
    tensor u16 name length, UTF-8 name, u8 rank, u32 extents, float32 data.
    """

    def to_bytes(self) -> bytes:
        parts = [_MAGIC, struct.pack("<II", _VERSION, len(self))]
        for name, value in self.items():
            arr = np.ascontiguousarray(value, dtype="<f4")
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "WeightStore":
        try:
            return cls._parse(blob)
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise ContractError(f"truncated or corrupt weights file: {exc}") from exc

    @classmethod
    def _parse(cls, blob: bytes) -> "WeightStore":
        if blob[:4] != _MAGIC:
            raise ContractError("not a MUCW weights file")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != _VERSION:
            raise ContractError(f"unsupported weights version {version}")
        pos = 12
        store = cls()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(blob, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            if name in store:
                raise ContractError(f"duplicate tensor name {name!r}")
            store[name] = data.astype(np.float32).reshape(shape)
        if pos != len(blob):
            raise ContractError(f"{len(blob) - pos} trailing bytes in weights file")
        return store

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
