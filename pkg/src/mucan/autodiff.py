"""Minimal reverse-mode differentiation over the package's op set.

Every differentiable op here accepts either plain arrays or :class:`Var`
handles. With plain arrays the op just computes its value; once any input is
a ``Var`` the application is appended to that variable's :class:`Tape` and
can later be differentiated with :func:`backward`.

Selection ops (top-K search, nearest-neighbour search) never appear on the
tape. Their indices enter :func:`gather_patches` / :func:`gather_positions`
as constants, so gradients only flow through the gathered values.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .exceptions import ContractError, ShapeError


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "id", "data")

    def __init__(self, tape, id_, data):
        self.tape = tape
        self.id = id_
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

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

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


@dataclass
class Record:
    op: str
    inputs: tuple
    output: int
    ctx: dict = field(default_factory=dict)


class Tape:
    """Ordered log of op applications.

    Value ids are assigned in creation order, so every record's inputs have
    smaller ids than its output.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.records: list[Record] = []
        self.leaves: list[int] = []

    def _new(self, data) -> Var:
        self.values.append(data)
        return Var(self, len(self.values) - 1, data)

    def leaf(self, data) -> Var:
        var = self._new(np.asarray(data))
        self.leaves.append(var.id)
        return var

    def record(self, op, inputs, data, ctx) -> Var:
        if op not in BACKWARD_RULES:
            raise ContractError(f"no backward rule registered for op {op!r}")
        out = self._new(data)
        ids = tuple(v.id if isinstance(v, Var) else None for v in inputs)
        self.records.append(Record(op, ids, out.id, ctx))
        return out


BACKWARD_RULES = {}


def _rule(op):
    def deco(fn):
        BACKWARD_RULES[op] = fn
        return fn
    return deco


def value(x):
    return x.data if isinstance(x, Var) else x


def _apply(op, inputs, forward):
    tape = next((v.tape for v in inputs if isinstance(v, Var)), None)
    out, ctx = forward(*[value(v) for v in inputs])
    if tape is None:
        return out
    ctx["needs"] = tuple(isinstance(v, Var) for v in inputs)
    return tape.record(op, inputs, out, ctx)


def backward(tape: Tape, loss) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` keyed by value id.

    Every leaf gets an entry; leaves the loss does not depend on get zeros.
    """
    loss_id = loss.id if isinstance(loss, Var) else int(loss)
    loss_val = np.asarray(tape.values[loss_id])
    if loss_val.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss_val.shape}")
    grads: dict[int, np.ndarray] = {loss_id: np.ones_like(loss_val)}
    for rec in reversed(tape.records):
        if rec.output > loss_id or rec.output not in grads:
            continue
        g_out = grads[rec.output]
        g_in = BACKWARD_RULES[rec.op](rec.ctx, g_out)
        for vid, g in zip(rec.inputs, g_in):
            if vid is None or g is None:
                continue
            if vid in grads:
                grads[vid] = grads[vid] + g
            else:
                grads[vid] = g
    for vid in tape.leaves:
        if vid not in grads:
            grads[vid] = np.zeros_like(tape.values[vid])
    return grads


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise

def add(a, b):
    def fwd(a, b):
        a, b = np.asarray(a), np.asarray(b)
        return a + b, {"sa": a.shape, "sb": b.shape}
    return _apply("add", (a, b), fwd)


@_rule("add")
def _add_bw(ctx, g):
    na, nb = ctx["needs"]
    return (_unbroadcast(g, ctx["sa"]) if na else None,
            _unbroadcast(g, ctx["sb"]) if nb else None)


def sub(a, b):
    def fwd(a, b):
        a, b = np.asarray(a), np.asarray(b)
        return a - b, {"sa": a.shape, "sb": b.shape}
    return _apply("sub", (a, b), fwd)


@_rule("sub")
def _sub_bw(ctx, g):
    na, nb = ctx["needs"]
    return (_unbroadcast(g, ctx["sa"]) if na else None,
            _unbroadcast(-g, ctx["sb"]) if nb else None)


def mul(a, b):
    def fwd(a, b):
        a, b = np.asarray(a), np.asarray(b)
        return a * b, {"a": a, "b": b}
    return _apply("mul", (a, b), fwd)


@_rule("mul")
def _mul_bw(ctx, g):
    na, nb = ctx["needs"]
    a, b = ctx["a"], ctx["b"]
    return (_unbroadcast(g * b, a.shape) if na else None,
            _unbroadcast(g * a, b.shape) if nb else None)


def sum(x):  # noqa: A001 - mirrors numpy naming inside this namespace
    def fwd(x):
        x = np.asarray(x)
        return np.asarray(x.sum()), {"shape": x.shape}
    return _apply("sum", (x,), fwd)


@_rule("sum")
def _sum_bw(ctx, g):
    return (np.broadcast_to(g, ctx["shape"]).copy(),)


def mean(x):
    def fwd(x):
        x = np.asarray(x)
        return np.asarray(x.mean()), {"shape": x.shape}
    return _apply("mean", (x,), fwd)


@_rule("mean")
def _mean_bw(ctx, g):
    n = int(np.prod(ctx["shape"]))
    return (np.broadcast_to(g / n, ctx["shape"]).copy(),)


def leaky_relu(x, slope=tc.LEAKY_SLOPE):
    def fwd(x):
        return tc.leaky_relu(x, slope), {"pos": np.asarray(x) > 0, "slope": slope}
    return _apply("leaky_relu", (x,), fwd)


@_rule("leaky_relu")
def _lrelu_bw(ctx, g):
    return (np.where(ctx["pos"], g, ctx["slope"] * g),)


def sigmoid(x):
    def fwd(x):
        y = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))
        return y, {"y": y}
    return _apply("sigmoid", (x,), fwd)


@_rule("sigmoid")
def _sigmoid_bw(ctx, g):
    y = ctx["y"]
    return (g * y * (1.0 - y),)


def softmax_channels(x):
    """Softmax along axis 0 of a (C, H, W) tensor."""
    def fwd(x):
        x = np.asarray(x)
        e = np.exp(x - x.max(axis=0, keepdims=True))
        y = e / e.sum(axis=0, keepdims=True)
        return y, {"y": y}
    return _apply("softmax_channels", (x,), fwd)


@_rule("softmax_channels")
def _softmax_bw(ctx, g):
    y = ctx["y"]
    return (y * (g - (g * y).sum(axis=0, keepdims=True)),)


# ---------------------------------------------------------------------------
# Convolution and resampling

def conv2d(x, kernel, bias=None, stride=1, padding=0):
    def fwd(x, kernel, bias):
        out = tc.conv2d(x, kernel, bias, stride, padding)
        return out, {"x": np.asarray(x), "kernel": np.asarray(kernel),
                     "stride": stride, "padding": padding}
    return _apply("conv2d", (x, kernel, bias), fwd)


@_rule("conv2d")
def _conv2d_bw(ctx, g):
    nx, nk, nb = ctx["needs"]
    x, kernel, stride, padding = ctx["x"], ctx["kernel"], ctx["stride"], ctx["padding"]
    cout, cin, kh, kw = kernel.shape
    gx = gk = gb = None
    if nk:
        cols = tc.im2col(x, kh, kw, stride, padding)
        gk = np.tensordot(g, cols, axes=([1, 2], [1, 2])).astype(kernel.dtype, copy=False)
    if nb:
        gb = g.sum(axis=(1, 2))
    if nx:
        ho, wo = g.shape[1:]
        gcols = np.tensordot(kernel, g, axes=([0], [0]))  # (Cin, kh, kw, Ho, Wo)
        _, h, w = x.shape
        gp = np.zeros((cin, h + 2 * padding, w + 2 * padding), dtype=np.result_type(x, g))
        for i in range(kh):
            for j in range(kw):
                gp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[:, i, j]
        gx = gp[:, padding:padding + h, padding:padding + w]
    return gx, gk, gb


def avg_pool2(x):
    def fwd(x):
        x = np.asarray(x)
        return tc.avg_pool2(x), {"shape": x.shape}
    return _apply("avg_pool2", (x,), fwd)


@_rule("avg_pool2")
def _avg_pool2_bw(ctx, g):
    c, h, w = ctx["shape"]
    up = np.repeat(np.repeat(g * 0.25, 2, axis=1), 2, axis=2)
    if h % 2:
        up[:, h - 1] += up[:, h]
    if w % 2:
        up[:, :, w - 1] += up[:, :, w]
    return (up[:, :h, :w],)


def pixel_shuffle(x, r):
    def fwd(x):
        return tc.pixel_shuffle(x, r), {"r": r}
    return _apply("pixel_shuffle", (x,), fwd)


@_rule("pixel_shuffle")
def _pixel_shuffle_bw(ctx, g):
    return (tc.space_to_depth(g, ctx["r"]),)


def concat_channels(inputs):
    inputs = tuple(inputs)

    def fwd(*arrays):
        return tc.concat_channels(arrays), {"sizes": [a.shape[0] for a in arrays]}
    return _apply("concat_channels", inputs, fwd)


@_rule("concat_channels")
def _concat_bw(ctx, g):
    splits = np.cumsum(ctx["sizes"])[:-1]
    parts = np.split(g, splits, axis=0)
    return tuple(p if need else None for p, need in zip(parts, ctx["needs"]))


def bilinear_upsample(x, factor=2):
    def fwd(x):
        x = np.asarray(x)
        _, h, w = x.shape
        return tc.bilinear_upsample(x, factor), {"mh": tc.interp_matrix(h, factor, x.dtype),
                                                 "mw": tc.interp_matrix(w, factor, x.dtype)}
    return _apply("bilinear_upsample", (x,), fwd)


@_rule("bilinear_upsample")
def _bilinear_bw(ctx, g):
    return (np.einsum("ih,cij,jw->chw", ctx["mh"], g, ctx["mw"], optimize=True),)


def bilinear_upsample2(x):
    return bilinear_upsample(x, 2)


def reshape(x, shape):
    def fwd(x):
        x = np.asarray(x)
        return x.reshape(shape), {"shape": x.shape}
    return _apply("reshape", (x,), fwd)


@_rule("reshape")
def _reshape_bw(ctx, g):
    return (g.reshape(ctx["shape"]),)


def crop(x, h, w):
    """Keep the top-left (h, w) window of a (C, H, W) tensor."""
    def fwd(x):
        x = np.asarray(x)
        return x[:, :h, :w].copy(), {"shape": x.shape}
    return _apply("crop", (x,), fwd)


@_rule("crop")
def _crop_bw(ctx, g):
    out = np.zeros(ctx["shape"], dtype=g.dtype)
    out[:, :g.shape[1], :g.shape[2]] = g
    return (out,)


def stack_candidates(x):
    """(..., K, cells, C) -> (..., cells, K*C), candidate-major channel order."""
    def fwd(x):
        x = np.asarray(x)
        shp = x.shape
        out = np.moveaxis(x, -3, -2).reshape(shp[:-3] + (shp[-2], shp[-3] * shp[-1]))
        return out, {"shape": shp}
    return _apply("stack_candidates", (x,), fwd)


@_rule("stack_candidates")
def _stack_candidates_bw(ctx, g):
    shp = ctx["shape"]
    k, cells, c = shp[-3:]
    return (np.moveaxis(g.reshape(shp[:-3] + (cells, k, c)), -2, -3),)


def residual_block(x, w1, w2, b1=None, b2=None):
    pad = value(w1).shape[-1] // 2
    if value(w1).shape[:2] != (value(x).shape[0],) * 2:
        raise ShapeError("residual block kernels must preserve channels")
    hidden = leaky_relu(conv2d(x, w1, b1, 1, pad))
    return add(x, conv2d(hidden, w2, b2, 1, pad))


# ---------------------------------------------------------------------------
# Channel mixing, gathers and correlation

def channel_mix(x, kernel, bias=None):
    """Apply a 1x1 (Cout, Cin[, 1, 1]) kernel along the last axis of ``x``."""
    def fwd(x, kernel, bias):
        x = np.asarray(x)
        k2 = np.asarray(kernel).reshape(kernel.shape[0], kernel.shape[1])
        if x.shape[-1] != k2.shape[1]:
            raise ShapeError(f"channel_mix expects {k2.shape[1]} channels, got {x.shape[-1]}")
        out = x @ k2.T
        if bias is not None:
            out = out + bias
        return out, {"x": x, "k2": k2, "kshape": np.shape(kernel)}
    return _apply("channel_mix", (x, kernel, bias), fwd)


@_rule("channel_mix")
def _channel_mix_bw(ctx, g):
    nx, nk, nb = ctx["needs"]
    x, k2 = ctx["x"], ctx["k2"]
    gx = g @ k2 if nx else None
    gk = None
    if nk:
        gk = (g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])).reshape(ctx["kshape"])
    gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if nb else None
    return gx, gk, gb


def patch_table(x, s):
    """(H*W, s*s, C) table of zero-padded s x s patches centred at every pixel."""
    x = np.asarray(x)
    c, h, w = x.shape
    cols = tc.im2col(x, s, s, 1, s // 2)  # (C, H, W, s, s)
    return cols.transpose(1, 2, 3, 4, 0).reshape(h * w, s * s, c)


def fold_patch_table(table, shape, s):
    """Adjoint of :func:`patch_table`: scatter-add patch entries back to pixels."""
    c, h, w = shape
    r = s // 2
    t = table.reshape(h, w, s, s, c)
    out = np.zeros((c, h + 2 * r, w + 2 * r), dtype=table.dtype)
    for a in range(s):
        for b in range(s):
            out[:, a:a + h, b:b + w] += t[:, :, a, b, :].transpose(2, 0, 1)
    return out[:, r:r + h, r:r + w]


def gather_patches(x, centers, s):
    """Gather s x s patches of ``x`` at flat positions ``centers``.

    ``centers`` is an integer array of any shape; the result has shape
    ``centers.shape + (s*s, C)``. Indices are constants for differentiation.
    """
    centers = np.asarray(centers)

    def fwd(x):
        x = np.asarray(x)
        return patch_table(x, s)[centers], {"shape": x.shape, "centers": centers, "s": s}
    return _apply("gather_patches", (x,), fwd)


@_rule("gather_patches")
def _gather_patches_bw(ctx, g):
    c, h, w = ctx["shape"]
    centers = ctx["centers"]
    cells = g.shape[-2]
    flat = centers.reshape(-1)
    gv = g.reshape(flat.size, cells * c)
    table = np.zeros((h * w, cells * c), dtype=g.dtype)
    np.add.at(table, flat, gv)
    return (fold_patch_table(table.reshape(h * w, cells, c), (c, h, w), ctx["s"]),)


def gather_positions(x, index):
    """Pick C-vectors of a (C, h, w) map at flat positions ``index`` -> (C,) + index.shape."""
    index = np.asarray(index)

    def fwd(x):
        x = np.asarray(x)
        c = x.shape[0]
        return x.reshape(c, -1)[:, index], {"shape": x.shape, "index": index}
    return _apply("gather_positions", (x,), fwd)


@_rule("gather_positions")
def _gather_positions_bw(ctx, g):
    c, h, w = ctx["shape"]
    flat = ctx["index"].reshape(-1)
    gv = g.reshape(c, -1)
    out = np.zeros((h * w, c), dtype=g.dtype)
    np.add.at(out, flat, gv.T)
    return (out.T.reshape(c, h, w),)


def weighted_cell_sum(cells, weights):
    """out[c, y, x] = sum_i cells[y, x, i, c] * weights[i, y, x]."""
    def fwd(cells, weights):
        cells, weights = np.asarray(cells), np.asarray(weights)
        out = np.einsum("hwic,ihw->chw", cells, weights, optimize=True)
        return out, {"cells": cells, "weights": weights}
    return _apply("weighted_cell_sum", (cells, weights), fwd)


@_rule("weighted_cell_sum")
def _weighted_cell_sum_bw(ctx, g):
    nc, nw = ctx["needs"]
    gc = np.einsum("chw,ihw->hwic", g, ctx["weights"], optimize=True) if nc else None
    gw = np.einsum("chw,hwic->ihw", g, ctx["cells"], optimize=True) if nw else None
    return gc, gw


NORM_EPS = 1e-12


def correlate(a, b):
    """Cosine similarity of two equal-length vectors; 0 if either norm < 1e-12."""
    def fwd(a, b):
        a = np.asarray(a).reshape(-1)
        b = np.asarray(b).reshape(-1)
        if a.shape != b.shape:
            raise ShapeError(f"length mismatch {a.size} vs {b.size}")
        na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
        if na < NORM_EPS or nb < NORM_EPS:
            return np.asarray(0.0, dtype=np.result_type(a, b)), {"zero": True}
        corr = (a @ b) / (na * nb)
        return np.asarray(corr), {"zero": False, "a": a, "b": b, "na": na, "nb": nb, "corr": corr}
    return _apply("correlate", (a, b), fwd)


@_rule("correlate")
def _correlate_bw(ctx, g):
    if ctx["zero"]:
        return None, None
    a, b, na, nb, corr = ctx["a"], ctx["b"], ctx["na"], ctx["nb"], ctx["corr"]
    # d/da (a.b / |a||b|) = b/(|a||b|) - corr * a/|a|^2
    ga = g * (b / (na * nb) - corr * a / (na * na))
    gb = g * (a / (na * nb) - corr * b / (nb * nb))
    return ga, gb


# ---------------------------------------------------------------------------
# Losses

def charbonnier(pred, target, eps=1e-3):
    """Mean of sqrt((pred - target)^2 + eps^2)."""
    def fwd(pred, target):
        pred, target = np.asarray(pred), np.asarray(target)
        if pred.shape != target.shape:
            raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
        diff = pred - target
        root = np.sqrt(diff * diff + eps * eps)
        return np.asarray(root.mean()), {"diff": diff, "root": root}
    return _apply("charbonnier", (pred, target), fwd)


@_rule("charbonnier")
def _charbonnier_bw(ctx, g):
    np_, nt = ctx["needs"]
    d = g * ctx["diff"] / ctx["root"] / ctx["diff"].size
    return (d if np_ else None, -d if nt else None)


def masked_l1(pred, target, mask):
    """mean(|mask * (pred - target)|); ``mask`` broadcasts over channels."""
    mask = np.asarray(mask)

    def fwd(pred, target):
        pred, target = np.asarray(pred), np.asarray(target)
        if pred.shape != target.shape:
            raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
        masked = np.broadcast_to(mask, pred.shape) * (pred - target)
        return np.asarray(np.abs(masked).mean()), {"masked": masked, "mask": mask}
    return _apply("masked_l1", (pred, target), fwd)


@_rule("masked_l1")
def _masked_l1_bw(ctx, g):
    np_, nt = ctx["needs"]
    masked = ctx["masked"]
    d = g * np.sign(masked) * np.broadcast_to(ctx["mask"], masked.shape) / masked.size
    return (d if np_ else None, -d if nt else None)


def grad_check(op, shapes=None, seed: int = 0, tol: float = 1e-4):
    """Central-difference check of ``op``; see :func:`mucan.gradcheck.grad_check`."""
    from .gradcheck import grad_check as _grad_check
    return _grad_check(op, shapes, seed, tol)
