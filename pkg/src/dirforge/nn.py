"""Minimal reverse-mode autodiff on float32 arrays, with exactly the
operations the registration networks need: 3D convolution (numba
kernels), pooling, activations, stencils, trilinear resampling/warping,
and reductions that accumulate in float64.

Tensors are channel-first volumetric arrays, typically (C, X, Y, Z);
weights are (out, in, kx, ky, kz). Batch size is fixed at one. Gradients
accumulate across backward calls until ``zero_grad``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from numba import njit

from .transform import identity_coords, trilinear_parts
from .volume import _atomic_write_bytes, _atomic_write_text


# --------------------------------------------------------------------------
# numba convolution kernels
# --------------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _conv3d_fwd1(xp, w, out):
    # unit stride; the fixed-offset inner loop vectorises
    co, ci, kx, ky, kz = w.shape
    _, ox, oy, oz = out.shape
    for o in range(co):
        acc = out[o]
        for i in range(ci):
            xi = xp[i]
            for a in range(kx):
                for x in range(ox):
                    xrow = xi[x + a]
                    for b in range(ky):
                        for y in range(oy):
                            row = xrow[y + b]
                            ar = acc[x, y]
                            for c in range(kz):
                                wv = w[o, i, a, b, c]
                                for z in range(oz):
                                    ar[z] += wv * row[z + c]


@njit(cache=True, fastmath=True)
def _conv3d_fwd_s(xp, w, out, stride):
    co, ci, kx, ky, kz = w.shape
    _, ox, oy, oz = out.shape
    for o in range(co):
        acc = out[o]
        for i in range(ci):
            xi = xp[i]
            for a in range(kx):
                for x in range(ox):
                    xrow = xi[x * stride + a]
                    for b in range(ky):
                        for y in range(oy):
                            row = xrow[y * stride + b]
                            ar = acc[x, y]
                            for c in range(kz):
                                wv = w[o, i, a, b, c]
                                for z in range(oz):
                                    ar[z] += wv * row[z * stride + c]


def _conv3d_fwd(xp, w, out, stride):
    if stride == 1:
        _conv3d_fwd1(xp, w, out)
    else:
        _conv3d_fwd_s(xp, w, out, stride)


@njit(cache=True, fastmath=True)
def _conv3d_bwd_x1(gout, w, gxp):
    co, ci, kx, ky, kz = w.shape
    _, ox, oy, oz = gout.shape
    for o in range(co):
        go = gout[o]
        for i in range(ci):
            gi = gxp[i]
            for a in range(kx):
                for x in range(ox):
                    grow_x = go[x]
                    gir = gi[x + a]
                    for b in range(ky):
                        for y in range(oy):
                            grow = grow_x[y]
                            gr = gir[y + b]
                            for c in range(kz):
                                wv = w[o, i, a, b, c]
                                for z in range(oz):
                                    gr[z + c] += wv * grow[z]


@njit(cache=True, fastmath=True)
def _conv3d_bwd_x_s(gout, w, gxp, stride):
    co, ci, kx, ky, kz = w.shape
    _, ox, oy, oz = gout.shape
    for o in range(co):
        go = gout[o]
        for i in range(ci):
            gi = gxp[i]
            for a in range(kx):
                for x in range(ox):
                    grow_x = go[x]
                    gir = gi[x * stride + a]
                    for b in range(ky):
                        for y in range(oy):
                            grow = grow_x[y]
                            gr = gir[y * stride + b]
                            for c in range(kz):
                                wv = w[o, i, a, b, c]
                                for z in range(oz):
                                    gr[z * stride + c] += wv * grow[z]


def _conv3d_bwd_x(gout, w, gxp, stride):
    if stride == 1:
        _conv3d_bwd_x1(gout, w, gxp)
    else:
        _conv3d_bwd_x_s(gout, w, gxp, stride)


@njit(cache=True, fastmath=True)
def _conv3d_bwd_w1(gout, xp, gw):
    co, ci, kx, ky, kz = gw.shape
    _, ox, oy, oz = gout.shape
    for o in range(co):
        go = gout[o]
        for i in range(ci):
            xi = xp[i]
            for a in range(kx):
                for x in range(ox):
                    xrow = xi[x + a]
                    grow_x = go[x]
                    for b in range(ky):
                        for y in range(oy):
                            row = xrow[y + b]
                            grow = grow_x[y]
                            for c in range(kz):
                                s = np.float32(0.0)
                                for z in range(oz):
                                    s += grow[z] * row[z + c]
                                gw[o, i, a, b, c] += s


@njit(cache=True, fastmath=True)
def _conv3d_bwd_w_s(gout, xp, gw, stride):
    co, ci, kx, ky, kz = gw.shape
    _, ox, oy, oz = gout.shape
    for o in range(co):
        go = gout[o]
        for i in range(ci):
            xi = xp[i]
            for a in range(kx):
                for x in range(ox):
                    xrow = xi[x * stride + a]
                    grow_x = go[x]
                    for b in range(ky):
                        for y in range(oy):
                            row = xrow[y * stride + b]
                            grow = grow_x[y]
                            for c in range(kz):
                                s = np.float32(0.0)
                                for z in range(oz):
                                    s += grow[z] * row[z * stride + c]
                                gw[o, i, a, b, c] += s


def _conv3d_bwd_w(gout, xp, gw, stride):
    if stride == 1:
        _conv3d_bwd_w1(gout, xp, gw)
    else:
        _conv3d_bwd_w_s(gout, xp, gw, stride)


# --------------------------------------------------------------------------
# tensor and tape
# --------------------------------------------------------------------------

def _norm_dtype(arr: np.ndarray) -> np.ndarray:
    """Arrays are float32; 0-d scalars ride float64 (reduction outputs and
    the loss itself), which keeps scalar arithmetic at full precision."""
    if arr.ndim == 0:
        return arr.astype(np.float64, copy=False)
    return arr.astype(np.float32, copy=False)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _norm_dtype(np.asarray(data))
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def constant(value) -> Tensor:
    return Tensor(np.asarray(value))


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _node(data, parents, backward_fn) -> Tensor:
    """Create a graph node; the tape is only built if some parent needs it."""
    out = Tensor.__new__(Tensor)
    out.data = _norm_dtype(np.asarray(data))
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar; parameter grads accumulate."""
    if loss.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    # iterative topological order
    order = []
    visited = {id(loss)}
    stack = [(loss, iter(loss._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in visited and p.requires_grad and p._backward is not None:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    loss.accumulate(np.array(1.0, dtype=loss.data.dtype))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    shape = tuple(shape)
    if g.shape != shape:
        extra = g.ndim - len(shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
        axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return _norm_dtype(np.asarray(g))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# --------------------------------------------------------------------------
# elementwise ops
# --------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    return _node(data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), bwd)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), bwd)


def exp(t: Tensor):
    data = np.exp(t.data)

    def bwd(g):
        t.accumulate(g * data)

    return _node(data, (t,), bwd)


def log(t: Tensor):
    data = np.log(t.data)

    def bwd(g):
        t.accumulate(g / t.data)

    return _node(data, (t,), bwd)


def sqrt(t: Tensor):
    data = np.sqrt(t.data)

    def bwd(g):
        t.accumulate(g / (2.0 * data))

    return _node(data, (t,), bwd)


def tanh(t: Tensor):
    data = np.tanh(t.data)

    def bwd(g):
        t.accumulate(g * (1.0 - data * data))

    return _node(data, (t,), bwd)


def sigmoid(t: Tensor):
    data = 1.0 / (1.0 + np.exp(-t.data))

    def bwd(g):
        t.accumulate(g * data * (1.0 - data))

    return _node(data, (t,), bwd)


def leaky_relu(t: Tensor, slope: float = 0.2):
    mask = t.data > 0
    data = np.where(mask, t.data, np.float32(slope) * t.data)

    def bwd(g):
        t.accumulate(np.where(mask, g, np.float32(slope) * g))

    return _node(data, (t,), bwd)


def relu(t: Tensor):
    return leaky_relu(t, slope=0.0)


def clamp(t: Tensor, lo: float, hi: float):
    data = np.clip(t.data, lo, hi)
    mask = (t.data > lo) & (t.data < hi)

    def bwd(g):
        t.accumulate(np.where(mask, g, np.float32(0.0)))

    return _node(data, (t,), bwd)


# --------------------------------------------------------------------------
# reductions (float64 accumulation)
# --------------------------------------------------------------------------

def mean_over(t: Tensor, axes=None, keepdims=False):
    if axes is None:
        axes = tuple(range(t.data.ndim))
    count = 1
    for ax in axes:
        count *= t.data.shape[ax]
    data = np.asarray(t.data.sum(axis=axes, dtype=np.float64, keepdims=keepdims) / count)
    inv = 1.0 / count

    def bwd(g):
        gg = np.asarray(g, dtype=np.float64)
        if not keepdims and gg.ndim != t.data.ndim:
            gg = np.expand_dims(gg, axes)
        t.accumulate(np.broadcast_to(gg * inv, t.data.shape).astype(t.data.dtype))

    return _node(data, (t,), bwd)


def mean_all(t: Tensor):
    return mean_over(t, axes=None, keepdims=False)


def sum_all(t: Tensor):
    data = np.asarray(t.data.sum(dtype=np.float64))

    def bwd(g):
        t.accumulate(np.broadcast_to(np.asarray(g), t.data.shape).astype(t.data.dtype))

    return _node(data, (t,), bwd)


def max_channel(t: Tensor):
    """Per-voxel maximum over the channel axis (axis 0), keepdims.

    Gradient routes to the first channel attaining the max.
    """
    arg = t.data.argmax(axis=0)
    data = np.take_along_axis(t.data, arg[None], axis=0)

    def bwd(g):
        gt = np.zeros_like(t.data)
        np.put_along_axis(gt, arg[None], np.asarray(g, dtype=np.float32), axis=0)
        t.accumulate(gt)

    return _node(data, (t,), bwd)


# --------------------------------------------------------------------------
# structural ops
# --------------------------------------------------------------------------

def concat_channels(tensors):
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=0)
    sizes = [d.shape[0] for d in datas]

    def bwd(g):
        off = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                t.accumulate(g[off:off + s])
            off += s

    return _node(data, tuple(tensors), bwd)


def take_channel(t: Tensor, idx: int):
    data = t.data[idx]

    def bwd(g):
        gt = np.zeros_like(t.data)
        gt[idx] = g
        t.accumulate(gt)

    return _node(data, (t,), bwd)


def stack_channels(tensors):
    """Stack (X, Y, Z) tensors into (C, X, Y, Z)."""
    data = np.stack([t.data for t in tensors], axis=0)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate(g[i])

    return _node(data, tuple(tensors), bwd)


def axis_shift(t: Tensor, axis: int, delta: int):
    """Shift along one axis with edge replication: out[i] = in[clip(i+delta)]."""
    if delta == 0:
        return t
    n = t.data.shape[axis]
    d = min(abs(delta), n - 1)
    src = np.moveaxis(t.data, axis, -1)
    out = np.empty_like(src)
    if delta > 0:
        out[..., : n - d] = src[..., d:]
        out[..., n - d:] = src[..., n - 1:n]
    else:
        out[..., d:] = src[..., : n - d]
        out[..., :d] = src[..., 0:1]
    data = np.moveaxis(out, -1, axis)

    def bwd(g):
        gs = np.moveaxis(np.asarray(g), axis, -1)
        gt = np.zeros_like(src)
        if delta > 0:
            gt[..., d:] += gs[..., : n - d]
            gt[..., n - 1] += gs[..., n - d:].sum(axis=-1)
        else:
            gt[..., : n - d] += gs[..., d:]
            gt[..., 0] += gs[..., :d].sum(axis=-1)
        t.accumulate(np.moveaxis(gt, -1, axis))

    return _node(np.ascontiguousarray(data), (t,), bwd)


def shift3d(t: Tensor, offset):
    """Shift a (C, X, Y, Z) tensor by an integer spatial offset, clamped."""
    out = t
    for ax, d in enumerate(offset):
        if d != 0:
            out = axis_shift(out, ax + 1, int(d))
    return out


def first_diff(t: Tensor, axis: int):
    """Spatial derivative: central in the interior, one-sided at borders."""
    n = t.data.shape[axis]
    src = np.moveaxis(t.data, axis, -1)
    out = np.zeros_like(src)
    if n >= 2:
        out[..., 0] = src[..., 1] - src[..., 0]
        out[..., -1] = src[..., -1] - src[..., -2]
    if n >= 3:
        out[..., 1:-1] = 0.5 * (src[..., 2:] - src[..., :-2])
    data = np.moveaxis(out, -1, axis)

    def bwd(g):
        gs = np.moveaxis(np.asarray(g), axis, -1)
        gt = np.zeros_like(src)
        if n >= 2:
            gt[..., 1] += gs[..., 0]
            gt[..., 0] -= gs[..., 0]
            gt[..., -1] += gs[..., -1]
            gt[..., -2] -= gs[..., -1]
        if n >= 3:
            gt[..., 2:] += 0.5 * gs[..., 1:-1]
            gt[..., :-2] -= 0.5 * gs[..., 1:-1]
        t.accumulate(np.moveaxis(gt, -1, axis))

    return _node(np.ascontiguousarray(data), (t,), bwd)


def second_diff(t: Tensor, axis: int):
    """Second derivative stencil; borders reuse the adjacent 3-point stencil
    so linear fields map to exactly zero everywhere."""
    n = t.data.shape[axis]
    src = np.moveaxis(t.data, axis, -1)
    out = np.zeros_like(src)
    if n >= 3:
        out[..., 1:-1] = src[..., 2:] - 2.0 * src[..., 1:-1] + src[..., :-2]
        out[..., 0] = src[..., 0] - 2.0 * src[..., 1] + src[..., 2]
        out[..., -1] = src[..., -1] - 2.0 * src[..., -2] + src[..., -3]
    data = np.moveaxis(out, -1, axis)

    def bwd(g):
        gs = np.moveaxis(np.asarray(g), axis, -1)
        gt = np.zeros_like(src)
        if n >= 3:
            gi = gs[..., 1:-1]
            gt[..., 2:] += gi
            gt[..., 1:-1] -= 2.0 * gi
            gt[..., :-2] += gi
            gt[..., 0] += gs[..., 0]
            gt[..., 1] -= 2.0 * gs[..., 0]
            gt[..., 2] += gs[..., 0]
            gt[..., -1] += gs[..., -1]
            gt[..., -2] -= 2.0 * gs[..., -1]
            gt[..., -3] += gs[..., -1]
        t.accumulate(np.moveaxis(gt, -1, axis))

    return _node(np.ascontiguousarray(data), (t,), bwd)


# --------------------------------------------------------------------------
# convolution / pooling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if any(k % 2 == 0 or k < 1 for k in self.kernel):
            raise ValueError(f"kernel must be odd in each axis, got {self.kernel}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")


def conv3d(x: Tensor, w: Tensor, b=None, stride: int = 1, padding: int = 0):
    """Cross-correlation of (Ci, X, Y, Z) with (Co, Ci, kx, ky, kz) weights,
    zero padding, exact gradients for input, weights and bias."""
    ci, X, Y, Z = x.data.shape
    co, ci_w, kx, ky, kz = w.data.shape
    if ci != ci_w:
        raise ValueError(f"input has {ci} channels but weights expect {ci_w}")
    if (kx % 2 == 0) or (ky % 2 == 0) or (kz % 2 == 0):
        raise ValueError(f"kernel must be odd in each axis, got {(kx, ky, kz)}")
    p, s = padding, stride
    ox = (X + 2 * p - kx) // s + 1
    oy = (Y + 2 * p - ky) // s + 1
    oz = (Z + 2 * p - kz) // s + 1
    if min(ox, oy, oz) < 1:
        raise ValueError(f"conv output empty for input {(X, Y, Z)} kernel {(kx, ky, kz)}")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else np.ascontiguousarray(x.data)
    out = np.empty((co, ox, oy, oz), dtype=np.float32)
    if b is not None:
        out[:] = b.data.reshape(co, 1, 1, 1)
    else:
        out[:] = 0.0
    _conv3d_fwd(xp, w.data, out, s)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g = np.ascontiguousarray(g)
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=(1, 2, 3), dtype=np.float64).astype(np.float32))
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            _conv3d_bwd_w(g, xp, gw, s)
            w.accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            _conv3d_bwd_x(g, w.data, gxp, s)
            if p:
                x.accumulate(gxp[:, p:-p, p:-p, p:-p])
            else:
                x.accumulate(gxp)

    return _node(out, parents, bwd)


def maxpool3d(x: Tensor, window=(2, 2, 2)):
    """Non-overlapping max pooling; gradient routes to the first maximal
    voxel of each window (scan order)."""
    c, X, Y, Z = x.data.shape
    wx, wy, wz = window
    if X % wx or Y % wy or Z % wz:
        raise ValueError(f"dims {(X, Y, Z)} not divisible by window {window}")
    ox, oy, oz = X // wx, Y // wy, Z // wz
    v = x.data.reshape(c, ox, wx, oy, wy, oz, wz).transpose(0, 1, 3, 5, 2, 4, 6)
    v = np.ascontiguousarray(v).reshape(c, ox, oy, oz, wx * wy * wz)
    arg = v.argmax(axis=-1)
    data = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gv = np.zeros_like(v)
        np.put_along_axis(gv, arg[..., None], np.asarray(g, dtype=np.float32)[..., None], axis=-1)
        gx = gv.reshape(c, ox, oy, oz, wx, wy, wz).transpose(0, 1, 4, 2, 5, 3, 6)
        x.accumulate(np.ascontiguousarray(gx).reshape(c, X, Y, Z))

    return _node(np.ascontiguousarray(data), (x,), bwd)


def meanpool3d(x: Tensor, factor):
    """Block-mean downsampling by integer factors per axis."""
    c, X, Y, Z = x.data.shape
    fx, fy, fz = factor
    if X % fx or Y % fy or Z % fz:
        raise ValueError(f"dims {(X, Y, Z)} not divisible by factor {factor}")
    ox, oy, oz = X // fx, Y // fy, Z // fz
    data = (
        x.data.reshape(c, ox, fx, oy, fy, oz, fz)
        .mean(axis=(2, 4, 6), dtype=np.float64)
        .astype(np.float32)
    )
    inv = np.float32(1.0 / (fx * fy * fz))

    def bwd(g):
        gg = np.asarray(g, dtype=np.float32) * inv
        gx = np.broadcast_to(
            gg[:, :, None, :, None, :, None], (c, ox, fx, oy, fy, oz, fz)
        )
        x.accumulate(np.ascontiguousarray(gx).reshape(c, X, Y, Z))

    return _node(data, (x,), bwd)


# --------------------------------------------------------------------------
# trilinear resampling ops
# --------------------------------------------------------------------------

def _corner_layout(dims, coords):
    """Flattened corner indices (8, N) and weights (8, N) for sampling."""
    i0, i1, f = trilinear_parts(dims, coords)
    nx, ny, nz = dims
    fx, fy, fz = f.astype(np.float64)
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    x0, y0, z0 = i0
    x1, y1, z1 = i1

    def flat(xi, yi, zi):
        return (xi * ny + yi) * nz + zi

    idx = np.stack([
        flat(x0, y0, z0), flat(x1, y0, z0), flat(x0, y1, z0), flat(x1, y1, z0),
        flat(x0, y0, z1), flat(x1, y0, z1), flat(x0, y1, z1), flat(x1, y1, z1),
    ])
    wts = np.stack([
        gx * gy * gz, fx * gy * gz, gx * fy * gz, fx * fy * gz,
        gx * gy * fz, fx * gy * fz, gx * fy * fz, fx * fy * fz,
    ]).astype(np.float32)
    return idx, wts


def upsample_trilinear(t: Tensor, target_dims, channel_scale=None):
    """Resample (C, *src) to (C, *target_dims) with endpoint-aligned
    trilinear interpolation; optionally scale each channel's values."""
    src_dims = t.data.shape[1:]
    target_dims = tuple(int(d) for d in target_dims)
    coords = identity_coords(target_dims).astype(np.float64)
    for ax in range(3):
        tgt, s = target_dims[ax], src_dims[ax]
        coords[ax] *= (s - 1) / (tgt - 1) if tgt > 1 else 0.0
    idx, wts = _corner_layout(src_dims, coords)
    C = t.data.shape[0]
    n_src = int(np.prod(src_dims))
    out = np.empty((C, *target_dims), dtype=np.float32)
    for c in range(C):
        flat = t.data[c].ravel()
        vals = (flat[idx] * wts).sum(axis=0, dtype=np.float64)
        if channel_scale is not None:
            vals *= channel_scale[c]
        out[c] = vals.astype(np.float32).reshape(target_dims)

    def bwd(g):
        g = np.asarray(g, dtype=np.float32)
        gt = np.empty_like(t.data)
        for c in range(C):
            gc = g[c].ravel()
            if channel_scale is not None:
                gc = gc * np.float32(channel_scale[c])
            acc = np.zeros(n_src, dtype=np.float64)
            for k in range(8):
                acc += np.bincount(idx[k], weights=wts[k] * gc, minlength=n_src)
            gt[c] = acc.astype(np.float32).reshape(src_dims)
        t.accumulate(gt)

    return _node(out, (t,), bwd)


def warp_image(vol: np.ndarray, dvf: Tensor):
    """Differentiable warp of a fixed (X, Y, Z) volume by a (3, X, Y, Z)
    displacement tensor: out(p) = trilinear(vol, p + d(p)), border clamped.

    Gradients flow into the displacement only; the volume is constant.
    """
    dims = vol.shape
    raw = identity_coords(dims).astype(np.float64) + dvf.data.reshape(3, -1)
    idx, wts = _corner_layout(dims, raw)
    flat = vol.ravel()
    corner_vals = flat[idx]  # (8, N)
    out = (corner_vals * wts).sum(axis=0, dtype=np.float64).astype(np.float32).reshape(dims)

    i0, i1, f = trilinear_parts(dims, raw)
    fx, fy, fz = f.astype(np.float64)
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    c000, c100, c010, c110, c001, c101, c011, c111 = corner_vals
    dfx = ((c100 - c000) * gy * gz + (c110 - c010) * fy * gz
           + (c101 - c001) * gy * fz + (c111 - c011) * fy * fz)
    dfy = ((c010 - c000) * gx * gz + (c110 - c100) * fx * gz
           + (c011 - c001) * gx * fz + (c111 - c101) * fx * fz)
    dfz = ((c001 - c000) * gx * gy + (c101 - c100) * fx * gy
           + (c011 - c010) * gx * fy + (c111 - c110) * fx * fy)
    # clamped samples have zero derivative w.r.t. the coordinate
    deriv = np.stack([dfx, dfy, dfz])
    for ax in range(3):
        hi = dims[ax] - 1
        inside = (raw[ax] > 0.0) & (raw[ax] < hi)
        deriv[ax] *= inside

    def bwd(g):
        gflat = np.asarray(g, dtype=np.float64).reshape(1, -1)
        dvf.accumulate((deriv * gflat).astype(np.float32).reshape(3, *dims))

    return _node(out[None], (dvf,), bwd)


# --------------------------------------------------------------------------
# parameter checkpoints
# --------------------------------------------------------------------------

def save_params(params: dict, path) -> None:
    """Write named float32 arrays as a JSON manifest plus raw payload."""
    stem, ext = os.path.splitext(path)
    if ext not in (".json", ".bin"):
        stem = path
    layers = []
    chunks = []
    offset = 0
    for name, t in params.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float32)
        raw = np.ascontiguousarray(arr.astype(np.float32, copy=False)).astype("<f4").tobytes()
        layers.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "dirforge-params-v1", "layers": layers, "total_bytes": offset}
    _atomic_write_bytes(stem + ".bin", b"".join(chunks))
    _atomic_write_text(stem + ".json", json.dumps(manifest, sort_keys=True) + "\n")


def load_params(path) -> dict:
    """Read a checkpoint back as a dict of float32 arrays (bit-exact)."""
    stem, ext = os.path.splitext(path)
    if ext not in (".json", ".bin"):
        stem = path
    with open(stem + ".json") as f:
        manifest = json.load(f)
    with open(stem + ".bin", "rb") as f:
        payload = f.read()
    if len(payload) != manifest["total_bytes"]:
        raise ValueError(
            f"checkpoint payload is {len(payload)} bytes, manifest says {manifest['total_bytes']}"
        )
    out = {}
    for layer in manifest["layers"]:
        shape = tuple(layer["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = layer["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        out[layer["name"]] = arr.reshape(shape).astype(np.float32)
    return out


def assert_finite(t: Tensor, label: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"{label} values contain non-finite entries")
    if t.grad is not None and not np.all(np.isfinite(t.grad)):
        raise FloatingPointError(f"{label} gradient contains non-finite entries")
