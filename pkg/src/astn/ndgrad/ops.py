"""Differentiable ops on :class:`~astn.ndgrad.tensor.Tensor`.

Spatial ops take ``[C, H, W]`` or batched ``[B, C, H, W]`` inputs. Binary
elementwise ops accept equal shapes, or shapes that differ only by a leading
axis of extent 1; plain Python numbers are treated as constants.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from .tensor import Tensor


class ShapeError(ValueError):
    pass


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _broadcast_check(a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if len(sa) == len(sb) and sa[1:] == sb[1:] and (sa[0] == 1 or sb[0] == 1):
        return
    raise ShapeError(f"cannot broadcast shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.sum(axis=0, keepdims=True)


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)

    def backward(g):
        return (g * c,)

    return Tensor._from_op(a.data * c, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype, copy=False)

    def backward(g):
        return (g * s * (1 - s),)

    return Tensor._from_op(s, (a,), backward)


def square(a: Tensor) -> Tensor:
    x = a.data

    def backward(g):
        return (2 * x * g,)

    return Tensor._from_op(x * x, (a,), backward)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "sigmoid": sigmoid}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("relu", "sigmoid"):
        if b is not None:
            raise ValueError(f"{op} is unary")
        return fn(a)
    if b is None:
        raise ValueError(f"{op} needs two operands")
    return fn(a, b)


# -- reductions and reshaping ---------------------------------------------------

def total(a: Tensor) -> Tensor:
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size

    def backward(g):
        return (np.full(shape, g / n, dtype=g.dtype),)

    return Tensor._from_op(np.asarray(a.data.mean(), dtype=a.dtype), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return Tensor._from_op(a.data.reshape(tuple(shape)), (a,), backward)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        out[index] = g
        return (out,)

    return Tensor._from_op(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows along axis 0 (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        for i, j in enumerate(idx):
            out[j] += g[i]
        return (out,)

    return Tensor._from_op(a.data[idx], (a,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape [B, K] and ``w`` of shape [K, N]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        if b.shape != (wd.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match {wd.shape[1]}")
        out = out + b.data

    def backward(g):
        gb = g.sum(axis=0) if b is not None else None
        return g @ wd.T, xd.T @ g, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, backward)


# -- spatial -----------------------------------------------------------------

def _batched(x: Tensor, what: str) -> bool:
    if x.ndim == 4:
        return True
    if x.ndim == 3:
        return False
    raise ShapeError(f"{what}: expected [C,H,W] or [B,C,H,W], got {x.shape}")


def _unbatch(t: Tensor, batched: bool) -> Tensor:
    return t if batched else reshape(t, t.shape[1:])


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation, ``w`` shaped [C_out, C_in, k, k]."""
    batched = _batched(x, "conv2d")
    if not batched:
        x = reshape(x, (1,) + x.shape)
    B, C, H, W = x.shape
    O, Ci, k, k2 = w.shape
    if Ci != C or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if (H + 2 * pad - k) % stride or (W + 2 * pad - k) % stride:
        raise ShapeError(
            f"conv2d: output extent not integral for input {H}x{W}, k={k}, stride={stride}, pad={pad}"
        )
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: empty output for input {H}x{W}")

    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {O} output channels")
    impl = _conv_shifted if stride == 1 else _conv_im2col
    out, backward = impl(x, w, b, k, stride, pad, Ho, Wo)
    parents = (x, w) if b is None else (x, w, b)
    return _unbatch(Tensor._from_op(out, parents, backward), batched)


def _conv_shifted(x, w, b, k, stride, pad, Ho, Wo):
    # Stride 1: on the flattened padded grid every kernel tap is a constant
    # offset, so each tap is one GEMM over a contiguous slice (no im2col).
    B, C, H, W = x.shape
    O = w.shape[0]
    Hp, Wp = H + 2 * pad, W + 2 * pad
    xt = np.zeros((C, B, Hp, Wp), dtype=x.dtype)
    xt[:, :, pad : pad + H, pad : pad + W] = x.data.transpose(1, 0, 2, 3)
    flat = xt.reshape(C, B * Hp * Wp)
    N = flat.shape[1]
    L = N - (k - 1) * Wp - (k - 1)
    taps = [(i, j, i * Wp + j) for i in range(k) for j in range(k)]
    wd = w.data
    wt = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))  # per-tap [O, C] blocks must be contiguous for BLAS
    wtT = np.ascontiguousarray(wd.transpose(2, 3, 1, 0))
    acc = np.zeros((O, N), dtype=x.dtype)
    for i, j, off in taps:
        acc[:, :L] += wt[i, j] @ flat[:, off : off + L]
    out = acc.reshape(O, B, Hp, Wp)[:, :, :Ho, :Wo].transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        gpad = np.zeros((O, B, Hp, Wp), dtype=g.dtype)
        gpad[:, :, :Ho, :Wo] = g.transpose(1, 0, 2, 3)
        gflat = gpad.reshape(O, N)[:, :L]
        gw = None
        if w.requires_grad:
            gwt = np.empty((k, k, O, C), dtype=g.dtype)
            for i, j, off in taps:
                gwt[i, j] = gflat @ flat[:, off : off + L].T
            gw = gwt.transpose(2, 3, 0, 1)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        gx = None
        if x.requires_grad:
            gxf = np.zeros((C, N), dtype=g.dtype)
            for i, j, off in taps:
                gxf[:, off : off + L] += wtT[i, j] @ gflat
            gx = gxf.reshape(C, B, Hp, Wp)[:, :, pad : pad + H, pad : pad + W].transpose(1, 0, 2, 3)
        return gx, gw, gb

    return out, backward


def _conv_im2col(x, w, b, k, stride, pad, Ho, Wo):
    B, C, H, W = x.shape
    O = w.shape[0]
    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((C, k, k, B, Ho, Wo), dtype=xd.dtype)
    xt = xd.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols = cols.reshape(C * k * k, B * Ho * Wo)
    wmat = w.data.reshape(O, C * k * k)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    Hp, Wp = H + 2 * pad, W + 2 * pad

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(C, k, k, B, Ho, Wo)
            gxt = np.zeros((C, B, Hp, Wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxt[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, i, j]
            if pad:
                gxt = gxt[:, :, pad:-pad, pad:-pad]
            gx = gxt.transpose(1, 0, 2, 3)
        return gx, gw, gb

    return out, backward


def pool_down(x: Tensor) -> Tensor:
    """2x2 average pooling."""
    _batched(x, "pool_down")
    *lead, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"pool_down: spatial extents must be even, got {H}x{W}")
    out = x.data.reshape(*lead, H // 2, 2, W // 2, 2).mean(axis=(-3, -1))

    def backward(g):
        q = g / 4
        return (np.repeat(np.repeat(q, 2, axis=-2), 2, axis=-1),)

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x,), backward)


@lru_cache(maxsize=32)
def _upsample_matrix(n: int, dtype_str: str) -> np.ndarray:
    # half-pixel centres, edge-clamped (rows sum to one)
    m = np.zeros((2 * n, n), dtype=np.float64)
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2 - 0.5, 0.0), n - 1)
        i0 = int(np.floor(src))
        f = src - i0
        i1 = min(i0 + 1, n - 1)
        m[i, i0] += 1 - f
        m[i, i1] += f
    m = m.astype(dtype_str)
    m.setflags(write=False)
    return m


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling (half-pixel convention, edges clamped)."""
    _batched(x, "upsample2x")
    H, W = x.shape[-2:]
    uh = _upsample_matrix(H, x.dtype.str)
    uw = _upsample_matrix(W, x.dtype.str)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def backward(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return Tensor._from_op(out, (x,), backward)


def grid_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Bilinear resampling of ``x`` at absolute pixel positions.

    ``coords[0]`` holds rows and ``coords[1]`` columns. Samples that fall
    outside the grid read zero.
    """
    batched = _batched(x, "grid_sample")
    if not batched:
        x = reshape(x, (1,) + x.shape)
        coords = reshape(coords, (1,) + coords.shape)
    B, C, H, W = x.shape
    if coords.shape != (B, 2, H, W):
        raise ShapeError(f"grid_sample: coords shape {coords.shape} does not match input {x.shape}")

    xd = x.data
    r = coords.data[:, 0]
    c = coords.data[:, 1]
    r0f = np.floor(r)
    c0f = np.floor(c)
    wr = (r - r0f).astype(xd.dtype, copy=False)
    wc = (c - c0f).astype(xd.dtype, copy=False)
    r0 = r0f.astype(np.intp)
    c0 = c0f.astype(np.intp)

    flat = xd.reshape(B, C, H * W)
    corners = []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        rr, cc = r0 + dr, c0 + dc
        valid = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
        lin = np.where(valid, rr * W + cc, 0)
        vals = np.take_along_axis(flat, lin.reshape(B, 1, H * W).repeat(C, axis=1), axis=2)
        vals = vals.reshape(B, C, H, W) * valid[:, None]
        corners.append((lin, valid, vals))
    (_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11) = corners
    one = xd.dtype.type(1)
    w00 = (one - wr) * (one - wc)
    w01 = (one - wr) * wc
    w10 = wr * (one - wc)
    w11 = wr * wc
    out = (
        w00[:, None] * v00 + w01[:, None] * v01 + w10[:, None] * v10 + w11[:, None] * v11
    ).astype(xd.dtype, copy=False)

    def backward(g):
        gx = None
        if x.requires_grad:
            gx = np.zeros(B * C * H * W, dtype=g.dtype)
            base = (np.arange(B * C) * (H * W)).reshape(B, C, 1)
            for (lin, valid, _), wgt in zip(corners, (w00, w01, w10, w11)):
                contrib = g * (wgt * valid)[:, None]
                idx = (base + lin.reshape(B, 1, H * W)).reshape(-1)
                gx += np.bincount(idx, weights=contrib.reshape(-1), minlength=gx.size).astype(g.dtype, copy=False)
            gx = gx.reshape(B, C, H, W)
        gc = None
        if coords.requires_grad:
            d_r = (one - wc)[:, None] * (v10 - v00) + wc[:, None] * (v11 - v01)
            d_c = (one - wr)[:, None] * (v01 - v00) + wr[:, None] * (v11 - v10)
            gc = np.stack([(g * d_r).sum(axis=1), (g * d_c).sum(axis=1)], axis=1)
        return gx, gc

    return _unbatch(Tensor._from_op(out, (x, coords), backward), batched)


def identity_grid(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Absolute (row, col) positions of every pixel, shape [2, h, w]."""
    rows, cols = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return np.stack([rows, cols])


# -- losses --------------------------------------------------------------------

def mse(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        d = (2 / n) * g * diff
        return d, -d

    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)
    return Tensor._from_op(out, (pred, target), backward)
