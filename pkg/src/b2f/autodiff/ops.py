"""Differentiable operators over NCHW float32 tensors."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .tensor import DTYPE, ContractError, ShapeError, Tensor, make_output


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_output("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_output("sub", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_output("mul", out, (a, b), backward)


def scale(x: Tensor, factor) -> Tensor:
    """Multiply by a constant (scalar or array broadcastable against ``x``)."""
    factor = np.asarray(factor, dtype=DTYPE)
    out = x.data * factor

    def backward(g):
        return (_unbroadcast(g * factor, x.shape),)

    return make_output("scale", out, (x,), backward)


def add_const(x: Tensor, const) -> Tensor:
    const = np.asarray(const, dtype=DTYPE)
    out = x.data + const

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return make_output("add_const", out, (x,), backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=DTYPE)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(DTYPE),)

    return make_output("sum", out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=DTYPE)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=DTYPE),)

    return make_output("mean", out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_output("reshape", out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, DTYPE(0))

    def backward(g):
        return (g * mask,)

    return make_output("relu", out, (x,), backward)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if t.data.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: shape {t.shape} incompatible with (N,H,W)=({n},{h},{w})"
            )
    if len(inputs) == 1:
        x = inputs[0]
        return make_output("concat", x.data.copy(), (x,), lambda g: (g,))
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs))]

    return make_output("concat", out, inputs, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _, _, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(DTYPE),)

    return make_output("global_avg_pool", out, (x,), backward)


def endpoint_error(pred: Tensor, target) -> Tensor:
    """Per-pixel Euclidean distance between two (N,2,H,W) flows, shape (N,1,H,W)."""
    target = _as_tensor(target)
    if pred.shape != target.shape or pred.data.ndim != 4 or pred.shape[1] != 2:
        raise ShapeError(f"endpoint_error: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    mag = np.sqrt((diff * diff).sum(axis=1, keepdims=True))

    def backward(g):
        safe = np.where(mag > 0, mag, DTYPE(1))
        unit = np.where(mag > 0, diff / safe, DTYPE(0))
        gp = g * unit
        return gp, -gp

    return make_output("endpoint_error", mag, (pred, target), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) padded input -> (C*k*k, N*ho*wo) patch matrix."""
    n, c = xp.shape[:2]
    ext = dilation * (k - 1) + 1
    win = sliding_window_view(xp, (ext, ext), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride, ::dilation, ::dilation]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, padded_shape: tuple, k: int, stride: int, dilation: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into a padded buffer."""
    n, c = padded_shape[:2]
    out = np.zeros(padded_shape, dtype=DTYPE)
    cols = cols.reshape(c, k, k, n, ho, wo)
    hspan = (ho - 1) * stride + 1
    wspan = (wo - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            y0, x0 = i * dilation, j * dilation
            out[:, :, y0:y0 + hspan:stride, x0:x0 + wspan:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    co, ci, k, k2 = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ci}")
    if k != k2:
        raise ShapeError(f"conv2d: only square kernels supported, got {k}x{k2}")
    if stride < 1 or dilation < 1:
        raise ContractError("conv2d: stride and dilation must be >= 1")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    ho = conv_output_size(h, k, stride, dilation, padding)
    wo = conv_output_size(w, k, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {k} dilation {dilation}")

    xp = _pad(x.data, padding)
    hp, wp = xp.shape[2:]
    if stride == 1 and hp * wp <= 2 * ho * wo:
        return _conv2d_shifted(x, weight, bias, xp, dilation, padding, ho, wo)
    cols = _im2col(xp, k, stride, dilation, ho, wo)
    w2 = weight.data.reshape(co, -1)
    out = (w2 @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _unpad(_col2im(w2.T @ g2, xp.shape, k, stride, dilation, ho, wo), padding)
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv2d", out, inputs, backward)


def _conv2d_shifted(x, weight, bias, xp, dilation, padding, ho, wo):
    """Stride-1 convolution as one matmul over the flattened padded input.

    Each kernel tap becomes a fixed offset into the flattened (C, N*Hp*Wp)
    buffer, so the tap products are summed by shifted adds instead of
    materialising a k*k times larger patch matrix.
    """
    n, c, hp, wp = xp.shape
    co, _, k, _ = weight.shape
    total = n * hp * wp
    offsets = [i * dilation * wp + j * dilation for i in range(k) for j in range(k)]
    xf = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(c, total)
    w_taps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1)).reshape(k * k * co, c)
    y = w_taps @ xf
    full = np.zeros((co, total), dtype=DTYPE)
    for t, off in enumerate(offsets):
        full[:, :total - off] += y[t * co:(t + 1) * co, off:]
    out = full.reshape(co, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((co, n, hp, wp), dtype=DTYPE)
        gfull[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gfull = gfull.reshape(co, total)
        stack = np.zeros((k * k * co, total), dtype=DTYPE)
        for t, off in enumerate(offsets):
            stack[t * co:(t + 1) * co, off:] = gfull[:, :total - off]
        gx = gw = gb = None
        if x.requires_grad:
            gxf = (w_taps.T @ stack).reshape(c, n, hp, wp).transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(_unpad(gxf, padding))
        if weight.requires_grad:
            gw = np.ascontiguousarray((stack @ xf.T).reshape(k, k, co, c).transpose(2, 3, 0, 1))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv2d", out, inputs, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2,
                     padding: int = 1) -> Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, k, k).

    Equals the input-gradient of :func:`conv2d` using the same weight array.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D tensors, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    ci, co, k, k2 = weight.shape
    if ci != c:
        raise ShapeError(f"conv_transpose2d: input has {c} channels but weight expects {ci}")
    if k != k2:
        raise ShapeError("conv_transpose2d: only square kernels supported")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({co},)")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d: empty output")

    w2 = weight.data.reshape(ci, -1)
    x2 = x.data.transpose(1, 0, 2, 3).reshape(ci, -1)
    padded = (n, co, ho + 2 * padding, wo + 2 * padding)
    out = _unpad(_col2im(w2.T @ x2, padded, k, stride, 1, h, w), padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        cols = _im2col(_pad(g, padding), k, stride, 1, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((w2 @ cols).reshape(ci, n, h, w).transpose(1, 0, 2, 3))
        if weight.requires_grad:
            gw = (x2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv_transpose2d", out, inputs, backward)


# ---------------------------------------------------------------------------
# spatial transformer primitives (normalized coordinates, align_corners=False)
# ---------------------------------------------------------------------------

def normalized_coords(size: int) -> np.ndarray:
    """Pixel-centre coordinates in [-1, 1] for a length-``size`` axis."""
    return ((2.0 * np.arange(size) + 1.0) / size - 1.0).astype(DTYPE)


def affine_grid(theta: Tensor, out_h: int, out_w: int) -> Tensor:
    if theta.data.ndim != 3 or theta.shape[1:] != (2, 3):
        raise ShapeError(f"affine_grid: theta must be (N,2,3), got {theta.shape}")
    xs = normalized_coords(out_w)[None, :]
    ys = normalized_coords(out_h)[:, None]
    t = theta.data
    gx = t[:, 0, 0, None, None] * xs + t[:, 0, 1, None, None] * ys + t[:, 0, 2, None, None]
    gy = t[:, 1, 0, None, None] * xs + t[:, 1, 1, None, None] * ys + t[:, 1, 2, None, None]
    out = np.stack([gx, gy], axis=1)

    def backward(g):
        gt = np.empty_like(t)
        gt[:, :, 0] = (g * xs).sum(axis=(2, 3))
        gt[:, :, 1] = (g * ys).sum(axis=(2, 3))
        gt[:, :, 2] = g.sum(axis=(2, 3))
        return (gt,)

    return make_output("affine_grid", out, (theta,), backward)


def _bilinear_corners(grid: np.ndarray, h: int, w: int):
    """Corner indices, weights and validity for sampling an (h, w) map at ``grid``."""
    ix = ((grid[:, 0] + 1.0) * w - 1.0) * 0.5
    iy = ((grid[:, 1] + 1.0) * h - 1.0) * 0.5
    x0 = np.floor(ix)
    y0 = np.floor(iy)
    wx1 = (ix - x0).astype(DTYPE)
    wy1 = (iy - y0).astype(DTYPE)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy, wy in ((0, 1 - wy1), (1, wy1)):
        for dx, wx in ((0, 1 - wx1), (1, wx1)):
            yy, xx = y0 + dy, x0 + dx
            valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            idx = np.where(valid, yy * w + xx, 0)
            corners.append((idx, valid, wy, wx))
    return corners, wx1, wy1


def _sampling_matrix(corners, n: int, hw_out: int, hw_in: int) -> list:
    mats = []
    rows = np.arange(hw_out)
    for b in range(n):
        r, c, v = [], [], []
        for idx, valid, wy, wx in corners:
            m = valid[b].ravel()
            r.append(rows[m])
            c.append(idx[b].ravel()[m])
            v.append((wy[b] * wx[b]).ravel()[m])
        mats.append(sparse.csr_matrix(
            (np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(hw_out, hw_in)
        ))
    return mats


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of ``x`` at normalized ``grid`` locations, zero outside."""
    if x.data.ndim != 4 or grid.data.ndim != 4 or grid.shape[1] != 2 or grid.shape[0] != x.shape[0]:
        raise ShapeError(f"grid_sample: input {x.shape} and grid {grid.shape} incompatible")
    n, c, h, w = x.shape
    ho, wo = grid.shape[2:]
    corners, wx1, wy1 = _bilinear_corners(grid.data, h, w)
    mats = _sampling_matrix(corners, n, ho * wo, h * w)
    flat = x.data.reshape(n, c, h * w)
    out = np.empty((n, c, ho * wo), dtype=DTYPE)
    for b in range(n):
        out[b] = (mats[b] @ flat[b].T).T
    out = out.reshape(n, c, ho, wo)

    def backward(g):
        g3 = g.reshape(n, c, ho * wo)
        gx = ggrid = None
        if x.requires_grad:
            gx = np.empty((n, c, h * w), dtype=DTYPE)
            for b in range(n):
                gx[b] = (mats[b].T @ g3[b].T).T
            gx = gx.reshape(x.shape)
        if grid.requires_grad:
            # gv[k] = sum_c g * value at corner k, corners ordered 00, 01, 10, 11
            gv = []
            for idx, valid, _, _ in corners:
                vals = np.take_along_axis(flat, idx.reshape(n, 1, -1), axis=2)
                gv.append((vals * g3).sum(axis=1).reshape(n, ho, wo) * valid)
            wx0, wy0 = 1 - wx1, 1 - wy1
            dix = wy0 * (gv[1] - gv[0]) + wy1 * (gv[3] - gv[2])
            diy = wx0 * (gv[2] - gv[0]) + wx1 * (gv[3] - gv[1])
            ggrid = np.stack([dix * (w * 0.5), diy * (h * 0.5)], axis=1).astype(DTYPE)
        return gx, ggrid

    return make_output("grid_sample", out, (x, grid), backward)


# ---------------------------------------------------------------------------
# cost volume and resampling
# ---------------------------------------------------------------------------

def correlation(f1: Tensor, f2: Tensor, max_disp: int = 4) -> Tensor:
    """Channel-averaged dot products over a (2*max_disp+1)^2 displacement window.

    Output channel ``(dy + max_disp) * D + (dx + max_disp)`` compares ``f1`` at
    (y, x) with ``f2`` at (y + dy, x + dx); ``f2`` is zero outside the map.
    """
    if f1.shape != f2.shape or f1.data.ndim != 4:
        raise ShapeError(f"correlation: shapes {f1.shape} and {f2.shape} differ")
    if max_disp < 0:
        raise ContractError("correlation: max_disp must be >= 0")
    n, c, h, w = f1.shape
    m = max_disp
    d = 2 * m + 1
    f2p = _pad(f2.data, m)
    inv_c = DTYPE(1.0 / c)
    out = np.empty((n, d * d, h, w), dtype=DTYPE)
    for dy in range(-m, m + 1):
        for dx in range(-m, m + 1):
            shifted = f2p[:, :, m + dy:m + dy + h, m + dx:m + dx + w]
            out[:, (dy + m) * d + (dx + m)] = (f1.data * shifted).sum(axis=1) * inv_c

    def backward(g):
        g1 = np.zeros_like(f1.data) if f1.requires_grad else None
        g2p = np.zeros_like(f2p) if f2.requires_grad else None
        for dy in range(-m, m + 1):
            for dx in range(-m, m + 1):
                gk = g[:, (dy + m) * d + (dx + m), None] * inv_c
                if g1 is not None:
                    g1 += gk * f2p[:, :, m + dy:m + dy + h, m + dx:m + dx + w]
                if g2p is not None:
                    g2p[:, :, m + dy:m + dy + h, m + dx:m + dx + w] += gk * f1.data
        return g1, (_unpad(g2p, m) if g2p is not None else None)

    return make_output("correlation", out, (f1, f2), backward)


def resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row-stochastic (out_size, in_size) bilinear weights, align_corners=False."""
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    ratio = in_size / out_size
    for o in range(out_size):
        src = max((o + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        mat[o, i0] += 1.0 - lam
        mat[o, i1] += lam
    return mat.astype(DTYPE)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ContractError("bilinear_resize: output size must be >= 1")
    _, _, h, w = x.shape
    ry = resize_matrix(h, out_h)
    rx = resize_matrix(w, out_w)
    out = np.ascontiguousarray(ry @ x.data @ rx.T)

    def backward(g):
        return (np.ascontiguousarray(ry.T @ g @ rx),)

    return make_output("bilinear_resize", out, (x,), backward)
