"""Spatially structured differentiable ops: convolution, bilinear sampling,
and the displacement cost volume.

conv2d lowers to an im2col matmul so the heavy lifting stays in BLAS.
bilinear_sample clamps out-of-bounds coordinates to the border, which makes
constant images warp to themselves and keeps the op exactly linear in its
image argument.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import ShapeError
from .tensor import Tensor, _make

try:
    from ._corr_kernels import corr_backward, corr_forward
except ImportError:  # pragma: no cover - numba is an optional accelerator
    corr_backward = corr_forward = None


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation convolution; weight shape (out_c, in_c, k, k).

    Lowered to one batched GEMM over an im2col buffer laid out as
    (b, c*k*k, oh*ow); the buffer is filled with k*k contiguous block
    copies, so no element-gather transposes appear on either pass.
    """
    b, c, h, w = x.shape
    oc, ic, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"square kernels only, got {weight.shape}")
    if ic != c:
        raise ShapeError(f"input has {c} channels but weight expects {ic}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad stride/padding ({stride}, {padding})")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {k} does not fit input {h}x{w} with padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    ylim = stride * (oh - 1) + 1
    xlim = stride * (ow - 1) + 1
    if k == 1 and stride == 1:
        cols = xp.reshape(b, c, oh * ow)  # 1x1 conv needs no im2col copy
    else:
        cols = np.empty((b, c, k, k, oh, ow), dtype=x.data.dtype)
        for ky in range(k):
            for kx in range(k):
                cols[:, :, ky, kx] = xp[:, :, ky : ky + ylim : stride, kx : kx + xlim : stride]
        cols = cols.reshape(b, c * k * k, oh * ow)
    wmat = weight.data.reshape(1, oc, c * k * k)
    out = np.matmul(wmat, cols).reshape(b, oc, oh, ow) + bias.data

    def backward(g):
        gm = g.reshape(b, oc, oh * ow)
        if weight.requires_grad:
            weight.accumulate_grad(np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(bias.shape))
        if x.requires_grad:
            dcols = np.matmul(wmat.transpose(0, 2, 1), gm).reshape(b, c, k, k, oh, ow)
            if k == 1 and stride == 1 and not padding:
                x.accumulate_grad(dcols.reshape(b, c, h, w))
            else:
                dxp = np.zeros_like(xp)
                for ky in range(k):
                    for kx in range(k):
                        dxp[:, :, ky : ky + ylim : stride, kx : kx + xlim : stride] += dcols[:, :, ky, kx]
                if padding:
                    dxp = dxp[:, :, padding : padding + h, padding : padding + w]
                x.accumulate_grad(dxp)

    return _make(out, (x, weight, bias), backward)


def _box_sum(x: np.ndarray, r: int) -> np.ndarray:
    """Sum over (2r+1)^2 windows clipped at the border, via integral images."""
    b, c, h, w = x.shape
    acc = x.cumsum(axis=2).cumsum(axis=3)
    acc = np.pad(acc, ((0, 0), (0, 0), (1, 0), (1, 0)))
    y0 = np.clip(np.arange(h) - r, 0, h)
    y1 = np.clip(np.arange(h) + r + 1, 0, h)
    x0 = np.clip(np.arange(w) - r, 0, w)
    x1 = np.clip(np.arange(w) + r + 1, 0, w)
    return acc[:, :, y1[:, None], x1[None, :]] - acc[:, :, y0[:, None], x1[None, :]] - acc[:, :, y1[:, None], x0[None, :]] + acc[:, :, y0[:, None], x0[None, :]]


def box_filter(t: Tensor, radius: int) -> Tensor:
    """Mean over (2*radius+1)^2 windows, border windows normalized by their
    actual size. Backward is the exact adjoint (a box sum of g / counts)."""
    if radius < 1:
        return t
    b, c, h, w = t.shape
    ones = np.ones((1, 1, h, w), dtype=t.data.dtype)
    counts = _box_sum(ones, radius)
    out = _box_sum(t.data, radius) / counts

    def backward(g):
        t.accumulate_grad(_box_sum(g / counts, radius))

    return _make(out, (t,), backward)


def bilinear_sample(image: Tensor, coords: Tensor) -> Tensor:
    """Sample `image` at absolute pixel coords (channel 0 = x/col, 1 = y/row).

    Out-of-bounds coordinates clamp to the border. Differentiable in both
    arguments; the coordinate gradient is zero where the clamp engaged.
    """
    b, c, h, w = image.shape
    bc, two, oh, ow = coords.shape
    if two != 2:
        raise ShapeError(f"coords needs 2 channels, got {coords.shape}")
    if bc != b:
        raise ShapeError(f"batch mismatch: image {b} vs coords {bc}")

    xr = coords.data[:, 0]
    yr = coords.data[:, 1]
    x = np.clip(xr, 0.0, w - 1.0)
    y = np.clip(yr, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x), 0, w - 2).astype(np.intp) if w > 1 else np.zeros_like(x, dtype=np.intp)
    y0 = np.clip(np.floor(y), 0, h - 2).astype(np.intp) if h > 1 else np.zeros_like(y, dtype=np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]

    flat = image.data.reshape(b, c, h * w)
    bi = np.arange(b)[:, None, None]
    i00 = (y0 * w + x0)[:, None]
    i01 = (y0 * w + x1)[:, None]
    i10 = (y1 * w + x0)[:, None]
    i11 = (y1 * w + x1)[:, None]
    v00 = flat[bi, np.arange(c)[None, :, None], i00.reshape(b, 1, -1)].reshape(b, c, oh, ow)
    v01 = flat[bi, np.arange(c)[None, :, None], i01.reshape(b, 1, -1)].reshape(b, c, oh, ow)
    v10 = flat[bi, np.arange(c)[None, :, None], i10.reshape(b, 1, -1)].reshape(b, c, oh, ow)
    v11 = flat[bi, np.arange(c)[None, :, None], i11.reshape(b, 1, -1)].reshape(b, c, oh, ow)

    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def backward(g):
        if image.requires_grad:
            # scatter-add via bincount on flattened (b, c, h*w) indices
            dflat = np.zeros(b * c * h * w, dtype=np.float64)
            base = (np.arange(b)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
            for idx, wt in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
                tgt = np.broadcast_to(base + idx, (b, c, oh, ow))
                dflat += np.bincount(tgt.ravel(), weights=(wt * g).ravel(), minlength=dflat.size)
            image.accumulate_grad(dflat.reshape(image.shape).astype(image.data.dtype, copy=False))
        if coords.requires_grad:
            live_x = ((xr > 0) & (xr < w - 1)).astype(g.dtype)
            live_y = ((yr > 0) & (yr < h - 1)).astype(g.dtype)
            dx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * g
            dy = ((1 - fx) * (v10 - v00) + fx * (v11 - v01)) * g
            dc = np.stack([dx.sum(axis=1) * live_x, dy.sum(axis=1) * live_y], axis=1)
            coords.accumulate_grad(dc)

    return _make(out, (image, coords), backward)


def cost_volume(feat1: Tensor, feat2: Tensor, max_disp: int) -> Tensor:
    """Channel-mean correlation of feat1 at i with feat2 at i + d.

    Covers every integer displacement with |dx|, |dy| <= max_disp; output
    channel index is row-major over (dy, dx). Displaced positions outside
    feat2 contribute zero.
    """
    if feat1.shape != feat2.shape:
        raise ShapeError(f"feature shapes differ: {feat1.shape} vs {feat2.shape}")
    if max_disp < 0:
        raise ShapeError("max_disp must be >= 0")
    b, c, h, w = feat1.shape
    d = max_disp
    side = 2 * d + 1

    # channels-last so each displacement reduces over a contiguous axis
    f1t = np.ascontiguousarray(feat1.data.transpose(0, 2, 3, 1))
    f2pt = np.pad(np.ascontiguousarray(feat2.data.transpose(0, 2, 3, 1)), ((0, 0), (d, d), (d, d), (0, 0)))
    if corr_forward is not None:
        out = corr_forward(f1t, f2pt, d)
    else:
        out = np.empty((b, side * side, h, w), dtype=feat1.data.dtype)
        for u in range(side):
            for v in range(side):
                out[:, u * side + v] = np.einsum("bhwc,bhwc->bhw", f1t, f2pt[:, u : u + h, v : v + w, :])
        out /= c

    def backward(g):
        need1 = feat1.requires_grad
        need2 = feat2.requires_grad
        if corr_backward is not None:
            df1t, df2pt = corr_backward(np.ascontiguousarray(g), f1t, f2pt, d, need1, need2)
        else:
            df1t = np.zeros_like(f1t)
            df2pt = np.zeros_like(f2pt)
            for u in range(side):
                for v in range(side):
                    gw = g[:, u * side + v, :, :, None] / c
                    if need1:
                        df1t += gw * f2pt[:, u : u + h, v : v + w, :]
                    if need2:
                        df2pt[:, u : u + h, v : v + w, :] += gw * f1t
        if need1:
            feat1.accumulate_grad(np.ascontiguousarray(df1t.transpose(0, 3, 1, 2)))
        if need2:
            feat2.accumulate_grad(np.ascontiguousarray(df2pt[:, d : d + h, d : d + w, :].transpose(0, 3, 1, 2)))

    return _make(out, (feat1, feat2), backward)
