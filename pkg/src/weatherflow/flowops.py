"""Flow-domain primitives: backward warping, warp-error maps, occlusion
reasoning, metrics, resizing, and color-wheel visualization.

A flow field stores per-pixel displacement in pixels, channel 0 = u
(horizontal / +x) and channel 1 = v (vertical / +y): content at pixel i in
frame 1 appears at i + F(i) in frame 2, so frame 1 is reconstructed by
sampling frame 2 at i + F(i).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, bilinear_sample
from .errors import DegenerateInputError, ShapeError

# forward-backward consistency thresholds (squared-norm test)
FB_A1 = 0.01
FB_A2 = 0.5


@dataclass
class FlowField:
    """2-channel displacement field in pixels (u = +x, v = +y)."""

    tensor: Tensor

    def __post_init__(self):
        if self.tensor.shape[1] != 2:
            raise ShapeError(f"flow needs 2 channels, got {self.tensor.shape}")
        if not np.all(np.isfinite(self.tensor.data)):
            raise ShapeError("flow contains non-finite values")

    @property
    def shape(self):
        return self.tensor.shape


@dataclass
class OcclusionMask:
    """1-channel {0,1} mask, 1 = occluded. Always detached from the graph."""

    tensor: Tensor

    def __post_init__(self):
        if self.tensor.shape[1] != 1:
            raise ShapeError(f"mask needs 1 channel, got {self.tensor.shape}")
        vals = np.unique(self.tensor.data)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ShapeError("mask values must be 0 or 1")


@dataclass
class WarpErrorMap:
    """Per-pixel residual image I1 - warp(I2), tagged by its domain."""

    tensor: Tensor
    domain_tag: str = "clean"

    def __post_init__(self):
        if self.domain_tag not in ("clean", "degraded", "degradation"):
            raise ShapeError(f"bad domain tag {self.domain_tag!r}")


def _as_flow_tensor(flow) -> Tensor:
    return flow.tensor if isinstance(flow, FlowField) else flow


def base_grid(b: int, h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Absolute pixel coordinates, shape (b, 2, h, w), channel 0 = x."""
    ys, xs = np.mgrid[0:h, 0:w].astype(dtype)
    return np.broadcast_to(np.stack([xs, ys])[None], (b, 2, h, w)).copy()


def warp(image: Tensor, flow) -> Tensor:
    """Backward warp: output(i) = image(i + flow(i)), border-clamped."""
    ft = _as_flow_tensor(flow)
    b, _, h, w = image.shape
    if ft.shape[0] != b or ft.shape[2:] != (h, w):
        raise ShapeError(f"flow {ft.shape} does not match image {image.shape}")
    grid = Tensor(base_grid(b, h, w, image.data.dtype))
    return bilinear_sample(image, ad.add(grid, ft))


def warp_error(i1: Tensor, i2: Tensor, flow, domain_tag: str = "clean") -> WarpErrorMap:
    """w(i) = I1(i) - I2(i + F(i))."""
    if i1.shape != i2.shape:
        raise ShapeError(f"frame shapes differ: {i1.shape} vs {i2.shape}")
    return WarpErrorMap(ad.sub(i1, warp(i2, flow)), domain_tag)


def occlusion_masks(flow_fwd, flow_bwd, a1: float = FB_A1, a2: float = FB_A2):
    """Forward-backward consistency masks (O_f, O_b), detached constants.

    Pixel i is forward-occluded iff
        ||F_f(i) + F_b(i + F_f(i))||^2 > a1 * (||F_f(i)||^2 + ||F_b(i+F_f))||^2) + a2
    and symmetrically for the backward mask.
    """
    ff = _as_flow_tensor(flow_fwd)
    fb = _as_flow_tensor(flow_bwd)
    if ff.shape != fb.shape:
        raise ShapeError(f"flow shapes differ: {ff.shape} vs {fb.shape}")

    def one_side(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            b_at_a = warp(Tensor(b), Tensor(a)).data
        sq_sum = ((a + b_at_a) ** 2).sum(axis=1, keepdims=True)
        bound = a1 * ((a**2).sum(axis=1, keepdims=True) + (b_at_a**2).sum(axis=1, keepdims=True)) + a2
        return (sq_sum > bound).astype(a.dtype)

    o_f = one_side(ff.data, fb.data)
    o_b = one_side(fb.data, ff.data)
    return OcclusionMask(Tensor(o_f)), OcclusionMask(Tensor(o_b))


def _metric_inputs(pred, gt, valid):
    p = _as_flow_tensor(pred).data.astype(np.float64)
    g = _as_flow_tensor(gt).data.astype(np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"flow shapes differ: {p.shape} vs {g.shape}")
    if valid is None:
        v = np.ones((p.shape[0], p.shape[2], p.shape[3]), dtype=bool)
    else:
        v = np.asarray(valid).astype(bool).reshape(p.shape[0], p.shape[2], p.shape[3])
    if not v.any():
        raise DegenerateInputError("empty valid set")
    err = np.sqrt(((p - g) ** 2).sum(axis=1))
    return err, np.sqrt((g**2).sum(axis=1)), v


def epe(pred, gt, valid=None) -> float:
    """Mean endpoint error over valid pixels, in px."""
    err, _, v = _metric_inputs(pred, gt, valid)
    return float(err[v].mean())


def f1_all(pred, gt, valid=None) -> float:
    """Outlier percentage: error > 3 px AND > 5% of ||gt|| (KITTI2015 rule)."""
    err, mag, v = _metric_inputs(pred, gt, valid)
    outlier = (err > 3.0) & (err > 0.05 * mag)
    return float(outlier[v].mean() * 100.0)


def resize_bilinear(image: Tensor, new_hw) -> Tensor:
    """Half-pixel-convention bilinear resize (differentiable in image)."""
    nh, nw = int(new_hw[0]), int(new_hw[1])
    if nh < 1 or nw < 1:
        raise ShapeError(f"bad target size {new_hw}")
    b, _, h, w = image.shape
    sy, sx = h / nh, w / nw
    ys, xs = np.mgrid[0:nh, 0:nw].astype(image.data.dtype)
    coords = np.stack([(xs + 0.5) * sx - 0.5, (ys + 0.5) * sy - 0.5])[None]
    coords = Tensor(np.broadcast_to(coords, (b, 2, nh, nw)).copy())
    return bilinear_sample(image, coords)


def resize_flow(flow, new_hw) -> FlowField:
    """Bilinear-resize a flow field, rescaling u, v by the size ratios."""
    ft = _as_flow_tensor(flow)
    nh, nw = int(new_hw[0]), int(new_hw[1])
    _, _, h, w = ft.shape
    resized = resize_bilinear(ft, (nh, nw))
    scale = Tensor(np.array([nw / w, nh / h], dtype=ft.data.dtype).reshape(1, 2, 1, 1))
    return FlowField(ad.mul(resized, scale))


def _color_wheel() -> np.ndarray:
    """Standard 55-entry optical-flow color wheel (RY/YG/GC/CB/BM/MR)."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col : col + ry, 0] = 255
    wheel[col : col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel / 255.0


def flow_to_color(flow, max_mag: float | None = None) -> np.ndarray:
    """Render one flow field as an (h, w, 3) uint8 color-wheel image.

    Hue encodes direction; saturation is magnitude normalized by the 99th
    percentile (so zero flow renders white).
    """
    ft = _as_flow_tensor(flow)
    u = ft.data[0, 0].astype(np.float64)
    v = ft.data[0, 1].astype(np.float64)
    mag = np.sqrt(u**2 + v**2)
    if max_mag is None:
        max_mag = float(np.percentile(mag, 99.0))
    norm = mag / max_mag if max_mag > 0 else np.zeros_like(mag)
    norm = np.clip(norm, 0.0, 1.0)

    wheel = _color_wheel()
    n = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi  # [-1, 1]
    fk = (angle + 1.0) / 2.0 * (n - 1)
    k0 = np.floor(fk).astype(int) % n
    k1 = (k0 + 1) % n
    f = fk - np.floor(fk)
    img = np.zeros((u.shape[0], u.shape[1], 3))
    for c in range(3):
        col = (1 - f) * wheel[k0, c] + f * wheel[k1, c]
        img[..., c] = 1.0 - norm * (1.0 - col)  # desaturate toward white
    return (img * 255.0).round().astype(np.uint8)
