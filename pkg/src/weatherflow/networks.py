"""Parametric components at toy capacity.

Flow estimation follows the classic coarse-to-fine correlation recipe: two
strided conv pyramids (one per domain, architecturally identical, weights
unshared unless configured otherwise), a cost-volume layer per level, and a
single decoder weight set shared across domains that refines an upsampled
flow level by level. Image translation is a pair of small residual
generators with patch discriminators; the patch embedder maps warp-error
crops to unit-norm vectors.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, bilinear_sample, concat, conv2d, cost_volume
from .autodiff.spatial import box_filter
from .errors import FormatError, ShapeError, UsageError
from .flowops import FlowField, resize_bilinear
from .rng import derive_rng

CKPT_MAGIC = b"WFCKPT01"

ENC_CHANNELS = (16, 32, 32)
MAX_DISP = 4
DEC_HIDDEN = 24
# soft per-level flow bound in level-pixel units: the correlation only sees
# +-MAX_DISP per refinement, so values far outside carry no evidence and,
# unbounded, random-walk through the border clamp's zero-gradient region
FLOW_BOUND = MAX_DISP + 2.0
EMBED_DIM = 32
GEN_CHANNELS = 16
DISC_CHANNELS = (16, 32)
LEAKY_SLOPE = 0.1


class Conv:
    """Conv layer with Kaiming fan-in init, zero bias, optional activation.

    init_scale < 1 shrinks the init; the flow heads use it so that freshly
    initialized estimators predict near-zero flow, keeping the
    forward-backward occlusion check meaningful from the first step.
    """

    def __init__(self, name, in_c, out_c, k=3, stride=1, padding=1, act="lrelu", rng=None, dtype=np.float64, init_scale=1.0):
        fan_in = in_c * k * k
        w = (init_scale * rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_c, in_c, k, k))).astype(dtype)
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros((1, out_c, 1, 1), dtype=dtype), requires_grad=True, name=f"{name}.b")
        self.stride = stride
        self.padding = padding
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.w, self.b, self.stride, self.padding)
        if self.act == "lrelu":
            return ad.leaky_relu(y, LEAKY_SLOPE)
        if self.act == "sigmoid":
            return ad.sigmoid(y)
        return y

    def parameters(self):
        return [self.w, self.b]


def _params_of(layers):
    out = []
    seen = set()
    for layer in layers:
        for p in layer.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out


class Encoder:
    """Strided conv pyramid; level l halves resolution l+1 times.

    One 3x3 conv per level plus a refining conv on the first level, where
    the correlation needs the most texture discrimination.
    """

    def __init__(self, name, in_channels, rng, dtype=np.float64):
        self.levels = []
        c = in_channels
        for i, out_c in enumerate(ENC_CHANNELS):
            convs = [Conv(f"{name}.l{i}.down", c, out_c, stride=2, rng=rng, dtype=dtype)]
            if i == 0:
                convs.append(Conv(f"{name}.l{i}.keep", out_c, out_c, stride=1, rng=rng, dtype=dtype))
            self.levels.append(convs)
            c = out_c

    def pyramid(self, x: Tensor):
        """Per-level features, L2-normalized per position (scaled to norm
        sqrt(C)) so the correlation becomes a cosine: the true displacement
        scores exactly 1 even under untrained features."""
        feats = []
        for convs in self.levels:
            for conv in convs:
                x = conv(x)
            c = x.shape[1]
            feats.append(ad.mul(ad.l2_normalize(x, axis=1), ad.scalar(float(np.sqrt(c)), x.data.dtype)))
        return feats

    def parameters(self):
        return _params_of([conv for convs in self.levels for conv in convs])


class FlowDecoder:
    """Coarse-to-fine flow regressor, one weight set for both domains.

    Each level reduces the wide correlation+feature+flow stack with a 1x1
    conv, mixes spatially with a 3x3, and regresses a residual flow.
    """

    def __init__(self, name, rng, max_disp=MAX_DISP, dtype=np.float64):
        self.max_disp = max_disp
        cv_ch = (2 * max_disp + 1) ** 2
        self.heads = []
        for i, enc_c in enumerate(ENC_CHANNELS):
            in_c = cv_ch + enc_c + 2
            a = Conv(f"{name}.l{i}.a", in_c, DEC_HIDDEN, k=1, padding=0, rng=rng, dtype=dtype)
            m = Conv(f"{name}.l{i}.m", DEC_HIDDEN, DEC_HIDDEN, rng=rng, dtype=dtype)
            f = Conv(f"{name}.l{i}.flow", DEC_HIDDEN, 2, act=None, rng=rng, dtype=dtype, init_scale=0.01)
            self.heads.append((a, m, f))
        side = 2 * max_disp + 1
        dgrid = np.mgrid[0:side, 0:side].astype(dtype) - max_disp
        self._dx = Tensor(dgrid[1].reshape(1, side * side, 1, 1))
        self._dy = Tensor(dgrid[0].reshape(1, side * side, 1, 1))

    def _soft_argmax(self, cv: Tensor, kappa: float = 20.0) -> Tensor:
        """Displacement expectation under softmax(kappa * correlation).

        With cosine correlations the true residual displacement scores
        exactly 1 (content identity), so this readout points at the right
        displacement even before any weight has trained.
        """
        z = ad.mul(cv, ad.scalar(kappa, cv.data.dtype))
        m = ad.reduce_max(z, axes=(1,)).detach()
        e = ad.exp(ad.sub(z, m))
        p = ad.div(e, ad.reduce_sum(e, axes=(1,)))
        u = ad.reduce_sum(ad.mul(p, ad.as_tensor(self._dx.data.astype(cv.data.dtype))), axes=(1,))
        v = ad.reduce_sum(ad.mul(p, ad.as_tensor(self._dy.data.astype(cv.data.dtype))), axes=(1,))
        return ad.concat([u, v], axis=1)

    def decode(self, pyr1, pyr2):
        """Return (flow at input resolution, cost volumes coarse->fine).

        Flow values at each level are in that level's pixel units; upsampling
        doubles both the grid and the values.
        """
        if len(pyr1) != len(self.heads) or len(pyr2) != len(self.heads):
            raise ShapeError(f"expected {len(self.heads)} pyramid levels")
        flow = None
        cvs = []
        for lvl in reversed(range(len(self.heads))):
            f1, f2 = pyr1[lvl], pyr2[lvl]
            b, _, h, w = f1.shape
            if flow is None:
                up = Tensor(np.zeros((b, 2, h, w), dtype=f1.data.dtype))
                f2w = f2
            else:
                up = resize_bilinear(flow, (h, w)) * 2.0
                f2w = _warp_feat(f2, up)
            # spatial cost-volume filtering: aggregate matching evidence so
            # flat-texture pixels inherit their neighborhood's displacement
            cv = box_filter(cost_volume(f1, f2w, self.max_disp), radius=2 if h >= 16 else 1)
            cvs.append(cv)
            a, m, fhead = self.heads[lvl]
            residual = ad.add(fhead(m(a(concat([cv, f1, up], axis=1)))), self._soft_argmax(cv))
            flow = _soft_bound(ad.add(up, residual), FLOW_BOUND)
        b, _, h, w = flow.shape
        full = resize_bilinear(flow, (2 * h, 2 * w)) * 2.0
        return full, cvs

    def parameters(self):
        return _params_of([layer for head in self.heads for layer in head])


def _warp_feat(feat: Tensor, flow: Tensor) -> Tensor:
    from .flowops import base_grid

    b, _, h, w = feat.shape
    grid = Tensor(base_grid(b, h, w, feat.data.dtype))
    return bilinear_sample(feat, ad.add(grid, flow))


def _soft_bound(flow: Tensor, bound: float) -> Tensor:
    """bound * tanh(flow / bound); tanh composed as 2*sigmoid(2z) - 1."""
    z = ad.mul(flow, ad.scalar(2.0 / bound, flow.data.dtype))
    tanh = ad.sigmoid(z) * 2.0 - 1.0
    return ad.mul(tanh, ad.scalar(bound, flow.data.dtype))


class FlowEstimator:
    """Domain-specific encoders feeding one shared decoder."""

    def __init__(self, in_channels=1, shared_encoders=False, seed=0, dtype=np.float64):
        self.shared_encoders = shared_encoders
        self.enc_x = Encoder("flow.enc_x", in_channels, derive_rng(seed, "flow", "enc_x"), dtype)
        if shared_encoders:
            self.enc_y = self.enc_x
        else:
            self.enc_y = Encoder("flow.enc_y", in_channels, derive_rng(seed, "flow", "enc_y"), dtype)
        self.decoder = FlowDecoder("flow.dec", derive_rng(seed, "flow", "dec"), dtype=dtype)
        self.levels = len(ENC_CHANNELS)

    def encoder_for(self, domain: str) -> Encoder:
        if domain == "clean":
            return self.enc_x
        if domain == "degraded":
            return self.enc_y
        raise UsageError(f"unknown domain {domain!r}")

    def estimate(self, i1: Tensor, i2: Tensor, domain: str):
        """Full-resolution flow plus per-level cost volumes (coarse->fine)."""
        if i1.shape != i2.shape:
            raise ShapeError(f"frame shapes differ: {i1.shape} vs {i2.shape}")
        div = 2**self.levels
        if i1.shape[2] % div or i1.shape[3] % div:
            raise ShapeError(f"spatial dims {i1.shape[2:]} must divide {div}")
        enc = self.encoder_for(domain)
        full, cvs = self.decoder.decode(enc.pyramid(i1), enc.pyramid(i2))
        return FlowField(full), cvs

    def parameters(self):
        return _params_of([self.enc_x, self.enc_y, self.decoder])

    def encoder_params(self, domain: str):
        return self.encoder_for(domain).parameters()


def estimate_flow(estimator: FlowEstimator, i1: Tensor, i2: Tensor, domain: str):
    return estimator.estimate(i1, i2, domain)


class ResBlock:
    def __init__(self, name, c, rng, dtype):
        self.c1 = Conv(f"{name}.c1", c, c, rng=rng, dtype=dtype)
        self.c2 = Conv(f"{name}.c2", c, c, act=None, rng=rng, dtype=dtype)

    def __call__(self, x):
        return ad.leaky_relu(ad.add(x, self.c2(self.c1(x))), LEAKY_SLOPE)

    def parameters(self):
        return _params_of([self.c1, self.c2])


class Generator:
    """Small residual image-to-image generator, sigmoid-bounded output."""

    def __init__(self, name, channels, rng, dtype):
        c = GEN_CHANNELS
        self.layers = [
            Conv(f"{name}.in", channels, c, rng=rng, dtype=dtype),
            ResBlock(f"{name}.r0", c, rng, dtype),
            Conv(f"{name}.out", c, channels, act="sigmoid", rng=rng, dtype=dtype),
        ]

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self):
        return _params_of(self.layers)


class Discriminator:
    """Patch discriminator: strided convs to a grid of real/fake logits."""

    def __init__(self, name, channels, rng, dtype):
        c1, c2 = DISC_CHANNELS
        self.layers = [
            Conv(f"{name}.d0", channels, c1, stride=2, rng=rng, dtype=dtype),
            Conv(f"{name}.d1", c1, c2, stride=2, rng=rng, dtype=dtype),
            Conv(f"{name}.logit", c2, 1, act=None, rng=rng, dtype=dtype),
        ]

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self):
        return _params_of(self.layers)


class Translator:
    """Cycle pair (G: clean->degraded, R: degraded->clean) + discriminators.

    backbone="one_way" keeps only the degraded->clean direction and its
    discriminator (the conventional single-GAN baseline).
    """

    def __init__(self, channels=1, seed=0, dtype=np.float64, backbone="cycle"):
        if backbone not in ("cycle", "one_way"):
            raise UsageError(f"unknown translation backbone {backbone!r}")
        self.backbone = backbone
        self.gen_d2c = Generator("tran.r", channels, derive_rng(seed, "tran", "r"), dtype)  # R
        self.disc_clean = Discriminator("tran.dx", channels, derive_rng(seed, "tran", "dx"), dtype)  # D_x
        if backbone == "cycle":
            self.gen_c2d = Generator("tran.g", channels, derive_rng(seed, "tran", "g"), dtype)  # G
            self.disc_degraded = Discriminator("tran.dy", channels, derive_rng(seed, "tran", "dy"), dtype)  # D_y
        else:
            self.gen_c2d = None
            self.disc_degraded = None

    def translate(self, image: Tensor, direction: str) -> Tensor:
        if direction == "to_clean":
            return self.gen_d2c(image)
        if direction == "to_degraded":
            if self.gen_c2d is None:
                raise UsageError("one_way backbone has no clean->degraded generator")
            return self.gen_c2d(image)
        raise UsageError(f"unknown direction {direction!r}")

    def generator_params(self):
        nets = [self.gen_d2c] + ([self.gen_c2d] if self.gen_c2d else [])
        return _params_of(nets)

    def discriminator_params(self):
        nets = [self.disc_clean] + ([self.disc_degraded] if self.disc_degraded else [])
        return _params_of(nets)

    def parameters(self):
        return self.generator_params() + self.discriminator_params()


def translate(translator: Translator, image: Tensor, direction: str) -> Tensor:
    return translator.translate(image, direction)


class PatchEmbedder:
    """Conv encoder + global average pool -> unit-norm vectors (dim 32)."""

    def __init__(self, channels=1, patch=16, seed=0, dtype=np.float64):
        rng = derive_rng(seed, "embed")
        self.patch = patch
        self.layers = [
            Conv("embed.c0", channels, 16, rng=rng, dtype=dtype),
            Conv("embed.c1", 16, EMBED_DIM, stride=2, rng=rng, dtype=dtype),
        ]
        self.proj = Conv("embed.proj", EMBED_DIM, EMBED_DIM, k=1, padding=0, act=None, rng=rng, dtype=dtype)

    def embed(self, patches: Tensor) -> Tensor:
        if patches.shape[2] != self.patch or patches.shape[3] != self.patch:
            raise ShapeError(f"embedder configured for {self.patch}x{self.patch} patches, got {patches.shape}")
        x = patches
        for layer in self.layers:
            x = layer(x)
        pooled = ad.reduce_mean(x, axes=(2, 3))
        return ad.l2_normalize(self.proj(pooled), axis=1)

    def parameters(self):
        return _params_of(self.layers + [self.proj])


def embed_patch(embedder: PatchEmbedder, patch: Tensor) -> Tensor:
    return embedder.embed(patch)


@dataclass
class ModelSuite:
    translator: Translator
    flow: FlowEstimator
    embedder: PatchEmbedder

    def named_parameters(self) -> dict:
        out = {}
        for p in self.translator.parameters() + self.flow.parameters() + self.embedder.parameters():
            if p.name in out and out[p.name] is not p:
                raise UsageError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out


def build_models(seed=0, channels=1, patch=16, shared_encoders=False, backbone="cycle", dtype=np.float64) -> ModelSuite:
    return ModelSuite(
        translator=Translator(channels, seed=seed, dtype=dtype, backbone=backbone),
        flow=FlowEstimator(channels, shared_encoders=shared_encoders, seed=seed, dtype=dtype),
        embedder=PatchEmbedder(channels, patch=patch, seed=seed, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + flat little-endian blob
# ---------------------------------------------------------------------------


def save_checkpoint(path, named_params: dict, meta: dict):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(named_params):
        arr = named_params[name].data if isinstance(named_params[name], Tensor) else np.asarray(named_params[name])
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr.astype(dtype)).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": dtype})
        blobs.append(raw)
        offset += len(raw)
    manifest = dict(meta)
    manifest["entries"] = entries
    mbytes = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path):
    """Return (meta dict, {name: ndarray})."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:8]!r}")
    (mlen,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16 : 16 + mlen].decode("utf-8"))
    body = blob[16 + mlen :]
    arrays = {}
    for e in manifest.pop("entries"):
        n = int(np.prod(e["shape"])) * (8 if e["dtype"] == "<f8" else 4)
        raw = body[e["offset"] : e["offset"] + n]
        if len(raw) != n:
            raise FormatError(f"{path}: truncated blob for {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return manifest, arrays


def load_into(models: ModelSuite, path):
    """Load a checkpoint into constructed models, verifying names and shapes."""
    meta, arrays = load_checkpoint(path)
    params = models.named_parameters()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise FormatError(f"{path}: parameter set mismatch (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, p in params.items():
        if tuple(arrays[name].shape) != p.shape:
            raise FormatError(f"{path}: shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p.data = arrays[name].astype(p.data.dtype)
    return meta
