"""Patch sampling from warp-error maps for the boundary contrastive losses.

Positives come from the clean map ranked by edge saliency; negatives come
from the degraded map ranked by local entropy, excluding positive sites.
Locations address the patch top-left corner and are separated by a Chebyshev
distance of at least `min_separation` (so min_separation = P means
non-overlapping patches). Ties rank by (row, col) ascending.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import AdmissibilityError, ShapeError, UsageError
from .flowops import WarpErrorMap

GAUSS_SIGMA = 1.0
GAUSS_RADIUS = 3
ENTROPY_BINS = 16


@dataclass
class PatchSample:
    location: tuple  # (row, col) of patch top-left
    size: int
    domain_tag: str  # clean | degraded
    role: str  # positive | negative
    scene_id: str
    patch: Tensor

    def __post_init__(self):
        if self.role == "negative" and self.domain_tag != "degraded":
            raise UsageError("negatives are sampled from the degraded domain only")


@dataclass
class SamplerConfig:
    n: int = 6
    patch: int = 12
    strategy_pos: str = "edge_aware"
    strategy_neg: str = "entropy_aware"
    min_separation: int | None = None  # None -> patch size (non-overlapping)
    grad_through_warp_error: bool = False

    def __post_init__(self):
        if self.min_separation is None:
            self.min_separation = self.patch
        if self.n < 1:
            raise UsageError("need at least one sample per role")
        if self.patch < 3:
            raise UsageError("patch size must be >= 3")
        if self.min_separation < 0:
            raise UsageError("min_separation must be >= 0")
        if self.strategy_pos not in ("edge_aware", "random"):
            raise UsageError(f"unknown positive strategy {self.strategy_pos!r}")
        if self.strategy_neg not in ("entropy_aware", "random"):
            raise UsageError(f"unknown negative strategy {self.strategy_neg!r}")


def _channel_mean(m) -> np.ndarray:
    t = m.tensor if isinstance(m, WarpErrorMap) else m
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ShapeError("sampling expects a single-scene map (batch 1)")
        arr = arr.mean(axis=1)[0]
    return arr.astype(np.float64)


def _gauss_kernel() -> np.ndarray:
    k = np.exp(-0.5 * (np.arange(-GAUSS_RADIUS, GAUSS_RADIUS + 1) / GAUSS_SIGMA) ** 2)
    return k / k.sum()


def _smooth_separable(m: np.ndarray) -> np.ndarray:
    k = _gauss_kernel()
    r = GAUSS_RADIUS
    p = np.pad(m, ((0, 0), (r, r)), mode="edge")
    m = sum(k[i] * p[:, i : i + m.shape[1]] for i in range(2 * r + 1))
    p = np.pad(m, ((r, r), (0, 0)), mode="edge")
    return sum(k[i] * p[i : i + m.shape[0], :] for i in range(2 * r + 1))


def edge_saliency(m) -> np.ndarray:
    """Gaussian-smoothed central-difference gradient magnitude in [0, 1]."""
    arr = _channel_mean(m)
    pr = np.pad(arr, 1, mode="edge")
    gx = (pr[1:-1, 2:] - pr[1:-1, :-2]) / 2.0
    gy = (pr[2:, 1:-1] - pr[:-2, 1:-1]) / 2.0
    s = _smooth_separable(np.sqrt(gx**2 + gy**2))
    peak = s.max()
    return s / peak if peak > 0 else np.zeros_like(s)


def histogram_entropy(counts: np.ndarray) -> float:
    """Shannon entropy (bits) of one occupancy histogram."""
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def local_entropy(m, window: int) -> np.ndarray:
    """Per-pixel entropy (bits) of the 16-bin histogram in an odd window.

    Values are binned against the map's global [min, max]; edges are
    replicated so every pixel sees a full window.
    """
    if window < 3 or window % 2 == 0:
        raise UsageError(f"window must be odd and >= 3, got {window}")
    arr = _channel_mean(m)
    h, w = arr.shape
    if window > min(h, w):
        raise UsageError(f"window {window} exceeds map size {arr.shape}")
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        bins = np.minimum((arr - lo) / (hi - lo) * ENTROPY_BINS, ENTROPY_BINS - 1).astype(np.int64)
    else:
        bins = np.zeros_like(arr, dtype=np.int64)

    r = window // 2
    bp = np.pad(bins, r, mode="edge")
    # per-bin box sums via 2-D cumulative sums of the one-hot planes
    counts = np.empty((ENTROPY_BINS, h, w), dtype=np.int64)
    for k in range(ENTROPY_BINS):
        plane = (bp == k).astype(np.int64)
        acc = plane.cumsum(axis=0).cumsum(axis=1)
        acc = np.pad(acc, ((1, 0), (1, 0)))
        counts[k] = acc[window:, window:] - acc[:-window, window:] - acc[window:, :-window] + acc[:-window, :-window]
    total = window * window
    p = counts / total
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(counts > 0, p * np.log2(p, where=counts > 0), 0.0)
    return -plogp.sum(axis=0)


def _admissible_topleft(shape, patch):
    h, w = shape
    return h - patch + 1, w - patch + 1


def _block(blocked: np.ndarray, r: int, c: int, sep: int):
    hh, ww = blocked.shape
    blocked[max(0, r - sep + 1) : min(hh, r + sep), max(0, c - sep + 1) : min(ww, c + sep)] = True


def _greedy_nms(score: np.ndarray, n: int, sep: int, exclude=(), what: str = "patches") -> list:
    """Top-n locations by descending score with Chebyshev-distance NMS.

    `score` is indexed by patch top-left; `exclude` lists already-claimed
    locations that also repel candidates. Ties break on (row, col).
    """
    hh, ww = score.shape
    order = np.lexsort((np.tile(np.arange(ww), hh), np.repeat(np.arange(hh), ww), -score.ravel()))
    blocked = np.zeros((hh, ww), dtype=bool)
    for pr, pc in exclude:
        _block(blocked, pr, pc, sep)
    chosen = []
    for flat in order:
        r, c = divmod(int(flat), ww)
        if blocked[r, c]:
            continue
        chosen.append((r, c))
        if len(chosen) == n:
            return chosen
        _block(blocked, r, c, sep)
    raise AdmissibilityError(f"requested {n} {what}, only {len(chosen)} admissible locations")


def _random_select(shape, n: int, sep: int, rng, exclude=(), what: str = "patches") -> list:
    hh, ww = shape
    blocked = np.zeros((hh, ww), dtype=bool)
    for pr, pc in exclude:
        _block(blocked, pr, pc, sep)
    chosen = []
    for _ in range(n):
        free = np.flatnonzero(~blocked.ravel())
        if free.size == 0:
            raise AdmissibilityError(f"requested {n} {what}, only {len(chosen)} admissible locations")
        r, c = divmod(int(free[rng.integers(free.size)]), ww)
        chosen.append((r, c))
        _block(blocked, r, c, sep)
    return chosen


def _extract(m, loc, size: int, detach: bool):
    from .autodiff import narrow

    t = m.tensor if isinstance(m, WarpErrorMap) else m
    r, c = loc
    if detach or t.node is None:
        return Tensor(t.data[:, :, r : r + size, c : c + size].copy())
    return narrow(narrow(t, 2, r, size), 3, c, size)


def _center_scores(field: np.ndarray, patch: int) -> np.ndarray:
    """Score for each admissible top-left = field value at the patch center."""
    hh, ww = _admissible_topleft(field.shape, patch)
    if hh < 1 or ww < 1:
        raise AdmissibilityError(f"patch {patch} does not fit map {field.shape}")
    off = patch // 2
    return field[off : off + hh, off : off + ww]


def sample_positives(w_clean: WarpErrorMap, w_degraded: WarpErrorMap, cfg: SamplerConfig, scene_id: str, rng=None):
    """N clean/degraded patch pairs at shared locations ranked by clean-map saliency."""
    a = _channel_mean(w_clean)
    b = _channel_mean(w_degraded)
    if a.shape != b.shape:
        raise ShapeError(f"map sizes differ: {a.shape} vs {b.shape}")
    if cfg.strategy_pos == "edge_aware":
        scores = _center_scores(edge_saliency(w_clean), cfg.patch)
        locs = _greedy_nms(scores, cfg.n, cfg.min_separation, what="positives")
    else:
        if rng is None:
            raise UsageError("random positive strategy needs an rng")
        hh, ww = _admissible_topleft(a.shape, cfg.patch)
        locs = _random_select((hh, ww), cfg.n, cfg.min_separation, rng, what="positives")
    detach = not cfg.grad_through_warp_error
    pairs = []
    for loc in locs:
        pc = PatchSample(loc, cfg.patch, "clean", "positive", scene_id, _extract(w_clean, loc, cfg.patch, detach))
        pd = PatchSample(loc, cfg.patch, "degraded", "positive", scene_id, _extract(w_degraded, loc, cfg.patch, detach))
        pairs.append((pc, pd))
    return pairs


def sample_negatives(w_degraded: WarpErrorMap, positives, cfg: SamplerConfig, scene_id: str, rng=None):
    """N degraded patches ranked by local entropy, repelled from positives."""
    arr = _channel_mean(w_degraded)
    exclude = []
    for p in positives:
        first = p[0] if isinstance(p, tuple) else p
        exclude.append(first.location)
    if cfg.strategy_neg == "entropy_aware":
        # entropy of the patch content: largest odd window inside the patch
        window = cfg.patch if cfg.patch % 2 == 1 else cfg.patch - 1
        scores = _center_scores(local_entropy(w_degraded, window), cfg.patch)
        locs = _greedy_nms(scores, cfg.n, cfg.min_separation, exclude=exclude, what="negatives")
    else:
        if rng is None:
            raise UsageError("random negative strategy needs an rng")
        hh, ww = _admissible_topleft(arr.shape, cfg.patch)
        locs = _random_select((hh, ww), cfg.n, cfg.min_separation, rng, exclude=exclude, what="negatives")
    detach = not cfg.grad_through_warp_error
    return [
        PatchSample(loc, cfg.patch, "degraded", "negative", scene_id, _extract(w_degraded, loc, cfg.patch, detach))
        for loc in locs
    ]
