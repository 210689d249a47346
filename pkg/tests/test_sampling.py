"""Saliency/entropy maps vs brute-force recomputation; NMS + exclusion oracles."""

import math

import numpy as np
import pytest

import weatherflow.sampling as sp
from weatherflow.autodiff import Tensor
from weatherflow.errors import AdmissibilityError, UsageError
from weatherflow.flowops import WarpErrorMap


def as_map(arr, tag="clean"):
    return WarpErrorMap(Tensor(arr[None, None].astype(np.float64)), tag)


def brute_saliency(arr):
    """Direct recomputation: central differences + full 2-D Gaussian kernel."""
    h, w = arr.shape
    pr = np.pad(arr, 1, mode="edge")
    mag = np.zeros_like(arr)
    for y in range(h):
        for x in range(w):
            gx = (pr[y + 1, x + 2] - pr[y + 1, x]) / 2.0
            gy = (pr[y + 2, x + 1] - pr[y, x + 1]) / 2.0
            mag[y, x] = math.hypot(gx, gy)
    r = sp.GAUSS_RADIUS
    k1 = np.exp(-0.5 * (np.arange(-r, r + 1) / sp.GAUSS_SIGMA) ** 2)
    k1 /= k1.sum()
    k2 = np.outer(k1, k1)
    mp = np.pad(mag, r, mode="edge")
    sm = np.zeros_like(arr)
    for y in range(h):
        for x in range(w):
            sm[y, x] = (mp[y : y + 2 * r + 1, x : x + 2 * r + 1] * k2).sum()
    peak = sm.max()
    return sm / peak if peak > 0 else np.zeros_like(sm)


def brute_entropy(arr, window):
    """Nested-loop window histogram entropy (bits)."""
    h, w = arr.shape
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        bins = np.minimum((arr - lo) / (hi - lo) * 16, 15).astype(int)
    else:
        bins = np.zeros_like(arr, dtype=int)
    r = window // 2
    bp = np.pad(bins, r, mode="edge")
    out = np.zeros_like(arr, dtype=float)
    for y in range(h):
        for x in range(w):
            counts = np.bincount(bp[y : y + window, x : x + window].ravel(), minlength=16)
            p = counts[counts > 0] / counts.sum()
            out[y, x] = float(-(p * np.log2(p)).sum())
    return out


def oracle_nms(score, n, sep, exclude=()):
    """Exhaustive ranking + greedy selection, ties by (row, col)."""
    hh, ww = score.shape
    ranked = sorted(((float(score[r, c]), r, c) for r in range(hh) for c in range(ww)), key=lambda t: (-t[0], t[1], t[2]))
    chosen = []
    for _, r, c in ranked:
        if all(max(abs(r - pr), abs(c - pc)) >= sep for pr, pc in list(chosen) + list(exclude)):
            chosen.append((r, c))
            if len(chosen) == n:
                break
    return chosen


class TestEdgeSaliency:
    def test_constant_map_zero(self):
        out = sp.edge_saliency(as_map(np.full((10, 10), 0.4)))
        assert np.array_equal(out, np.zeros((10, 10)))

    def test_step_edge_peaks_on_step(self):
        arr = np.zeros((12, 12))
        arr[:, 6:] = 1.0
        out = sp.edge_saliency(as_map(arr))
        peak_cols = set(np.argmax(out, axis=1))
        assert peak_cols <= {5, 6}

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            arr = rng.random((14, 11))
            got = sp.edge_saliency(as_map(arr))
            want = brute_saliency(arr)
            assert np.max(np.abs(got - want)) < 1e-12
            assert np.argmax(got) == np.argmax(want)

    def test_range(self):
        rng = np.random.default_rng(1)
        out = sp.edge_saliency(as_map(rng.random((16, 16))))
        assert out.min() >= 0.0 and out.max() == 1.0


class TestLocalEntropy:
    def test_constant_window_zero(self):
        assert np.array_equal(sp.local_entropy(as_map(np.full((8, 8), 2.0)), 3), np.zeros((8, 8)))

    def test_sixteen_equal_bins_four_bits(self):
        counts = np.full(16, 3)
        assert sp.histogram_entropy(counts) == 4.0

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(2)
        for _ in range(3):
            arr = rng.random((12, 12))
            got = sp.local_entropy(as_map(arr), 5)
            want = brute_entropy(arr, 5)
            assert np.max(np.abs(got - want)) < 1e-12

    def test_window_validation(self):
        m = as_map(np.zeros((8, 8)))
        with pytest.raises(UsageError):
            sp.local_entropy(m, 4)
        with pytest.raises(UsageError):
            sp.local_entropy(m, 9)


class TestSamplePositives:
    def test_isolated_blobs_found(self):
        arr = np.zeros((32, 32))
        blobs = [(6, 6), (6, 24), (24, 6), (24, 24)]
        for r, c in blobs:
            arr[r, c] = 1.0  # sharp spikes -> saliency maxima at the spikes
        cfg = sp.SamplerConfig(n=4, patch=5, min_separation=5)
        pairs = sp.sample_positives(as_map(arr), as_map(arr, "degraded"), cfg, "s0")
        centers = sorted((r + 2, c + 2) for (r, c) in (p[0].location for p in pairs))
        assert centers == sorted(blobs)

    def test_matches_oracle_random_maps(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            arr = rng.random((24, 24))
            cfg = sp.SamplerConfig(n=5, patch=5, min_separation=4)
            pairs = sp.sample_positives(as_map(arr), as_map(arr, "degraded"), cfg, "s0")
            got = [p[0].location for p in pairs]
            scores = sp._center_scores(sp.edge_saliency(as_map(arr)), cfg.patch)
            assert got == oracle_nms(scores, 5, 4)

    def test_random_strategy_reproducible(self):
        arr = np.zeros((24, 24))
        cfg = sp.SamplerConfig(n=4, patch=5, min_separation=4, strategy_pos="random")
        a = sp.sample_positives(as_map(arr), as_map(arr, "degraded"), cfg, "s0", rng=np.random.default_rng(7))
        b = sp.sample_positives(as_map(arr), as_map(arr, "degraded"), cfg, "s0", rng=np.random.default_rng(7))
        assert [p[0].location for p in a] == [p[0].location for p in b]

    def test_pair_locations_match_and_tags(self):
        rng = np.random.default_rng(4)
        cfg = sp.SamplerConfig(n=3, patch=5, min_separation=5)
        pairs = sp.sample_positives(as_map(rng.random((24, 24))), as_map(rng.random((24, 24)), "degraded"), cfg, "sX")
        for pc, pd in pairs:
            assert pc.location == pd.location
            assert (pc.domain_tag, pd.domain_tag) == ("clean", "degraded")
            assert pc.patch.shape == (1, 1, 5, 5)

    def test_min_separation_postcondition(self):
        rng = np.random.default_rng(5)
        cfg = sp.SamplerConfig(n=6, patch=3, min_separation=4)
        pairs = sp.sample_positives(as_map(rng.random((30, 30))), as_map(rng.random((30, 30)), "degraded"), cfg, "s0")
        locs = [p[0].location for p in pairs]
        for i in range(len(locs)):
            for j in range(i + 1, len(locs)):
                assert max(abs(locs[i][0] - locs[j][0]), abs(locs[i][1] - locs[j][1])) >= 4

    def test_insufficient_locations_error_reports_count(self):
        arr = np.zeros((12, 12))
        cfg = sp.SamplerConfig(n=9, patch=5, min_separation=6)
        with pytest.raises(AdmissibilityError, match=r"only \d+ admissible"):
            sp.sample_positives(as_map(arr), as_map(arr, "degraded"), cfg, "s0")


class TestSampleNegatives:
    def _positives(self, arr, cfg):
        return sp.sample_positives(as_map(arr), as_map(arr, "degraded"), cfg, "s0")

    def test_noise_stripe_attracts_negatives(self):
        rng = np.random.default_rng(6)
        clean = np.zeros((32, 32))
        clean[:, 4] = 1.0  # clean edge for positives on the left
        degraded = clean + 0.0
        degraded[:, 20:30] += rng.random((32, 10))  # high-entropy stripe
        cfg = sp.SamplerConfig(n=2, patch=5, min_separation=3)
        pos = self._positives(clean, cfg)
        negs = sp.sample_negatives(as_map(degraded, "degraded"), pos, cfg, "s0")
        for neg in negs:
            r, c = neg.location
            assert 15 <= c <= 27  # patch overlaps the stripe

    def test_matches_oracle_with_exclusion(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            clean = rng.random((24, 24))
            degraded = rng.random((24, 24))
            cfg = sp.SamplerConfig(n=4, patch=5, min_separation=3)
            pos = sp.sample_positives(as_map(clean), as_map(degraded, "degraded"), cfg, "s0")
            negs = sp.sample_negatives(as_map(degraded, "degraded"), pos, cfg, "s0")
            got = [n.location for n in negs]
            scores = sp._center_scores(sp.local_entropy(as_map(degraded), 5), cfg.patch)
            want = oracle_nms(scores, 4, 3, exclude=[p[0].location for p in pos])
            assert got == want

    def test_exclusion_postcondition(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            clean = rng.random((28, 28))
            degraded = rng.random((28, 28))
            cfg = sp.SamplerConfig(n=3, patch=5, min_separation=4)
            pos = sp.sample_positives(as_map(clean), as_map(degraded, "degraded"), cfg, "s0")
            negs = sp.sample_negatives(as_map(degraded, "degraded"), pos, cfg, "s0")
            for n in negs:
                for p in pos:
                    d = max(abs(n.location[0] - p[0].location[0]), abs(n.location[1] - p[0].location[1]))
                    assert d >= 4

    def test_random_strategy_reproducible(self):
        rng = np.random.default_rng(9)
        degraded = rng.random((24, 24))
        cfg = sp.SamplerConfig(n=3, patch=5, min_separation=3, strategy_neg="random")
        a = sp.sample_negatives(as_map(degraded, "degraded"), [], cfg, "s0", rng=np.random.default_rng(1))
        b = sp.sample_negatives(as_map(degraded, "degraded"), [], cfg, "s0", rng=np.random.default_rng(1))
        assert [n.location for n in a] == [n.location for n in b]

    def test_negative_role_requires_degraded(self):
        with pytest.raises(UsageError):
            sp.PatchSample((0, 0), 5, "clean", "negative", "s", Tensor(np.zeros((1, 1, 5, 5))))


class TestDeterminism:
    def test_fixed_inputs_identical_samples(self):
        rng = np.random.default_rng(10)
        clean = rng.random((32, 32))
        degraded = rng.random((32, 32))
        cfg = sp.SamplerConfig(n=4, patch=7, min_separation=5)
        runs = []
        for _ in range(2):
            pos = sp.sample_positives(as_map(clean), as_map(degraded, "degraded"), cfg, "s0")
            neg = sp.sample_negatives(as_map(degraded, "degraded"), pos, cfg, "s0")
            runs.append(([p[0].location for p in pos], [n.location for n in neg]))
        assert runs[0] == runs[1]
