"""The seven loss terms and their weighted total.

Contrastive terms use the -log softmax-fraction (InfoNCE) form; the literal
fraction the objective's summary notation suggests would repel positives
when minimized, so the -log form is the default and `literal=True` keeps
the raw fraction for comparison. All L1 terms are mean-reduced so the
weights are resolution-independent.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import EPS, Tensor
from .errors import DegenerateInputError, ShapeError, TrainingAbort, UsageError
from .flowops import occlusion_masks, warp

TERM_ORDER = ("tran", "adv_gen", "adv_disc", "feat", "consis", "photo", "intra", "inter")
WEIGHTED_TERMS = ("tran", "adv_gen", "feat", "consis", "photo", "intra", "inter")


@dataclass
class LossWeights:
    alpha: float = 1.0  # image translation cycle
    beta: float = 1.0  # adversarial image prior
    gamma1: float = 1.0  # cost-volume feature alignment
    gamma2: float = 1.0  # flow consistency
    delta: float = 1.0  # photometric prior
    rho1: float = 0.1  # intra-scene contrastive
    rho2: float = 0.1  # inter-scene contrastive
    tau: float = 0.07  # contrastive temperature
    p: float = 0.4  # sparse Lp exponent
    eps_psi: float = 0.01  # Lp smoothing constant

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma1", "gamma2", "delta", "rho1", "rho2"):
            if getattr(self, name) < 0:
                raise UsageError(f"loss weight {name} must be >= 0")
        if self.tau <= 0:
            raise UsageError("tau must be > 0")

    def of(self, term: str) -> float:
        return {
            "tran": self.alpha,
            "adv_gen": self.beta,
            "feat": self.gamma1,
            "consis": self.gamma2,
            "photo": self.delta,
            "intra": self.rho1,
            "inter": self.rho2,
        }[term]


@dataclass
class LossReport:
    """Per-term scalars plus the weighted total for one step."""

    step: int
    terms: dict
    weights: LossWeights
    total: float = field(init=False)

    def __post_init__(self):
        self.total = float(sum(self.weights.of(t) * self.terms.get(t, 0.0) for t in WEIGHTED_TERMS))

    def line(self) -> str:
        parts = [f"step={self.step}", f"total={self.total:.9g}"]
        parts += [f"{t}={self.terms.get(t, 0.0):.9g}" for t in TERM_ORDER]
        return " ".join(parts)


def mean_abs(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    return ad.reduce_mean(ad.absolute(ad.sub(a, b)))


def _log_eps(t: Tensor) -> Tensor:
    return ad.log(t + EPS)


def image_translation_loss(x: Tensor, y: Tensor, translator, fakes=None) -> Tensor:
    """Mean L1 cycle loss over both directions: R(G(X))~X and G(R(Y))~Y.

    `fakes` optionally carries precomputed (G(X), R(Y)) so a training step
    can share translator passes with the adversarial term.
    """
    if translator.backbone == "one_way":
        return ad.scalar(0.0, x.data.dtype)
    gx, ry = fakes if fakes is not None else (translator.translate(x, "to_degraded"), translator.translate(y, "to_clean"))
    cycle_x = translator.translate(gx, "to_clean")
    cycle_y = translator.translate(ry, "to_degraded")
    return ad.add(mean_abs(cycle_x, x), mean_abs(cycle_y, y))


def adversarial_loss(x: Tensor, y: Tensor, translator, fakes=None):
    """(generator_loss, discriminator_loss), non-saturating log form.

    Discriminators score sigmoid probabilities; logs are floored by EPS.
    Fakes are detached inside the discriminator loss so it trains only the
    discriminators; the generator loss leaves them attached.
    """
    fake_clean = fakes[1] if fakes is not None else translator.translate(y, "to_clean")  # R(Y)
    disc = ad.mul(
        ad.add(
            ad.reduce_mean(_log_eps(ad.sigmoid(translator.disc_clean(x)))),
            ad.reduce_mean(_log_eps(1.0 - ad.sigmoid(translator.disc_clean(fake_clean.detach())))),
        ),
        ad.scalar(-1.0, x.data.dtype),
    )
    gen = ad.mul(ad.reduce_mean(_log_eps(ad.sigmoid(translator.disc_clean(fake_clean)))), ad.scalar(-1.0, x.data.dtype))
    if translator.backbone == "cycle":
        fake_degraded = fakes[0] if fakes is not None else translator.translate(x, "to_degraded")  # G(X)
        disc_y = ad.add(
            ad.reduce_mean(_log_eps(ad.sigmoid(translator.disc_degraded(y)))),
            ad.reduce_mean(_log_eps(1.0 - ad.sigmoid(translator.disc_degraded(fake_degraded.detach())))),
        )
        disc = ad.sub(disc, disc_y)
        gen = ad.sub(gen, ad.reduce_mean(_log_eps(ad.sigmoid(translator.disc_degraded(fake_degraded)))))
    return gen, disc


def translation_terms(x: Tensor, y: Tensor, translator):
    """(cycle, gen, disc) with shared, batched translator/discriminator passes.

    Semantically identical to image_translation_loss + adversarial_loss but
    runs each generator chain once and scores real/fake/fake-detached
    through each discriminator in a single batch.
    """
    bx, by = x.shape[0], y.shape[0]
    neg1 = ad.scalar(-1.0, x.data.dtype)
    if translator.backbone == "one_way":
        ry = translator.translate(y, "to_clean")
        dx_out = translator.disc_clean(ad.concat([x, ry, ry.detach()], axis=0))
        p_real = ad.sigmoid(ad.narrow(dx_out, 0, 0, bx))
        p_fake = ad.sigmoid(ad.narrow(dx_out, 0, bx, by))
        p_fake_det = ad.sigmoid(ad.narrow(dx_out, 0, bx + by, by))
        disc = ad.mul(ad.add(ad.reduce_mean(_log_eps(p_real)), ad.reduce_mean(_log_eps(1.0 - p_fake_det))), neg1)
        gen = ad.mul(ad.reduce_mean(_log_eps(p_fake)), neg1)
        return ad.scalar(0.0, x.data.dtype), gen, disc

    gx = translator.translate(x, "to_degraded")
    r_out = translator.translate(ad.concat([y, gx], axis=0), "to_clean")
    ry = ad.narrow(r_out, 0, 0, by)
    cyc_x = ad.narrow(r_out, 0, by, bx)
    cyc_y = translator.translate(ry, "to_degraded")
    tran = ad.add(mean_abs(cyc_x, x), mean_abs(cyc_y, y))

    dx_out = translator.disc_clean(ad.concat([x, ry, ry.detach()], axis=0))
    dy_out = translator.disc_degraded(ad.concat([y, gx, gx.detach()], axis=0))
    px_real = ad.sigmoid(ad.narrow(dx_out, 0, 0, bx))
    px_fake = ad.sigmoid(ad.narrow(dx_out, 0, bx, by))
    px_fake_det = ad.sigmoid(ad.narrow(dx_out, 0, bx + by, by))
    py_real = ad.sigmoid(ad.narrow(dy_out, 0, 0, by))
    py_fake = ad.sigmoid(ad.narrow(dy_out, 0, by, bx))
    py_fake_det = ad.sigmoid(ad.narrow(dy_out, 0, by + bx, bx))
    disc = ad.mul(
        ad.add(
            ad.add(ad.reduce_mean(_log_eps(px_real)), ad.reduce_mean(_log_eps(1.0 - px_fake_det))),
            ad.add(ad.reduce_mean(_log_eps(py_real)), ad.reduce_mean(_log_eps(1.0 - py_fake_det))),
        ),
        neg1,
    )
    gen = ad.mul(ad.add(ad.reduce_mean(_log_eps(px_fake)), ad.reduce_mean(_log_eps(py_fake))), neg1)
    return tran, gen, disc


def feature_align_loss(cv_gx, cv_x, cv_y, cv_ry) -> Tensor:
    """Mean L1 between paired cost volumes, summed over pyramid levels.

    Pairs per the objective: C(E_y(G(X))) ~ C(E_x(X)) and
    C(E_y(Y)) ~ C(E_x(R(Y))).
    """
    if not (len(cv_gx) == len(cv_x) == len(cv_y) == len(cv_ry)):
        raise ShapeError(f"pyramid level counts differ: {len(cv_gx)}/{len(cv_x)}/{len(cv_y)}/{len(cv_ry)}")
    total = None
    for a, b in list(zip(cv_gx, cv_x)) + list(zip(cv_y, cv_ry)):
        term = mean_abs(a, b)
        total = term if total is None else ad.add(total, term)
    return total


def flow_consistency_loss(*pairs) -> Tensor:
    """Sum over pairs of the mean L1 between two full-resolution flows."""
    if not pairs:
        raise UsageError("need at least one flow pair")
    total = None
    for a, b in pairs:
        ta = a.tensor if hasattr(a, "tensor") else a
        tb = b.tensor if hasattr(b, "tensor") else b
        term = mean_abs(ta, tb)
        total = term if total is None else ad.add(total, term)
    return total


def psi(t: Tensor, p: float, eps_psi: float) -> Tensor:
    """Sparse penalty (|x| + eps)^p."""
    return ad.pow_scalar(ad.absolute(t) + eps_psi, p)


def photometric_loss(x1: Tensor, x2: Tensor, flow_fwd, flow_bwd, weights: LossWeights | None = None, use_occlusion: bool = True) -> Tensor:
    """Occlusion-masked sparse-Lp brightness error, both directions.

    Masks come from forward-backward consistency and are constants in the
    graph. A direction whose mask occludes everything is degenerate.
    use_occlusion=False treats every pixel as visible (mask warm-up).
    """
    w = weights or LossWeights()
    if use_occlusion:
        o_f, o_b = occlusion_masks(flow_fwd, flow_bwd)
    else:
        ft = flow_fwd.tensor if hasattr(flow_fwd, "tensor") else flow_fwd
        zero = np.zeros((ft.shape[0], 1, ft.shape[2], ft.shape[3]), dtype=ft.data.dtype)
        from .flowops import OcclusionMask

        o_f = o_b = OcclusionMask(Tensor(zero))
    c = x1.shape[1]
    out = None
    for src, dst, flow_t, occ in ((x1, x2, flow_fwd, o_f), (x2, x1, flow_bwd, o_b)):
        keep = 1.0 - occ.tensor.data
        denom = float(keep.sum()) * c
        if denom == 0.0:
            raise DegenerateInputError("all pixels occluded; photometric loss undefined")
        err = ad.sub(src, warp(dst, flow_t))
        masked = ad.mul(psi(err, w.p, w.eps_psi), Tensor(keep.astype(src.data.dtype)))
        term = ad.mul(ad.reduce_sum(masked), ad.scalar(1.0 / denom, src.data.dtype))
        out = term if out is None else ad.add(out, term)
    return out


def _check_unit(e: Tensor, what: str):
    norms = (e.data**2).sum(axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-5):
        raise UsageError(f"{what} embeddings must be unit-norm (got squared norms {norms.ravel()[:4]})")


def _dots(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise dot products: (N,d,1,1) x (M,d,1,1) -> (N,1,1,M)."""
    m = b.shape[0]
    bt = ad.permute(b, (2, 1, 3, 0))  # (1, d, 1, M)
    return ad.reduce_sum(ad.mul(a, bt), axes=(1,))


def _logsumexp(logits: Tensor) -> Tensor:
    """Stable log-sum-exp over the last axis, keepdims."""
    m = ad.reduce_max(logits, axes=(3,)).detach()
    return ad.add(ad.log(ad.reduce_sum(ad.exp(ad.sub(logits, m)), axes=(3,))), m)


def intra_scene_contrastive(pos_clean: Tensor, pos_degraded: Tensor, negatives: Tensor, tau: float, literal: bool = False) -> Tensor:
    """Match each clean patch to its degraded twin against degraded negatives.

    -log [ exp(p_j/tau) / (exp(p_j/tau) + sum_i exp(n_ji/tau)) ], averaged
    over the N locations.
    """
    n = pos_clean.shape[0]
    if n < 1 or negatives.shape[0] < 1:
        raise UsageError("need at least one positive pair and one negative")
    if pos_clean.shape != pos_degraded.shape:
        raise ShapeError(f"positive shapes differ: {pos_clean.shape} vs {pos_degraded.shape}")
    for e, what in ((pos_clean, "positive"), (pos_degraded, "positive"), (negatives, "negative")):
        _check_unit(e, what)
    inv_tau = 1.0 / tau
    pos_dot = ad.reduce_sum(ad.mul(pos_clean, pos_degraded), axes=(1,))  # (N,1,1,1)
    neg_dot = _dots(pos_clean, negatives)  # (N,1,1,M)
    logits = ad.mul(ad.concat([pos_dot, neg_dot], axis=3), ad.as_tensor(inv_tau, pos_dot))
    lse = _logsumexp(logits)
    if literal:
        frac = ad.exp(ad.sub(ad.mul(pos_dot, ad.as_tensor(inv_tau, pos_dot)), lse))
        return ad.reduce_sum(frac)
    per = ad.sub(lse, ad.mul(pos_dot, ad.as_tensor(inv_tau, pos_dot)))
    return ad.reduce_mean(per)


def inter_scene_contrastive(pos_scene_a: Tensor, pos_scene_b: Tensor, negatives: Tensor, tau: float, literal: bool = False) -> Tensor:
    """Pull the two scenes' clean patches together against pooled negatives.

    Every cross-scene pair (j, k) is scored against scene-wide negatives;
    normalized by N^2 so the value is scale-free in N.
    """
    n = pos_scene_a.shape[0]
    if n < 1 or pos_scene_b.shape[0] != n:
        raise ShapeError("need matching positive counts from both scenes")
    if negatives.shape[0] < 1:
        raise UsageError("need at least one negative")
    for e, what in ((pos_scene_a, "positive"), (pos_scene_b, "positive"), (negatives, "negative")):
        _check_unit(e, what)
    inv_tau = 1.0 / tau
    cross = _dots(pos_scene_a, pos_scene_b)  # (N,1,1,N), j indexes rows
    negd = _dots(pos_scene_a, negatives)  # (N,1,1,2N)
    both = ad.concat([cross, negd], axis=3)
    m = ad.reduce_max(both, axes=(3,)).detach()
    neg_sum = ad.reduce_sum(ad.exp(ad.sub(ad.mul(negd, ad.as_tensor(inv_tau, negd)), ad.mul(m, ad.as_tensor(inv_tau, m)))), axes=(3,))
    cross_sc = ad.sub(ad.mul(cross, ad.as_tensor(inv_tau, cross)), ad.mul(m, ad.as_tensor(inv_tau, m)))
    denom = ad.add(ad.exp(cross_sc), neg_sum)  # (N,1,1,N)
    if literal:
        frac = ad.div(ad.exp(cross_sc), denom)
        return ad.mul(ad.reduce_sum(frac), ad.as_tensor(1.0 / n, frac))
    per = ad.sub(ad.log(denom), cross_sc)
    return ad.reduce_mean(per)


def total_loss(terms: dict, weights: LossWeights, step: int = 0):
    """Weighted total per the unified objective; returns (Tensor, LossReport).

    `terms` maps term name -> scalar Tensor or None for inactive terms. A
    non-finite term aborts, naming the offender.
    """
    vals = {}
    for name in TERM_ORDER:
        t = terms.get(name)
        if t is None:
            vals[name] = 0.0
            continue
        v = t.item()
        if not np.isfinite(v):
            raise TrainingAbort(f"loss term {name!r} is {v} at step {step}")
        vals[name] = v
    dtype = next((t.data.dtype for t in terms.values() if t is not None), np.float64)
    total = ad.scalar(0.0, dtype)
    for name in WEIGHTED_TERMS:
        t = terms.get(name)
        if t is not None:
            total = ad.add(total, ad.mul(t, ad.scalar(weights.of(name), t.data.dtype)))
    return total, LossReport(step, vals, weights)
