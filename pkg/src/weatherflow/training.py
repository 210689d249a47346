"""Staged training protocol, optimizer, evaluation, and checkpoints.

Stage 1 trains the translators and discriminators (cycle + adversarial).
Stage 2 first pretrains the clean flow path with the photometric prior,
then jointly optimizes feature alignment, flow consistency, and the
photometric prior over both domains with the translators frozen. Stage 3
activates the full objective including the boundary contrastive terms.

When both adaptation losses are disabled the pipeline degenerates to direct
unsupervised training on degraded pairs (the no-adaptation ablation arm):
stage 1 is skipped and the photometric prior is applied through the
degraded encoder.
"""

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as ls
from .autodiff import Tensor, no_grad, track_param_reads
from .config import TrainConfig
from .datasynth import DomainBatch, batch_iterator
from .errors import AdmissibilityError, DegenerateInputError, TrainingAbort, UsageError
from .flowops import FlowField, WarpErrorMap, epe, f1_all, warp_error
from .networks import ModelSuite, build_models, load_into, save_checkpoint
from .rng import derive_rng
from .sampling import sample_negatives, sample_positives


class Adam:
    """Adam with bias correction and global-norm gradient clipping.

    Parameters whose grad buffer is unallocated are skipped, so removing a
    loss term and zeroing its weight produce identical updates.
    """

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, clip=10.0):
        self.params = []
        seen = set()
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                self.params.append(p)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        live = [p for p in self.params if p.grad is not None]
        for p in live:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingAbort(f"non-finite gradient on parameter {p.name}")
        scale = 1.0
        if self.clip > 0 and live:
            norm = float(np.sqrt(sum(float((p.grad**2).sum()) for p in live)))
            if norm > self.clip:
                scale = self.clip / norm
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p in live:
            g = p.grad * scale
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero(self):
        ad.zero_grads(self.params)


def optimizer_step(opt: Adam):
    opt.step()


@dataclass
class EvalReport:
    """EPE / F1-all aggregates with a per-scene breakdown."""

    dataset_tag: str
    step: int
    epe: float = field(init=False, default=0.0)
    f1_all: float = field(init=False, default=0.0)
    per_scene: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def finalize(self):
        total = sum(s["valid_px"] for s in self.per_scene)
        if total == 0:
            raise UsageError("evaluation saw no valid pixels")
        self.epe = sum(s["epe"] * s["valid_px"] for s in self.per_scene) / total
        self.f1_all = sum(s["f1_all"] * s["valid_px"] for s in self.per_scene) / total
        return self

    def text(self) -> str:
        lines = [
            f"# dataset = {self.dataset_tag}",
            f"# step = {self.step}",
            f"# epe = {self.epe:.6f}",
            f"# f1_all = {self.f1_all:.4f}",
        ]
        for k, v in sorted(self.flags.items()):
            lines.append(f"# flag.{k} = {v}")
        lines.append("scene_id\tepe\tf1_all\tvalid_px")
        for s in self.per_scene:
            lines.append(f"{s['scene_id']}\t{s['epe']:.6f}\t{s['f1_all']:.4f}\t{s['valid_px']}")
        return "\n".join(lines) + "\n"


def infer_flow(models: ModelSuite, y1: np.ndarray, y2: np.ndarray) -> FlowField:
    """Degraded-domain inference: E_y + decoder only, no gradients."""
    dt = models.flow.decoder.heads[0][0].w.data.dtype
    with no_grad():
        flow, _ = models.flow.estimate(Tensor(y1[None, None].astype(dt)), Tensor(y2[None, None].astype(dt)), "degraded")
    return flow


def evaluate_models(models: ModelSuite, records, step=0, tag="eval", flags=None, train_scene_ids=None) -> EvalReport:
    """Metrics over a dataset; asserts only E_y and decoder weights are read."""
    if train_scene_ids:
        overlap = sorted({r.scene_id for r in records} & set(train_scene_ids))
        if overlap:
            raise UsageError(f"scene-id leakage between train and eval splits: {overlap[:5]}")
    allowed = {p.name for p in models.flow.enc_y.parameters()} | {p.name for p in models.flow.decoder.parameters()}
    report = EvalReport(tag, step, flags=dict(flags or {}))
    touched = set()
    with track_param_reads(touched):
        for rec in records:
            flow = infer_flow(models, rec.y1, rec.y2)
            gt = FlowField(Tensor(rec.gt_flow[None]))
            valid = rec.valid[None]
            report.per_scene.append(
                {
                    "scene_id": rec.scene_id,
                    "epe": epe(flow, gt, valid),
                    "f1_all": f1_all(flow, gt, valid),
                    "valid_px": int(rec.valid.sum()),
                }
            )
    stray = touched - allowed
    if stray:
        raise UsageError(f"evaluation touched weights outside E_y + decoder: {sorted(stray)[:5]}")
    return report.finalize()


def evaluate_checkpoint(ckpt_path, records, tag="eval") -> EvalReport:
    from .networks import load_checkpoint

    meta, _ = load_checkpoint(ckpt_path)
    models = build_models(
        seed=meta.get("seed", 0),
        patch=meta.get("patch", 12),
        shared_encoders=meta.get("shared_encoders", False),
        backbone=meta.get("backbone", "cycle"),
        dtype=np.float64 if meta.get("dtype", "float32") == "float64" else np.float32,
    )
    load_into(models, ckpt_path)
    return evaluate_models(
        models,
        records,
        step=meta.get("step", 0),
        tag=tag,
        flags=meta.get("flags", {}),
        train_scene_ids=meta.get("train_scene_ids"),
    )


def _stack(arrs, dtype) -> Tensor:
    return Tensor(np.stack(arrs)[:, None].astype(dtype))


def _narrow_pyr(pyr, start, length):
    return [ad.narrow(t, 0, start, length) for t in pyr]


def _concat_pyr(pyrs):
    return [ad.concat(level, axis=0) for level in zip(*pyrs)]


class Trainer:
    """Runs the staged protocol over a loaded dataset."""

    def __init__(self, cfg: TrainConfig, records, out_dir, quiet=True, term_switches=None):
        if len(records) < 2:
            raise UsageError("training needs at least two scenes")
        h, w = records[0].x1.shape
        if (h, w) != (cfg.resolution, cfg.resolution):
            raise UsageError(f"dataset is {h}x{w} but config resolution is {cfg.resolution}")
        self.cfg = cfg
        self.records = records
        self.out_dir = str(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)
        self.dtype = cfg.np_dtype()
        self.models = build_models(
            seed=cfg.seed,
            channels=cfg.channels,
            patch=cfg.sampler.patch,
            shared_encoders=cfg.shared_encoders,
            backbone=cfg.translation_backbone,
            dtype=self.dtype,
        )
        self.adapt = cfg.use_feat_align or cfg.use_flow_consis
        self.completed_stage = 0
        self.global_step = 0
        self.quiet = quiet
        self.skip_count = 0
        self.seen_count = 0
        # internal switches used by the inertness tests to drop terms entirely
        self.term_switches = dict(term_switches or {})
        self._log = open(os.path.join(self.out_dir, "train_log.txt"), "a")
        self.last_report = None

    # -- helpers ------------------------------------------------------------

    def _on(self, term: str) -> bool:
        if term in self.term_switches:
            return self.term_switches[term]
        return {
            "feat": self.cfg.use_feat_align,
            "consis": self.cfg.use_flow_consis,
            "intra": self.cfg.use_intra,
            "inter": self.cfg.use_inter,
            "tran": True,
            "adv_gen": True,
            "photo": True,
        }[term]

    def _emit(self, report: ls.LossReport):
        self._log.write(report.line() + "\n")
        self.last_report = report

    def _meta(self, stage: int) -> dict:
        return {
            "seed": self.cfg.seed,
            "stage": stage,
            "step": self.global_step,
            "dtype": self.cfg.dtype,
            "patch": self.cfg.sampler.patch,
            "shared_encoders": self.cfg.shared_encoders,
            "backbone": self.cfg.translation_backbone,
            "train_scene_ids": sorted(r.scene_id for r in self.records),
            "flags": {
                "use_feat_align": self.cfg.use_feat_align,
                "use_flow_consis": self.cfg.use_flow_consis,
                "use_intra": self.cfg.use_intra,
                "use_inter": self.cfg.use_inter,
                "shared_encoders": self.cfg.shared_encoders,
                "pos_strategy": self.cfg.sampler.strategy_pos,
                "neg_strategy": self.cfg.sampler.strategy_neg,
                "translation_backbone": self.cfg.translation_backbone,
            },
        }

    def save(self, name: str, stage: int) -> str:
        path = os.path.join(self.out_dir, name)
        tmp = path + ".tmp"
        save_checkpoint(tmp, self.models.named_parameters(), self._meta(stage))
        os.replace(tmp, path)
        return path

    def _batches(self, stage: int, steps: int):
        seed = int(derive_rng(self.cfg.seed, f"stage{stage}", "data").integers(2**31))
        return batch_iterator(self.records, seed, steps)

    # -- stage 1: image translation ------------------------------------------

    def _stage1_step(self, batch: DomainBatch, opt_g: Adam, opt_d: Adam, step: int) -> ls.LossReport:
        cfg = self.cfg
        x = _stack([batch.scene_a.x1, batch.scene_a.x2], self.dtype)
        y = _stack([batch.scene_b.y1, batch.scene_b.y2], self.dtype)
        tran, gen, disc = ls.translation_terms(x, y, self.models.translator)
        if not self._on("tran"):
            tran = None
        if not self._on("adv_gen"):
            gen = None
        total, report = ls.total_loss({"tran": tran, "adv_gen": gen, "adv_disc": disc}, cfg.weights, step)
        opt_g.zero()
        opt_d.zero()
        total.backward()
        # discriminator grads from the generator objective are discarded
        ad.zero_grads(opt_d.params)
        opt_g.step()
        disc.backward()
        opt_d.step()
        return report

    def run_stage1(self) -> str:
        cfg = self.cfg
        if self.adapt and cfg.steps_stage1 > 0:
            opt_g = Adam(self.models.translator.generator_params(), cfg.learning_rate, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps, cfg.grad_clip)
            opt_d = Adam(self.models.translator.discriminator_params(), cfg.learning_rate, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps, cfg.grad_clip)
            for step, batch in enumerate(self._batches(1, cfg.steps_stage1)):
                self.global_step = step
                self._emit(self._stage1_step(batch, opt_g, opt_d, step))
                if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                    self.save("latest.ckpt", 1)
        self.completed_stage = 1
        self._log.flush()
        return self.save("stage1.ckpt", 1)

    # -- stage 2: motion adaptation -------------------------------------------

    def _flow_paths(self, batch: DomainBatch):
        """Batched coarse-to-fine decode over every active path.

        Returns (images, flows, cvs) dicts keyed by path name; each flow is
        a (2, 2, h, w) tensor (two scenes), cvs are per-level lists.
        """
        cfg = self.cfg
        flow_net = self.models.flow
        x1 = _stack([batch.scene_a.x1, batch.scene_b.x1], self.dtype)
        x2 = _stack([batch.scene_a.x2, batch.scene_b.x2], self.dtype)
        y1 = _stack([batch.scene_a.y1, batch.scene_b.y1], self.dtype)
        y2 = _stack([batch.scene_a.y2, batch.scene_b.y2], self.dtype)

        if not self.adapt:
            pyr1 = flow_net.enc_y.pyramid(y1)
            pyr2 = flow_net.enc_y.pyramid(y2)
            frame1 = _concat_pyr([pyr1, pyr2])
            frame2 = _concat_pyr([pyr2, pyr1])
            flows, cvs = flow_net.decoder.decode(frame1, frame2)
            return (
                {"x1": x1, "x2": x2, "y1": y1, "y2": y2},
                {"y_fwd": ad.narrow(flows, 0, 0, 2), "y_bwd": ad.narrow(flows, 0, 2, 2)},
                {},
            )

        one_way = cfg.translation_backbone == "one_way"
        with no_grad():
            ry1 = self.models.translator.translate(y1, "to_clean")
            ry2 = self.models.translator.translate(y2, "to_clean")
            if not one_way:
                gx1 = self.models.translator.translate(x1, "to_degraded")
                gx2 = self.models.translator.translate(x2, "to_degraded")

        px = flow_net.enc_x.pyramid(ad.concat([x1, x2, ry1, ry2], axis=0))
        if one_way:
            py = flow_net.enc_y.pyramid(ad.concat([y1, y2], axis=0))
            names = ("x_fwd", "x_bwd", "y_fwd", "ry")
            frame1 = _concat_pyr([_narrow_pyr(px, 0, 2), _narrow_pyr(px, 2, 2), _narrow_pyr(py, 0, 2), _narrow_pyr(px, 4, 2)])
            frame2 = _concat_pyr([_narrow_pyr(px, 2, 2), _narrow_pyr(px, 0, 2), _narrow_pyr(py, 2, 2), _narrow_pyr(px, 6, 2)])
        else:
            py = flow_net.enc_y.pyramid(ad.concat([gx1, gx2, y1, y2], axis=0))
            names = ("x_fwd", "x_bwd", "gx", "y_fwd", "ry")
            frame1 = _concat_pyr(
                [_narrow_pyr(px, 0, 2), _narrow_pyr(px, 2, 2), _narrow_pyr(py, 0, 2), _narrow_pyr(py, 4, 2), _narrow_pyr(px, 4, 2)]
            )
            frame2 = _concat_pyr(
                [_narrow_pyr(px, 2, 2), _narrow_pyr(px, 0, 2), _narrow_pyr(py, 2, 2), _narrow_pyr(py, 6, 2), _narrow_pyr(px, 6, 2)]
            )
        flows, cvs = flow_net.decoder.decode(frame1, frame2)
        flow_d = {name: ad.narrow(flows, 0, 2 * i, 2) for i, name in enumerate(names)}
        cv_d = {name: [ad.narrow(cv, 0, 2 * i, 2) for cv in cvs] for i, name in enumerate(names)}
        return {"x1": x1, "x2": x2, "y1": y1, "y2": y2}, flow_d, cv_d

    def _stage2_terms(self, batch: DomainBatch, use_occlusion: bool = True):
        cfg = self.cfg
        imgs, flows, cvs = self._flow_paths(batch)
        terms = {}
        if not self.adapt:
            terms["photo"] = ls.photometric_loss(imgs["y1"], imgs["y2"], flows["y_fwd"], flows["y_bwd"], cfg.weights, use_occlusion)
            return terms, imgs, flows
        if self._on("photo"):
            terms["photo"] = ls.photometric_loss(imgs["x1"], imgs["x2"], flows["x_fwd"], flows["x_bwd"], cfg.weights, use_occlusion)
        one_way = cfg.translation_backbone == "one_way"
        if self._on("feat"):
            if one_way:
                terms["feat"] = ls.feature_align_loss(cvs["y_fwd"], cvs["ry"], cvs["y_fwd"], cvs["ry"])
                terms["feat"] = ad.mul(terms["feat"], ad.scalar(0.5, self.dtype))  # single pair
            else:
                terms["feat"] = ls.feature_align_loss(cvs["gx"], cvs["x_fwd"], cvs["y_fwd"], cvs["ry"])
        if self._on("consis"):
            pairs = [(flows["ry"], flows["y_fwd"])] if one_way else [(flows["gx"], flows["x_fwd"]), (flows["ry"], flows["y_fwd"])]
            terms["consis"] = ls.flow_consistency_loss(*pairs)
        return terms, imgs, flows

    def _use_occlusion(self, stage2_step: int) -> bool:
        return stage2_step >= int(round(self.cfg.occlusion_warmup_frac * self.cfg.steps_stage2))

    def _skip(self, step: int, reason: Exception):
        self.skip_count += 1
        self._log.write(f"step={step} skipped=degenerate reason={reason}\n")
        if self.seen_count >= 20 and self.skip_count / max(self.seen_count, 1) > self.cfg.max_skip_rate:
            raise TrainingAbort(f"skip rate {self.skip_count}/{self.seen_count} exceeds {self.cfg.max_skip_rate:.0%}") from reason

    def _stage2_pretrain_step(self, batch: DomainBatch, opt: Adam, step: int) -> ls.LossReport:
        cfg = self.cfg
        flow_net = self.models.flow
        if self.adapt:
            f1 = _stack([batch.scene_a.x1, batch.scene_b.x1], self.dtype)
            f2 = _stack([batch.scene_a.x2, batch.scene_b.x2], self.dtype)
            enc = flow_net.enc_x
        else:
            f1 = _stack([batch.scene_a.y1, batch.scene_b.y1], self.dtype)
            f2 = _stack([batch.scene_a.y2, batch.scene_b.y2], self.dtype)
            enc = flow_net.enc_y
        p1 = enc.pyramid(f1)
        p2 = enc.pyramid(f2)
        flows, _ = flow_net.decoder.decode(_concat_pyr([p1, p2]), _concat_pyr([p2, p1]))
        photo = ls.photometric_loss(
            f1, f2, ad.narrow(flows, 0, 0, 2), ad.narrow(flows, 0, 2, 2), cfg.weights, self._use_occlusion(step)
        )
        total, report = ls.total_loss({"photo": photo}, cfg.weights, step)
        opt.zero()
        total.backward()
        opt.step()
        return report

    def _stage2_joint_step(self, batch: DomainBatch, opt: Adam, step: int) -> ls.LossReport:
        terms, _, _ = self._stage2_terms(batch, self._use_occlusion(step))
        total, report = ls.total_loss(terms, self.cfg.weights, step)
        opt.zero()
        total.backward()
        opt.step()
        return report

    def run_stage2(self) -> str:
        cfg = self.cfg
        if self.completed_stage < 1:
            raise TrainingAbort("stage 2 requires a stage-1 checkpoint (translators)")
        flow_net = self.models.flow
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        n_pre = int(round(cfg.steps_stage2 * cfg.stage2_pretrain_frac))
        pre_params = (flow_net.enc_x if self.adapt else flow_net.enc_y).parameters() + flow_net.decoder.parameters()
        opt_pre = Adam(pre_params, cfg.learning_rate, betas, cfg.adam_eps, cfg.grad_clip)
        self.skip_count = 0
        self.seen_count = 0
        for step, batch in enumerate(self._batches(2, n_pre)):
            self.global_step = step
            self.seen_count += 1
            try:
                self._emit(self._stage2_pretrain_step(batch, opt_pre, step))
            except DegenerateInputError as e:
                self._skip(step, e)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                self.save("latest.ckpt", 2)
        if self.adapt and cfg.init_degraded_from_clean and not cfg.shared_encoders:
            for px, py in zip(flow_net.enc_x.parameters(), flow_net.enc_y.parameters()):
                py.data = px.data.copy()
        opt = Adam(flow_net.parameters(), cfg.learning_rate, betas, cfg.adam_eps, cfg.grad_clip)
        for step, batch in enumerate(self._batches(2, cfg.steps_stage2 - n_pre)):
            self.global_step = n_pre + step
            self.seen_count += 1
            try:
                self._emit(self._stage2_joint_step(batch, opt, n_pre + step))
            except DegenerateInputError as e:
                self._skip(n_pre + step, e)
            if cfg.checkpoint_every and (self.global_step + 1) % cfg.checkpoint_every == 0:
                self.save("latest.ckpt", 2)
        self.completed_stage = 2
        self._log.flush()
        return self.save("stage2.ckpt", 2)

    # -- stage 3: boundary contrastive adaptation ------------------------------

    def _contrastive_terms(self, batch: DomainBatch, imgs, flows):
        """Sample warp-error patches and build the intra/inter losses."""
        cfg = self.cfg
        sampler_rng = derive_rng(cfg.seed, "stage3", "sampler", str(self.global_step))
        if cfg.sampler.grad_through_warp_error:
            wx_t = warp_error(imgs["x1"], imgs["x2"], flows["x_fwd"]).tensor
            wy_t = warp_error(imgs["y1"], imgs["y2"], flows["y_fwd"]).tensor
        else:
            with no_grad():
                wx_t = warp_error(imgs["x1"], imgs["x2"], Tensor(flows["x_fwd"].data)).tensor
                wy_t = warp_error(imgs["y1"], imgs["y2"], Tensor(flows["y_fwd"].data)).tensor
        groups = []
        for i, rec in enumerate((batch.scene_a, batch.scene_b)):
            wmx = WarpErrorMap(ad.narrow(wx_t, 0, i, 1), "clean")
            wmy = WarpErrorMap(ad.narrow(wy_t, 0, i, 1), "degraded")
            pos = sample_positives(wmx, wmy, cfg.sampler, rec.scene_id, rng=sampler_rng)
            neg = sample_negatives(wmy, pos, cfg.sampler, rec.scene_id, rng=sampler_rng)
            groups.append((pos, neg))

        n = cfg.sampler.n
        patches = []
        for pos, neg in groups:
            patches += [pc.patch for pc, _ in pos] + [pd.patch for _, pd in pos] + [ng.patch for ng in neg]
        emb = self.models.embedder.embed(ad.concat(patches, axis=0))
        per_scene = []
        for i in range(2):
            base = i * 3 * n
            per_scene.append(
                {
                    "pos_clean": ad.narrow(emb, 0, base, n),
                    "pos_degraded": ad.narrow(emb, 0, base + n, n),
                    "neg": ad.narrow(emb, 0, base + 2 * n, n),
                }
            )
        terms = {}
        if self._on("intra"):
            tau, lit = cfg.weights.tau, cfg.literal_contrastive
            intra = ad.add(
                ls.intra_scene_contrastive(per_scene[0]["pos_clean"], per_scene[0]["pos_degraded"], per_scene[0]["neg"], tau, lit),
                ls.intra_scene_contrastive(per_scene[1]["pos_clean"], per_scene[1]["pos_degraded"], per_scene[1]["neg"], tau, lit),
            )
            terms["intra"] = ad.mul(intra, ad.scalar(0.5, intra.data.dtype))
        if self._on("inter"):
            negs = ad.concat([per_scene[0]["neg"], per_scene[1]["neg"]], axis=0)
            terms["inter"] = ls.inter_scene_contrastive(
                per_scene[0]["pos_clean"], per_scene[1]["pos_clean"], negs, cfg.weights.tau, cfg.literal_contrastive
            )
        return terms

    def _stage3_step(self, batch: DomainBatch, opt: Adam, opt_disc, step: int):
        cfg = self.cfg
        terms, imgs, flows = self._stage2_terms(batch)
        if self.adapt and (self._on("intra") or self._on("inter")):
            try:
                terms.update(self._contrastive_terms(batch, imgs, flows))
            except AdmissibilityError as e:
                self.skip_count += 1
                self._log.write(f"step={step} skipped=sampler reason={e}\n")
                if self.seen_count >= 20 and self.skip_count / max(self.seen_count, 1) > cfg.max_skip_rate:
                    raise TrainingAbort(
                        f"sampler skip rate {self.skip_count}/{self.seen_count} exceeds {cfg.max_skip_rate:.0%}"
                    ) from e
                return None
        disc = None
        if self.adapt:
            x = _stack([batch.scene_a.x1, batch.scene_a.x2], self.dtype)
            y = _stack([batch.scene_b.y1, batch.scene_b.y2], self.dtype)
            if cfg.freeze_translator_stage3:
                with no_grad():
                    tran, gen, disc_ng = ls.translation_terms(x, y, self.models.translator)
                if self._on("tran"):
                    terms["tran"] = tran
                if self._on("adv_gen"):
                    terms["adv_gen"] = gen
                    terms["adv_disc"] = disc_ng
            else:
                tran, gen, disc = ls.translation_terms(x, y, self.models.translator)
                if self._on("tran"):
                    terms["tran"] = tran
                if self._on("adv_gen"):
                    terms["adv_gen"] = gen
                    terms["adv_disc"] = disc
                else:
                    disc = None
        total, report = ls.total_loss(terms, cfg.weights, step)
        opt.zero()
        if opt_disc is not None:
            opt_disc.zero()
        total.backward()
        if opt_disc is not None:
            ad.zero_grads(opt_disc.params)
        opt.step()
        if disc is not None and opt_disc is not None:
            disc.backward()
            opt_disc.step()
        return report

    def run_stage3(self) -> str:
        cfg = self.cfg
        if self.completed_stage < 2:
            raise TrainingAbort("stage 3 requires a stage-2 checkpoint")
        flow_net = self.models.flow
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        params = flow_net.parameters() + self.models.embedder.parameters()
        opt_disc = None
        if self.adapt and not cfg.freeze_translator_stage3:
            params = params + self.models.translator.generator_params()
            opt_disc = Adam(self.models.translator.discriminator_params(), cfg.learning_rate, betas, cfg.adam_eps, cfg.grad_clip)
        opt = Adam(params, cfg.learning_rate, betas, cfg.adam_eps, cfg.grad_clip)
        self.skip_count = 0
        self.seen_count = 0
        for step, batch in enumerate(self._batches(3, cfg.steps_stage3)):
            self.global_step = step
            self.seen_count += 1
            try:
                report = self._stage3_step(batch, opt, opt_disc, step)
            except DegenerateInputError as e:
                self._skip(step, e)
                report = None
            if report is not None:
                self._emit(report)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                self.save("latest.ckpt", 3)
        self.completed_stage = 3
        self._log.flush()
        return self.save("stage3.ckpt", 3)

    # -- protocol ---------------------------------------------------------------

    def resume_from(self, ckpt_path):
        meta = load_into(self.models, ckpt_path)
        self.completed_stage = int(meta.get("stage", 0))
        return meta

    def run(self, stages=(1, 2, 3)) -> str:
        path = None
        t0 = time.time()
        for stage in stages:
            runner = {1: self.run_stage1, 2: self.run_stage2, 3: self.run_stage3}[stage]
            path = runner()
            if not self.quiet:
                print(f"stage {stage} done in {time.time() - t0:.1f}s -> {path}")
        self._log.flush()
        return path

    def close(self):
        self._log.close()
