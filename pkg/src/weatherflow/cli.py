"""Command-line entry point: generate-data, train, eval, infer, visualize, ablate.

Every command honors --seed and --config; explicit flags override config-file
values which override defaults. Errors print to stderr as `error[<class>]:`
with a stable prefix per error class and exit nonzero.
"""

import argparse
import os
import sys

import cv2
import numpy as np

from . import datasynth as dsy
from . import report as rpt
from . import training as tr
from .config import TrainConfig, apply_overrides, load_config
from .errors import ConfigError, FormatError, WeatherflowError
from .flowops import FlowField, flow_to_color
from .networks import build_models, load_checkpoint, load_into

_THREAD_CONTROLLER = None

KIND_ALIASES = {
    "rain": "rain_streaks",
    "fog": "fog_veil",
    "snow": "snow_flakes",
    "rain_streaks": "rain_streaks",
    "fog_veil": "fog_veil",
    "snow_flakes": "snow_flakes",
}


def _cap_threads(n):
    global _THREAD_CONTROLLER
    if not n:
        return
    os.environ["OMP_NUM_THREADS"] = str(n)
    try:
        import threadpoolctl

        _THREAD_CONTROLLER = threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


def _load_cfg(args, overrides=None) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    merged = dict(overrides or {})
    if getattr(args, "seed", None) is not None:
        merged["seed"] = args.seed
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        merged[k.strip()] = v.strip()
    return apply_overrides(cfg, merged)


def cmd_generate_data(args) -> int:
    kind = KIND_ALIASES.get(args.degradation)
    if kind is None:
        raise ConfigError(f"unknown degradation {args.degradation!r} (choose rain, fog, or snow)")
    drift = tuple(float(t) for t in args.drift.split(","))
    if len(drift) != 2:
        raise ConfigError(f"--drift expects dx,dy, got {args.drift!r}")
    seed = args.seed if args.seed is not None else 0
    os.makedirs(args.out, exist_ok=True)
    clamp_stats = []
    for i in range(args.scenes):
        scene = dsy.generate_scene(args.size, seed=seed * 100003 + i, scene_id=f"s{seed}_{i:04d}")
        spec = dsy.DegradationSpec(
            kind=kind,
            density=args.density,
            streak_angle=args.streak_angle,
            streak_length=args.streak_length,
            drift=drift,
            intensity=args.intensity,
            seed=seed * 100003 + i,
        )
        degraded = dsy.render_degradation(scene, spec)
        dsy.dataset_store(args.out, scene, spec, degraded)
        clamp_stats.append(degraded[4])
    print(f"wrote {args.scenes} scenes to {os.path.join(args.out, 'scenes')}")
    print(f"clamp incidence: mean {np.mean(clamp_stats):.4%}, max {np.max(clamp_stats):.4%}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    records = dsy.dataset_load(args.data)
    trainer = tr.Trainer(cfg, records, args.out, quiet=args.quiet)
    if args.resume:
        trainer.resume_from(args.resume)
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    try:
        path = trainer.run(stages)
    finally:
        trainer.close()
    fig = rpt.loss_curves_figure(os.path.join(args.out, "train_log.txt"), os.path.join(args.out, "loss_curves.png"))
    print(f"final checkpoint: {path}")
    if fig:
        print(f"loss curves: {fig}")
    return 0


def _models_from_checkpoint(path):
    meta, _ = load_checkpoint(path)
    models = build_models(
        seed=meta.get("seed", 0),
        patch=meta.get("patch", 12),
        shared_encoders=meta.get("shared_encoders", False),
        backbone=meta.get("backbone", "cycle"),
        dtype=np.float64 if meta.get("dtype") == "float64" else np.float32,
    )
    load_into(models, path)
    return meta, models


def cmd_eval(args) -> int:
    meta, models = _models_from_checkpoint(args.checkpoint)
    records = dsy.dataset_load(args.data)
    report = tr.evaluate_models(
        models,
        records,
        step=meta.get("step", 0),
        tag=os.path.basename(os.path.normpath(args.data)),
        flags=meta.get("flags", {}),
        train_scene_ids=meta.get("train_scene_ids"),
    )
    with open(args.report, "w") as f:
        f.write(report.text())
    panels = []
    for rec in records[:3]:
        pred = tr.infer_flow(models, rec.y1, rec.y2)
        panels.append((rec.scene_id, pred, FlowField(tr.Tensor(rec.gt_flow[None]))))
    fig_path = os.path.splitext(args.report)[0] + ".png"
    rpt.eval_figure(report, fig_path, flow_panels=panels)
    print(f"EPE {report.epe:.4f} px  F1-all {report.f1_all:.2f}%")
    print(f"report: {args.report}")
    print(f"figure: {fig_path}")
    return 0


def _read_frame_any(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"cannot read image {path}")
    if img.ndim == 3:
        img = img.mean(axis=2)
    if img.dtype == np.uint16:
        return img.astype(np.float64) / 65535.0
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def cmd_infer(args) -> int:
    _, models = _models_from_checkpoint(args.checkpoint)
    f1 = _read_frame_any(args.frame1)
    f2 = _read_frame_any(args.frame2)
    if f1.shape != f2.shape:
        raise FormatError(f"frame sizes differ: {f1.shape} vs {f2.shape}")
    flow = tr.infer_flow(models, f1, f2)
    dsy.write_flo(flow, args.out_flo)
    print(f"wrote {args.out_flo}")
    return 0


def cmd_visualize(args) -> int:
    flow = dsy.read_flo(args.flo)
    img = flow_to_color(FlowField(tr.Tensor(flow[None].astype(np.float64))))
    if not cv2.imwrite(str(args.out_png), img[:, :, ::-1]):
        raise FormatError(f"cannot write {args.out_png}")
    print(f"wrote {args.out_png}")
    return 0


def parse_grid(path) -> list:
    """Grid file: one `label: key=value key=value ...` combination per line."""
    combos = []
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise ConfigError(f"{path} line {ln}: expected 'label: key=value ...'")
            label, _, rest = line.partition(":")
            overrides = {}
            for tok in rest.split():
                if "=" not in tok:
                    raise ConfigError(f"{path} line {ln}: expected key=value, got {tok!r}")
                k, _, v = tok.partition("=")
                overrides[k.strip()] = v.strip()
            combos.append((label.strip(), overrides))
    if not combos:
        raise ConfigError(f"{path}: empty ablation grid")
    return combos


CANONICAL_ARMS = ("full", "motion_only", "no_adaptation")


def run_ablation(cfg: TrainConfig, combos, train_records, test_records, out_dir, seeds):
    rows = []
    for label, overrides in combos:
        epes, f1s = [], []
        for seed in seeds:
            import copy

            run_cfg = apply_overrides(copy.deepcopy(cfg), dict(overrides))
            run_cfg = apply_overrides(run_cfg, {"seed": seed})
            run_dir = os.path.join(out_dir, f"{label.replace(' ', '_')}_seed{seed}")
            trainer = tr.Trainer(run_cfg, train_records, run_dir)
            try:
                ckpt = trainer.run([1, 2, 3])
            finally:
                trainer.close()
            rep = tr.evaluate_checkpoint(ckpt, test_records, tag=f"{label}/seed{seed}")
            epes.append(rep.epe)
            f1s.append(rep.f1_all)
        rows.append(
            {
                "label": label,
                "seeds": list(seeds),
                "epe_mean": float(np.mean(epes)),
                "epe_per_seed": epes,
                "f1_mean": float(np.mean(f1s)),
                "f1_per_seed": f1s,
            }
        )
    return rows


def ordering_notes(rows) -> list:
    """Directional check when the canonical three arms are present."""
    by = {r["label"]: r["epe_mean"] for r in rows}
    if not all(a in by for a in CANONICAL_ARMS):
        return []
    full, motion, none = by["full"], by["motion_only"], by["no_adaptation"]
    notes = [f"# ordering: full={full:.4f} motion_only={motion:.4f} no_adaptation={none:.4f}"]
    notes.append(f"# full <= motion_only: {'ok' if full <= motion else 'WARNING (toy-scale variance)'}")
    notes.append(f"# motion_only <= no_adaptation: {'ok' if motion <= none else 'WARNING (toy-scale variance)'}")
    margin = (none - full) / none if none > 0 else 0.0
    notes.append(f"# full vs no_adaptation relative margin: {margin:.1%} ({'ok' if margin >= 0.10 else 'BELOW 10%'})")
    return notes


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    combos = parse_grid(args.grid)
    for label, overrides in combos:
        probe = apply_overrides(_load_cfg(args), dict(overrides))  # reject bad combos before any training
    seeds = [int(s) for s in args.seeds.split(",")]
    if len(seeds) < 3:
        raise ConfigError(f"ablation needs >= 3 seeds, got {seeds}")
    train_records = dsy.dataset_load(args.data)
    test_records = dsy.dataset_load(args.test_data)
    os.makedirs(args.out, exist_ok=True)
    rows = run_ablation(cfg, combos, train_records, test_records, args.out, seeds)
    table = os.path.join(args.out, "ablation.tsv")
    with open(table, "w") as f:
        f.write("label\tseeds\tepe_mean\tf1_mean\tepe_per_seed\tf1_per_seed\n")
        for r in rows:
            f.write(
                f"{r['label']}\t{','.join(map(str, r['seeds']))}\t{r['epe_mean']:.6f}\t{r['f1_mean']:.4f}\t"
                f"{','.join(f'{e:.6f}' for e in r['epe_per_seed'])}\t{','.join(f'{e:.4f}' for e in r['f1_per_seed'])}\n"
            )
        for note in ordering_notes(rows):
            f.write(note + "\n")
    rpt.ablation_figure(rows, os.path.join(args.out, "ablation.png"))
    for r in rows:
        print(f"{r['label']}: EPE {r['epe_mean']:.4f} px, F1-all {r['f1_mean']:.2f}%")
    for note in ordering_notes(rows):
        print(note)
    print(f"table: {table}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weatherflow", description="Unsupervised optical flow under adverse weather (desk scale).")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="run seed (overrides config)")
        sp.add_argument("--config", default=None, help="INI config file")
        sp.add_argument("--threads", type=int, default=None, help="cap worker/BLAS threads")

    g = sub.add_parser("generate-data", help="render a synthetic dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=8)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--degradation", default="rain", help="rain | fog | snow")
    g.add_argument("--density", type=float, default=0.5)
    g.add_argument("--intensity", type=float, default=0.3)
    g.add_argument("--streak-angle", type=float, default=10.0)
    g.add_argument("--streak-length", type=int, default=9)
    g.add_argument("--drift", default="0,6", help="weather motion dx,dy px/frame")
    g.set_defaults(fn=cmd_generate_data)

    t = sub.add_parser("train", help="run the staged training protocol")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="output report path (figure written alongside)")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="predict flow for a frame pair")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--frame1", required=True)
    i.add_argument("--frame2", required=True)
    i.add_argument("--out-flo", required=True)
    i.set_defaults(fn=cmd_infer)

    v = sub.add_parser("visualize", help="render a .flo file as a color PNG")
    common(v)
    v.add_argument("--flo", required=True)
    v.add_argument("--out-png", required=True)
    v.set_defaults(fn=cmd_visualize)

    a = sub.add_parser("ablate", help="run a flag grid over seeds and tabulate metrics")
    common(a)
    a.add_argument("--grid", required=True, help="grid file: label: key=value ...")
    a.add_argument("--data", required=True, help="training dataset root")
    a.add_argument("--test-data", required=True, help="held-out dataset root")
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _cap_threads(getattr(args, "threads", None))
    try:
        return args.fn(args)
    except WeatherflowError as e:
        print(f"error[{e.prefix}]: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
