"""Figure rendering for the reporting paths.

Every command that writes a delimited report also renders a matplotlib
figure next to it: loss curves for training logs, per-scene metric bars and
flow panels for evaluation, grouped bars for ablation tables.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .flowops import FlowField, flow_to_color
from .losses import TERM_ORDER


def parse_train_log(path) -> list:
    """Parse `step=.. total=.. term=..` lines into dicts (skips skip-notes)."""
    rows = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or "skipped=sampler" in line:
                continue
            row = {}
            for p in parts:
                k, _, v = p.partition("=")
                try:
                    row[k] = float(v)
                except ValueError:
                    row[k] = v
            if "total" in row:
                rows.append(row)
    return rows


def loss_curves_figure(log_path, out_png):
    rows = parse_train_log(log_path)
    if not rows:
        return None
    fig, ax = plt.subplots(figsize=(9, 5))
    xs = np.arange(len(rows))
    stage_breaks = [i for i in range(1, len(rows)) if rows[i]["step"] < rows[i - 1]["step"]]
    for term in ("total",) + TERM_ORDER:
        ys = np.array([r.get(term, 0.0) for r in rows])
        if np.any(ys != 0.0):
            ax.plot(xs, ys, label=term, linewidth=1.0, alpha=0.9)
    for b in stage_breaks:
        ax.axvline(b, color="gray", linestyle=":", linewidth=0.8)
    ax.set_xlabel("logged step")
    ax.set_ylabel("loss value")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(fontsize=8, ncol=3)
    ax.set_title("training losses (dotted lines mark stage boundaries)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def eval_figure(report, out_png, flow_panels=None):
    """Per-scene EPE bars plus optional (scene_id, pred, gt) flow images."""
    n_panels = len(flow_panels or [])
    rows = 1 + (1 if n_panels else 0)
    fig = plt.figure(figsize=(max(6, 1.2 * len(report.per_scene)), 4 * rows))
    ax = fig.add_subplot(rows, 1, 1)
    ids = [s["scene_id"] for s in report.per_scene]
    ax.bar(range(len(ids)), [s["epe"] for s in report.per_scene], color="#4878d0")
    ax.axhline(report.epe, color="crimson", linestyle="--", label=f"aggregate EPE {report.epe:.3f}")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=60, fontsize=7, ha="right")
    ax.set_ylabel("EPE (px)")
    ax.set_title(f"{report.dataset_tag}: EPE {report.epe:.3f} px, F1-all {report.f1_all:.2f}%")
    ax.legend(fontsize=8)
    if n_panels:
        for i, (sid, pred, gt) in enumerate(flow_panels):
            axp = fig.add_subplot(rows, 2 * n_panels, 2 * n_panels + 2 * i + 1)
            axp.imshow(flow_to_color(pred))
            axp.set_title(f"{sid} pred", fontsize=8)
            axp.axis("off")
            axg = fig.add_subplot(rows, 2 * n_panels, 2 * n_panels + 2 * i + 2)
            axg.imshow(flow_to_color(gt))
            axg.set_title(f"{sid} gt", fontsize=8)
            axg.axis("off")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def ablation_figure(rows, out_png):
    """rows: list of dicts with label / epe_mean / f1_mean."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    labels = [r["label"] for r in rows]
    ax1.bar(range(len(rows)), [r["epe_mean"] for r in rows], color="#4878d0")
    ax1.set_xticks(range(len(rows)))
    ax1.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax1.set_ylabel("mean EPE (px)")
    ax2.bar(range(len(rows)), [r["f1_mean"] for r in rows], color="#ee854a")
    ax2.set_xticks(range(len(rows)))
    ax2.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax2.set_ylabel("mean F1-all (%)")
    fig.suptitle("ablation over seeds")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
