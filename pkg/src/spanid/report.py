"""Static report files: deviation-ratio bars, training loss curve, per-member errors."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

PLOT_FILES = ("deviation_ratios.png", "loss_curve.png", "member_errors.png")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_deviation_ratios(k, path, ground_truth=None, threshold=0.05):
    plt = _pyplot()
    k = np.asarray(k, float)
    idx = np.arange(len(k))
    fig, ax = plt.subplots(figsize=(max(6.0, 0.18 * len(k)), 3.6))
    ax.bar(idx, k, width=0.8, color="tab:blue", label="identified")
    if ground_truth is not None:
        ax.plot(idx, ground_truth, "k_", markersize=9, mew=2, label="ground truth")
    ax.axhspan(1 - threshold, 1 + threshold, color="0.85", zorder=0, label=f"±{threshold:.0%}")
    ax.set_xlabel("member")
    ax.set_ylabel("deviation ratio k")
    ax.set_xlim(-1, len(k))
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curve(loss_history, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.semilogy(np.arange(1, len(loss_history) + 1), loss_history)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean total loss")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_member_errors(k, path, ground_truth=None):
    """Relative error against ground truth, or deviation from 1 in field mode."""
    plt = _pyplot()
    k = np.asarray(k, float)
    ref = np.ones_like(k) if ground_truth is None else np.asarray(ground_truth, float)
    err = 100 * (k - ref) / ref
    fig, ax = plt.subplots(figsize=(max(6.0, 0.18 * len(k)), 3.6))
    colors = np.where(np.abs(ref - 1) > 1e-12, "tab:red", "tab:gray")
    ax.bar(np.arange(len(k)), err, color=colors)
    ax.axhline(0, color="k", lw=0.8)
    ax.set_xlabel("member")
    ax.set_ylabel("error (%)" if ground_truth is not None else "deviation from healthy (%)")
    ax.set_xlim(-1, len(k))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_plots(result, out_dir):
    """Write the three report figures for a result dict; returns their paths."""
    out_dir = Path(out_dir)
    gt = result.get("ground_truth")
    paths = [out_dir / name for name in PLOT_FILES]
    plot_deviation_ratios(result["k"], paths[0], gt)
    plot_loss_curve(result["loss_history"], paths[1])
    plot_member_errors(result["k"], paths[2], gt)
    return paths


def summary_text(result):
    lines = []
    k = np.asarray(result["k"])
    lines.append(f"members: {len(k)}   epochs: {result.get('epochs')}   "
                 f"stopped: {result.get('stopped')}")
    if result.get("accuracy") is not None:
        lines.append(f"average accuracy: {result['accuracy']:.2f}%   "
                     f"max damaged-member error: {result['max_error_pct']:.2f}%")
        lines.append("damaged members (id, ground truth, predicted, error %):")
        for d in result["damaged"]:
            lines.append(f"  {d['member']:4d}  {d['ground_truth']:.4f}  {d['predicted']:.4f}  "
                         f"{d['error_pct']:.2f}")
        fps = result.get("false_positives", [])
        lines.append(f"false positives: {len(fps)}")
        for d in fps:
            lines.append(f"  {d['member']:4d}  {d['predicted']:.4f}  {d['error_pct']:.2f}")
    else:
        lines.append("members beyond threshold (id, predicted):")
        for d in result.get("flagged", []):
            lines.append(f"  {d['member']:4d}  {d['predicted']:.4f}")
    return "\n".join(lines) + "\n"


def load_result(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
