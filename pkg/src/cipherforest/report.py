"""Report rendering: a plain-text table, delimited CSV output and matplotlib
figures written next to it.

Figure files rendered by :func:`render_all`:

* ``metrics_by_variant.png`` -- grouped bars of accuracy/precision/recall/F1
  for every evaluated model variant;
* ``agreements.png`` -- prediction-agreement rates between variants;
* ``op_counts.png`` -- measured homomorphic operations per pipeline section;
* ``activation_fit.png`` -- the fitted polynomial against tanh(a*x) with the
  pointwise error.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

METRIC_KEYS = ("accuracy", "precision", "recall", "f1")


def render_text(report: dict) -> str:
    lines = []
    lines.append(f"run {report.get('config_digest', '?')}")
    ds = report.get("dataset", {})
    if ds:
        lines.append(
            f"rows: {ds.get('rows_train')} train / {ds.get('rows_val')} val, "
            f"{ds.get('n_features')} features, {ds.get('n_classes')} classes"
        )
    lay = report.get("layout")
    if lay:
        lines.append(
            f"packing: L={lay['L']} trees x K={lay['K']} leaves, block {lay['block_width']}, "
            f"active {lay['active_width']} of n={lay['n']} slots, depth {lay['depth_requirement']}"
        )
    lines.append("")
    header = f"{'variant':<20}" + "".join(f"{k:>11}" for k in METRIC_KEYS)
    lines.append(header)
    lines.append("-" * len(header))
    for name, m in report.get("variants", {}).items():
        lines.append(
            f"{name:<20}" + "".join(f"{m[k]:>11.4f}" for k in METRIC_KEYS)
        )
    lines.append("")
    for name, rate in report.get("agreements", {}).items():
        lines.append(f"agreement {name:<32} {rate:.4f}")
    enc = report.get("encrypted_inference")
    if enc:
        lines.append(
            f"\nencrypted rows: {enc['rows_evaluated']}, "
            f"single inference: {enc['single_inference_seconds']} s"
        )
    secs = report.get("stage_seconds", {})
    if secs:
        lines.append("\nstage seconds:")
        for stage, sec in secs.items():
            lines.append(f"  {stage:<22} {sec:>9.3f}")
    return "\n".join(lines) + "\n"


def write_metrics_csv(report: dict, path: str) -> str:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant"] + list(METRIC_KEYS))
        for name, m in report.get("variants", {}).items():
            writer.writerow([name] + [f"{m[k]:.6f}" for k in METRIC_KEYS])
        writer.writerow([])
        writer.writerow(["agreement", "rate"])
        for name, rate in report.get("agreements", {}).items():
            writer.writerow([name, f"{rate:.6f}"])
    return path


def _fig_metrics(report: dict, path: str) -> str:
    variants = report.get("variants", {})
    names = list(variants)
    x = np.arange(len(names))
    width = 0.2
    fig, ax = plt.subplots(figsize=(max(7, 1.3 * len(names)), 4))
    for i, key in enumerate(METRIC_KEYS):
        vals = [variants[n][key] for n in names]
        ax.bar(x + (i - 1.5) * width, vals, width, label=key)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title("validation metrics by model variant")
    ax.legend(ncol=4, fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _fig_agreements(report: dict, path: str) -> str:
    agr = report.get("agreements", {})
    names = list(agr)
    fig, ax = plt.subplots(figsize=(7, 3 + 0.3 * len(names)))
    y = np.arange(len(names))
    ax.barh(y, [agr[n] for n in names], color="#4878d0")
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=8)
    ax.set_xlim(0, 1.02)
    ax.set_xlabel("prediction agreement")
    ax.set_title("agreement between evaluation paths")
    for i, n in enumerate(names):
        ax.text(agr[n], i, f" {agr[n]:.3f}", va="center", fontsize=8)
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _fig_op_counts(report: dict, path: str) -> str:
    ops = report.get("op_counts", {}).get("measured_sections", {})
    sections = list(ops)
    kinds = ["additions", "plain_multiplications", "cipher_multiplications", "rotations"]
    x = np.arange(len(sections))
    width = 0.2
    fig, ax = plt.subplots(figsize=(max(7, 1.2 * len(sections)), 4))
    for i, kind in enumerate(kinds):
        ax.bar(x + (i - 1.5) * width, [ops[s][kind] for s in sections], width,
               label=kind.replace("_", " "))
    ax.set_xticks(x)
    ax.set_xticklabels(sections, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("operations")
    ax.set_title("homomorphic operations per section (measured)")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _fig_activation(report: dict, path: str) -> str:
    act = report.get("activation", {})
    coeffs = np.asarray(act.get("coefficients", []))
    a = act.get("dilatation", 1.0)
    x = np.linspace(-1, 1, 800)
    fitted = np.polynomial.polynomial.polyval(x, coeffs)
    target = np.tanh(a * x)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True,
                                   height_ratios=[3, 1])
    ax1.plot(x, target, label=f"tanh({a:g}x)", lw=2)
    ax1.plot(x, fitted, "--", label=f"degree-{act.get('degree')} fit", lw=1.5)
    ax1.set_ylabel("activation")
    ax1.set_title(
        f"activation approximation (max error {act.get('max_error', 0):.2e})"
    )
    ax1.legend()
    ax1.grid(alpha=0.3)
    ax2.semilogy(x, np.abs(fitted - target) + 1e-18, color="#d65f5f")
    ax2.set_xlabel("normalized pre-activation")
    ax2.set_ylabel("|error|")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_all(report: dict, out_dir: str) -> list[str]:
    """CSV plus every figure; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [write_metrics_csv(report, os.path.join(out_dir, "metrics.csv"))]
    if report.get("variants"):
        paths.append(_fig_metrics(report, os.path.join(out_dir, "metrics_by_variant.png")))
    if report.get("agreements"):
        paths.append(_fig_agreements(report, os.path.join(out_dir, "agreements.png")))
    if report.get("op_counts"):
        paths.append(_fig_op_counts(report, os.path.join(out_dir, "op_counts.png")))
    if report.get("activation"):
        paths.append(_fig_activation(report, os.path.join(out_dir, "activation_fit.png")))
    return paths
