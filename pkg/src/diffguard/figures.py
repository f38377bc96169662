"""Render the plot-data CSVs to PNG files.

Pure presentation: every number comes from the CSVs written by the report
stage, so figures can be regenerated from a finished run at any time.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

__all__ = ["render_tradeoff", "render_guidance_modes", "render_all"]


def _read_rows(path: str) -> list:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def render_tradeoff(csv_path: str, png_path: str) -> bool:
    """Standard and robust accuracy against the robustness weight."""
    rows = _read_rows(csv_path)
    if not rows:
        return False
    lams = [float(r["lambda"]) for r in rows]
    std = [float(r["standard_acc"]) for r in rows]
    rob = [float(r["robust_acc"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(lams, std, marker="o", label="standard")
    ax.plot(lams, rob, marker="s", label="robust")
    ax.set_xlabel("robustness weight")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    ax.set_title("accuracy trade-off")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return True


def render_guidance_modes(csv_path: str, png_path: str) -> bool:
    """Grouped bars: robust accuracy per guidance mode, one group per attack."""
    rows = _read_rows(csv_path)
    if not rows:
        return False
    attacks = sorted({r["attack"] for r in rows})
    modes = list(dict.fromkeys(r["guidance_mode"] for r in rows))
    value = {(r["guidance_mode"], r["attack"]): float(r["robust_acc"]) for r in rows}
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(modes), 1)
    for i, mode in enumerate(modes):
        xs = [j + i * width for j in range(len(attacks))]
        ys = [value.get((mode, a), 0.0) for a in attacks]
        ax.bar(xs, ys, width=width, label=mode)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(attacks))])
    ax.set_xticklabels(attacks)
    ax.set_ylabel("robust accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    ax.set_title("guidance modes")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return True


def render_all(run_dir: str) -> dict:
    """Render every figure whose source CSV exists in the run directory."""
    written = {}
    tradeoff_csv = os.path.join(run_dir, "tradeoff.csv")
    if os.path.exists(tradeoff_csv):
        png = os.path.join(run_dir, "tradeoff.png")
        if render_tradeoff(tradeoff_csv, png):
            written["tradeoff"] = png
    modes_csv = os.path.join(run_dir, "guidance_modes.csv")
    if os.path.exists(modes_csv):
        png = os.path.join(run_dir, "guidance_modes.png")
        if render_guidance_modes(modes_csv, png):
            written["guidance_modes"] = png
    return written
