"""Figures for run directories: safety radar, attention heatmaps, loss curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .model import TOKEN_NAMES, TOKENS_PER_STEP  # noqa: E402
from .rollout import CATEGORIES  # noqa: E402
from .trainer import smoothed  # noqa: E402


def radar_plot(series: dict[str, dict[str, float]], path, title: str = "") -> Path:
    """One closed polygon per entry of ``series`` (name -> category -> value)."""
    angles = np.linspace(0, 2 * np.pi, len(CATEGORIES), endpoint=False)
    closed = np.concatenate([angles, angles[:1]])
    fig, ax = plt.subplots(figsize=(4.5, 4.5), subplot_kw={"polar": True})
    for name, cats in series.items():
        vals = [cats[c] for c in CATEGORIES]
        ax.plot(closed, vals + vals[:1], label=name)
        ax.fill(closed, vals + vals[:1], alpha=0.15)
    ax.set_xticks(angles)
    ax.set_xticklabels(CATEGORIES)
    ax.set_ylim(0, 1)
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize="small", bbox_to_anchor=(1.25, -0.05))
    return _save(fig, path)


def attention_heatmaps(maps: list[np.ndarray], path, steps: int = 4) -> Path:
    """Layer-by-layer heatmaps of the newest ``steps`` timesteps of the window."""
    n = len(maps)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 4), squeeze=False)
    k = min(steps * TOKENS_PER_STEP, maps[0].shape[-1])
    labels = [f"{TOKEN_NAMES[i % TOKENS_PER_STEP]}" for i in range(maps[0].shape[-1] - k, maps[0].shape[-1])]
    for i, (ax, m) in enumerate(zip(axes[0], maps)):
        ax.imshow(m[-k:, -k:], cmap="viridis", vmin=0.0)
        ax.set_title(f"layer {i}")
        ax.set_xticks(range(k))
        ax.set_xticklabels(labels, rotation=90, fontsize=6)
        ax.set_yticks(range(k))
        ax.set_yticklabels(labels, fontsize=6)
    return _save(fig, path)


def loss_curve(log: list[dict], path, window: int = 50) -> Path:
    rows = [r for r in log if "losses" in r]
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("total", "act", "dyn", "rtg", "ctg", "bisim"):
        vals = [r["losses"].get(key) for r in rows]
        if any(v is None for v in vals) or not vals:
            continue
        ax.plot(steps, smoothed(vals, window), label=key, lw=1.2 if key == "total" else 0.8)
    ax.set_xlabel("step")
    ax.set_ylabel(f"loss (moving average, {window})")
    ax.legend(fontsize="small")
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
