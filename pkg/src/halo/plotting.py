"""Report figures, rendered headless to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def _show(ax, img, title, cmap=None):
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    ax.imshow(np.clip(img, 0, 1) if cmap is None else img, cmap=cmap if img.ndim == 2 else None,
              interpolation="nearest")
    ax.set_title(title, fontsize=9)
    ax.axis("off")


def toy_interpolation_figure(train_img, low: dict, high: dict, path) -> Path:
    """Training image, bilinear reference and the two dense field reconstructions."""
    from halo.toy2d import bilinear_upsample

    factor = low["image"].shape[0] // np.asarray(train_img).shape[0]
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.3))
    _show(axes[0], train_img, "training image", "gray")
    _show(axes[1], bilinear_upsample(train_img, factor), f"bilinear x{factor}", "gray")
    _show(axes[2], low["image"], f"low encoding (hf {low['hf_energy_ratio']:.3f})", "gray")
    _show(axes[3], high["image"], f"high encoding (hf {high['hf_energy_ratio']:.3f})", "gray")
    return _save(fig, path)


def toy_extrapolation_figure(pattern, mask, results: dict, path) -> Path:
    """Target, masked input and each configuration's completion."""
    shown = np.where(mask, 0.5, pattern)
    fig, axes = plt.subplots(1, 2 + len(results), figsize=(3 * (2 + len(results)), 3.3))
    _show(axes[0], pattern, "target", "gray")
    _show(axes[1], shown, "training pixels", "gray")
    for ax, (name, r) in zip(axes[2:], results.items()):
        _show(ax, r["prediction"], f"{name} (masked acc {r['masked_accuracy']:.2f})", "gray")
        h, w = np.nonzero(mask)
        if len(h):
            ax.add_patch(plt.Rectangle((w.min() - 0.5, h.min() - 0.5), w.max() - w.min() + 1,
                                       h.max() - h.min() + 1, fill=False, ec="red", lw=1))
    return _save(fig, path)


def tuning_figure(rows: list, threshold: float, path) -> Path:
    """Spectral gap per candidate encoding with the acceptance threshold."""
    labels = [_enc_label(r["encoding"]) for r in rows]
    sig = [r["sigma"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(rows) + 2), 3.2))
    ax.bar(range(len(rows)), sig, color=["tab:green" if r["passed"] else "tab:gray" for r in rows])
    ax.axhline(threshold, color="tab:red", ls="--", lw=1, label=f"threshold {threshold:g}")
    ax.set_xticks(range(len(rows)), labels, fontsize=8)
    ax.set_ylabel("spectral gap")
    ax.legend(fontsize=8)
    return _save(fig, path)


def _enc_label(d: dict) -> str:
    if d.get("type") == "sinusoidal":
        return f"L={d['bands']} s={d['scale']:g}"
    return d.get("type", "?")


def render_figure(rgb, depth, acc, path, gt=None, depth_range=None) -> Path:
    """Rendered colour, depth and occupancy side by side (ground truth first when given)."""
    panels = ([("ground truth", gt, None)] if gt is not None else []) + [
        ("render", rgb, None), ("depth", depth, "viridis"), ("occupancy", acc, "magma")]
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3.3))
    for ax, (title, img, cmap) in zip(axes, panels):
        if title == "depth":
            lo, hi = depth_range if depth_range else (np.nanmin(img), np.nanmax(img))
            ax.imshow(img, cmap=cmap, vmin=lo, vmax=hi, interpolation="nearest")
            ax.set_title(title, fontsize=9)
            ax.axis("off")
        elif cmap is not None:
            ax.imshow(img, cmap=cmap, vmin=0, vmax=1, interpolation="nearest")
            ax.set_title(title, fontsize=9)
            ax.axis("off")
        else:
            _show(ax, img, title)
    return _save(fig, path)


def loss_curve_figure(records: list, path) -> Path:
    """Loss curves from newline-delimited log records, one line per (stage, loss)."""
    series: dict = {}
    for r in records:
        series.setdefault((r["stage"], r["loss"]), []).append((r["iteration"], r["value"]))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for (stage, name), pts in sorted(series.items()):
        pts.sort()
        it, val = zip(*pts)
        ax.plot(it, val, label=f"{stage}/{name}", lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    if series:
        ax.legend(fontsize=7)
    return _save(fig, path)
