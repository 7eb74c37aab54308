"""SVG emission: precision-recall curves, the IoU x METEOR cell heatmap, and
detection overlays for inference output."""

from __future__ import annotations

import base64
import io
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image


def pr_curves_svg(curves: dict[str, dict], path) -> str:
    """One figure with the per-category PR curves at IoU 0.5."""
    fig, ax = plt.subplots(figsize=(6, 5))
    for cat, c in sorted(curves.items()):
        ax.plot([0.0] + list(c["recall"]), [1.0] + list(c["precision"]), label=cat, lw=1.2)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title("precision-recall (IoU 0.5)")
    if curves:
        ax.legend(fontsize=6, ncol=2)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return str(path)


def densecap_heatmap_svg(report: dict, path) -> str:
    """5x6 AP heatmap over the (IoU, METEOR) threshold grid."""
    cells = np.array(report["per_cell"], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(cells, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(cells.shape[1]), [f"{t:g}" for t in report["meteor_thresholds"]])
    ax.set_yticks(range(cells.shape[0]), [f"{t:g}" for t in report["iou_thresholds"]])
    ax.set_xlabel("METEOR threshold")
    ax.set_ylabel("IoU threshold")
    ax.set_title(f"dense-captioning AP per cell (mAP {report['mAP']:.3f})")
    for i in range(cells.shape[0]):
        for j in range(cells.shape[1]):
            ax.text(j, i, f"{cells[i, j]:.2f}", ha="center", va="center",
                    color="w" if cells[i, j] < 0.6 else "k", fontsize=7)
    fig.colorbar(im, ax=ax)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return str(path)


def _image_png_b64(image: np.ndarray) -> str:
    u8 = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def overlay_svg(image: np.ndarray, detections, path, upscale: int = 6) -> str:
    """Hand-rolled SVG: the image with labeled detection boxes on top."""
    h, w = image.shape[1], image.shape[2]
    W, H = w * upscale, h * upscale
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}">',
        f'<image href="data:image/png;base64,{_image_png_b64(image)}" '
        f'width="{W}" height="{H}" preserveAspectRatio="none" '
        f'style="image-rendering:pixelated"/>',
    ]
    for det in detections:
        x1, y1, x2, y2 = (float(v) * upscale for v in np.asarray(det.box).reshape(4))
        color = "#ff4444" if det.kind.value == "unknown_caption" else "#44ff44"
        parts.append(
            f'<rect x="{x1:.1f}" y="{y1:.1f}" width="{x2 - x1:.1f}" height="{y2 - y1:.1f}" '
            f'fill="none" stroke="{color}" stroke-width="2"/>'
        )
        label = f"{det.label} ({det.score:.2f})"
        parts.append(
            f'<text x="{x1 + 2:.1f}" y="{max(y1 - 4, 10):.1f}" font-size="12" '
            f'fill="{color}" font-family="monospace">{label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts))
    return str(path)
