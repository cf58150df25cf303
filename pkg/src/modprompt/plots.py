from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image as PILImage, ImageDraw  # noqa: E402

from .data import to_uint8  # noqa: E402
from .evaluation import RECALL_POINTS, pr_curve  # noqa: E402

GT_COLOR = (255, 255, 0)
DET_COLOR = (255, 0, 0)


def plot_pr(flags, num_gt: int, out_path, title: str = "") -> tuple[np.ndarray, np.ndarray]:
    """Raw PR points plus the interpolated envelope. Returns the plotted
    (recall points, interpolated precision)."""
    recall, precision, interp = pr_curve(flags, num_gt)
    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    try:
        if len(recall):
            ax.plot(recall, precision, "o", ms=3, color="tab:gray", label="raw")
        ax.step(RECALL_POINTS, interp, where="post", color="tab:red", label="interpolated")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(title or f"AP = {interp.mean():.4f}")
        ax.legend(loc="lower left")
        fig.savefig(out_path)
    finally:
        plt.close(fig)
    return RECALL_POINTS.copy(), interp


def overlay_detections(image, dets, gts, out_path, vocab=None, scale: int = 4) -> PILImage.Image:
    """Ground truth in yellow, detections in red with their scores."""
    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    canvas = PILImage.fromarray(to_uint8(pixels)).resize(
        (pixels.shape[1] * scale, pixels.shape[0] * scale), PILImage.NEAREST
    )
    draw = ImageDraw.Draw(canvas)
    for box in gts.boxes if hasattr(gts, "boxes") else gts:
        draw.rectangle([v * scale for v in box], outline=GT_COLOR, width=2)
    for d in dets:
        box = [v * scale for v in d.box]
        draw.rectangle(box, outline=DET_COLOR, width=2)
        name = vocab[d.category] if vocab else str(d.category)
        draw.text((box[0] + 2, box[1] + 1), f"{name} {d.score:.2f}", fill=DET_COLOR)
    canvas.save(out_path)
    return canvas
