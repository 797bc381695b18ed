"""PNG output: image grids, mask overlays and persistence-diagram scatter plots."""
from __future__ import annotations

from typing import Optional

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

# RGB per overlay channel: bm, wmt, cgm, lv, tumor
OVERLAY_COLORS = np.array([
    [80, 80, 80],
    [60, 140, 255],
    [60, 200, 90],
    [250, 210, 40],
    [230, 40, 40],
], dtype=np.float64)


def _png_info(meta: Optional[dict]) -> PngInfo:
    info = PngInfo()
    for k, v in (meta or {}).items():
        info.add_text(str(k), str(v))
    return info


def to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def tile(images: np.ndarray, ncol: Optional[int] = None, gap: int = 1) -> np.ndarray:
    """Arrange (N, H, W[, 3]) images on a grid separated by ``gap`` black pixels."""
    images = np.asarray(images)
    n, h, w = images.shape[:3]
    ncol = ncol or int(np.ceil(np.sqrt(n)))
    nrow = int(np.ceil(n / ncol))
    shape = (nrow * (h + gap) - gap, ncol * (w + gap) - gap) + images.shape[3:]
    canvas = np.zeros(shape, dtype=images.dtype)
    for i in range(n):
        r, c = divmod(i, ncol)
        canvas[r * (h + gap):r * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = images[i]
    return canvas


def save_grid(images, path, ncol: Optional[int] = None, scale: int = 2, meta: Optional[dict] = None) -> None:
    grid = to_uint8(tile(np.asarray(images), ncol))
    im = Image.fromarray(grid)
    if scale > 1:
        im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    im.save(path, pnginfo=_png_info(meta))


def overlay(image: np.ndarray, masks: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Blend colour-coded masks (bm, wmt, cgm, lv, tumor) over a grey image; returns uint8 RGB."""
    rgb = np.repeat(np.clip(image, 0, 1)[..., None] * 255.0, 3, axis=-1)
    for mask, color in zip(masks, OVERLAY_COLORS):
        m = np.asarray(mask, dtype=bool)
        rgb[m] = (1 - alpha) * rgb[m] + alpha * color
    return rgb.astype(np.uint8)


def save_overlays(samples, path, scale: int = 3, meta: Optional[dict] = None) -> None:
    panels = []
    for s in samples:
        masks = [s.anatomy.bm & ~(s.anatomy.wmt | s.anatomy.cgm | s.anatomy.lv),
                 s.anatomy.wmt, s.anatomy.cgm, s.anatomy.lv, s.tumor]
        panels.append(np.concatenate([np.repeat(to_uint8(s.image)[..., None], 3, axis=-1),
                                      overlay(s.image, masks)], axis=1))
    im = Image.fromarray(tile(np.stack(panels), ncol=4, gap=2))
    im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    im.save(path, pnginfo=_png_info(meta))


def plot_diagram(diagram, path, title: str = "") -> None:
    """Scatter a persistence diagram; essential classes are drawn as triangles at the cap."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    cap = diagram.cap
    for dim, color in ((0, "tab:blue"), (1, "tab:red")):
        pts = [p for p in diagram.points if p.dim == dim]
        fin = [(p.birth, p.death) for p in pts if not p.essential]
        ess = [(p.birth, p.death) for p in pts if p.essential]
        if fin:
            a = np.array(fin)
            ax.scatter(a[:, 0], a[:, 1], s=14, c=color, label=f"H{dim}")
        if ess:
            a = np.array(ess)
            ax.scatter(a[:, 0], a[:, 1], s=24, c=color, marker="^")
    lo = min([0.0] + [p.birth for p in diagram.points])
    ax.plot([lo, cap], [lo, cap], "k--", lw=0.8)
    ax.set_xlabel("birth")
    ax.set_ylabel("death")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
