"""Image-quality and overlap metrics plus the evaluation harness for generated sets."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import zoom
from scipy.spatial.distance import pdist

from .errors import ShapeError

PSNR_CAP = 100.0
BM_THRESHOLD = 0.05
TUMOR_THRESHOLD = 0.7


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB."""
    a, b = _pair(a, b)
    if peak <= 0:
        raise ShapeError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def ssim_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("ijkl,kl->ij", sliding_window_view(x, w.shape), w)


def ssim(a, b, data_range: float = 1.0, window: int = 7, sigma: float = 1.5) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over all full windows."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ShapeError("ssim expects 2-D images")
    if a.shape[0] < window or a.shape[1] < window:
        raise ShapeError(f"image {a.shape} smaller than the {window}x{window} window")
    w = ssim_window(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a * mu_a
    var_b = _filter_valid(b * b, w) - mu_b * mu_b
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mmd_features(images, grid: int = 8) -> np.ndarray:
    """Flattened ``grid x grid`` area-averaged thumbnails, one row per image."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 4:
        imgs = imgs[:, 0]
    if imgs.ndim != 3:
        raise ShapeError(f"expected a stack of 2-D images, got {imgs.shape}")
    n, h, w = imgs.shape
    if h % grid == 0 and w % grid == 0:
        small = imgs.reshape(n, grid, h // grid, grid, w // grid).mean(axis=(2, 4))
    else:
        small = np.stack([zoom(im, (grid / h, grid / w), order=1) for im in imgs])
    return small.reshape(n, -1)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    d = pdist(np.vstack([x, y]))
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


def rbf_gram(x: np.ndarray, y: np.ndarray, bandwidth: float) -> np.ndarray:
    d2 = np.sum(x * x, 1)[:, None] + np.sum(y * y, 1)[None, :] - 2.0 * x @ y.T
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * bandwidth * bandwidth))


def mmd(set_a, set_b, bandwidth: Optional[float] = None, grid: int = 8) -> float:
    """Unbiased squared MMD with an RBF kernel on downsampled images.

    Equal-size sets use the paired U-statistic over ``i != j`` of
    ``k(a_i, a_j) + k(b_i, b_j) - k(a_i, b_j) - k(a_j, b_i)``, which is
    exactly 0 when the two sets are the same sequence. Unequal sizes use
    the two-sample form with a full cross term.
    """
    x = mmd_features(set_a, grid)
    y = mmd_features(set_b, grid)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ShapeError("unbiased MMD needs at least two images per set")
    if bandwidth is None:
        bandwidth = median_bandwidth(x, y)
    kxx = rbf_gram(x, x, bandwidth)
    kyy = rbf_gram(y, y, bandwidth)
    kxy = rbf_gram(x, y, bandwidth)
    if m == n:
        h = kxx + kyy - kxy - kxy.T
        np.fill_diagonal(h, 0.0)
        return float(h.sum() / (m * (m - 1)))
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def dice(pred, gt) -> float:
    """Dice overlap of two binary masks; two empty masks score 1."""
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    for m in (p, g):
        if m.dtype != bool and not np.all((m == 0) | (m == 1)):
            raise ShapeError("dice expects binary masks")
    p = p.astype(bool)
    g = g.astype(bool)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(p & g)) / total


def segment(image: np.ndarray, bm_threshold: float = BM_THRESHOLD,
            tumor_threshold: float = TUMOR_THRESHOLD):
    """Brain and tumour masks of a [0, 1] image by intensity thresholding."""
    bm = image > bm_threshold
    return bm, bm & (image > tumor_threshold)


@dataclass
class MetricReport:
    rows: List[Dict[str, float]]
    mmd: float
    meta: Dict[str, object] = field(default_factory=dict)

    COLUMNS = ("index", "psnr", "ssim", "dsc_tumor", "dsc_bm")

    def aggregate(self) -> Dict[str, Dict[str, float]]:
        out: Dict[str, Dict[str, float]] = {}
        for col in self.COLUMNS[1:]:
            vals = np.array([r[col] for r in self.rows], dtype=np.float64)
            out[col] = {"mean": float(vals.mean()), "std": float(vals.std())}
        out["mmd"] = {"mean": self.mmd, "std": 0.0}
        return out

    def mean(self, col: str) -> float:
        return self.aggregate()[col]["mean"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            for key in ("model", "config_hash", "build"):
                if key in self.meta:
                    fh.write(f"# {key}={self.meta[key]}\n")
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["index"]] + [repr(float(r[c])) for c in self.COLUMNS[1:]])

    def write_json(self, path) -> None:
        payload = {"meta": self.meta, "aggregate": self.aggregate(), "per_sample": self.rows}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


def read_report_csv(path) -> List[Dict[str, float]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [{k: (int(v) if k == "index" else float(v)) for k, v in row.items()} for row in csv.DictReader(lines)]


def evaluate_run(generated, reference, tumors, brains: Optional[Sequence[np.ndarray]] = None,
                 meta: Optional[dict] = None) -> MetricReport:
    """Score generated [0, 1] images against aligned references and their masks.

    Tumour DSC compares the thresholded generated tumour with the
    conditioning tumour mask; brain DSC does the same for the brain mask.
    """
    gen = np.asarray(generated, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if gen.ndim == 4:
        gen = gen[:, 0]
    if ref.ndim == 4:
        ref = ref[:, 0]
    if gen.shape != ref.shape or len(tumors) != len(gen):
        raise ShapeError(f"misaligned sets: generated {gen.shape}, reference {ref.shape}, {len(tumors)} masks")
    if brains is None:
        brains = [segment(r)[0] for r in ref]
    rows = []
    for i in range(len(gen)):
        bm, tum = segment(gen[i])
        rows.append({
            "index": i,
            "psnr": psnr(gen[i], ref[i]),
            "ssim": ssim(gen[i], ref[i]),
            "dsc_tumor": dice(tum, np.asarray(tumors[i], dtype=bool)),
            "dsc_bm": dice(bm, np.asarray(brains[i], dtype=bool)),
        })
    value = mmd(gen, ref) if len(gen) >= 2 else float("nan")
    return MetricReport(rows=rows, mmd=value, meta=dict(meta or {}))
