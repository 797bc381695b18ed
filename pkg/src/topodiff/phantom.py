"""Procedural brain-like phantoms with known anatomy and tumour masks.

Each phantom carries four anatomy masks (brain, white matter, cortical grey
matter, lateral ventricles), a tumour mask and a rendered single-channel
intensity image in [0, 1].
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .cubical import betti_at
from .errors import ConfigError, DataError

SUPPORTED_SIZES = (32, 64, 128)

# (centre, half-width) of the per-structure intensity bands
BANDS = {
    "bm": (0.35, 0.05),
    "wmt": (0.55, 0.05),
    "cgm": (0.45, 0.05),
    "lv": (0.15, 0.05),
    "tumor": (0.85, 0.05),
}
TEXTURE_SIGMA = 0.02
TEXTURE_CLIP = 0.045
HOLE_PROBABILITY = 0.3


@dataclass
class AnatomySet:
    bm: np.ndarray
    wmt: np.ndarray
    cgm: np.ndarray
    lv: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.bm, self.wmt, self.cgm, self.lv]).astype(np.float32)

    def check(self) -> List[str]:
        """Return the violated subset/disjointness invariants (empty if valid)."""
        problems = []
        for name in ("wmt", "cgm", "lv"):
            if np.any(getattr(self, name) & ~self.bm):
                problems.append(f"{name} not inside bm")
        for a, b in (("wmt", "cgm"), ("wmt", "lv"), ("cgm", "lv")):
            if np.any(getattr(self, a) & getattr(self, b)):
                problems.append(f"{a} overlaps {b}")
        return problems


@dataclass
class PhantomSample:
    image: np.ndarray
    anatomy: AnatomySet
    tumor: np.ndarray
    seed: int
    has_hole: bool = False

    @property
    def size(self) -> int:
        return self.image.shape[0]


def _ellipse_radius(shape, cy, cx, ay, ax, angle):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return np.sqrt((u / ax) ** 2 + (v / ay) ** 2), np.arctan2(v, u)


def _make_anatomy(rng: np.random.Generator, size: int) -> AnatomySet:
    shape = (size, size)
    cy = size / 2 - 0.5 + rng.uniform(-0.03, 0.03) * size
    cx = size / 2 - 0.5 + rng.uniform(-0.03, 0.03) * size
    ay = rng.uniform(0.40, 0.46) * size
    ax = rng.uniform(0.33, 0.40) * size
    rho, theta = _ellipse_radius(shape, cy, cx, ay, ax, rng.uniform(-0.2, 0.2))
    bm = rho <= 1.0
    rho_c = 1.0 - rng.uniform(0.16, 0.22)
    cgm = bm & (rho > rho_c)

    wobble = 1.0 + 0.08 * np.cos(3 * theta + rng.uniform(0, 2 * np.pi))
    rho_w = rho_c - rng.uniform(0.06, 0.12)
    wmt_raw = (rho / wobble) <= rho_w

    lv = np.zeros(shape, dtype=bool)
    off = rng.uniform(0.07, 0.10) * size
    vy = cy - rng.uniform(0.0, 0.05) * size
    for side in (-1.0, 1.0):
        r_lv, _ = _ellipse_radius(shape, vy, cx + side * off, rng.uniform(0.10, 0.14) * size,
                                  rng.uniform(0.04, 0.06) * size, side * rng.uniform(0.0, 0.3))
        lv |= r_lv <= 1.0
    lv &= bm & ~cgm
    wmt = wmt_raw & bm & ~cgm & ~lv
    return AnatomySet(bm=bm, wmt=wmt, cgm=cgm, lv=lv)


def _make_tumor(rng: np.random.Generator, anatomy: AnatomySet, with_hole: bool, size: int) -> np.ndarray:
    shape = (size, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    inside = np.argwhere(anatomy.bm & ~anatomy.cgm)
    cy, cx = inside[rng.integers(len(inside))] + rng.uniform(-0.5, 0.5, 2)
    radius = rng.uniform(0.14, 0.18) * size if with_hole else rng.uniform(0.09, 0.15) * size
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    profile = np.ones(shape)
    for k in (2, 3, 4):
        profile += rng.uniform(0.0, 0.12) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    tumor = dist <= radius * profile
    if with_hole:
        tumor &= dist > rng.uniform(0.30, 0.40) * radius
    return tumor


def tumor_betti(tumor: np.ndarray):
    """(b0, b1) of the mask, read off the sublevel filtration ``1 - tumor`` at 0.5."""
    rows = np.flatnonzero(tumor.any(axis=1))
    cols = np.flatnonzero(tumor.any(axis=0))
    if rows.size == 0:
        return 0, 0
    # one-pixel margin of background keeps the cropped topology identical
    sub = np.ones((rows[-1] - rows[0] + 3, cols[-1] - cols[0] + 3))
    sub[1:-1, 1:-1] = 1.0 - tumor[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    return betti_at(sub, 0.5, 0), betti_at(sub, 0.5, 1)


def generate_phantom(seed: int, size: int = 32) -> PhantomSample:
    """Deterministic phantom for ``seed``; tumours are resampled until their topology is as intended."""
    if size not in SUPPORTED_SIZES:
        raise ConfigError(f"phantom size must be one of {SUPPORTED_SIZES}, got {size}")
    rng = np.random.default_rng([seed, size])
    anatomy = _make_anatomy(rng, size)
    with_hole = bool(rng.random() < HOLE_PROBABILITY)
    for _ in range(200):
        tumor = _make_tumor(rng, anatomy, with_hole, size)
        if not tumor.any() or np.any(tumor & ~anatomy.bm):
            continue
        if tumor_betti(tumor) == (1, int(with_hole)):
            break
    else:  # pragma: no cover - geometry makes this practically unreachable
        raise DataError(f"could not place a valid tumour for seed {seed}")
    image = render_image(anatomy, tumor, seed)
    return PhantomSample(image=image, anatomy=anatomy, tumor=tumor, seed=seed, has_hole=with_hole)


def render_image(anatomy: AnatomySet, tumor: np.ndarray, seed: int) -> np.ndarray:
    """Piecewise-constant intensities per structure plus clipped Gaussian texture inside the brain."""
    rng = np.random.default_rng([seed, 7919])
    level = {k: rng.uniform(c - hw, c + hw) for k, (c, hw) in BANDS.items()}
    img = np.zeros(anatomy.bm.shape, dtype=np.float64)
    img[anatomy.bm] = level["bm"]
    img[anatomy.cgm] = level["cgm"]
    img[anatomy.wmt] = level["wmt"]
    img[anatomy.lv] = level["lv"]
    img[tumor.astype(bool)] = level["tumor"]
    texture = np.clip(rng.normal(0.0, TEXTURE_SIGMA, img.shape), -TEXTURE_CLIP, TEXTURE_CLIP)
    img = np.where(anatomy.bm, img + texture, img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_dataset(count: int, size: int = 32, seed: int = 0) -> List[PhantomSample]:
    return [generate_phantom(seed * 1_000_003 + i, size) for i in range(count)]


# -- dataset file format --------------------------------------------------------

_MAGIC = b"TDPH"
_MASKS = ("bm", "wmt", "cgm", "lv", "tumor")


def _record_bytes(size: int) -> int:
    return 4 * size * size + len(_MASKS) * ((size * size + 7) // 8)


def save_dataset(path, samples: Sequence[PhantomSample]) -> None:
    """Write samples as magic, uint64 header length, JSON header, then fixed-size records.

    A record is the image as little-endian float32 followed by the five masks
    bit-packed in the order bm, wmt, cgm, lv, tumor.
    """
    if not samples:
        raise DataError("refusing to write an empty dataset")
    size = samples[0].size
    header = {
        "format": "topodiff-phantoms",
        "version": 1,
        "count": len(samples),
        "size": size,
        "record_bytes": _record_bytes(size),
        "fields": [{"name": "image", "dtype": "<f4", "shape": [size, size]}]
        + [{"name": m, "dtype": "bits", "shape": [size, size]} for m in _MASKS],
        "seeds": [int(s.seed) for s in samples],
        "has_hole": [bool(s.has_hole) for s in samples],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for s in samples:
            if s.size != size:
                raise DataError(f"sample seed {s.seed} has size {s.size}, dataset size is {size}")
            fh.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            masks = (s.anatomy.bm, s.anatomy.wmt, s.anatomy.cgm, s.anatomy.lv, s.tumor)
            for m in masks:
                fh.write(np.packbits(np.asarray(m, dtype=bool).ravel()).tobytes())


def load_dataset(path) -> List[PhantomSample]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a phantom dataset")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12:12 + hlen])
        count, size, rec = int(header["count"]), int(header["size"]), int(header["record_bytes"])
        seeds, holes = header["seeds"], header["has_hole"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt header") from exc
    if rec != _record_bytes(size) or len(seeds) != count or len(holes) != count:
        raise DataError(f"{path}: header fields are inconsistent")
    payload = raw[12 + hlen:]
    if len(payload) < count * rec:
        bad = len(payload) // rec
        raise DataError(f"{path}: truncated payload, record {bad} (seed {seeds[bad]}) is incomplete")
    if len(payload) > count * rec:
        raise DataError(f"{path}: payload holds more than the {count} records in the header")
    n_pix = size * size
    mask_bytes = (n_pix + 7) // 8
    samples = []
    for i in range(count):
        off = i * rec
        img = np.frombuffer(payload, dtype="<f4", count=n_pix, offset=off).reshape(size, size).astype(np.float32)
        off += 4 * n_pix
        masks = []
        for _ in _MASKS:
            bits = np.frombuffer(payload, dtype=np.uint8, count=mask_bytes, offset=off)
            masks.append(np.unpackbits(bits)[:n_pix].reshape(size, size).astype(bool))
            off += mask_bytes
        anatomy = AnatomySet(*masks[:4])
        samples.append(PhantomSample(img, anatomy, masks[4], int(seeds[i]), bool(holes[i])))
    return samples


def stack_samples(samples: Sequence[PhantomSample]):
    """Arrays for training: images (M, H, W), tumours (M, H, W), anatomy (M, 4, H, W)."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    tumors = np.stack([s.tumor for s in samples]).astype(bool)
    anatomy = np.stack([s.anatomy.stack() for s in samples]).astype(np.float32)
    return images, tumors, anatomy
