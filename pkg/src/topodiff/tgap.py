"""Topology loss on the tumour region of predicted vs. reference noise.

Pipeline for each noise field: linear kernel -> crop to the padded tumour box
-> soft threshold into a filtration -> sublevel persistence (dims 0 and 1).
The loss is the sum over dimensions of ``sum cost**r`` of the optimal
diagram matching. Its gradient flows back through the witness pixels of the
matched points, the soft-threshold derivative, the crop and the kernel.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .cubical import PersistenceDiagram, sublevel_pd
from .diffusion import mse_loss
from .errors import ConfigError, NumericError, ShapeError
from .tensor_nn import conv2d_forward, sigmoid
from .wasserstein import matching_gradient, wasserstein


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    if size % 2 != 1:
        raise ConfigError("kernel size must be odd")
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def make_kernel(kind: str = "gauss", size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """``gauss`` smooths, ``sharpen`` is ``2*delta - gauss``, ``identity`` is a delta."""
    delta = np.zeros((size, size))
    delta[size // 2, size // 2] = 1.0
    if kind == "gauss":
        return gaussian_kernel(size, sigma)
    if kind == "sharpen":
        return 2.0 * delta - gaussian_kernel(size, sigma)
    if kind == "identity":
        return delta
    raise ConfigError(f"unknown kernel {kind!r}")


@dataclass(frozen=True)
class SoftThreshold:
    tau: float = 0.5
    s: float = 0.1

    def __post_init__(self):
        if not self.s > 0:
            raise ConfigError("soft-threshold temperature must be positive")


@dataclass
class TGAPConfig:
    lam: float = 0.005
    r: float = 2.0
    cap: float = 1.0
    kernel: str = "gauss"
    kernel_size: int = 5
    kernel_sigma: float = 1.0
    tau: float = 0.5
    s: float = 0.1
    pad: int = 2
    target: str = "eps"  # or "x0"
    t_gate: Optional[float] = 0.5  # fraction of T; None applies the loss at every step
    drop_essential: bool = False
    filtration: str = "soft"  # or "distance" (analysis only, no gradient)
    mse_on: str = "noise"  # or "signal"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("TGAP weight must be nonnegative")
        if self.cap < 1.0:
            raise ConfigError("cap must be at least 1 for soft-thresholded filtrations")
        if self.target not in ("eps", "x0"):
            raise ConfigError(f"unknown TGAP target {self.target!r}")
        if self.filtration not in ("soft", "distance"):
            raise ConfigError(f"unknown filtration mode {self.filtration!r}")
        if self.mse_on not in ("noise", "signal"):
            raise ConfigError(f"unknown MSE mode {self.mse_on!r}")

    @property
    def soft(self) -> SoftThreshold:
        return SoftThreshold(self.tau, self.s)

    def kernel_array(self) -> np.ndarray:
        return make_kernel(self.kernel, self.kernel_size, self.kernel_sigma)


def extract_signal(eps: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 2-D convolution of an H x W field with ``kernel``."""
    eps = np.asarray(eps, dtype=np.float64)
    k = kernel.shape[0]
    if eps.ndim != 2:
        raise ShapeError("extract_signal expects an H x W field")
    if k > eps.shape[0] or k > eps.shape[1]:
        raise ShapeError(f"kernel {k}x{k} larger than field {eps.shape}")
    flipped = np.ascontiguousarray(kernel[::-1, ::-1])
    return conv2d_forward(eps[None, None], flipped[None, None], padding=k // 2)[0, 0]


def extract_signal_adjoint(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`extract_signal` (correlation with the unflipped kernel)."""
    k = kernel.shape[0]
    return conv2d_forward(np.asarray(grad, dtype=np.float64)[None, None], kernel[None, None], padding=k // 2)[0, 0]


@dataclass
class TumorCrop:
    values: np.ndarray  # I * T inside the box
    mask: np.ndarray  # tumour pixels inside the box
    box: Tuple[int, int, int, int]  # row0, row1, col0, col1 (half-open)
    fill: float = 1.0

    @property
    def empty(self) -> bool:
        return not self.mask.any()


def crop_to_tumor(signal: np.ndarray, tumor: np.ndarray, pad: int = 2, fill: float = 1.0) -> TumorCrop:
    signal = np.asarray(signal, dtype=np.float64)
    tumor = np.asarray(tumor).astype(bool)
    if signal.shape != tumor.shape:
        raise ShapeError(f"signal {signal.shape} and tumour mask {tumor.shape} differ")
    if not tumor.any():
        return TumorCrop(np.zeros((0, 0)), np.zeros((0, 0), dtype=bool), (0, 0, 0, 0), fill)
    rows = np.flatnonzero(tumor.any(axis=1))
    cols = np.flatnonzero(tumor.any(axis=0))
    h, w = tumor.shape
    r0, r1 = max(rows[0] - pad, 0), min(rows[-1] + pad + 1, h)
    c0, c1 = max(cols[0] - pad, 0), min(cols[-1] + pad + 1, w)
    mask = tumor[r0:r1, c0:c1]
    return TumorCrop(signal[r0:r1, c0:c1] * mask, mask.copy(), (r0, r1, c0, c1), fill)


def soft_filtration(crop, soft: SoftThreshold, mask: Optional[np.ndarray] = None,
                    fill: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``f = 1 - sigmoid((I - tau)/s)`` and ``df/dI``.

    Bright pixels get low values and enter the sublevel filtration first.
    Pixels outside ``mask`` are set to ``fill`` with zero derivative.
    """
    if isinstance(crop, TumorCrop):
        values, mask, fill = crop.values, crop.mask, crop.fill
    else:
        values = np.asarray(crop, dtype=np.float64)
    z = (values - soft.tau) / soft.s
    sg = sigmoid(z)
    f = 1.0 - sg
    df = -sg * (1.0 - sg) / soft.s
    if mask is not None:
        f = np.where(mask, f, fill)
        df = np.where(mask, df, 0.0)
    return f, df


def distance_filtration(crop: TumorCrop, soft: SoftThreshold) -> np.ndarray:
    """Hard-threshold + Euclidean distance transform variant (no gradient)."""
    inside = (crop.values > soft.tau) & crop.mask
    dist = ndimage.distance_transform_edt(inside)
    top = dist.max()
    f = 1.0 - dist / top if top > 0 else np.ones_like(dist)
    return np.where(crop.mask, f, crop.fill)


@dataclass
class TGAPResult:
    loss: float
    grad: np.ndarray
    pred_diagram: Optional[PersistenceDiagram] = None
    true_diagram: Optional[PersistenceDiagram] = None
    per_dim: dict = field(default_factory=dict)


def tgap_loss(eps_pred: np.ndarray, eps_true: np.ndarray, tumor: np.ndarray,
              config: TGAPConfig = TGAPConfig()) -> TGAPResult:
    """Topology loss between two H x W noise fields and its gradient w.r.t. ``eps_pred``."""
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    eps_true = np.asarray(eps_true, dtype=np.float64)
    if eps_pred.shape != eps_true.shape or eps_pred.ndim != 2:
        raise ShapeError("tgap_loss expects two H x W fields of equal shape")
    kernel = config.kernel_array()
    sig_pred = extract_signal(eps_pred, kernel)
    sig_true = extract_signal(eps_true, kernel)
    crop_pred = crop_to_tumor(sig_pred, tumor, config.pad)
    if crop_pred.empty:
        return TGAPResult(0.0, np.zeros_like(eps_pred))
    crop_true = crop_to_tumor(sig_true, tumor, config.pad)

    if config.filtration == "distance":
        f_pred = distance_filtration(crop_pred, config.soft)
        f_true = distance_filtration(crop_true, config.soft)
        df = np.zeros_like(f_pred)
    else:
        f_pred, df = soft_filtration(crop_pred, config.soft)
        f_true, _ = soft_filtration(crop_true, config.soft)
    if not (np.all(np.isfinite(f_pred)) and np.all(np.isfinite(f_true))):
        raise NumericError("non-finite filtration in topology loss")

    d_pred = sublevel_pd(f_pred, config.cap)
    d_true = sublevel_pd(f_true, config.cap)
    if config.drop_essential:
        d_pred, d_true = d_pred.without_essential(), d_true.without_essential()

    loss = 0.0
    grad_f = np.zeros_like(f_pred)
    per_dim = {}
    for dim in (0, 1):
        pts = d_pred.by_dim(dim)
        p, q = d_pred.array(dim), d_true.array(dim)
        _, matching = wasserstein(p, q, config.r)
        per_dim[dim] = matching.total
        loss += matching.total
        g = matching_gradient(p, q, matching, config.r)
        for point, (gb, gd) in zip(pts, g):
            grad_f[point.birth_pixel] += gb
            if point.death_pixel is not None:
                grad_f[point.death_pixel] += gd

    grad_crop = grad_f * df * crop_pred.mask
    r0, r1, c0, c1 = crop_pred.box
    grad_sig = np.zeros_like(eps_pred)
    grad_sig[r0:r1, c0:c1] = grad_crop
    grad = extract_signal_adjoint(grad_sig, kernel)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericError("non-finite topology loss or gradient")
    return TGAPResult(float(loss), grad, d_pred, d_true, per_dim)


def total_loss(eps_pred: np.ndarray, eps_true: np.ndarray, tumors: np.ndarray,
               config: TGAPConfig = TGAPConfig(), apply: Optional[Sequence[bool]] = None,
               topo_fields: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None):
    """MSE on the noises plus ``lam`` times the batch-mean topology loss.

    ``eps_pred``/``eps_true`` are (N, 1, H, W) or H x W; ``tumors`` matches
    their spatial layout. ``apply`` masks which batch elements get the
    topology term (the time gate). ``topo_fields=(pred, true, scale)`` swaps
    in other fields for the topology term (the x0 target mode); ``scale`` is
    d(pred field)/d(eps_pred) per element.

    Returns ``(loss, grad, parts)``. With ``lam == 0`` the value and gradient
    are exactly those of :func:`topodiff.diffusion.mse_loss`.
    """
    if config.lam < 0:
        raise ConfigError("TGAP weight must be nonnegative")
    single = np.ndim(eps_pred) == 2
    if single:
        eps_pred = np.asarray(eps_pred)[None, None]
        eps_true = np.asarray(eps_true)[None, None]
        tumors = np.asarray(tumors)[None]
    if config.mse_on == "signal":
        kernel = config.kernel_array()
        n = len(eps_pred)
        sp = np.stack([extract_signal(eps_pred[i, 0], kernel) for i in range(n)])
        st = np.stack([extract_signal(eps_true[i, 0], kernel) for i in range(n)])
        mse, g_sig = mse_loss(sp, st)
        grad = np.stack([extract_signal_adjoint(g_sig[i], kernel) for i in range(n)])[:, None]
        grad = grad.astype(eps_pred.dtype)
    else:
        mse, grad = mse_loss(eps_pred, eps_true)
    parts = {"mse": mse, "tgap": 0.0}
    loss = mse
    if config.lam > 0:
        n = len(eps_pred)
        topo_grad = np.zeros(eps_pred.shape, dtype=np.float64)
        topo = 0.0
        for i in range(n):
            if apply is not None and not apply[i]:
                continue
            if topo_fields is None:
                res = tgap_loss(eps_pred[i, 0], eps_true[i, 0], tumors[i], config)
                topo_grad[i, 0] = res.grad
            else:
                fp, ft, scale = topo_fields
                res = tgap_loss(fp[i, 0], ft[i, 0], tumors[i], config)
                topo_grad[i, 0] = res.grad * scale[i]
            topo += res.loss
        topo /= n
        topo_grad /= n
        parts["tgap"] = topo
        loss = mse + config.lam * topo
        grad = (grad + config.lam * topo_grad).astype(eps_pred.dtype)
    if not np.isfinite(loss):
        raise NumericError("non-finite total loss")
    if single:
        grad = grad[0, 0]
    return loss, grad, parts
