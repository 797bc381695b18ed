"""DDPM noise schedule, forward/reverse processes and the convolutional denoiser.

Convention: ``alpha_bars[t - 1]`` is the cumulative product of ``1 - beta_s``
for ``s = 1..t`` so that step ``t = 1`` has ``alpha_bar = alpha_1``. The
simplified training objective uses this cumulative product inside
``x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, UsageError
from .tensor_nn import (
    DTYPE,
    Adam,
    Conv2d,
    Dense,
    save_checkpoint,
    silu,
    silu_grad,
    upsample2,
    upsample2_backward,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_step(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"diffusion step {t} outside 1..{self.T}")
        return t


def linear_schedule(T: int = 400, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError("T must be at least 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def normalize(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities to the [-1, 1] diffusion space."""
    return (2.0 * img - 1.0).astype(DTYPE)


def denormalize(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0).astype(DTYPE)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noise ``x0`` to step ``t``; ``t`` is a scalar or one step per batch element."""
    t = sched.check_step(t)
    ab = sched.alpha_bars[t - 1]
    if ab.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(np.result_type(x0, eps), copy=False)


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(DTYPE)


class DenoiserNet:
    """Three-level convolutional encoder/decoder predicting the added noise.

    Every level runs ``conv -> (+time) -> SiLU -> conv -> SiLU``; levels two
    and three downsample with a stride-2 convolution. Optional control maps
    (one per level, shaped like that level's encoder output) are added to the
    encoder outputs before they feed the skip connections and the next level.
    """

    def __init__(self, widths: Sequence[int] = (32, 64, 128), temb_dim: int = 32, seed: int = 0,
                 in_channels: int = 1):
        if len(widths) != 3:
            raise ConfigError("DenoiserNet has exactly three levels")
        rng = np.random.default_rng(seed)
        self.widths = tuple(int(w) for w in widths)
        self.temb_dim = temb_dim
        c1, c2, c3 = self.widths
        hidden = 2 * temb_dim
        self.t_dense = Dense(temb_dim, hidden, rng)
        self.t_proj = [Dense(hidden, c, rng) for c in self.widths]
        self.conv_a = [
            Conv2d(in_channels, c1, 3, 1, rng=rng),
            Conv2d(c1, c2, 3, 2, rng=rng),
            Conv2d(c2, c3, 3, 2, rng=rng),
        ]
        self.conv_b = [Conv2d(c, c, 3, 1, rng=rng) for c in self.widths]
        self.conv_dec = [Conv2d(c3 + c2, c2, 3, 1, rng=rng), Conv2d(c2 + c1, c1, 3, 1, rng=rng)]
        self.conv_out = Conv2d(c1, in_channels, 3, 1, rng=rng)
        self._cache: Optional[dict] = None

    # -- parameter bookkeeping -------------------------------------------------
    def _layers(self):
        yield "t_dense", self.t_dense
        for i, layer in enumerate(self.t_proj):
            yield f"t_proj{i}", layer
        for i, layer in enumerate(self.conv_a):
            yield f"enc{i}.a", layer
        for i, layer in enumerate(self.conv_b):
            yield f"enc{i}.b", layer
        for i, layer in enumerate(self.conv_dec):
            yield f"dec{i}", layer
        yield "out", self.conv_out

    def parameters(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name, layer in self._layers():
            out.update(layer.parameters(name))
        return out

    def gradients(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name, layer in self._layers():
            out.update(layer.gradients(name))
        return out

    def level_shapes(self, height: int, width: int) -> List[Tuple[int, int, int]]:
        shapes = []
        for c in self.widths:
            shapes.append((c, height, width))
            height, width = (height + 1) // 2, (width + 1) // 2
        return shapes

    # -- forward / backward ----------------------------------------------------
    def forward(self, x: np.ndarray, t, controls: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"expected (N, C, H, W) input, got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError("spatial extents must be divisible by 4")
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        if controls is not None and len(controls) != 3:
            raise ShapeError(f"expected 3 control maps, got {len(controls)}")

        ta = self.t_dense(timestep_embedding(t, self.temb_dim))
        temb = silu(ta)
        pre_a, pre_b, skips = [], [], []
        h = x
        for lvl in range(3):
            a = self.conv_a[lvl](h) + self.t_proj[lvl](temb)[:, :, None, None]
            b = self.conv_b[lvl](silu(a))
            e = silu(b)
            if controls is not None:
                if controls[lvl].shape[1:] != e.shape[1:]:
                    raise ShapeError(f"control map {lvl} has shape {controls[lvl].shape[1:]}, expected {e.shape[1:]}")
                e = e + controls[lvl]
            pre_a.append(a)
            pre_b.append(b)
            skips.append(e)
            h = e

        pre_dec = []
        d = skips[2]
        for i, skip in enumerate((skips[1], skips[0])):
            z = self.conv_dec[i](np.concatenate([upsample2(d), skip], axis=1))
            pre_dec.append(z)
            d = silu(z)
        out = self.conv_out(d)
        self._cache = {"ta": ta, "pre_a": pre_a, "pre_b": pre_b, "pre_dec": pre_dec}
        return out

    __call__ = forward

    def backward(self, grad_out: np.ndarray, need_param_grads: bool = True) -> List[np.ndarray]:
        """Backpropagate ``grad_out``; return gradients w.r.t. the three control maps.

        With ``need_param_grads=False`` only activation gradients are computed,
        which is all a frozen network needs during control training.
        """
        if self._cache is None:
            raise UsageError("backward called before forward")
        c = self._cache
        wp = need_param_grads
        c1, c2, c3 = self.widths

        g = self.conv_out.backward(grad_out, wp)
        g = g * silu_grad(c["pre_dec"][1])
        g = self.conv_dec[1].backward(g, wp)
        g_skip = [g[:, c2:], None, None]
        g = upsample2_backward(g[:, :c2])
        g = g * silu_grad(c["pre_dec"][0])
        g = self.conv_dec[0].backward(g, wp)
        g_skip[1] = g[:, c3:]
        g_skip[2] = upsample2_backward(g[:, :c3])

        control_grads: List[Optional[np.ndarray]] = [None, None, None]
        g_temb = None
        for lvl in (2, 1, 0):
            ge = g_skip[lvl]
            control_grads[lvl] = ge
            gb = ge * silu_grad(c["pre_b"][lvl])
            gh = self.conv_b[lvl].backward(gb, wp)
            ga = gh * silu_grad(c["pre_a"][lvl])
            gt = self.t_proj[lvl].backward(ga.sum(axis=(2, 3)), wp)
            g_temb = gt if g_temb is None else g_temb + gt
            gin = self.conv_a[lvl].backward(ga, wp)
            if lvl > 0:
                g_skip[lvl - 1] = g_skip[lvl - 1] + gin
        if wp:
            self.t_dense.backward(g_temb * silu_grad(c["ta"]), wp)
        return control_grads


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Per-element mean squared error and its gradient w.r.t. ``pred``."""
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype, copy=False)


def ddpm_loss(net, x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule,
              controls=None, need_param_grads: bool = True):
    """Simplified DDPM objective ``mean |eps - eps_theta(x_t, t)|^2``.

    Returns ``(loss, param_grads, grad_pred)``; ``param_grads`` is ``None``
    when ``net`` has no ``gradients`` method (e.g. analytic stand-ins).
    """
    xt = q_sample(x0, t, eps, sched)
    pred = net(xt, t, controls)
    loss, grad = mse_loss(pred, eps)
    if not np.isfinite(loss):
        raise NumericError("non-finite diffusion loss")
    grads = None
    if hasattr(net, "backward"):
        net.backward(grad, need_param_grads)
        if need_param_grads:
            grads = net.gradients()
    return loss, grads, grad


def ancestral_sample(net, sched: NoiseSchedule, seed: int, shape: Tuple[int, int] = (32, 32),
                     n: int = 1, controls=None, x_T: Optional[np.ndarray] = None,
                     callback: Optional[Callable[[int, np.ndarray], None]] = None) -> np.ndarray:
    """Run the DDPM reverse chain with reverse variance ``beta_t``.

    Returns ``(n, 1, H, W)`` samples in diffusion space ([-1, 1] nominal,
    not clipped). The same ``seed`` yields bit-identical output.
    """
    rng = np.random.default_rng(seed)
    if x_T is None:
        x = rng.standard_normal((n, 1) + tuple(shape)).astype(DTYPE)
    else:
        x = np.array(x_T, dtype=DTYPE)
        n = x.shape[0]
    for t in range(sched.T, 0, -1):
        beta = sched.betas[t - 1]
        eps = net(x, np.full(n, t), controls)
        mean = (x - (beta / np.sqrt(1.0 - sched.alpha_bars[t - 1])) * eps) / np.sqrt(sched.alphas[t - 1])
        if t > 1:
            x = (mean + np.sqrt(beta) * rng.standard_normal(x.shape)).astype(DTYPE)
        else:
            x = mean.astype(DTYPE)
        if callback is not None:
            callback(t, x)
    return x


def train_base(
    images: np.ndarray,
    sched: NoiseSchedule,
    epochs: int = 1,
    lr: float = 2.5e-5,
    batch: int = 2,
    seed: int = 0,
    widths: Sequence[int] = (32, 64, 128),
    max_steps: Optional[int] = None,
    log_path=None,
    checkpoint_path=None,
    net: Optional[DenoiserNet] = None,
) -> Tuple[DenoiserNet, List[float]]:
    """Train the unconditional denoiser on ``images`` (M, H, W) in [0, 1]."""
    images = np.asarray(images)
    if images.ndim != 3 or len(images) == 0:
        raise ConfigError("training set must be a nonempty (M, H, W) array")
    if batch < 1 or epochs < 0:
        raise ConfigError("batch must be positive and epochs nonnegative")
    rng = np.random.default_rng(seed)
    if net is None:
        net = DenoiserNet(widths, seed=seed)
    opt = Adam(net.parameters(), lr=lr)
    data = normalize(images)[:, None]
    losses: List[float] = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), batch):
            if max_steps is not None and step >= max_steps:
                break
            idx = order[start:start + batch]
            x0 = data[idx]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape).astype(DTYPE)
            loss, grads, _ = ddpm_loss(net, x0, t, eps, sched)
            opt.step(grads)
            losses.append(loss)
            step += 1
        log.info("train-base epoch %d: mean loss %.5f", epoch, np.mean(losses[-max(1, len(data) // batch):]))
    if log_path is not None:
        write_loss_log(log_path, losses)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, net.parameters(),
                        {"kind": "denoiser", "widths": list(net.widths), "temb_dim": net.temb_dim})
    return net, losses


def write_loss_log(path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
