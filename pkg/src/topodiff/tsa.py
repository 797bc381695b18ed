"""Tumour + anatomy control encoder injected into a frozen denoiser.

The encoder fuses the tumour mask and the channel-summed anatomy masks into
one embedding, runs a small strided conv stack that mirrors the denoiser's
three levels and emits one control map per level through zero-initialised
1x1 convolutions. The denoiser stays frozen; only the encoder trains.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diffusion import DenoiserNet, NoiseSchedule, normalize, q_sample, write_loss_log
from .errors import ConfigError, FrozenParameterError, ShapeError, UsageError
from .phantom import AnatomySet
from .tensor_nn import DTYPE, Adam, Conv2d, checksum, save_checkpoint, silu, silu_grad
from .tgap import TGAPConfig, total_loss

log = logging.getLogger(__name__)

MODES = ("tsa", "tgap", "tsa+tgap")


def channel_fuse(anatomy) -> np.ndarray:
    """Sum the four anatomy masks over the channel axis, clamped to [0, 4].

    Accepts an :class:`AnatomySet`, a (4, H, W) array or a batch (N, 4, H, W).
    """
    if isinstance(anatomy, AnatomySet):
        shapes = {np.shape(m) for m in (anatomy.bm, anatomy.wmt, anatomy.cgm, anatomy.lv)}
        if len(shapes) != 1:
            raise ShapeError(f"anatomy masks disagree in shape: {sorted(shapes)}")
        anatomy = anatomy.stack()
    arr = np.asarray(anatomy, dtype=DTYPE)
    if arr.ndim not in (3, 4) or arr.shape[-3] != 4:
        raise ShapeError(f"expected 4 anatomy channels, got array of shape {arr.shape}")
    return np.clip(arr.sum(axis=-3), 0.0, 4.0)


@dataclass(frozen=True)
class FusionWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("fusion weights must be nonnegative")
        if self.lambda1 <= self.lambda2:
            warnings.warn(f"tumour weight {self.lambda1} does not exceed structure weight {self.lambda2}",
                          RuntimeWarning, stacklevel=3)


def _as_batch_mask(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ShapeError(f"{name} must be (H, W), (N, H, W) or (N, 1, H, W), got {np.shape(x)}")
    return arr


class ControlEncoder:
    """Mask encoder producing one additive control map per denoiser level.

    ``fusion="sum"`` builds ``z_in = l1 * conv(T) + l2 * conv(S)``;
    ``fusion="product"`` replaces the structure term by ``conv(T) * conv(S)``.
    """

    def __init__(self, widths: Sequence[int] = (32, 64, 128), hidden: int = 16,
                 weights: FusionWeights = FusionWeights(), seed: int = 0, fusion: str = "sum"):
        if len(widths) != 3:
            raise ConfigError("ControlEncoder mirrors a three-level denoiser")
        if fusion not in ("sum", "product"):
            raise ConfigError(f"unknown fusion mode {fusion!r}")
        rng = np.random.default_rng([seed, 31])
        self.widths = tuple(int(w) for w in widths)
        self.hidden = int(hidden)
        self.weights = weights
        self.fusion = fusion
        self.tumor_conv = Conv2d(1, hidden, 3, 1, rng=rng, bias=False)
        self.struct_conv = Conv2d(1, hidden, 3, 1, rng=rng, bias=False)
        self.input_conv = Conv2d(hidden, hidden, 3, 1, rng=rng)
        chans = (hidden,) + self.widths
        self.blocks = [Conv2d(chans[i], chans[i + 1], 3, 1 if i == 0 else 2, rng=rng) for i in range(3)]
        self.zero_convs = [Conv2d(c, c, 1, 1, zero=True) for c in self.widths]
        self._cache: Optional[dict] = None

    def _layers(self):
        yield "tumor_in", self.tumor_conv
        yield "struct_in", self.struct_conv
        yield "input", self.input_conv
        for i, layer in enumerate(self.blocks):
            yield f"block{i}", layer
        for i, layer in enumerate(self.zero_convs):
            yield f"zero{i}", layer

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

    def fuse(self, tumor, structure) -> np.ndarray:
        """``z_in`` from a tumour mask and a channel-fused structure field."""
        t = _as_batch_mask(tumor, "tumor")
        s = _as_batch_mask(structure, "structure")
        if t.shape != s.shape:
            raise ShapeError(f"tumour {t.shape} and structure {s.shape} shapes differ")
        ct = self.tumor_conv(t)
        cs = self.struct_conv(s)
        l1, l2 = self.weights.lambda1, self.weights.lambda2
        if self.fusion == "sum":
            z = l1 * ct + l2 * cs
        else:
            z = l1 * ct + l2 * ct * cs
        self._fuse_cache = (ct, cs)
        return z.astype(DTYPE, copy=False)

    def encode(self, z_in: np.ndarray) -> List[np.ndarray]:
        pre = [self.input_conv(z_in)]
        h = silu(pre[0])
        feats = []
        for block in self.blocks:
            p = block(h)
            pre.append(p)
            h = silu(p)
            feats.append(h)
        controls = [zc(f) for zc, f in zip(self.zero_convs, feats)]
        self._cache = {"pre": pre}
        return controls

    def forward(self, tumor, anatomy) -> List[np.ndarray]:
        """Control maps for tumour masks (N, H, W) and anatomy stacks (N, 4, H, W)."""
        return self.encode(self.fuse(tumor, channel_fuse(anatomy)))

    __call__ = forward

    def backward(self, control_grads: Sequence[np.ndarray]) -> None:
        """Accumulate parameter gradients from gradients w.r.t. the control maps."""
        if self._cache is None:
            raise UsageError("ControlEncoder.backward called before forward")
        if len(control_grads) != 3:
            raise ShapeError(f"expected 3 control gradients, got {len(control_grads)}")
        pre = self._cache["pre"]
        g_next = None
        for lvl in (2, 1, 0):
            g = self.zero_convs[lvl].backward(control_grads[lvl])
            if g_next is not None:
                g = g + g_next
            g_next = self.blocks[lvl].backward(g * silu_grad(pre[lvl + 1]))
        gz = self.input_conv.backward(g_next * silu_grad(pre[0]))
        ct, cs = self._fuse_cache
        l1, l2 = self.weights.lambda1, self.weights.lambda2
        if self.fusion == "sum":
            self.tumor_conv.backward(l1 * gz)
            self.struct_conv.backward(l2 * gz)
        else:
            self.tumor_conv.backward(gz * (l1 + l2 * cs))
            self.struct_conv.backward(gz * (l2 * ct))

    def meta(self) -> dict:
        return {"kind": "control", "widths": list(self.widths), "hidden": self.hidden,
                "lambda1": self.weights.lambda1, "lambda2": self.weights.lambda2, "fusion": self.fusion}


def inject_control(net: DenoiserNet, x: np.ndarray, t, controls: Optional[Sequence[np.ndarray]]) -> np.ndarray:
    """Conditioned forward pass of the frozen denoiser."""
    if controls is not None and len(controls) != len(net.widths):
        raise ShapeError(f"denoiser has {len(net.widths)} levels, got {len(controls)} control maps")
    return net(x, t, controls)


def control_inputs(mode: str, tumors: np.ndarray, anatomy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Encoder inputs for a training mode; the topology-only mode sees the tumour mask alone."""
    if mode not in MODES:
        raise ConfigError(f"unknown control mode {mode!r}; expected one of {MODES}")
    if mode == "tgap":
        anatomy = np.zeros_like(anatomy)
    return tumors, anatomy


def train_control(
    net: DenoiserNet,
    encoder: ControlEncoder,
    images: np.ndarray,
    tumors: np.ndarray,
    anatomy: np.ndarray,
    sched: NoiseSchedule,
    mode: str = "tsa",
    tgap: TGAPConfig = TGAPConfig(),
    epochs: int = 1,
    lr: float = 2.5e-5,
    batch: int = 2,
    seed: int = 0,
    max_steps: Optional[int] = None,
    log_path=None,
    checkpoint_path=None,
) -> Tuple[ControlEncoder, List[dict]]:
    """Train ``encoder`` against the frozen ``net``.

    ``mode`` selects the objective: "tsa" is the noise MSE, "tsa+tgap" adds
    the weighted topology term, "tgap" uses the topology term with a
    tumour-only encoder. Returns the encoder and per-step loss records.
    """
    images = np.asarray(images)
    if images.ndim != 3 or len(images) == 0:
        raise ConfigError("training set must be a nonempty (M, H, W) array")
    if batch < 1 or epochs < 0:
        raise ConfigError("batch must be positive and epochs nonnegative")
    tumors, anatomy = control_inputs(mode, np.asarray(tumors, dtype=DTYPE), np.asarray(anatomy, dtype=DTYPE))
    use_topo = mode != "tsa" and tgap.lam > 0
    frozen_sum = checksum(net.parameters().values())
    rng = np.random.default_rng(seed)
    opt = Adam(encoder.parameters(), lr=lr)
    data = normalize(images)[:, None]
    mse_only = replace(tgap, lam=0.0)
    gate = tgap.t_gate * sched.T if tgap.t_gate is not None else None
    records: List[dict] = []
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
            xt = q_sample(x0, t, eps, sched)
            controls = encoder(tumors[idx], anatomy[idx])
            pred = inject_control(net, xt, t, controls)
            if use_topo:
                apply = None if gate is None else t <= gate
                fields = None
                if tgap.target == "x0":
                    ab = sched.alpha_bars[t - 1][:, None, None, None]
                    x0_hat = (xt - np.sqrt(1.0 - ab) * pred) / np.sqrt(ab)
                    fields = (x0_hat, x0, -np.sqrt(1.0 - ab[:, 0, 0, 0]) / np.sqrt(ab[:, 0, 0, 0]))
                loss, grad, parts = total_loss(pred, eps, tumors[idx], tgap, apply=apply, topo_fields=fields)
            else:
                loss, grad, parts = total_loss(pred, eps, tumors[idx], mse_only)
            ctrl_grads = net.backward(grad, need_param_grads=False)
            encoder.backward(ctrl_grads)
            opt.step(encoder.gradients())
            records.append({"step": step, "loss": loss, "mse": parts["mse"], "tgap": parts["tgap"]})
            step += 1
        if records:
            log.info("train-control[%s] epoch %d: last loss %.5f", mode, epoch, records[-1]["loss"])
    if checksum(net.parameters().values()) != frozen_sum:
        raise FrozenParameterError("frozen denoiser parameters changed during control training")
    if log_path is not None:
        write_loss_log(log_path, [r["loss"] for r in records])
    if checkpoint_path is not None:
        meta = encoder.meta()
        meta["mode"] = mode
        save_checkpoint(checkpoint_path, encoder.parameters(), meta)
    return encoder, records

