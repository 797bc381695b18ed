"""Dense-tensor building blocks with hand-written backward passes.

Tensors are plain ``numpy`` arrays in (N, C, H, W) order. Layers keep the
input of their last forward call so that ``backward`` can be wired by hand
for each architecture; there is no autodiff graph.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np
from scipy.special import expit

from .errors import DataError, NumericError, ShapeError, UsageError

DTYPE = np.float32


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Unfold ``x`` (N, C, H, W) into rows of shape (N*Ho*Wo, k*k*C).

    Rows are output positions and columns run over (kernel row, kernel col,
    channel); BLAS prefers this tall layout for the small channel counts here.
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    return cols.reshape(n * ho * wo, k * k * c)


def col2im(cols: np.ndarray, shape: Tuple[int, int, int, int], k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add rows back to an (N, C, H, W) array."""
    n, c, h, w = shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    cols = cols.reshape(n, ho, wo, k, k, c)
    gp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            gp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += cols[:, :, :, i, j, :]
    return np.ascontiguousarray(gp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2))


def _flat_weight(weight: np.ndarray) -> np.ndarray:
    # (C_out, C_in, k, k) -> (C_out, k*k*C_in), matching the im2col column order
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def _check_conv(x: np.ndarray, weight: np.ndarray, stride: int, padding: int) -> None:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"expected 4-d input and weight, got {x.shape} and {weight.shape}")
    _, c, h, w = x.shape
    _, c_in, k, k2 = weight.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, layer expects {c_in}")
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"input {h}x{w} (padding {padding}) smaller than kernel {k}")
    if stride < 1:
        raise ShapeError("stride must be positive")


def _conv_from_cols(cols: np.ndarray, x_shape, weight, bias, stride, padding) -> np.ndarray:
    n, _, h, w = x_shape
    c_out, _, k, _ = weight.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    out = cols @ _flat_weight(weight).T.astype(cols.dtype, copy=False)
    if bias is not None:
        out += bias.astype(out.dtype, copy=False)
    return np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))


def conv2d_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: Optional[np.ndarray] = None,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Cross-correlate ``x`` (N, C_in, H, W) with ``weight`` (C_out, C_in, k, k).

    Zero padding is applied on all four sides. The result dtype follows the
    input so the same code serves float32 training and float64 gradient checks.
    """
    _check_conv(x, weight, stride, padding)
    cols = im2col(x, weight.shape[2], stride, padding)
    return _conv_from_cols(cols, x.shape, weight, bias, stride, padding)


def _conv_backward_cols(grad_out, cols, x_shape, weight, stride, padding, need_weight_grad):
    n, c, h, w = x_shape
    c_out, _, k, _ = weight.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if grad_out.shape != (n, c_out, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, c_out, ho, wo)}")
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, c_out)
    grad_w = grad_b = None
    if need_weight_grad:
        grad_w = (g.T @ cols).reshape(c_out, k, k, c).transpose(0, 3, 1, 2)
        grad_b = g.sum(axis=0)
    dcols = g @ _flat_weight(weight).astype(g.dtype, copy=False)
    return col2im(dcols, x_shape, k, stride, padding), grad_w, grad_b


def conv2d_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    weight: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    need_weight_grad: bool = True,
) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`conv2d_forward`."""
    cols = im2col(x, weight.shape[2], stride, padding) if need_weight_grad else None
    return _conv_backward_cols(grad_out, cols, x.shape, weight, stride, padding, need_weight_grad)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def upsample2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(grad: np.ndarray) -> np.ndarray:
    n, c, h, w = grad.shape
    return grad.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class Conv2d:
    """Convolution layer holding its parameters, gradients and forward cache."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int = 3,
        stride: int = 1,
        padding: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        zero: bool = False,
        bias: bool = True,
    ):
        if k % 2 != 1:
            raise ShapeError("kernel size must be odd")
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        if zero:
            self.weight = np.zeros((c_out, c_in, k, k), dtype=DTYPE)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            fan_in = c_in * k * k
            self.weight = (rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(1.0 / fan_in)).astype(DTYPE)
        self.bias = np.zeros(c_out, dtype=DTYPE) if bias else None
        self.grad_weight: Optional[np.ndarray] = None
        self.grad_bias: Optional[np.ndarray] = None
        self._cols: Optional[np.ndarray] = None
        self._x_shape: Optional[tuple] = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_conv(x, self.weight, self.stride, self.padding)
        self._cols = im2col(x, self.weight.shape[2], self.stride, self.padding)
        self._x_shape = x.shape
        return _conv_from_cols(self._cols, x.shape, self.weight, self.bias, self.stride, self.padding)

    __call__ = forward

    def backward(self, grad_out: np.ndarray, need_weight_grad: bool = True) -> np.ndarray:
        if self._cols is None:
            raise UsageError("Conv2d.backward called without a cached forward input")
        gx, gw, gb = _conv_backward_cols(grad_out, self._cols, self._x_shape, self.weight,
                                         self.stride, self.padding, need_weight_grad)
        if need_weight_grad:
            self.grad_weight = gw.astype(self.weight.dtype, copy=False)
            if self.bias is not None:
                self.grad_bias = gb.astype(self.bias.dtype, copy=False)
        return gx

    def parameters(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out

    def gradients(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {f"{prefix}.weight": self.grad_weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.grad_bias
        return out


class Dense:
    def __init__(self, d_in: int, d_out: int, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = (rng.standard_normal((d_out, d_in)) * np.sqrt(1.0 / d_in)).astype(DTYPE)
        self.bias = np.zeros(d_out, dtype=DTYPE)
        self.grad_weight: Optional[np.ndarray] = None
        self.grad_bias: Optional[np.ndarray] = None
        self._x: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.weight.T + self.bias

    __call__ = forward

    def backward(self, grad_out: np.ndarray, need_weight_grad: bool = True) -> np.ndarray:
        if self._x is None:
            raise UsageError("Dense.backward called without a cached forward input")
        if need_weight_grad:
            self.grad_weight = (grad_out.T @ self._x).astype(self.weight.dtype, copy=False)
            self.grad_bias = grad_out.sum(axis=0).astype(self.bias.dtype, copy=False)
        return grad_out @ self.weight

    def parameters(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def gradients(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.grad_weight, f"{prefix}.bias": self.grad_bias}


class Adam:
    """Bias-corrected Adam updating parameter arrays in place."""

    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 2.5e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros(v.shape, dtype=np.float64) for k, v in self.params.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float64) for k, v in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in self.params:
                raise UsageError(f"gradient for unknown parameter {name!r}")
            if g is None or not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            p = self.params[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g, dtype=np.float64)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= update.astype(p.dtype)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: Adam) -> Adam:
    """Functional spelling of :meth:`Adam.step`; ``params`` must be the arrays ``state`` tracks."""
    for name in grads:
        if state.params.get(name) is not params.get(name):
            raise UsageError(f"parameter {name!r} is not tracked by this optimizer state")
    state.step(grads)
    return state


_MAGIC = b"TDCK"


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write ``params`` as a JSON header followed by little-endian float32 data.

    Layout: 4-byte magic, uint64 header length, UTF-8 JSON header, payload.
    """
    entries = []
    offset = 0
    blobs = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}, "payload_bytes": offset},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC or len(raw) < 12:
        raise DataError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12:12 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header") from exc
    payload = raw[12 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise DataError(f"{path}: payload has {len(payload)} bytes, header says {header['payload_bytes']}")
    params = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(DTYPE)
    return params, header["meta"]


def assign_parameters(target: Mapping[str, np.ndarray], source: Mapping[str, np.ndarray]) -> None:
    """Copy ``source`` arrays into the matching arrays of ``target`` in place."""
    missing = set(target) - set(source)
    extra = set(source) - set(target)
    if missing or extra:
        raise DataError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, arr in target.items():
        if arr.shape != source[name].shape:
            raise DataError(f"checkpoint tensor {name!r} has shape {source[name].shape}, expected {arr.shape}")
        arr[...] = source[name]


def checksum(params: Iterable[np.ndarray]) -> str:
    h = hashlib.sha256()
    for arr in params:
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
