"""Differentiable numeric kernels: convolution, pooling, dense, activations,
dropout, and the softmax cross-entropy loss.

Convolution is cross-correlation (no kernel flip) over an explicit channel
axis. SAME padding distributes zeros floor-left/ceil-right. All forward
passes are deterministic; dropout is deterministic given its generator.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import DimensionError, ValidationError
from .tensor import Tensor, as_tensor, make_op


class PaddingMode(enum.Enum):
    SAME = "same"
    VALID = "valid"


def _mode(mode) -> PaddingMode:
    if isinstance(mode, PaddingMode):
        return mode
    return PaddingMode(str(mode).lower())


def out_dim(n: int, d: int, s: int, mode) -> int:
    """Output extent of a d-wide window over n inputs at stride s."""
    if n < 1 or d < 1 or s < 1:
        raise DimensionError(f"extents must be positive, got n={n} d={d} s={s}")
    if _mode(mode) is PaddingMode.SAME:
        return -(-n // s)
    if d > n:
        raise DimensionError(f"VALID window {d} exceeds input extent {n}")
    return -(-(n - d + 1) // s)


def _same_pad(n: int, d: int, s: int) -> tuple[int, int]:
    total = max((out_dim(n, d, s, PaddingMode.SAME) - 1) * s + d - n, 0)
    return total // 2, total - total // 2


def _im2col(x: np.ndarray, kh: int, kw: int, s: int, pads) -> np.ndarray:
    """(B,C,H,W) -> (B*oh*ow, C*kh*kw) patch matrix."""
    (pt, pb), (pl, pr) = pads
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]
    b, c, oh, ow = win.shape[:4]
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(col)


def _col2im(dcol: np.ndarray, x_shape, kh: int, kw: int, s: int, pads, oh: int, ow: int) -> np.ndarray:
    """Scatter-add patch gradients back to (B,C,H,W)."""
    b, c, h, w = x_shape
    (pt, pb), (pl, pr) = pads
    dx = np.zeros((b, c, h + pt + pb, w + pl + pr), dtype=dcol.dtype)
    dcol = dcol.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + s * oh : s, j : j + s * ow : s] += dcol[:, :, i, j]
    if pt or pb or pl or pr:
        dx = dx[:, :, pt : pt + h, pl : pl + w]
    return dx


def conv2d(x, kernel, bias=None, stride: int = 1, mode=PaddingMode.SAME) -> Tensor:
    """Cross-correlate (B,C_in,H,W) or (C_in,H,W) with (C_out,C_in,kh,kw).

    SAME zero-pads floor-left/ceil-right; VALID uses only full windows.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise ValidationError(f"conv2d expects 4D input/kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    b, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise DimensionError(f"kernel expects {kc} input channels, input has {c_in}")
    mode = _mode(mode)

    if kh == kw == 1 and stride == 1:
        # 1x1 fast path: plain channel mixing
        out = np.einsum("oi,bihw->bohw", kernel.data.reshape(c_out, c_in), xd, optimize=True)
        oh, ow = h, w
        col = None
        pads = ((0, 0), (0, 0))
    else:
        oh, ow = out_dim(h, kh, stride, mode), out_dim(w, kw, stride, mode)
        if mode is PaddingMode.SAME:
            pads = (_same_pad(h, kh, stride), _same_pad(w, kw, stride))
        else:
            pads = ((0, 0), (0, 0))
        col = _im2col(xd, kh, kw, stride, pads)
        out = (col @ kernel.data.reshape(c_out, -1).T).reshape(b, oh, ow, c_out)
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, c_out, 1, 1)
    if squeeze:
        out = out[0]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gd = g[None] if squeeze else g
        g_mat = gd.transpose(0, 2, 3, 1).reshape(-1, c_out)
        if kh == kw == 1 and stride == 1:
            if kernel.requires_grad:
                dk = np.einsum("bohw,bihw->oi", gd, xd, optimize=True)
                kernel.accumulate_grad(dk.reshape(kernel.shape))
            if x.requires_grad:
                dx = np.einsum("oi,bohw->bihw", kernel.data.reshape(c_out, c_in), gd, optimize=True)
                x.accumulate_grad(dx[0] if squeeze else dx)
        else:
            if kernel.requires_grad:
                c = col if col is not None else _im2col(xd, kh, kw, stride, pads)
                kernel.accumulate_grad((g_mat.T @ c).reshape(kernel.shape))
            if x.requires_grad:
                dcol = g_mat @ kernel.data.reshape(c_out, -1)
                dx = _col2im(dcol, xd.shape, kh, kw, stride, pads, oh, ow)
                x.accumulate_grad(dx[0] if squeeze else dx)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gd.sum(axis=(0, 2, 3)))

    return make_op(out, parents, backward)


def maxpool2d(x, window: int = 3, stride: int = 2) -> Tensor:
    """Per-channel max over VALID windows; gradient routes to the first
    (row-major) maximal element of each window."""
    x = as_tensor(x)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    b, c, h, w = xd.shape
    if h < window or w < window:
        raise DimensionError(f"pool window {window} exceeds spatial extent {h}x{w}")
    oh, ow = out_dim(h, window, stride, PaddingMode.VALID), out_dim(w, window, stride, PaddingMode.VALID)
    win = np.lib.stride_tricks.sliding_window_view(xd, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(b, c, oh, ow, window * window)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    ih, iw = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = ih[None, None] * stride + arg // window
    cols = iw[None, None] * stride + arg % window
    plane = np.arange(b * c).reshape(b, c, 1, 1)
    flat_idx = (plane * h + rows) * w + cols

    def backward(g):
        gd = g[None] if squeeze else g
        dx = np.bincount(flat_idx.reshape(-1), weights=gd.reshape(-1), minlength=b * c * h * w)
        dx = dx.reshape(b, c, h, w).astype(xd.dtype)
        x.accumulate_grad(dx[0] if squeeze else dx)

    return make_op(out, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """Spatial mean per channel: (...,C,H,W) -> (...,C)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))

    def backward(g):
        x.accumulate_grad(np.broadcast_to(g[..., None, None] / (h * w), x.shape).astype(x.dtype, copy=False))

    return make_op(out, (x,), backward)


def dense(x, weight, bias=None) -> Tensor:
    """Affine map: x @ weight.T + bias, weight shaped (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"dense expects {weight.shape[1]} features, got {x.shape[-1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data)
        if weight.requires_grad:
            gm = g.reshape(-1, g.shape[-1])
            xm = x.data.reshape(-1, x.shape[-1])
            weight.accumulate_grad(gm.T @ xm)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return make_op(out, parents, backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        x.accumulate_grad(g * out * (1.0 - out))

    return make_op(out, (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        x.accumulate_grad(g * (1.0 - out * out))

    return make_op(out, (x,), backward)


def leaky_relu(x, alpha: float = 0.1) -> Tensor:
    x = as_tensor(x)
    out = np.where(x.data >= 0, x.data, alpha * x.data)

    def backward(g):
        x.accumulate_grad(g * np.where(x.data >= 0, 1.0, alpha).astype(x.dtype, copy=False))

    return make_op(out, (x,), backward)


def dropout(x, keep_prob: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability 1-keep_prob and scale
    survivors by 1/keep_prob at training time; identity in evaluation."""
    x = as_tensor(x)
    if not 0.0 < keep_prob <= 1.0:
        raise ValidationError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise ValidationError("dropout in training mode requires a random generator")
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / x.dtype.type(keep_prob)
    out = x.data * mask

    def backward(g):
        x.accumulate_grad(g * mask)

    return make_op(out, (x,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis (plain ndarray helper)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels.

    Accepts (K,) logits with a scalar label or (B,K) with (B,) labels;
    computed with max subtraction so huge logits do not overflow.
    """
    logits = as_tensor(logits)
    single = logits.data.ndim == 1
    z = logits.data[None] if single else logits.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    b, k = z.shape
    if k < 2:
        raise ValidationError(f"need at least 2 classes, got {k}")
    if y.shape != (b,):
        raise ValidationError(f"labels shape {y.shape} does not match batch {b}")
    if np.any((y < 0) | (y >= k)):
        raise ValidationError(f"labels must lie in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = (log_norm - shifted[np.arange(b), y]).mean(dtype=z.dtype)

    def backward(g):
        p = softmax(z)
        p[np.arange(b), y] -= 1.0
        p *= g / b
        logits.accumulate_grad(p[0] if single else p)

    return make_op(np.asarray(loss), (logits,), backward)
