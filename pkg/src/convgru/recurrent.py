"""ConvGRU cells, sequence propagation in both time directions, the flat
(vector) GRU used by the all-dense head, and the four fusion methods.

A sequence is either a (T,C,H,W) Tensor or a list of per-frame Tensors,
each (C,H,W) or (B,C,H,W). Internal convolutions use SAME padding at
stride 1 so hidden maps keep the input's spatial extent across time.
The hidden-to-hidden kernels are 1x1; only the input-to-hidden kernel
width is configurable.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields

import numpy as np

from . import init
from .errors import DimensionError, ValidationError
from .ops import PaddingMode, conv2d, dense, global_avg_pool, sigmoid, tanh
from .tensor import Tensor, channel_slice, concat, flatten, mean_of, reshape, row


class UpdateRule(enum.Enum):
    # Blend the candidate with the previous hidden state (the conventional
    # GRU update) or with the current input map; the latter is only
    # constructible when input and hidden shapes coincide.
    STANDARD = "standard"
    PAPER_LITERAL = "paper_literal"


class BiasMode(enum.Enum):
    CHANNEL = "channel"  # one scalar per hidden channel, broadcast spatially
    SPATIAL = "spatial"  # full n x n bias per hidden channel


class FusionMethod(enum.Enum):
    LAST_FLAT = "last_flat"
    MEAN_FLAT = "mean_flat"
    LAST_AVG = "last_avg"
    FLAT = "flat"


@dataclass
class ConvGruParams:
    """Nine weight/bias groups of one ConvGRU direction."""

    w_zx: Tensor
    w_rx: Tensor
    w_ox: Tensor
    w_zh: Tensor
    w_rh: Tensor
    w_oh: Tensor
    b_z: Tensor
    b_r: Tensor
    b_o: Tensor

    def __post_init__(self):
        if not (self.w_zx.shape == self.w_rx.shape == self.w_ox.shape):
            raise ValidationError("input kernels must share one shape")
        if not (self.w_zh.shape == self.w_rh.shape == self.w_oh.shape):
            raise ValidationError("hidden kernels must share one shape")
        if not (self.b_z.shape == self.b_r.shape == self.b_o.shape):
            raise ValidationError("biases must share one shape")

    @property
    def hidden_channels(self) -> int:
        return self.w_zx.shape[0]

    @property
    def input_channels(self) -> int:
        return self.w_zx.shape[1]

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class GruVectorParams:
    """Dense-weight analogue of ConvGruParams for flat feature vectors."""

    w_zx: Tensor
    w_rx: Tensor
    w_ox: Tensor
    w_zh: Tensor
    w_rh: Tensor
    w_oh: Tensor
    b_z: Tensor
    b_r: Tensor
    b_o: Tensor

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class HiddenSequence:
    """Per-frame hidden maps of one (or both) propagation directions."""

    fwd: list[Tensor]
    bwd: list[Tensor] | None = None

    def __post_init__(self):
        shapes = {t.shape for t in self.fwd}
        if self.bwd is not None:
            if len(self.bwd) != len(self.fwd):
                raise ValidationError("direction lengths differ")
            shapes |= {t.shape for t in self.bwd}
        if len(shapes) > 1:
            raise ValidationError(f"hidden maps must share one shape, got {shapes}")

    def __len__(self) -> int:
        return len(self.fwd)

    @property
    def bidirectional(self) -> bool:
        return self.bwd is not None


def init_convgru_params(
    c_in: int,
    c_h: int,
    kernel: int = 3,
    *,
    rng: np.random.Generator,
    bias_mode: BiasMode = BiasMode.CHANNEL,
    spatial: int | tuple[int, int] | None = None,
    dtype=np.float32,
) -> ConvGruParams:
    if bias_mode is BiasMode.SPATIAL:
        if spatial is None:
            raise ValidationError("SPATIAL bias mode needs the hidden map extent")
        n = (spatial, spatial) if isinstance(spatial, int) else tuple(spatial)
        bias_shape = (c_h, *n)
    else:
        bias_shape = (c_h,)
    fan_x = c_in * kernel * kernel
    return ConvGruParams(
        w_zx=init.kaiming_uniform((c_h, c_in, kernel, kernel), fan_x, rng, dtype=dtype),
        w_rx=init.kaiming_uniform((c_h, c_in, kernel, kernel), fan_x, rng, dtype=dtype),
        w_ox=init.kaiming_uniform((c_h, c_in, kernel, kernel), fan_x, rng, dtype=dtype),
        w_zh=init.recurrent_uniform((c_h, c_h, 1, 1), c_h, rng, dtype=dtype),
        w_rh=init.recurrent_uniform((c_h, c_h, 1, 1), c_h, rng, dtype=dtype),
        w_oh=init.recurrent_uniform((c_h, c_h, 1, 1), c_h, rng, dtype=dtype),
        b_z=init.zeros(bias_shape, dtype=dtype),
        b_r=init.zeros(bias_shape, dtype=dtype),
        b_o=init.zeros(bias_shape, dtype=dtype),
    )


def init_gru_vector_params(n_in: int, n_h: int, *, rng: np.random.Generator, dtype=np.float32) -> GruVectorParams:
    return GruVectorParams(
        w_zx=init.kaiming_uniform((n_h, n_in), n_in, rng, dtype=dtype),
        w_rx=init.kaiming_uniform((n_h, n_in), n_in, rng, dtype=dtype),
        w_ox=init.kaiming_uniform((n_h, n_in), n_in, rng, dtype=dtype),
        w_zh=init.recurrent_uniform((n_h, n_h), n_h, rng, dtype=dtype),
        w_rh=init.recurrent_uniform((n_h, n_h), n_h, rng, dtype=dtype),
        w_oh=init.recurrent_uniform((n_h, n_h), n_h, rng, dtype=dtype),
        b_z=init.zeros((n_h,), dtype=dtype),
        b_r=init.zeros((n_h,), dtype=dtype),
        b_o=init.zeros((n_h,), dtype=dtype),
    )


def _bias(b: Tensor) -> Tensor:
    # per-channel biases broadcast over trailing spatial axes
    return reshape(b, (b.shape[0], 1, 1)) if b.data.ndim == 1 else b


def _frames(seq) -> list[Tensor]:
    if isinstance(seq, Tensor):
        if seq.data.ndim != 4:
            raise ValidationError(f"sequence tensor must be (T,C,H,W), got {seq.shape}")
        return [row(seq, t) for t in range(seq.shape[0])]
    return list(seq)


def _zero_hidden(x: Tensor, c_h: int) -> Tensor:
    shape = (*x.shape[:-3], c_h, *x.shape[-2:])
    return Tensor(np.zeros(shape, dtype=x.dtype))


def convgru_step(x: Tensor, h_prev: Tensor, p: ConvGruParams, rule: UpdateRule = UpdateRule.STANDARD) -> Tensor:
    """One gated update: z and r gates, candidate map, blended new state.

    The three input convolutions share one im2col pass via kernel stacking.
    """
    c_h = p.hidden_channels
    pre_x = conv2d(x, concat([p.w_zx, p.w_rx, p.w_ox]), mode=PaddingMode.SAME)
    pre_h = conv2d(h_prev, concat([p.w_zh, p.w_rh]))
    z = sigmoid(channel_slice(pre_x, 0, c_h) + channel_slice(pre_h, 0, c_h) + _bias(p.b_z))
    r = sigmoid(channel_slice(pre_x, c_h, 2 * c_h) + channel_slice(pre_h, c_h, 2 * c_h) + _bias(p.b_r))
    o = tanh(channel_slice(pre_x, 2 * c_h, 3 * c_h) + conv2d(r * h_prev, p.w_oh) + _bias(p.b_o))
    if rule is UpdateRule.PAPER_LITERAL:
        if x.shape != z.shape:
            raise DimensionError(
                f"PAPER_LITERAL update needs matching input/hidden shapes, got {x.shape} vs {z.shape}"
            )
        return z * x + (1.0 - z) * o
    return z * h_prev + (1.0 - z) * o


def convgru_forward(seq, p: ConvGruParams, rule: UpdateRule = UpdateRule.STANDARD) -> list[Tensor]:
    """Propagate t = 1..T with a zero initial state; returns [h_1..h_T]."""
    hs: list[Tensor] = []
    h = None
    for x in _frames(seq):
        if h is None:
            h = _zero_hidden(x, p.hidden_channels)
        h = convgru_step(x, h, p, rule)
        hs.append(h)
    if not hs:
        raise ValidationError("empty sequence")
    return hs


def convgru_backward_direction(seq, p: ConvGruParams, rule: UpdateRule = UpdateRule.STANDARD) -> list[Tensor]:
    """Propagate t = T..1 with a zero state beyond the last frame; returns
    [h_1..h_T] indexed by frame (h_t depends on frames t..T)."""
    frames = _frames(seq)
    if not frames:
        raise ValidationError("empty sequence")
    h = _zero_hidden(frames[-1], p.hidden_channels)
    out: list[Tensor] = [None] * len(frames)  # type: ignore[list-item]
    for t in range(len(frames) - 1, -1, -1):
        h = convgru_step(frames[t], h, p, rule)
        out[t] = h
    return out


def bidirectional(seq, p_fwd: ConvGruParams, p_bwd: ConvGruParams, rule: UpdateRule = UpdateRule.STANDARD) -> HiddenSequence:
    """Run both directions independently over the same input."""
    if p_fwd.w_zx.shape != p_bwd.w_zx.shape or p_fwd.w_zh.shape != p_bwd.w_zh.shape:
        raise DimensionError("direction parameter shapes differ")
    frames = _frames(seq)
    return HiddenSequence(
        fwd=convgru_forward(frames, p_fwd, rule),
        bwd=convgru_backward_direction(frames, p_bwd, rule),
    )


def combine_directions(hidden: HiddenSequence) -> list[Tensor]:
    """Per-frame output of a bidirectional layer: (h_t + h^_t)/2."""
    if hidden.bwd is None:
        return list(hidden.fwd)
    return [0.5 * (f + b) for f, b in zip(hidden.fwd, hidden.bwd)]


def _flat(x: Tensor) -> Tensor:
    return flatten(x, keep_first=x.data.ndim == 4)


def fuse(hidden: HiddenSequence, method: FusionMethod):
    """Map per-frame hidden maps to the classifier-facing features.

    LAST_FLAT / MEAN_FLAT / LAST_AVG return one feature vector per clip;
    FLAT returns one vector per frame (fused downstream). Bidirectional
    sequences substitute (h^_1 + h_T)/2 for the last map and the per-frame
    direction average elsewhere.
    """
    if len(hidden) == 0:
        raise ValidationError("empty hidden sequence")
    method = FusionMethod(method)
    if method in (FusionMethod.LAST_FLAT, FusionMethod.LAST_AVG):
        last = hidden.fwd[-1] if hidden.bwd is None else 0.5 * (hidden.fwd[-1] + hidden.bwd[0])
        return _flat(last) if method is FusionMethod.LAST_FLAT else global_avg_pool(last)
    per_frame = combine_directions(hidden)
    if method is FusionMethod.MEAN_FLAT:
        return _flat(mean_of(per_frame))
    return [_flat(f) for f in per_frame]


def gru_vector_step(x: Tensor, h_prev: Tensor, p: GruVectorParams) -> Tensor:
    """Gated update on flat feature vectors (dense maps replace convolutions)."""
    z = sigmoid(dense(x, p.w_zx) + dense(h_prev, p.w_zh) + p.b_z)
    r = sigmoid(dense(x, p.w_rx) + dense(h_prev, p.w_rh) + p.b_r)
    o = tanh(dense(x, p.w_ox) + dense(r * h_prev, p.w_oh) + p.b_o)
    return z * h_prev + (1.0 - z) * o
