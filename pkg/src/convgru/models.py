"""Architecture assembly: AlexNet-style trunk with recurrent layers, shape
tracing, per-clip inference, and feature-map export.

Five variants share the trunk (conv 11x11/96 stride 4, pool, conv 5x5/256,
pool, conv 3x3/384):

* ``spatial_only``   all-conv layers 6-7, single-frame input, dense head
* ``gru_alexnet``    all-conv layers 6-7, two stacked 1024-unit vector GRUs
* ``convgru_1d``     conv layer 6, unidirectional ConvGRU layer 7
* ``convgru_2d``     conv layer 6, bidirectional ConvGRU layer 7
* ``convgru_2d2``    bidirectional ConvGRU at layers 6 and 7

Feature counts are divisible by ``width_div`` for desk-scale runs; layer
geometry is otherwise fixed. Hidden conv/dense activations are leaky ReLU;
gates inside recurrent cells use sigmoid/tanh only.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, asdict
from typing import Iterable

import numpy as np

from . import init
from .errors import DimensionError, ValidationError
from .ops import PaddingMode, conv2d, dense, dropout, leaky_relu, maxpool2d, out_dim
from .recurrent import (
    BiasMode,
    ConvGruParams,
    FusionMethod,
    GruVectorParams,
    HiddenSequence,
    UpdateRule,
    bidirectional,
    combine_directions,
    convgru_forward,
    fuse,
    gru_vector_step,
    init_convgru_params,
    init_gru_vector_params,
)
from .tensor import Tensor, as_tensor, flatten, frame, mean_of, no_grad


class Architecture(enum.Enum):
    SPATIAL_ONLY = "spatial_only"
    GRU_ALEXNET = "gru_alexnet"
    CONVGRU_1D = "convgru_1d"
    CONVGRU_2D = "convgru_2d"
    CONVGRU_2D2 = "convgru_2d2"


# Table-position -> base feature count of the shared stack
BASE_WIDTHS = {"conv1": 96, "conv3": 256, "conv5": 384, "layer6": 384, "layer7": 256}
FC_WIDTH = 4096
GRU_WIDTH = 1024


@dataclass
class ModelConfig:
    architecture: Architecture = Architecture.CONVGRU_2D
    input_size: int = 224
    input_channels: int = 3
    num_classes: int = 9
    fusion: FusionMethod = FusionMethod.LAST_FLAT
    update_rule: UpdateRule = UpdateRule.STANDARD
    bias_mode: BiasMode = BiasMode.CHANNEL
    dropout: float = 0.8
    dropout_is_keep_prob: bool = True  # flip to read `dropout` as drop probability
    leaky_alpha: float = 0.1
    width_div: int = 1
    fc_width: int = FC_WIDTH
    gru_width: int = GRU_WIDTH
    conv1_stride: int = 4
    recurrent_kernel: int = 3
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.architecture = Architecture(self.architecture)
        self.fusion = FusionMethod(self.fusion)
        self.update_rule = UpdateRule(self.update_rule)
        self.bias_mode = BiasMode(self.bias_mode)
        if self.num_classes < 2:
            raise ValidationError("need at least 2 classes")
        if min(self.input_size, self.input_channels, self.width_div, self.fc_width,
               self.gru_width, self.conv1_stride, self.recurrent_kernel) < 1:
            raise ValidationError("widths, sizes, and strides must be positive")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValidationError(f"dropout keep probability {self.keep_prob} outside (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def keep_prob(self) -> float:
        return self.dropout if self.dropout_is_keep_prob else 1.0 - self.dropout

    def width(self, key: str) -> int:
        return max(1, BASE_WIDTHS[key] // self.width_div)

    @property
    def head_width(self) -> int:
        base = self.gru_width if self.architecture is Architecture.GRU_ALEXNET else self.fc_width
        return max(1, base // self.width_div)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("architecture", "fusion", "update_rule", "bias_mode"):
            d[k] = d[k].value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TraceEntry:
    index: int  # table row
    kind: str  # conv | pool | convgru | fusion | fc | gru | logits
    name: str
    shape: tuple[int, ...]  # per-frame, without batch axis


@dataclass
class ShapeTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def spatial_extents(self) -> list[int]:
        return [e.shape[-1] for e in self.entries if len(e.shape) == 3]

    def by_name(self, name: str) -> TraceEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise ValidationError(f"unknown layer {name!r}; have {[e.name for e in self.entries]}")

    @property
    def feature_len(self) -> int:
        return self.by_name("fusion8").shape[-1]


def _recurrent_layout(arch: Architecture) -> dict[str, str]:
    """Kind of layers 6 and 7: conv, gru (unidirectional), or bigru."""
    return {
        Architecture.SPATIAL_ONLY: {"layer6": "conv", "layer7": "conv"},
        Architecture.GRU_ALEXNET: {"layer6": "conv", "layer7": "conv"},
        Architecture.CONVGRU_1D: {"layer6": "conv", "layer7": "gru"},
        Architecture.CONVGRU_2D: {"layer6": "conv", "layer7": "bigru"},
        Architecture.CONVGRU_2D2: {"layer6": "bigru", "layer7": "bigru"},
    }[arch]


def trace_shapes(config: ModelConfig) -> ShapeTrace:
    """Chain the output-extent formula through the table stack (no allocation)."""
    cfg = config
    n = cfg.input_size
    layout = _recurrent_layout(cfg.architecture)
    entries = [TraceEntry(0, "input", "input", (cfg.input_channels, n, n))]

    n = out_dim(n, 11, cfg.conv1_stride, PaddingMode.SAME)
    entries.append(TraceEntry(1, "conv", "conv1", (cfg.width("conv1"), n, n)))
    n = out_dim(n, 3, 2, PaddingMode.VALID)
    entries.append(TraceEntry(2, "pool", "pool2", (cfg.width("conv1"), n, n)))
    n = out_dim(n, 5, 1, PaddingMode.SAME)
    entries.append(TraceEntry(3, "conv", "conv3", (cfg.width("conv3"), n, n)))
    n = out_dim(n, 3, 2, PaddingMode.VALID)
    entries.append(TraceEntry(4, "pool", "pool4", (cfg.width("conv3"), n, n)))
    n = out_dim(n, 3, 1, PaddingMode.SAME)
    entries.append(TraceEntry(5, "conv", "conv5", (cfg.width("conv5"), n, n)))

    for idx, key in ((6, "layer6"), (7, "layer7")):
        kind = layout[key]
        c = cfg.width(key)
        if kind == "conv":
            n = out_dim(n, 3, 1, PaddingMode.SAME)
            entries.append(TraceEntry(idx, "conv", f"conv{idx}", (c, n, n)))
        else:
            entries.append(TraceEntry(idx, "convgru", f"convgru{idx}", (c, n, n)))

    c7 = cfg.width("layer7")
    feat = c7 if cfg.fusion is FusionMethod.LAST_AVG else c7 * n * n
    entries.append(TraceEntry(8, "fusion", "fusion8", (feat,)))
    w = cfg.head_width
    kind = "gru" if cfg.architecture is Architecture.GRU_ALEXNET else "fc"
    entries.append(TraceEntry(9, kind, f"{kind}9", (w,)))
    entries.append(TraceEntry(10, kind, f"{kind}10", (w,)))
    entries.append(TraceEntry(11, "logits", "logits", (cfg.num_classes,)))
    return ShapeTrace(entries)


def layer_parameter_counts(config: ModelConfig) -> dict[str, int]:
    """Analytic per-layer parameter counts from the trace (no allocation)."""
    cfg = config
    trace = trace_shapes(cfg)
    counts: dict[str, int] = {}

    def conv_count(c_in, c_out, k):
        return c_out * c_in * k * k + c_out

    def gru_count(c_in, c_out, spatial, k):
        bias = c_out * spatial * spatial if cfg.bias_mode is BiasMode.SPATIAL else c_out
        return 3 * (c_out * c_in * k * k) + 3 * (c_out * c_out) + 3 * bias

    c_prev = cfg.input_channels
    kernel = {1: 11, 3: 5, 5: 3, 6: 3, 7: 3}
    for e in trace.entries:
        if e.kind == "conv":
            c = e.shape[0]
            counts[e.name] = conv_count(c_prev, c, kernel[e.index])
            c_prev = c
        elif e.kind == "convgru":
            c = e.shape[0]
            n = e.shape[-1]
            mult = 2 if _recurrent_layout(cfg.architecture)[f"layer{e.index}"] == "bigru" else 1
            counts[e.name] = mult * gru_count(c_prev, c, n, cfg.recurrent_kernel)
            c_prev = c
    feat = trace.feature_len
    w = cfg.head_width
    if cfg.architecture is Architecture.GRU_ALEXNET:
        counts["gru9"] = 3 * (w * feat) + 3 * (w * w) + 3 * w
        counts["gru10"] = 3 * (w * w) + 3 * (w * w) + 3 * w
    else:
        counts["fc9"] = w * feat + w
        counts["fc10"] = w * w + w
    counts["out11"] = cfg.num_classes * w + cfg.num_classes
    return counts


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    stride: int


class Model:
    """A built architecture: ordered parameters plus the forward wiring."""

    def __init__(self, config: ModelConfig):
        cfg = config
        if cfg.architecture is Architecture.GRU_ALEXNET and cfg.fusion is not FusionMethod.FLAT:
            raise ValidationError("gru_alexnet requires the per-frame flat fusion")
        self.config = cfg
        self.trace = trace_shapes(cfg)
        self.layout = _recurrent_layout(cfg.architecture)
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        gain = init.leaky_gain(cfg.leaky_alpha)

        def conv_layer(c_in, c_out, k, stride):
            w = init.kaiming_uniform((c_out, c_in, k, k), c_in * k * k, rng, gain=gain, dtype=dt)
            return ConvLayer(w, init.zeros((c_out,), dtype=dt), stride)

        def gru_layer(c_in, c_out, spatial):
            kw = dict(rng=rng, bias_mode=cfg.bias_mode, spatial=spatial, dtype=dt)
            return init_convgru_params(c_in, c_out, cfg.recurrent_kernel, **kw)

        self.conv = {}
        self.recurrent: dict[str, tuple[ConvGruParams, ConvGruParams | None]] = {}
        self.conv["conv1"] = conv_layer(cfg.input_channels, cfg.width("conv1"), 11, cfg.conv1_stride)
        self.conv["conv3"] = conv_layer(cfg.width("conv1"), cfg.width("conv3"), 5, 1)
        self.conv["conv5"] = conv_layer(cfg.width("conv3"), cfg.width("conv5"), 3, 1)
        c_prev = cfg.width("conv5")
        for idx, key in ((6, "layer6"), (7, "layer7")):
            kind = self.layout[key]
            c = cfg.width(key)
            spatial = self.trace.by_name(f"conv{idx}" if kind == "conv" else f"convgru{idx}").shape[-1]
            if kind == "conv":
                self.conv[f"conv{idx}"] = conv_layer(c_prev, c, 3, 1)
            else:
                if cfg.update_rule is UpdateRule.PAPER_LITERAL and c_prev != c:
                    raise ValidationError(
                        f"PAPER_LITERAL update rule is ill-typed at layer {idx}: {c_prev} -> {c} channels"
                    )
                fwd = gru_layer(c_prev, c, spatial)
                bwd = gru_layer(c_prev, c, spatial) if kind == "bigru" else None
                self.recurrent[f"convgru{idx}"] = (fwd, bwd)
            c_prev = c

        feat = self.trace.feature_len
        w = cfg.head_width
        if cfg.architecture is Architecture.GRU_ALEXNET:
            self.gru_head = (
                init_gru_vector_params(feat, w, rng=rng, dtype=dt),
                init_gru_vector_params(w, w, rng=rng, dtype=dt),
            )
            self.fc = {}
        else:
            self.gru_head = None
            self.fc = {
                "fc9": (init.kaiming_uniform((w, feat), feat, rng, gain=gain, dtype=dt), init.zeros((w,), dtype=dt)),
                "fc10": (init.kaiming_uniform((w, w), w, rng, gain=gain, dtype=dt), init.zeros((w,), dtype=dt)),
            }
        self.out = (init.kaiming_uniform((cfg.num_classes, w), w, rng, dtype=dt), init.zeros((cfg.num_classes,), dtype=dt))

    # -- parameter manifest ----------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name in ("conv1", "conv3", "conv5", "conv6", "conv7"):
            if name in self.conv:
                params[f"{name}.weight"] = self.conv[name].weight
                params[f"{name}.bias"] = self.conv[name].bias
        for name, (fwd, bwd) in self.recurrent.items():
            for group, p in (("fwd", fwd), ("bwd", bwd)):
                if p is None:
                    continue
                for fname in ("w_zx", "w_rx", "w_ox", "w_zh", "w_rh", "w_oh", "b_z", "b_r", "b_o"):
                    params[f"{name}.{group}.{fname}"] = getattr(p, fname)
        if self.gru_head is not None:
            for i, p in enumerate(self.gru_head, start=9):
                for fname in ("w_zx", "w_rx", "w_ox", "w_zh", "w_rh", "w_oh", "b_z", "b_r", "b_o"):
                    params[f"gru{i}.{fname}"] = getattr(p, fname)
        for name, (w, b) in self.fc.items():
            params[f"{name}.weight"] = w
            params[f"{name}.bias"] = b
        params["out11.weight"], params["out11.bias"] = self.out
        return params

    def zero_grads(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    # -- forward -----------------------------------------------------------------

    def _assert_shape(self, name: str, x: Tensor) -> None:
        want = self.trace.by_name(name).shape
        got = tuple(x.shape[-len(want):])
        if got != want:
            raise DimensionError(f"{name} produced {got}, trace expects {want}")

    def _forward(self, clips: Tensor, training: bool, rng, capture: str | None = None):
        cfg = self.config
        alpha = cfg.leaky_alpha
        keep = cfg.keep_prob
        if clips.data.ndim != 5:
            raise ValidationError(f"expected clips shaped (B,T,C,H,W), got {clips.shape}")
        b, t = clips.shape[:2]
        if cfg.architecture is Architecture.SPATIAL_ONLY and t != 1:
            raise ValidationError("spatial_only consumes a single frame per clip")
        captured: list[np.ndarray] = []

        def grab(name, maps):
            if capture == name:
                captured.extend(m.data.reshape(-1, *m.shape[-3:]) for m in maps)

        x = clips.reshape((b * t, *clips.shape[2:]))
        for name, pool_after in (("conv1", "pool2"), ("conv3", "pool4"), ("conv5", None)):
            layer = self.conv[name]
            x = leaky_relu(conv2d(x, layer.weight, layer.bias, stride=layer.stride, mode=PaddingMode.SAME), alpha)
            self._assert_shape(name, x)
            grab(name, [x])
            if pool_after:
                x = maxpool2d(x, window=3, stride=2)
                self._assert_shape(pool_after, x)
                grab(pool_after, [x])

        hidden: HiddenSequence | None = None
        frames: list[Tensor] | None = None
        for idx in (6, 7):
            conv_name, gru_name = f"conv{idx}", f"convgru{idx}"
            if conv_name in self.conv:
                layer = self.conv[conv_name]
                x = leaky_relu(conv2d(x, layer.weight, layer.bias, stride=1, mode=PaddingMode.SAME), alpha)
                self._assert_shape(conv_name, x)
                grab(conv_name, [x])
            else:
                if frames is None:
                    frames = [frame(x, i, t) for i in range(t)]
                fwd, bwd = self.recurrent[gru_name]
                if bwd is None:
                    hidden = HiddenSequence(fwd=convgru_forward(frames, fwd, cfg.update_rule))
                else:
                    hidden = bidirectional(frames, fwd, bwd, cfg.update_rule)
                for h in hidden.fwd:
                    self._assert_shape(gru_name, h)
                frames = combine_directions(hidden)
                grab(gru_name, frames)

        def head_single(feat: Tensor) -> Tensor:
            u = feat
            for name in ("fc9", "fc10"):
                w_, b_ = self.fc[name]
                u = dropout(leaky_relu(dense(u, w_, b_), alpha), keep, rng, training)
                self._assert_shape(name, u)
            return dense(u, *self.out)

        arch = cfg.architecture
        if arch is Architecture.SPATIAL_ONLY:
            logits = head_single(flatten(x, keep_first=True))
        elif arch is Architecture.GRU_ALEXNET:
            vecs = [flatten(frame(x, i, t), keep_first=True) for i in range(t)]
            g1, g2 = self.gru_head
            h1 = Tensor(np.zeros((b, cfg.head_width), dtype=cfg.np_dtype))
            h2 = Tensor(np.zeros((b, cfg.head_width), dtype=cfg.np_dtype))
            per_frame_logits = []
            for v in vecs:
                h1 = gru_vector_step(v, h1, g1)
                h2 = gru_vector_step(dropout(h1, keep, rng, training), h2, g2)
                per_frame_logits.append(dense(dropout(h2, keep, rng, training), *self.out))
            logits = mean_of(per_frame_logits)
        else:
            fused = fuse(hidden, cfg.fusion)
            if cfg.fusion is FusionMethod.FLAT:
                per_frame = []
                for v in fused:
                    u = v
                    for name in ("fc9", "fc10"):
                        w_, b_ = self.fc[name]
                        u = dropout(leaky_relu(dense(u, w_, b_), alpha), keep, rng, training)
                    per_frame.append(u)
                logits = dense(mean_of(per_frame), *self.out)
            else:
                logits = head_single(fused)
        self._assert_shape("logits", logits)
        if capture is not None:
            if not captured:
                raise ValidationError(f"layer {capture!r} produced no feature maps")
            return logits, captured
        return logits

    def forward_batch(self, clips, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        clips = as_tensor(clips, dtype=self.config.np_dtype)
        if training:
            return self._forward(clips, True, rng)
        with no_grad():
            return self._forward(clips, False, None)

    def forward(self, clip, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Logits for one (T,C,H,W) clip."""
        clip = as_tensor(clip, dtype=self.config.np_dtype)
        if clip.data.ndim != 4:
            raise ValidationError(f"expected clip shaped (T,C,H,W), got {clip.shape}")
        out = self.forward_batch(clip.reshape((1, *clip.shape)), training, rng)
        return out.reshape((self.config.num_classes,))


def build(config: ModelConfig) -> Model:
    return Model(config)


def forward(model: Model, clip, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    return model.forward(clip, training, rng)


def parameter_count(model: Model) -> int:
    return sum(t.size for t in model.parameters().values())


def export_feature_maps(model: Model, clip, layer: str = "conv1", frames: Iterable[int] | None = None) -> dict[tuple[int, int], np.ndarray]:
    """Per-channel 8-bit grayscale maps of one layer's output.

    Returns {(frame, channel): HxW uint8}; channels are min-max normalized
    independently, with flat (min == max) maps rendered mid-gray.
    """
    model.trace.by_name(layer)  # unknown layer -> error before any compute
    clip = as_tensor(clip, dtype=model.config.np_dtype)
    if clip.data.ndim != 4:
        raise ValidationError(f"expected clip shaped (T,C,H,W), got {clip.shape}")
    t = clip.shape[0]
    with no_grad():
        _, maps = model._forward(clip.reshape((1, *clip.shape)), False, None, capture=layer)
    if len(maps) == 1:  # trunk layers process all frames as one batch
        maps = [maps[0][i] for i in range(maps[0].shape[0])]
    else:
        maps = [m[0] for m in maps]
    if frames is None:
        frames = sorted({0, t // 2, t - 1})
    images: dict[tuple[int, int], np.ndarray] = {}
    for fi in frames:
        if not 0 <= fi < len(maps):
            raise ValidationError(f"frame {fi} outside clip of length {len(maps)}")
        fm = maps[fi]
        for c in range(fm.shape[0]):
            ch = fm[c]
            lo, hi = float(ch.min()), float(ch.max())
            if hi - lo < 1e-12:
                img = np.full(ch.shape, 128, dtype=np.uint8)
            else:
                img = np.round((ch - lo) / (hi - lo) * 255.0).astype(np.uint8)
            images[(fi, c)] = img
    return images
