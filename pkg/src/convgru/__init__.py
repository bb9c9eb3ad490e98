"""Differentiable ConvGRU video classification on numpy.

A from-scratch reverse-mode tensor core, convolutional GRU cells in both
time directions, the AlexNet-style architectures built on them, a complete
pitch-trial data pipeline (start detection, windowed sampling schemes,
augmentation, perturbations), a synthetic 9-class trial generator, and a
training/evaluation harness.
"""

from .errors import (
    CheckpointError,
    ConvGruError,
    DatasetError,
    DimensionError,
    NoStartFrameError,
    NonFiniteError,
    NumericalError,
    ValidationError,
)
from .gradcheck import CheckResult, grad_check, run_suite
from .models import (
    Architecture,
    Model,
    ModelConfig,
    ShapeTrace,
    build,
    export_feature_maps,
    forward,
    layer_parameter_counts,
    parameter_count,
    trace_shapes,
)
from .ops import (
    PaddingMode,
    conv2d,
    dense,
    dropout,
    global_avg_pool,
    leaky_relu,
    maxpool2d,
    out_dim,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    tanh,
)
from .recurrent import (
    BiasMode,
    ConvGruParams,
    FusionMethod,
    GruVectorParams,
    HiddenSequence,
    UpdateRule,
    bidirectional,
    combine_directions,
    convgru_backward_direction,
    convgru_forward,
    convgru_step,
    fuse,
    gru_vector_step,
    init_convgru_params,
    init_gru_vector_params,
)
from .tensor import Tensor, finite_checks, no_grad

__version__ = "0.1.0"
