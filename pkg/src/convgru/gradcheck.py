"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ValidationError
from .tensor import Tensor

REL_FLOOR = 1e-8


def grad_check(
    computation: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``computation`` must map ``inputs`` to a scalar Tensor and be
    deterministic (re-runnable). Checks every coordinate of every input by
    default; ``max_coords`` caps the checked coordinates per input with a
    deterministic subsample (for large end-to-end models). 64-bit inputs
    are required for the published tolerances to be meaningful.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    out = computation(inputs)
    if out.size != 1:
        raise ValidationError(f"gradient check requires a scalar output, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def f() -> float:
        return float(computation(inputs).data)

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idxs = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            ai = a.reshape(-1)[i]
            rel = abs(ai - numeric) / max(abs(ai), abs(numeric), REL_FLOOR)
            worst = max(worst, rel)
    for t in inputs:
        t.zero_grad()
    return worst


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def run_suite(seed: int = 0, eps: float = 1e-5, quick: bool = False) -> list[CheckResult]:
    """The full 64-bit gradient-check battery: every numeric kernel, the
    recurrent cells in both directions and update rules, and reduced
    end-to-end models for each fusion method.

    End-to-end checks subsample coordinates deterministically to stay
    inside the runtime budget; everything else checks every coordinate.
    """
    from . import ops, recurrent as rec
    from .models import Architecture, ModelConfig, build

    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def t64(*shape):
        return Tensor(rng.normal(size=shape))

    def check(name, f, inputs, max_coords=None):
        err = grad_check(f, inputs, eps=eps, max_coords=max_coords, rng=np.random.default_rng(seed + 1))
        results.append(CheckResult(name, err))

    check("conv2d_same_s1", lambda i: ops.conv2d(i[0], i[1], i[2]).sum(),
          [t64(2, 5, 5), t64(3, 2, 3, 3), t64(3)])
    check("conv2d_same_s2", lambda i: ops.conv2d(i[0], i[1], stride=2).sum(),
          [t64(2, 6, 6), t64(2, 2, 3, 3)])
    check("conv2d_valid", lambda i: ops.conv2d(i[0], i[1], stride=1, mode=ops.PaddingMode.VALID).sum(),
          [t64(2, 5, 5), t64(2, 2, 3, 3)])
    check("conv2d_1x1", lambda i: ops.conv2d(i[0], i[1]).sum(), [t64(3, 4, 4), t64(2, 3, 1, 1)])
    check("maxpool2d", lambda i: ops.maxpool2d(i[0]).sum(), [t64(2, 7, 7)])
    check("global_avg_pool", lambda i: ops.global_avg_pool(i[0]).sum(), [t64(3, 5, 5)])
    check("dense", lambda i: ops.dense(i[0], i[1], i[2]).sum(), [t64(6), t64(4, 6), t64(4)])
    check("sigmoid", lambda i: ops.sigmoid(i[0]).sum(), [t64(10)])
    check("tanh", lambda i: ops.tanh(i[0]).sum(), [t64(10)])
    check("leaky_relu", lambda i: ops.leaky_relu(i[0], 0.1).sum(), [Tensor(rng.normal(size=10) + 0.05)])
    check("dropout", lambda i: ops.dropout(i[0], 0.8, np.random.default_rng(seed + 2), True).sum(), [t64(16)])
    check("softmax_cross_entropy", lambda i: ops.softmax_cross_entropy(i[0], 3), [t64(9)])
    if quick:
        return results

    def cell_check(name, bidir, rule):
        pf = rec.init_convgru_params(2, 2, 3, rng=rng, dtype=np.float64)
        pb = rec.init_convgru_params(2, 2, 3, rng=rng, dtype=np.float64)
        x = t64(3, 2, 6, 6)

        def f(inputs):
            xi = inputs[0]
            qf = rec.ConvGruParams(*inputs[1:10])
            if bidir:
                qb = rec.ConvGruParams(*inputs[10:19])
                hidden = rec.bidirectional(xi, qf, qb, rule)
                feat = rec.fuse(hidden, rec.FusionMethod.LAST_FLAT)
            else:
                hs = rec.convgru_forward(xi, qf, rule)
                feat = rec.fuse(rec.HiddenSequence(fwd=hs), rec.FusionMethod.LAST_FLAT)
            return (feat * feat).sum()

        inputs = [x, *pf.tensors()] + (pb.tensors() if bidir else [])
        check(name, f, inputs)

    for rule in (rec.UpdateRule.STANDARD, rec.UpdateRule.PAPER_LITERAL):
        cell_check(f"convgru_uni_{rule.value}", False, rule)
        cell_check(f"convgru_bi_{rule.value}", True, rule)

    gp = rec.init_gru_vector_params(5, 4, rng=rng, dtype=np.float64)

    def gru_f(inputs):
        xi, hi, *ws = inputs
        h = rec.gru_vector_step(xi, hi, rec.GruVectorParams(*ws))
        return (h * h).sum()

    check("gru_vector_step", gru_f, [t64(5), t64(4), *gp.tensors()])

    for fusion in rec.FusionMethod:
        cfg = ModelConfig(
            architecture=Architecture.CONVGRU_2D,
            input_size=16,
            conv1_stride=1,  # the stride-4 trunk needs inputs >= 25
            width_div=32,
            fc_width=max(1, 4096 // 32),
            fusion=fusion,
            dtype="float64",
            dropout=1.0,
            seed=seed + 3,
        )
        model = build(cfg)
        clip = Tensor(rng.normal(size=(1, 3, 3, 16, 16)))
        params = list(model.parameters().values())

        def f(inputs, _model=model, _clip=clip):
            logits = _model._forward(_clip, training=False, rng=None)
            return ops.softmax_cross_entropy(logits, np.array([2]))

        check(f"end_to_end_convgru2d_{fusion.value}", f, params, max_coords=8)
    return results
