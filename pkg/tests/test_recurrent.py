"""ConvGRU cell, direction, fusion, and vector-GRU behavior."""

import numpy as np
import pytest

from convgru import recurrent as rec
from convgru.errors import DimensionError, ValidationError
from convgru.gradcheck import grad_check
from convgru.ops import softmax_cross_entropy, dense
from convgru.recurrent import BiasMode, FusionMethod, UpdateRule
from convgru.tensor import Tensor


def scalar_params(dtype=np.float64):
    """1-channel, 1x1-kernel parameters with hand-set values."""
    t = lambda v, shape: Tensor(np.full(shape, v, dtype=dtype))
    return rec.ConvGruParams(
        w_zx=t(0.5, (1, 1, 1, 1)), w_rx=t(0.2, (1, 1, 1, 1)), w_ox=t(0.7, (1, 1, 1, 1)),
        w_zh=t(-0.3, (1, 1, 1, 1)), w_rh=t(0.4, (1, 1, 1, 1)), w_oh=t(-0.5, (1, 1, 1, 1)),
        b_z=t(0.1, (1,)), b_r=t(0.0, (1,)), b_o=t(-0.2, (1,)),
    )


def zero_params(c_in, c_h, kernel=3, dtype=np.float64):
    z = lambda shape: Tensor(np.zeros(shape, dtype=dtype))
    return rec.ConvGruParams(
        w_zx=z((c_h, c_in, kernel, kernel)), w_rx=z((c_h, c_in, kernel, kernel)), w_ox=z((c_h, c_in, kernel, kernel)),
        w_zh=z((c_h, c_h, 1, 1)), w_rh=z((c_h, c_h, 1, 1)), w_oh=z((c_h, c_h, 1, 1)),
        b_z=z((c_h,)), b_r=z((c_h,)), b_o=z((c_h,)),
    )


def rand_params(rng, c_in, c_h, kernel=3, dtype=np.float64):
    p = rec.init_convgru_params(c_in, c_h, kernel, rng=rng, dtype=dtype)
    return p


def seq64(rng, t, c, n):
    return Tensor(rng.normal(size=(t, c, n, n)).astype(np.float64))


# -- forward propagation -------------------------------------------------------


def test_zero_params_standard_rule_gives_zero_states():
    rng = np.random.default_rng(0)
    hs = rec.convgru_forward(seq64(rng, 3, 2, 5), zero_params(2, 4))
    for h in hs:
        np.testing.assert_array_equal(h.data, np.zeros((4, 5, 5)))


def test_zero_params_paper_literal_halves_input():
    rng = np.random.default_rng(1)
    x = seq64(rng, 3, 2, 5)
    hs = rec.convgru_forward(x, zero_params(2, 2), rule=UpdateRule.PAPER_LITERAL)
    for t, h in enumerate(hs):
        np.testing.assert_allclose(h.data, 0.5 * x.data[t], atol=1e-12)


def test_scalar_transcript_standard():
    # frozen from the plain-float recurrence with these weights and inputs
    x = Tensor(np.array([1.0, -0.5]).reshape(2, 1, 1, 1))
    hs = rec.convgru_forward(x, scalar_params())
    assert hs[0].data.item() == pytest.approx(0.163748300460, abs=1e-12)
    assert hs[1].data.item() == pytest.approx(-0.217581668565, abs=1e-12)


def test_scalar_transcript_paper_literal():
    x = Tensor(np.array([1.0, -0.5]).reshape(2, 1, 1, 1))
    hs = rec.convgru_forward(x, scalar_params(), rule=UpdateRule.PAPER_LITERAL)
    assert hs[0].data.item() == pytest.approx(0.809404606686, abs=1e-12)
    assert hs[1].data.item() == pytest.approx(-0.589405524338, abs=1e-12)


def test_paper_literal_rejects_channel_mismatch():
    rng = np.random.default_rng(2)
    with pytest.raises(DimensionError):
        rec.convgru_forward(seq64(rng, 2, 3, 4), zero_params(3, 5), rule=UpdateRule.PAPER_LITERAL)


def test_gate_ranges():
    rng = np.random.default_rng(3)
    p = rand_params(rng, 2, 3)
    x = Tensor(rng.normal(size=(2, 4, 4)).astype(np.float64) * 3)
    h = Tensor(rng.normal(size=(3, 4, 4)).astype(np.float64))
    from convgru.ops import conv2d, sigmoid, tanh
    z = sigmoid(conv2d(x, p.w_zx) + conv2d(h, p.w_zh) + rec._bias(p.b_z))
    o = tanh(conv2d(x, p.w_ox) + conv2d(h, p.w_oh) + rec._bias(p.b_o))
    assert np.all((z.data > 0) & (z.data < 1))
    assert np.all((o.data > -1) & (o.data < 1))


def test_standard_rule_bounded_states():
    rng = np.random.default_rng(4)
    p = rand_params(rng, 2, 3)
    hs = rec.convgru_forward(seq64(rng, 8, 2, 5), p)
    for h in hs:
        assert np.all(np.abs(h.data) < 1.0)


# -- backward direction ----------------------------------------------------


def test_backward_direction_scalar_transcript():
    # state enters at t=T: index 1 is the first step computed, index 0 the last
    x = Tensor(np.array([1.0, -0.5]).reshape(2, 1, 1, 1))
    hs = rec.convgru_backward_direction(x, scalar_params())
    assert hs[0].data.item() == pytest.approx(-0.005281704904, abs=1e-12)
    assert hs[1].data.item() == pytest.approx(-0.268994499691, abs=1e-12)


def test_backward_direction_zero_params():
    rng = np.random.default_rng(5)
    for h in rec.convgru_backward_direction(seq64(rng, 4, 2, 4), zero_params(2, 3)):
        np.testing.assert_array_equal(h.data, 0.0)


@pytest.mark.parametrize("rule", [UpdateRule.STANDARD, UpdateRule.PAPER_LITERAL])
def test_time_reversal_identity(rule):
    rng = np.random.default_rng(6)
    for _ in range(5):
        x = rng.normal(size=(4, 2, 5, 5))
        p = rand_params(rng, 2, 2)
        back = rec.convgru_backward_direction(Tensor(x), p, rule)
        fwd_rev = rec.convgru_forward(Tensor(x[::-1].copy()), p, rule)
        for t in range(4):
            np.testing.assert_allclose(back[t].data, fwd_rev[3 - t].data, atol=1e-12)


# -- bidirectional ----------------------------------------------------------


def test_bidirectional_palindrome_symmetry():
    rng = np.random.default_rng(7)
    half = rng.normal(size=(3, 2, 4, 4))
    x = np.concatenate([half, half[::-1]], axis=0)  # palindrome, T=6
    p = rand_params(rng, 2, 3)
    hidden = rec.bidirectional(Tensor(x), p, p)
    for t in range(6):
        np.testing.assert_allclose(hidden.bwd[t].data, hidden.fwd[5 - t].data, atol=1e-12)


def test_bidirectional_composes_single_directions():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(3, 2, 4, 4)))
    pf, pb = rand_params(rng, 2, 3), rand_params(rng, 2, 3)
    hidden = rec.bidirectional(x, pf, pb)
    fwd = rec.convgru_forward(x, pf)
    bwd = rec.convgru_backward_direction(x, pb)
    for t in range(3):
        np.testing.assert_array_equal(hidden.fwd[t].data, fwd[t].data)
        np.testing.assert_array_equal(hidden.bwd[t].data, bwd[t].data)


def test_direction_independence():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(3, 2, 4, 4)))
    pf = rand_params(rng, 2, 3)
    pb = rand_params(rng, 2, 3)
    base = rec.bidirectional(x, pf, pb)
    pb.w_zx.data += 1.0  # perturb only the backward direction
    after = rec.bidirectional(x, pf, pb)
    for t in range(3):
        np.testing.assert_array_equal(base.fwd[t].data, after.fwd[t].data)
    assert any(not np.array_equal(a.data, b.data) for a, b in zip(base.bwd, after.bwd))


# -- fusion -------------------------------------------------------------------


def constant_hidden(value, t, c, n, bidir=False):
    maps = [Tensor(np.full((c, n, n), value)) for _ in range(t)]
    bwd = [Tensor(np.full((c, n, n), value)) for _ in range(t)] if bidir else None
    return rec.HiddenSequence(fwd=maps, bwd=bwd)


def test_constant_sequence_mean_equals_last():
    hidden = constant_hidden(1.25, t=5, c=3, n=4)
    np.testing.assert_array_equal(
        rec.fuse(hidden, FusionMethod.MEAN_FLAT).data,
        rec.fuse(hidden, FusionMethod.LAST_FLAT).data,
    )


def test_last_avg_length_is_channel_count():
    hidden = constant_hidden(0.5, t=4, c=256, n=3)
    assert rec.fuse(hidden, FusionMethod.LAST_AVG).shape == (256,)


def test_single_frame_fusions_coincide():
    rng = np.random.default_rng(10)
    h = Tensor(rng.normal(size=(3, 4, 4)))
    hidden = rec.HiddenSequence(fwd=[h])
    flat = rec.fuse(hidden, FusionMethod.FLAT)
    np.testing.assert_array_equal(rec.fuse(hidden, FusionMethod.LAST_FLAT).data, h.data.reshape(-1))
    np.testing.assert_array_equal(rec.fuse(hidden, FusionMethod.MEAN_FLAT).data, h.data.reshape(-1))
    assert len(flat) == 1
    np.testing.assert_array_equal(flat[0].data, h.data.reshape(-1))


def test_bidirectional_combination_before_or_after_flatten_coincide():
    rng = np.random.default_rng(11)
    fwd = [Tensor(rng.normal(size=(2, 3, 3))) for _ in range(3)]
    bwd = [Tensor(rng.normal(size=(2, 3, 3))) for _ in range(3)]
    hidden = rec.HiddenSequence(fwd=fwd, bwd=bwd)
    fused = rec.fuse(hidden, FusionMethod.LAST_FLAT)
    manual = 0.5 * (fwd[-1].data.reshape(-1) + bwd[0].data.reshape(-1))
    np.testing.assert_allclose(fused.data, manual, atol=1e-15)


def test_fuse_empty_sequence_rejected():
    with pytest.raises(ValidationError):
        rec.HiddenSequence(fwd=[]) and None
        rec.fuse(rec.HiddenSequence(fwd=[]), FusionMethod.LAST_FLAT)


def test_fusion_shape_contract():
    rng = np.random.default_rng(12)
    p = rand_params(rng, 2, 6)
    for t in (1, 3, 5):
        hs = rec.convgru_forward(seq64(rng, t, 2, 4), p)
        hidden = rec.HiddenSequence(fwd=hs)
        assert rec.fuse(hidden, FusionMethod.LAST_FLAT).shape == (6 * 4 * 4,)
        assert rec.fuse(hidden, FusionMethod.MEAN_FLAT).shape == (6 * 4 * 4,)
        assert rec.fuse(hidden, FusionMethod.LAST_AVG).shape == (6,)


# -- vector GRU ----------------------------------------------------------------


def test_gru_vector_zero_params():
    z = lambda shape: Tensor(np.zeros(shape))
    p = rec.GruVectorParams(
        w_zx=z((4, 6)), w_rx=z((4, 6)), w_ox=z((4, 6)),
        w_zh=z((4, 4)), w_rh=z((4, 4)), w_oh=z((4, 4)),
        b_z=z(4), b_r=z(4), b_o=z(4),
    )
    h = rec.gru_vector_step(Tensor(np.ones(6)), Tensor(np.zeros(4)), p)
    np.testing.assert_array_equal(h.data, np.zeros(4))


def test_gru_vector_matches_convgru_on_1x1_maps():
    rng = np.random.default_rng(13)
    n_in, n_h = 3, 4
    vp = rec.init_gru_vector_params(n_in, n_h, rng=rng, dtype=np.float64)
    cp = rec.ConvGruParams(
        w_zx=Tensor(vp.w_zx.data.reshape(n_h, n_in, 1, 1)),
        w_rx=Tensor(vp.w_rx.data.reshape(n_h, n_in, 1, 1)),
        w_ox=Tensor(vp.w_ox.data.reshape(n_h, n_in, 1, 1)),
        w_zh=Tensor(vp.w_zh.data.reshape(n_h, n_h, 1, 1)),
        w_rh=Tensor(vp.w_rh.data.reshape(n_h, n_h, 1, 1)),
        w_oh=Tensor(vp.w_oh.data.reshape(n_h, n_h, 1, 1)),
        b_z=Tensor(vp.b_z.data), b_r=Tensor(vp.b_r.data), b_o=Tensor(vp.b_o.data),
    )
    x = rng.normal(size=n_in)
    h0 = rng.normal(size=n_h)
    hv = rec.gru_vector_step(Tensor(x), Tensor(h0), vp)
    hc = rec.convgru_step(Tensor(x.reshape(n_in, 1, 1)), Tensor(h0.reshape(n_h, 1, 1)), cp)
    np.testing.assert_allclose(hv.data, hc.data.reshape(-1), atol=1e-12)


def test_gru_vector_gradient():
    rng = np.random.default_rng(14)
    p = rec.init_gru_vector_params(5, 4, rng=rng, dtype=np.float64)
    x = Tensor(rng.normal(size=5))
    h0 = Tensor(rng.normal(size=4))

    def f(inputs):
        xi, hi, *ws = inputs
        q = rec.GruVectorParams(*ws)
        h = rec.gru_vector_step(xi, hi, q)
        h = rec.gru_vector_step(xi, h, q)
        return (h * h).sum()

    assert grad_check(f, [x, h0, *p.tensors()], eps=1e-5) <= 1e-4


# -- gradients through the recurrence -----------------------------------------


@pytest.mark.parametrize("rule", [UpdateRule.STANDARD, UpdateRule.PAPER_LITERAL])
def test_convgru_sequence_gradient(rule):
    rng = np.random.default_rng(15)
    c = 2
    p = rand_params(rng, c, c)
    x = seq64(rng, 3, c, 6)

    def f(inputs):
        xi, *ws = inputs
        q = rec.ConvGruParams(*ws)
        hs = rec.convgru_forward(xi, q, rule)
        return (hs[-1] * hs[-1]).sum()

    assert grad_check(f, [x, *p.tensors()], eps=1e-5) <= 1e-4


def test_tiny_convgru_network_gradient():
    # full tiny net: bi-ConvGRU -> LAST_FLAT -> dense -> cross entropy
    rng = np.random.default_rng(16)
    pf = rand_params(rng, 2, 2)
    pb = rand_params(rng, 2, 2)
    w = Tensor(rng.normal(size=(3, 2 * 6 * 6)).astype(np.float64) * 0.1)
    b = Tensor(np.zeros(3))
    x = seq64(rng, 3, 2, 6)

    def f(inputs):
        xi, wi, bi, *ws = inputs
        qf = rec.ConvGruParams(*ws[:9])
        qb = rec.ConvGruParams(*ws[9:])
        hidden = rec.bidirectional(xi, qf, qb)
        feat = rec.fuse(hidden, FusionMethod.LAST_FLAT)
        return softmax_cross_entropy(dense(feat, wi, bi), 1)

    err = grad_check(f, [x, w, b, *pf.tensors(), *pb.tensors()], eps=1e-5)
    assert err <= 1e-4


def test_spatial_bias_mode_shapes():
    rng = np.random.default_rng(17)
    p = rec.init_convgru_params(2, 3, rng=rng, bias_mode=BiasMode.SPATIAL, spatial=5, dtype=np.float64)
    assert p.b_z.shape == (3, 5, 5)
    hs = rec.convgru_forward(seq64(rng, 2, 2, 5), p)
    assert hs[0].shape == (3, 5, 5)
