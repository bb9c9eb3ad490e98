"""Optimizer math, training loop reproducibility, and evaluation."""

import hashlib

import numpy as np
import pytest

from convgru import datapipe as dp
from convgru import synthgen as sg
from convgru import trainer
from convgru.errors import NumericalError, ValidationError
from convgru.models import Architecture, ModelConfig, build
from convgru.tensor import Tensor
from convgru.trainer import AdamState, TrainConfig, adam_step


# -- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_is_identity():
    p = Tensor(np.zeros(4), requires_grad=True)
    p.grad = np.zeros(4)
    state = AdamState()
    adam_step({"p": p}, state, TrainConfig(l2=0.0))
    np.testing.assert_array_equal(p.data, np.zeros(4))
    np.testing.assert_array_equal(state.m["p"], np.zeros(4))
    np.testing.assert_array_equal(state.v["p"], np.zeros(4))


def test_adam_first_step_magnitude():
    # bias-corrected first step: lr * g / (|g| + eps) ~ lr, against the sign of g
    lr = 0.01
    p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    p.grad = np.array([0.5, -2.0])
    adam_step({"p": p}, AdamState(), TrainConfig(learning_rate=lr, l2=0.0))
    np.testing.assert_allclose(p.data, [1.0 - lr, 1.0 + lr], rtol=1e-6)


def test_adam_l2_decays_weights():
    p = Tensor(np.array([2.0]), requires_grad=True)
    state = AdamState()
    values = [2.0]
    for _ in range(5):
        p.grad = np.zeros(1)  # zero data gradient; only the decay term acts
        adam_step({"p": p}, state, TrainConfig(learning_rate=0.1, l2=0.01))
        values.append(float(p.data[0]))
    assert all(b < a for a, b in zip(values, values[1:]))
    assert values[-1] > 0.0


def test_adam_rejects_non_finite_gradient():
    p = Tensor(np.ones(2), requires_grad=True)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericalError):
        adam_step({"p": p}, AdamState(), TrainConfig())


def test_adam_skips_parameters_without_gradient():
    p = Tensor(np.ones(2), requires_grad=True)
    adam_step({"p": p}, AdamState(), TrainConfig())
    np.testing.assert_array_equal(p.data, np.ones(2))


# -- training on a small synthetic dataset ------------------------------------


@pytest.fixture(scope="module")
def pose_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("pose_ds")
    sg.generate_dataset(sg.SynthSpec(mode="pose", resolution=96, start=15), 1, root, seed=5)
    return dp.Dataset(root)


def small_model(arch=Architecture.CONVGRU_1D, **kw):
    cfg = dict(architecture=arch, input_size=64, width_div=16, fc_width=128, seed=1)
    cfg.update(kw)
    return build(ModelConfig(**cfg))


def test_zero_learning_rate_keeps_parameters(pose_dataset):
    model = small_model()
    before = {k: t.data.copy() for k, t in model.parameters().items()}
    cfg = TrainConfig(learning_rate=0.0, l2=0.0, max_epochs=2, scheme_id=4, batch_size=4,
                      eval_interval=2, seed=0, strict_repro=True)
    trainer.train(model, pose_dataset, cfg,
                  train_trials=pose_dataset.trials[:4], test_trials=pose_dataset.trials[4:6])
    for k, t in model.parameters().items():
        np.testing.assert_array_equal(before[k], t.data)


def test_overfit_small_set(pose_dataset):
    # 8 trials, reduced model: the deterministic evaluation accuracy on the
    # training trials must reach 1.0 well within 200 epochs
    model = small_model()
    eight = pose_dataset.trials[:8]
    cfg = TrainConfig(learning_rate=2e-3, l2=0.0, max_epochs=200, scheme_id=4, batch_size=8,
                      eval_interval=5, seed=2, early_stop_acc=1.0)
    result = trainer.train(model, pose_dataset, cfg, train_trials=eight, test_trials=eight)
    assert result.best_test_acc == 1.0
    assert result.metrics[-1].epoch <= 200


def test_training_deterministic_with_fixed_seed(pose_dataset):
    runs = []
    for _ in range(2):
        model = small_model()
        cfg = TrainConfig(learning_rate=1e-3, max_epochs=3, scheme_id=4, batch_size=4,
                          eval_interval=3, seed=7, strict_repro=True)
        result = trainer.train(model, pose_dataset, cfg,
                               train_trials=pose_dataset.trials[:6], test_trials=pose_dataset.trials[6:8])
        runs.append((result.metrics, {k: t.data.copy() for k, t in model.parameters().items()}))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


def test_train_writes_outputs(pose_dataset, tmp_path):
    model = small_model()
    cfg = TrainConfig(learning_rate=1e-3, max_epochs=2, scheme_id=4, batch_size=4,
                      eval_interval=1, seed=3, strict_repro=True)
    result = trainer.train(model, pose_dataset, cfg, out_dir=tmp_path,
                           train_trials=pose_dataset.trials[:4], test_trials=pose_dataset.trials[4:6])
    text = (tmp_path / "metrics.csv").read_text().splitlines()
    assert text[0] == trainer.METRICS_HEADER
    assert len(text) == 1 + len(result.metrics)
    assert (tmp_path / "final.ckpt").exists() and (tmp_path / "best.ckpt").exists()
    from convgru.checkpoint import load

    final = load(tmp_path / "final.ckpt")
    for a, b in zip(final.parameters().values(), model.parameters().values()):
        np.testing.assert_array_equal(a.data, b.data)


# -- evaluation -----------------------------------------------------------------


def params_digest(model):
    h = hashlib.sha256()
    for t in model.parameters().values():
        h.update(t.data.tobytes())
    return h.hexdigest()


def test_constant_logit_model_predicts_lowest_class(pose_dataset):
    model = small_model()
    w, b = model.out
    w.data[:] = 0.0
    b.data[:] = 0.0
    res = trainer.evaluate(model, pose_dataset, pose_dataset.trials, scheme_id=4)
    assert res.accuracy == pytest.approx(1.0 / 9.0)
    assert res.confusion[:, 0].sum() == 9
    assert res.confusion.sum() == 9
    np.testing.assert_array_equal(res.confusion.sum(axis=1), np.ones(9, dtype=np.int64))


def test_evaluate_does_not_mutate_parameters(pose_dataset):
    model = small_model()
    before = params_digest(model)
    trainer.evaluate(model, pose_dataset, pose_dataset.trials[:3], scheme_id=4)
    assert params_digest(model) == before


def test_single_list_average_equals_plain_forward(pose_dataset):
    # scheme 6's first list with one trial: averaging over one clip is the clip
    model = small_model()
    info = pose_dataset.trials[0]
    cfg = pose_dataset.preprocess_config(model.config.input_size)
    clips = dp.build_test_clips(pose_dataset, info, dp.get_scheme(6), cfg)
    single = trainer.evaluate_clips(model, [(info.label, np.stack(clips[:1]))])
    from convgru.ops import softmax

    logits = model.forward(clips[0]).data
    assert single.confusion[info.label, int(np.argmax(softmax(logits)))] == 1


def test_spatial_only_evaluation(pose_dataset):
    model = small_model(arch=Architecture.SPATIAL_ONLY)
    res = trainer.evaluate(model, pose_dataset, pose_dataset.trials[:3], scheme_id=2)
    assert res.n_trials == 3


def test_permuted_evaluation_runs(pose_dataset):
    model = small_model()
    rng = np.random.default_rng(0)
    res = trainer.evaluate(model, pose_dataset, pose_dataset.trials[:3], scheme_id=4,
                           rng=rng, permute_frames=True)
    assert 0.0 <= res.accuracy <= 1.0


# -- robustness harness ------------------------------------------------------


def test_robustness_rows_and_control(pose_dataset):
    model = small_model()
    trials = pose_dataset.trials[:4]
    rows = trainer.robustness_eval(model, pose_dataset, trials, scheme_id=4,
                                   kind="missing", levels=[0, 1], repeats=3, seed=9)
    assert len(rows) == 6
    assert [r[:3] for r in rows] == [("missing", 0, 1), ("missing", 0, 2), ("missing", 0, 3),
                                     ("missing", 1, 1), ("missing", 1, 2), ("missing", 1, 3)]
    control = trainer.evaluate(model, pose_dataset, trials, scheme_id=4).accuracy
    for _, level, _, acc in rows:
        if level == 0:
            assert acc == control
    csv = trainer.robustness_csv(rows)
    lines = csv.splitlines()
    assert lines[0] == trainer.ROBUSTNESS_HEADER
    assert sum(1 for l in lines if ",mean," in l) == 2


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        TrainConfig(scheme_id=9)
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"learning_rate": 1e-4, "bogus": 1})
