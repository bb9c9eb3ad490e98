"""Optimization loop, evaluation with test-time sequence averaging, and
robustness sweeps.

Adam applies L2 as an additive gradient term (classical coupled weight
decay); the reported loss is the data term only. Training is reproducible
given the config seed: the split, batch order, sampling, augmentation, and
dropout all draw from generators derived from it. ``strict_repro`` zeroes
the wall-clock column so metrics files are byte-identical across runs.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import checkpoint, datapipe as dp
from .errors import NumericalError, ValidationError
from .models import Architecture, Model
from .ops import softmax, softmax_cross_entropy
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,train_loss,train_acc,test_acc,seconds"
ROBUSTNESS_HEADER = "kind,level,repeat,accuracy"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 300
    l2: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    keep_prob: float | None = None  # None: use the model config's dropout
    scheme_id: int = 1
    fusion: str | None = None  # resolved into the model config before build
    seed: int = 0
    eval_interval: int = 5
    early_stop_acc: float | None = None
    strict_repro: bool = False

    def __post_init__(self):
        if self.learning_rate < 0 or self.l2 < 0 or self.eps <= 0 or self.batch_size < 1:
            raise ValidationError("rates must be non-negative and batch size >= 1")
        if self.max_epochs < 1 or self.eval_interval < 1:
            raise ValidationError("epochs and evaluation interval must be >= 1")
        dp.get_scheme(self.scheme_id)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    seconds: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.train_loss:.6f},{self.train_acc:.6f},{self.test_acc:.6f},{self.seconds:.3f}"


# -- Adam -----------------------------------------------------------------------


class AdamState:
    def __init__(self):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], state: AdamState, cfg: TrainConfig) -> None:
    """One update with bias correction; L2 enters as lambda * w on the
    gradient. Parameters with no accumulated gradient are skipped."""
    state.t += 1
    t = state.t
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name} at step {t}")
        if cfg.l2 > 0.0:
            g = g + cfg.l2 * p.data
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# -- evaluation -------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows: true class, columns: predicted
    n_trials: int


def _explode_for_spatial(clips: list[np.ndarray]) -> list[np.ndarray]:
    return [c[i : i + 1] for c in clips for i in range(c.shape[0])]


def prepare_eval_clips(
    dataset: dp.Dataset,
    trials: list[dp.TrialInfo],
    scheme: dp.SamplingScheme,
    cfg: dp.PreprocessConfig,
    single_frame: bool = False,
    perturbation: dp.PerturbationSpec | None = None,
    rng: np.random.Generator | None = None,
) -> list[tuple[int, np.ndarray]]:
    """Per trial: (label, stacked clips (L,T,C,S,S)) ready for evaluation."""
    out = []
    for info in trials:
        clips = dp.build_test_clips(dataset, info, scheme, cfg, perturbation, rng)
        if single_frame:
            clips = _explode_for_spatial(clips)
        out.append((info.label, np.stack(clips)))
    return out


def evaluate_clips(
    model: Model,
    labeled_clips: list[tuple[int, np.ndarray]],
    batch_size: int = 32,
    permute_frames: bool = False,
    permute_rng: np.random.Generator | None = None,
) -> EvalResult:
    """Average the softmax over each trial's clip list; argmax predicts
    (ties resolve to the lowest class index)."""
    if not labeled_clips:
        raise ValidationError("empty evaluation split")
    k = model.config.num_classes
    flat: list[np.ndarray] = []
    spans: list[tuple[int, int]] = []
    for _, clips in labeled_clips:
        spans.append((len(flat), len(flat) + len(clips)))
        for clip in clips:
            if permute_frames:
                if permute_rng is None:
                    raise ValidationError("frame permutation needs a generator")
                clip = clip[permute_rng.permutation(clip.shape[0])]
            flat.append(clip)
    probs = np.zeros((len(flat), k))
    for lo in range(0, len(flat), batch_size):
        batch = np.stack(flat[lo : lo + batch_size])
        logits = model.forward_batch(batch).data
        probs[lo : lo + batch.shape[0]] = softmax(logits)
    confusion = np.zeros((k, k), dtype=np.int64)
    correct = 0
    for (label, _), (lo, hi) in zip(labeled_clips, spans):
        pred = int(np.argmax(probs[lo:hi].mean(axis=0)))
        confusion[label, pred] += 1
        correct += int(pred == label)
    return EvalResult(correct / len(labeled_clips), confusion, len(labeled_clips))


def evaluate(
    model: Model,
    dataset: dp.Dataset,
    trials: list[dp.TrialInfo],
    scheme_id: int,
    perturbation: dp.PerturbationSpec | None = None,
    rng: np.random.Generator | None = None,
    permute_frames: bool = False,
) -> EvalResult:
    scheme = dp.get_scheme(scheme_id)
    cfg = dataset.preprocess_config(model.config.input_size)
    single = model.config.architecture is Architecture.SPATIAL_ONLY
    clips = prepare_eval_clips(dataset, trials, scheme, cfg, single, perturbation, rng)
    return evaluate_clips(model, clips, permute_frames=permute_frames, permute_rng=rng)


def robustness_eval(
    model: Model,
    dataset: dp.Dataset,
    trials: list[dp.TrialInfo],
    scheme_id: int,
    kind: str,
    levels: list[int],
    repeats: int = 3,
    seed: int = 0,
) -> list[tuple[str, int, int, float]]:
    """(kind, level, repeat, accuracy) rows; level 0 is the unperturbed
    control, other levels use per-(level, repeat) derived seeds."""
    rows = []
    for level in levels:
        for r in range(1, repeats + 1):
            rng = np.random.default_rng(np.random.SeedSequence((seed, level, r)))
            spec = dp.PerturbationSpec(kind, level, seed) if level > 0 else None
            res = evaluate(model, dataset, trials, scheme_id, perturbation=spec, rng=rng)
            rows.append((kind, level, r, res.accuracy))
    return rows


def robustness_csv(rows: list[tuple[str, int, int, float]]) -> str:
    lines = [ROBUSTNESS_HEADER]
    by_level: dict[tuple[str, int], list[float]] = {}
    for kind, level, r, acc in rows:
        lines.append(f"{kind},{level},{r},{acc:.6f}")
        by_level.setdefault((kind, level), []).append(acc)
    for (kind, level), accs in by_level.items():
        lines.append(f"{kind},{level},mean,{np.mean(accs):.6f}")
    return "\n".join(lines) + "\n"


# -- training ---------------------------------------------------------------------


@dataclass
class TrainResult:
    metrics: list[EpochMetrics]
    final_test_acc: float
    best_test_acc: float
    best_epoch: int
    stopped_early: bool = False
    files: dict[str, Path] = field(default_factory=dict)


def _seeded(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy))


def train(
    model: Model,
    dataset: dp.Dataset,
    cfg: TrainConfig,
    out_dir=None,
    train_trials: list[dp.TrialInfo] | None = None,
    test_trials: list[dp.TrialInfo] | None = None,
) -> TrainResult:
    """Full optimization run; writes metrics.csv, final.ckpt and best.ckpt
    when out_dir is given."""
    if cfg.keep_prob is not None:
        model.config.dropout = cfg.keep_prob
        model.config.dropout_is_keep_prob = True
    if train_trials is None or test_trials is None:
        train_trials, test_trials = dp.split(dataset.trials, _seeded(cfg.seed, 1))
    scheme = dp.get_scheme(cfg.scheme_id)
    pre_cfg = dataset.preprocess_config(model.config.input_size)
    single = model.config.architecture is Architecture.SPATIAL_ONLY
    trial_uid = {info.path: i for i, info in enumerate(sorted(dataset.trials, key=lambda t: t.path))}

    eval_clips = prepare_eval_clips(dataset, test_trials, scheme, pre_cfg, single)
    params = model.parameters()
    state = AdamState()
    metrics: list[EpochMetrics] = []
    best_acc, best_epoch = -1.0, 0
    best_blob: dict[str, np.ndarray] | None = None
    # baseline evaluation; carried forward between interval evaluations
    test_acc = evaluate_clips(model, eval_clips, cfg.batch_size).accuracy
    stopped = False

    for epoch in range(1, cfg.max_epochs + 1):
        tic = time.perf_counter()
        order = _seeded(cfg.seed, 2, epoch).permutation(len(train_trials))
        losses = []
        correct = 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch_infos = [train_trials[i] for i in order[lo : lo + cfg.batch_size]]
            clips, labels = [], []
            for info in batch_infos:
                rng = _seeded(cfg.seed, 3, epoch, trial_uid[info.path])
                clips.append(dp.build_train_clip(dataset, info, scheme, pre_cfg, rng, single_frame=single))
                labels.append(info.label)
            x = np.stack(clips)
            y = np.array(labels)
            try:
                logits = model.forward_batch(x, training=True, rng=_seeded(cfg.seed, 4, epoch, b))
                loss = softmax_cross_entropy(logits, y)
            except NumericalError as e:
                raise NumericalError(f"epoch {epoch} batch {b} ({[i.path for i in batch_infos]}): {e}") from e
            model.zero_grads()
            loss.backward()
            adam_step(params, state, cfg)
            losses.append(float(loss.data))
            correct += int((np.argmax(logits.data, axis=1) == y).sum())

        if epoch % cfg.eval_interval == 0 or epoch == cfg.max_epochs:
            test_acc = evaluate_clips(model, eval_clips, cfg.batch_size).accuracy
            if test_acc > best_acc:
                best_acc, best_epoch = test_acc, epoch
                best_blob = {k: t.data.copy() for k, t in params.items()}
        seconds = 0.0 if cfg.strict_repro else time.perf_counter() - tic
        metrics.append(EpochMetrics(epoch, float(np.mean(losses)), correct / len(train_trials), test_acc, seconds))
        log.info("epoch %d loss %.4f train %.3f test %.3f", epoch, metrics[-1].train_loss,
                 metrics[-1].train_acc, metrics[-1].test_acc)
        if cfg.early_stop_acc is not None and test_acc >= cfg.early_stop_acc:
            stopped = True
            break

    result = TrainResult(metrics, test_acc, best_acc, best_epoch, stopped)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        extra = {"train_config": cfg.to_dict(), "final_test_acc": f"{test_acc:.6f}"}
        mpath = out_dir / "metrics.csv"
        mpath.write_text("\n".join([METRICS_HEADER, *(m.csv_row() for m in metrics)]) + "\n")
        fpath = out_dir / "final.ckpt"
        checkpoint.save(model, fpath, extra=extra)
        result.files = {"metrics": mpath, "final": fpath}
        if best_blob is not None:
            for k, t in params.items():
                current = t.data
                t.data = best_blob[k]
                best_blob[k] = current
            bpath = out_dir / "best.ckpt"
            checkpoint.save(model, bpath, extra={**extra, "best_epoch": best_epoch,
                                                 "best_test_acc": f"{best_acc:.6f}"})
            for k, t in params.items():  # restore final weights
                t.data, best_blob[k] = best_blob[k], t.data
            result.files["best"] = bpath
    return result


def confusion_csv(confusion: np.ndarray) -> str:
    return "\n".join(",".join(str(int(v)) for v in row) for row in confusion) + "\n"
