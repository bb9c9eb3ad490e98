"""Trial storage, start-frame detection, action windows, frame sampling,
augmentation, participant-wise splits, and evaluation-time perturbations.

Dataset directory layout::

    <root>/manifest.json
    <root>/<participant>/<trial_id>/frame_000.png ... frame_089.png
    <root>/<participant>/<trial_id>/joints.csv     # frame, then J x 3 coords
    <root>/<participant>/<trial_id>/label.txt      # block index 0-8

Frames are 8-bit RGB. The manifest records the dataset name, joint units,
pixel normalization constants, the detection geometry its thresholds were
tuned under, and the trial list. Trials are 90 frames at 30 fps; all
frame indices are 0-based, motion is assumed absent before frame 11 and is
measured against reference frame 10.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import DatasetError, NoStartFrameError, ValidationError

log = logging.getLogger(__name__)

TRIAL_FRAMES = 90
WINDOW_LEN = 40
REF_FRAME = 10
DELTA1 = 6.0
DELTA2 = 0.16


# -- preprocessing geometry ------------------------------------------------------


@dataclass(frozen=True)
class PreprocessConfig:
    """Crop/resize/normalize geometry, scaled from the 224-pixel reference
    pipeline (center crop 240, training crop 235)."""

    input_size: int = 224
    center_crop: int = 240
    jitter_crop: int = 235
    norm_mean: float = 0.5
    norm_std: float = 0.5
    brightness: float = 0.5
    contrast: float = 0.5
    saturation: float = 0.5
    hue: float = 0.1

    @classmethod
    def for_input(cls, input_size: int, norm_mean: float = 0.5, norm_std: float = 0.5) -> "PreprocessConfig":
        return cls(
            input_size=input_size,
            center_crop=round(input_size * 240 / 224),
            jitter_crop=round(input_size * 235 / 224),
            norm_mean=norm_mean,
            norm_std=norm_std,
        )


def _crop(img: np.ndarray, size: int, top: int, left: int) -> np.ndarray:
    h, w = img.shape[:2]
    if top < 0 or left < 0 or top + size > h or left + size > w:
        # replicate edges so shifted crops keep their exact displacement
        pt = max(0, -top)
        pb = max(0, top + size - h)
        pl = max(0, -left)
        pr = max(0, left + size - w)
        img = cv2.copyMakeBorder(img, pt, pb, pl, pr, cv2.BORDER_REPLICATE)
        top += pt
        left += pl
    return img[top : top + size, left : left + size]


def center_crop(img: np.ndarray, size: int, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Crop `size` x `size` about the image center displaced by offset (dy, dx)."""
    h, w = img.shape[:2]
    top = (h - size) // 2 + offset[0]
    left = (w - size) // 2 + offset[1]
    return _crop(img, size, top, left)


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    return cv2.resize(img, (size, size), interpolation=cv2.INTER_LINEAR)


def _rgb_to_gray(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def _jitter(img: np.ndarray, cfg: PreprocessConfig, rng: np.random.Generator) -> np.ndarray:
    fb = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness)
    fc = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast)
    fs = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation)
    hue = rng.uniform(-cfg.hue, cfg.hue)
    img = img * fb
    gray = _rgb_to_gray(np.clip(img, 0.0, 1.0))
    img = fc * img + (1.0 - fc) * gray.mean()
    img = fs * img + (1.0 - fs) * gray[..., None]
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    if cfg.hue > 0.0:
        hsv = cv2.cvtColor(img, cv2.COLOR_RGB2HSV)
        hsv[..., 0] = (hsv[..., 0] + hue * 360.0) % 360.0
        img = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return np.clip(img, 0.0, 1.0)


def _normalize_chw(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    img = (img - cfg.norm_mean) / cfg.norm_std
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32)


def augment_train(image: np.ndarray, rng: np.random.Generator, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """Training-time pipeline: center crop, random crop, resize, color
    jitter, normalize. Returns (3, S, S) float32. Deterministic given rng."""
    cfg = cfg or PreprocessConfig()
    if image.shape[0] < cfg.center_crop or image.shape[1] < cfg.center_crop:
        raise ValidationError(
            f"source {image.shape[1]}x{image.shape[0]} smaller than center crop {cfg.center_crop}"
        )
    img = center_crop(image, cfg.center_crop)
    play = cfg.center_crop - cfg.jitter_crop
    top, left = int(rng.integers(0, play + 1)), int(rng.integers(0, play + 1))
    img = img[top : top + cfg.jitter_crop, left : left + cfg.jitter_crop]
    img = _resize(img, cfg.input_size).astype(np.float32) / 255.0
    img = _jitter(img, cfg, rng)
    return _normalize_chw(img, cfg)


def preprocess_test(image: np.ndarray, cfg: PreprocessConfig | None = None, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Deterministic evaluation pipeline: center crop, resize, normalize."""
    cfg = cfg or PreprocessConfig()
    img = center_crop(image, cfg.center_crop, offset)
    img = _resize(img, cfg.input_size).astype(np.float32) / 255.0
    return _normalize_chw(img, cfg)


# -- start-frame detection --------------------------------------------------


def detect_start(
    frames: np.ndarray,
    joints: np.ndarray,
    delta1: float = DELTA1,
    delta2: float = DELTA2,
    crop: int = 240,
) -> int:
    """First frame i >= 11 where the image difference against frame 10 stays
    above delta1 and nondecreasing for 8 frames and the joint distance at i
    reaches delta2.

    Frames are center-cropped to `crop` and scaled to [0,1] before the
    Frobenius norm; joints are stacked into one vector for the 2-norm.
    """
    t_len = len(frames)
    if t_len <= REF_FRAME + 8:
        raise ValidationError(f"trial too short for detection: {t_len} frames")
    if len(joints) != t_len:
        raise ValidationError("joints and frames lengths differ")
    ref_img = center_crop(frames[REF_FRAME], crop).astype(np.float32) / 255.0
    ref_joints = joints[REF_FRAME].reshape(-1)
    dx = np.zeros(t_len)
    dtheta = np.zeros(t_len)
    for t in range(REF_FRAME + 1, t_len):
        img = center_crop(frames[t], crop).astype(np.float32) / 255.0
        dx[t] = float(np.linalg.norm(img - ref_img))
        dtheta[t] = float(np.linalg.norm(joints[t].reshape(-1) - ref_joints))
    for i in range(REF_FRAME + 1, t_len - 7):
        seg = dx[i : i + 8]
        if np.all(seg >= delta1) and np.all(np.diff(seg) >= 0) and dtheta[i] >= delta2:
            return i
    raise NoStartFrameError("no frame satisfies the start conditions")


@dataclass
class ActionWindow:
    """A 40-frame interval from the detected start."""

    start: int
    label: int

    @property
    def indices(self) -> range:
        return range(self.start, self.start + WINDOW_LEN)


def make_window(trial_len: int, start: int, label: int) -> ActionWindow:
    if trial_len < WINDOW_LEN:
        raise ValidationError(f"trial of {trial_len} frames is shorter than the {WINDOW_LEN}-frame window")
    if start + WINDOW_LEN > trial_len:
        clamped = trial_len - WINDOW_LEN
        log.warning("window start %d clamped to %d (trial length %d)", start, clamped, trial_len)
        start = clamped
    return ActionWindow(start=start, label=label)


# -- sampling schemes ------------------------------------------------------------


@dataclass(frozen=True)
class SamplingScheme:
    id: int
    train_starts: tuple[int, ...]
    train_steps: tuple[int, ...]  # one entry = fixed step; several = per-gap choices
    length: int
    test_starts: tuple[int, ...]
    test_step: int

    @property
    def variable_step(self) -> bool:
        return len(self.train_steps) > 1


SCHEMES: dict[int, SamplingScheme] = {
    1: SamplingScheme(1, (0, 1), (2,), 20, (0, 1), 2),
    2: SamplingScheme(2, (0, 1, 2, 3), (4,), 10, (0, 1, 2, 3), 4),
    3: SamplingScheme(3, (0, 1, 2, 3, 4), (5,), 8, (0, 1, 2, 3, 4), 5),
    4: SamplingScheme(4, tuple(range(8)), (8,), 5, tuple(range(8)), 8),
    5: SamplingScheme(5, (0, 1, 2, 3), (3, 4, 5), 10, (0, 1, 2, 3), 4),
    6: SamplingScheme(6, tuple(range(30)), (1,), 10, (0, 10, 20, 30), 1),
    7: SamplingScheme(7, tuple(range(20)), (2,), 10, (0, 1, 20, 21), 2),
}


def get_scheme(scheme_id: int) -> SamplingScheme:
    if scheme_id not in SCHEMES:
        raise ValidationError(f"unknown sampling scheme {scheme_id}; valid ids are 1-7")
    return SCHEMES[scheme_id]


def sample_train(scheme: SamplingScheme, rng: np.random.Generator) -> list[int]:
    """One training index list: random start offset, then fixed or per-gap
    random steps; variable-step draws are resampled whole until they fit
    inside the 40-frame window."""
    first = int(rng.choice(scheme.train_starts))
    if not scheme.variable_step:
        step = scheme.train_steps[0]
        return [first + k * step for k in range(scheme.length)]
    while True:
        gaps = rng.choice(scheme.train_steps, size=scheme.length - 1)
        if first + int(gaps.sum()) <= WINDOW_LEN - 1:
            return [first, *(first + np.cumsum(gaps)).tolist()]


def sample_test(scheme: SamplingScheme) -> list[list[int]]:
    """All deterministic evaluation lists (caller averages the predictions)."""
    return [[start + k * scheme.test_step for k in range(scheme.length)] for start in scheme.test_starts]


# -- perturbations -------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str  # frame_rate | missing | position
    level: int
    seed: int = 0

    LEVELS = {"frame_rate": range(1, 6), "missing": range(1, 6), "position": range(1, 11)}

    def __post_init__(self):
        if self.kind not in self.LEVELS:
            raise ValidationError(f"unknown perturbation kind {self.kind!r}")
        if self.level not in self.LEVELS[self.kind]:
            rng_ = self.LEVELS[self.kind]
            raise ValidationError(f"{self.kind} level {self.level} outside {rng_.start}..{rng_.stop - 1}")


def frame_rate_indices(window: ActionWindow, trial_len: int, k: int, rng: np.random.Generator) -> list[int]:
    """Simulated frame-rate error: take 40+k frames from the start, delete k
    uniformly chosen ones preserving order."""
    if not 1 <= k <= 5:
        raise ValidationError(f"frame-rate level {k} outside 1..5")
    if window.start + WINDOW_LEN + k > trial_len:
        raise ValidationError(f"trial too short for {WINDOW_LEN + k} frames from {window.start}")
    extended = list(range(window.start, window.start + WINDOW_LEN + k))
    drop = set(rng.choice(len(extended), size=k, replace=False).tolist())
    return [f for i, f in enumerate(extended) if i not in drop]


def missing_positions(k: int, rng: np.random.Generator) -> set[int]:
    """Window positions to blank out (replaced by all-zero inputs)."""
    if not 1 <= k <= 5:
        raise ValidationError(f"missing level {k} outside 1..5")
    return set(rng.choice(WINDOW_LEN, size=k, replace=False).tolist())


def position_offset(bias: int, rng: np.random.Generator) -> tuple[int, int]:
    """Crop-center displacement of `bias` pixels in a uniformly random
    direction, rounded to integer components."""
    if not 1 <= bias <= 10:
        raise ValidationError(f"position bias {bias} outside 1..10")
    phi = rng.uniform(0.0, 2.0 * np.pi)
    return int(np.round(bias * np.sin(phi))), int(np.round(bias * np.cos(phi)))


# -- dataset directory ------------------------------------------------------------


@dataclass(frozen=True)
class TrialInfo:
    participant: str
    trial: str
    label: int
    path: str  # relative to the dataset root


@dataclass
class TrialRecord:
    frames: np.ndarray  # (T, H, W, 3) uint8
    joints: np.ndarray  # (T, J, 3)
    label: int
    participant: str
    trial: str


MANIFEST_KEYS = {"name", "units", "normalization", "detect", "trials"}


def validate_manifest(manifest: dict) -> None:
    missing = MANIFEST_KEYS - set(manifest)
    if missing:
        raise DatasetError(f"manifest missing keys: {sorted(missing)}")
    norm = manifest["normalization"]
    if not {"mean", "std"} <= set(norm):
        raise DatasetError("normalization must record mean and std")
    det = manifest["detect"]
    if not {"crop", "delta1", "delta2"} <= set(det):
        raise DatasetError("detect block must record crop, delta1, delta2")
    for t in manifest["trials"]:
        if not {"participant", "trial", "label", "path"} <= set(t):
            raise DatasetError(f"bad trial entry {t}")
        if not 0 <= int(t["label"]) <= 8:
            raise DatasetError(f"label {t['label']} outside 0..8")


class Dataset:
    """Read-only view of a dataset directory with cached start detection."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DatasetError(f"no manifest.json under {self.root}")
        self.manifest = json.loads(manifest_path.read_text())
        validate_manifest(self.manifest)
        self.trials = [
            TrialInfo(t["participant"], t["trial"], int(t["label"]), t["path"])
            for t in self.manifest["trials"]
        ]
        self._starts: dict[str, int] = {}
        self._joints: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.trials)

    def preprocess_config(self, input_size: int) -> PreprocessConfig:
        norm = self.manifest["normalization"]
        return PreprocessConfig.for_input(input_size, float(norm["mean"]), float(norm["std"]))

    def frame_path(self, info: TrialInfo, idx: int) -> Path:
        return self.root / info.path / f"frame_{idx:03d}.png"

    def load_frame(self, info: TrialInfo, idx: int) -> np.ndarray:
        img = cv2.imread(str(self.frame_path(info, idx)), cv2.IMREAD_COLOR)
        if img is None:
            raise DatasetError(f"missing or unreadable frame {self.frame_path(info, idx)}")
        return np.ascontiguousarray(img[..., ::-1])

    def load_joints(self, info: TrialInfo) -> np.ndarray:
        if info.path not in self._joints:
            raw = np.loadtxt(self.root / info.path / "joints.csv", delimiter=",", skiprows=1, ndmin=2)
            self._joints[info.path] = raw[:, 1:].reshape(raw.shape[0], -1, 3)
        return self._joints[info.path]

    def trial_length(self, info: TrialInfo) -> int:
        return len(self.load_joints(info))

    def load_trial(self, info: TrialInfo) -> TrialRecord:
        joints = self.load_joints(info)
        frames = np.stack([self.load_frame(info, i) for i in range(len(joints))])
        return TrialRecord(frames, joints, info.label, info.participant, info.trial)

    def start_frame(self, info: TrialInfo) -> int:
        if info.path not in self._starts:
            det = self.manifest["detect"]
            record = self.load_trial(info)
            self._starts[info.path] = detect_start(
                record.frames, record.joints, float(det["delta1"]), float(det["delta2"]), int(det["crop"])
            )
        return self._starts[info.path]

    def window(self, info: TrialInfo) -> ActionWindow:
        return make_window(self.trial_length(info), self.start_frame(info), info.label)


def write_trial(root, info: TrialInfo, frames: np.ndarray, joints: np.ndarray) -> None:
    """Write one trial directory (used by dataset generators)."""
    d = Path(root) / info.path
    d.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        ok = cv2.imwrite(str(d / f"frame_{i:03d}.png"), np.ascontiguousarray(frame[..., ::-1]))
        if not ok:
            raise DatasetError(f"failed to write frame under {d}")
    j = joints.reshape(len(joints), -1)
    header = "frame," + ",".join(f"j{q}_{ax}" for q in range(joints.shape[1]) for ax in "xyz")
    rows = np.column_stack([np.arange(len(j)), j])
    np.savetxt(d / "joints.csv", rows, delimiter=",", header=header, comments="", fmt="%.9g")
    (d / "label.txt").write_text(f"{info.label}\n")


# -- splits ----------------------------------------------------------------------


def split(trials: list[TrialInfo], rng: np.random.Generator) -> tuple[list[TrialInfo], list[TrialInfo]]:
    """Per (participant, label) group: 8 train / 2 test when the group has
    10 trials, otherwise a proportional 80/20 split with a warning."""
    groups: dict[tuple[str, int], list[TrialInfo]] = {}
    for t in trials:
        groups.setdefault((t.participant, t.label), []).append(t)
    train: list[TrialInfo] = []
    test: list[TrialInfo] = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda t: t.trial)
        order = rng.permutation(len(members))
        if len(members) == 10:
            n_train = 8
        else:
            n_train = int(round(0.8 * len(members)))
            log.warning("group %s has %d trials, using %d/%d split", key, len(members), n_train, len(members) - n_train)
        train.extend(members[i] for i in order[:n_train])
        test.extend(members[i] for i in order[n_train:])
    return train, test


# -- clip assembly -----------------------------------------------------------------


def build_train_clip(
    dataset: Dataset,
    info: TrialInfo,
    scheme: SamplingScheme,
    cfg: PreprocessConfig,
    rng: np.random.Generator,
    single_frame: bool = False,
) -> np.ndarray:
    """Sampled and augmented (T, 3, S, S) training clip for one trial."""
    window = dataset.window(info)
    if single_frame:
        indices = [int(rng.integers(0, WINDOW_LEN))]
    else:
        indices = sample_train(scheme, rng)
    frames = [augment_train(dataset.load_frame(info, window.start + i), rng, cfg) for i in indices]
    return np.stack(frames)


def build_test_clips(
    dataset: Dataset,
    info: TrialInfo,
    scheme: SamplingScheme,
    cfg: PreprocessConfig,
    perturbation: PerturbationSpec | None = None,
    rng: np.random.Generator | None = None,
) -> list[np.ndarray]:
    """Deterministic evaluation clips, optionally perturbed.

    frame_rate re-times the window before sampling; missing blanks window
    positions after preprocessing; position shifts the crop center for the
    whole trial.
    """
    window = dataset.window(info)
    frame_ids = list(window.indices)
    offset = (0, 0)
    zeroed: set[int] = set()
    if perturbation is not None:
        if rng is None:
            raise ValidationError("perturbed clips need a random generator")
        if perturbation.kind == "frame_rate":
            frame_ids = frame_rate_indices(window, dataset.trial_length(info), perturbation.level, rng)
        elif perturbation.kind == "missing":
            zeroed = missing_positions(perturbation.level, rng)
        else:
            offset = position_offset(perturbation.level, rng)
    cache: dict[int, np.ndarray] = {}

    def frame_at(pos: int) -> np.ndarray:
        if pos in zeroed:
            return np.zeros((3, cfg.input_size, cfg.input_size), dtype=np.float32)
        if pos not in cache:
            cache[pos] = preprocess_test(dataset.load_frame(info, frame_ids[pos]), cfg, offset)
        return cache[pos]

    return [np.stack([frame_at(i) for i in indices]) for indices in sample_test(scheme)]
