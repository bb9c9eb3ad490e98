"""Deterministic generator of synthetic 9-class pitch-like trials.

Each trial renders a textured static background, a two-segment arm, and a
ball. Frames before the planted start are idle up to sub-threshold noise.
From the start, the arm sweeps upward for 8 frames with a growing motion
wedge, which makes the image difference against reference frame 10 strictly
increasing and above the detection threshold; the joints jump at the start
frame. The remaining 32 window frames show the released arm with the ball
at per-frame positions:

* pose mode: the ball flies to the class's target block and rests there, so
  a single late frame reveals the class.
* motion mode: all classes render the same 40 scene states and differ only
  in the order the 32 post-release states are visited (a class permutation
  acting within stride-4 residue blocks). The window frame multiset is
  therefore identical across classes: any order-insensitive classifier is
  provably at chance.

Trailing frames (after the window) return to idle. Generation is a pure
function of (spec, seeds); in motion mode the content stream is seeded
without the class so that matched trials across classes differ only in
frame order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .datapipe import TRIAL_FRAMES, WINDOW_LEN, TrialInfo, TrialRecord, write_trial
from .errors import ValidationError

MIN_RESOLUTION = 96
MIN_START = 11
MAX_START = 45  # leaves room for the 40-frame window plus 5 extra frames

# affine (a, b) per class: order within each residue block is k -> (a*k + b) mod 8
_CLASS_WALKS = [(1, 0), (3, 0), (5, 0), (7, 0), (1, 4), (3, 4), (5, 4), (7, 4), (5, 2)]

_ARM_COLOR = np.array([205.0, 175.0, 150.0])
_BALL_COLOR = np.array([235.0, 75.0, 60.0])
_WEDGE_COLOR = np.array([250.0, 250.0, 240.0])
_IDLE_ANGLE = 35.0
_SWEEP_STEP = 16.0
_RAMP_LEN = 8
_NOISE_AMP = 2.0
_JOINT_NOISE = 0.01


@dataclass(frozen=True)
class SynthSpec:
    mode: str = "pose"  # pose | motion
    resolution: int = 256
    idle_len: int = MIN_START
    start: int | None = None  # None: drawn per trial from [idle_len, 45]
    joints: int = 3
    participants: int = 1

    def __post_init__(self):
        if self.mode not in ("pose", "motion"):
            raise ValidationError(f"mode must be pose or motion, got {self.mode!r}")
        if self.resolution < MIN_RESOLUTION:
            raise ValidationError(f"resolution must be >= {MIN_RESOLUTION}")
        if self.idle_len < MIN_START:
            raise ValidationError(f"idle length must be >= {MIN_START} frames")
        if self.start is not None and not self.idle_len <= self.start <= MAX_START:
            raise ValidationError(f"planted start must lie in [{self.idle_len}, {MAX_START}]")
        if self.joints < 2:
            raise ValidationError("need at least shoulder and tip joints")
        if self.participants < 1:
            raise ValidationError("participants must be >= 1")

    @property
    def detect_crop(self) -> int:
        return min(240, self.resolution - 8)


def class_order(label: int) -> list[int]:
    """Scene-state visiting order of one class: identity on the 8 ramp
    states, an affine walk within each stride-4 residue block afterwards."""
    a, b = _CLASS_WALKS[label]
    order = list(range(_RAMP_LEN))
    for t in range(_RAMP_LEN, WINDOW_LEN):
        r, k = t % 4, t // 4
        order.append(r + 4 * (2 + (a * (k - 2) + b) % 8))
    return order


# -- rendering -------------------------------------------------------------------


def _grid(res: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:res, 0:res]
    return yy.astype(np.float32), xx.astype(np.float32)


def _capsule(yy, xx, a, b, radius) -> np.ndarray:
    ab = (b[0] - a[0], b[1] - a[1])
    denom = ab[0] * ab[0] + ab[1] * ab[1] + 1e-9
    t = np.clip(((yy - a[0]) * ab[0] + (xx - a[1]) * ab[1]) / denom, 0.0, 1.0)
    dy = yy - (a[0] + t * ab[0])
    dx = xx - (a[1] + t * ab[1])
    return np.clip(radius + 0.5 - np.sqrt(dy * dy + dx * dx), 0.0, 1.0)


def _blend(img, mask, color, alpha=1.0):
    m = (alpha * mask)[..., None]
    img *= 1.0 - m
    img += m * color


class _Scene:
    """Geometry helpers bound to one resolution."""

    def __init__(self, res: int):
        self.res = res
        self.yy, self.xx = _grid(res)
        self.shoulder = (0.62 * res, 0.34 * res)
        self.upper_len = 0.17 * res
        self.fore_len = 0.21 * res
        self.arm_w = max(2.0, 0.028 * res)
        self.ball_r = max(2.5, 0.032 * res)

    def arm_points(self, phi_deg: float):
        phi = np.deg2rad(phi_deg)
        u = (np.cos(phi), np.sin(phi))
        elbow = (self.shoulder[0] + self.upper_len * u[0], self.shoulder[1] + self.upper_len * u[1])
        phi2 = np.deg2rad(phi_deg - 18.0)
        u2 = (np.cos(phi2), np.sin(phi2))
        tip = (elbow[0] + self.fore_len * u2[0], elbow[1] + self.fore_len * u2[1])
        return elbow, tip

    def draw_arm(self, img, phi_deg: float):
        elbow, tip = self.arm_points(phi_deg)
        _blend(img, _capsule(self.yy, self.xx, self.shoulder, elbow, self.arm_w), _ARM_COLOR)
        _blend(img, _capsule(self.yy, self.xx, elbow, tip, self.arm_w * 0.8), _ARM_COLOR)
        return elbow, tip

    def draw_wedge(self, img, phi_lo_deg: float, phi_hi_deg: float):
        dy = self.yy - self.shoulder[0]
        dx = self.xx - self.shoulder[1]
        r = np.sqrt(dy * dy + dx * dx)
        ang = np.rad2deg(np.arctan2(dx, dy))  # 0 deg points down, matching arm angles
        mask = ((r > 0.15 * self.upper_len) & (r < self.upper_len + self.fore_len)
                & (ang >= phi_lo_deg) & (ang <= phi_hi_deg)).astype(np.float32)
        _blend(img, mask, _WEDGE_COLOR, alpha=0.8)

    def draw_ball(self, img, pos):
        _blend(img, _capsule(self.yy, self.xx, pos, pos, self.ball_r), _BALL_COLOR)

    def ball_slots(self) -> list[tuple[float, float]]:
        res = self.res
        slots = []
        for idx in range(WINDOW_LEN - _RAMP_LEN):
            row, col = idx // 8, idx % 8
            slots.append((res * (0.08 + 0.34 * row / 3.0), res * (0.14 + 0.72 * col / 7.0)))
        return slots

    def block_target(self, label: int) -> tuple[float, float]:
        row, col = label // 3, label % 3
        return self.res * (0.10 + 0.13 * row), self.res * (0.52 + 0.17 * col)


def _background(res: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(res)
    base = 112.0 + 22.0 * np.sin(2.6 * np.pi * xx / res + 0.7) * np.sin(1.9 * np.pi * yy / res + 1.3)
    coarse = rng.uniform(-18.0, 18.0, size=(9, 9)).astype(np.float32)
    base = base + cv2.resize(coarse, (res, res), interpolation=cv2.INTER_LINEAR)
    tint = np.array([0.96, 1.0, 1.05])
    return np.clip(base[..., None] * tint, 0.0, 255.0).astype(np.float32)


def _finish(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    noise = rng.uniform(-_NOISE_AMP, _NOISE_AMP, size=img.shape).astype(np.float32)
    return np.clip(img + noise, 0.0, 255.0).round().astype(np.uint8)


def _joint_vec(scene: _Scene, phi_deg: float, n_joints: int) -> np.ndarray:
    elbow, tip = scene.arm_points(phi_deg)
    pts = [scene.shoulder, elbow, tip]
    while len(pts) < n_joints:  # pad along the forearm for larger joint counts
        f = (len(pts) - 1) / n_joints
        pts.append((elbow[0] + f * (tip[0] - elbow[0]), elbow[1] + f * (tip[1] - elbow[1])))
    return np.array([(p[0], p[1], 0.0) for p in pts[:n_joints]], dtype=np.float64)


def generate_trial(label: int, spec: SynthSpec, rng: np.random.Generator,
                   participant: str = "s0", trial_id: str = "t0") -> TrialRecord:
    """Render one 90-frame trial; pure given (label, spec, rng state)."""
    if not 0 <= label <= 8:
        raise ValidationError(f"label {label} outside 0..8")
    scene = _Scene(spec.resolution)
    bg = _background(spec.resolution, rng)
    start = spec.start if spec.start is not None else int(rng.integers(spec.idle_len, MAX_START + 1))

    idle_img = bg.copy()
    _, idle_tip = scene.draw_arm(idle_img, _IDLE_ANGLE)
    scene.draw_ball(idle_img, idle_tip)
    idle_joints = _joint_vec(scene, _IDLE_ANGLE, spec.joints)

    # 40 scene states; the ramp states are identity-ordered for every class
    release_phi = _IDLE_ANGLE - _SWEEP_STEP * (_RAMP_LEN + 1)
    slots = scene.ball_slots()
    target = scene.block_target(label)
    states: list[np.ndarray] = []
    state_joints: list[np.ndarray] = []
    for j in range(WINDOW_LEN):
        img = bg.copy()
        if j < _RAMP_LEN:
            phi = _IDLE_ANGLE - _SWEEP_STEP * (j + 1)
            scene.draw_wedge(img, phi, _IDLE_ANGLE)
            _, tip = scene.draw_arm(img, phi)
            scene.draw_ball(img, tip)
        else:
            phi = release_phi
            scene.draw_arm(img, phi)
            if spec.mode == "motion":
                scene.draw_ball(img, slots[j - _RAMP_LEN])
            else:
                f = min(1.0, (j - _RAMP_LEN) / 6.0)
                _, tip = scene.arm_points(phi)
                pos = (tip[0] + f * (target[0] - tip[0]), tip[1] + f * (target[1] - tip[1]))
                scene.draw_ball(img, pos)
        states.append(_finish(img, rng))
        state_joints.append(_joint_vec(scene, phi, spec.joints)
                            + rng.normal(0.0, _JOINT_NOISE, size=(spec.joints, 3)))

    order = class_order(label) if spec.mode == "motion" else list(range(WINDOW_LEN))

    frames = np.empty((TRIAL_FRAMES, spec.resolution, spec.resolution, 3), dtype=np.uint8)
    joints = np.empty((TRIAL_FRAMES, spec.joints, 3), dtype=np.float64)
    for t in range(TRIAL_FRAMES):
        if start <= t < start + WINDOW_LEN:
            j = order[t - start]
            frames[t] = states[j]
            joints[t] = state_joints[j]
        else:
            frames[t] = _finish(idle_img, rng)
            joints[t] = idle_joints + rng.normal(0.0, _JOINT_NOISE, size=(spec.joints, 3))
    return TrialRecord(frames, joints, label, participant, trial_id)


def generate_dataset(spec: SynthSpec, n_per_class: int, root, seed: int) -> Path:
    """Write 9 * n_per_class trials in the dataset directory layout."""
    if n_per_class < 1:
        raise ValidationError("need at least one trial per class")
    if n_per_class % spec.participants != 0:
        raise ValidationError(f"{n_per_class} trials per class do not divide over {spec.participants} participants")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    per_participant = n_per_class // spec.participants
    entries = []
    for label in range(9):
        for i in range(n_per_class):
            # motion mode shares the content stream across classes so matched
            # trials differ only in frame order
            entropy = (seed, i) if spec.mode == "motion" else (seed, label, i)
            rng = np.random.default_rng(np.random.SeedSequence(entropy))
            participant = f"s{i // per_participant}"
            trial_id = f"c{label}_{i:03d}"
            record = generate_trial(label, spec, rng, participant, trial_id)
            info = TrialInfo(participant, trial_id, label, f"{participant}/{trial_id}")
            write_trial(root, info, record.frames, record.joints)
            entries.append({"participant": participant, "trial": trial_id, "label": label,
                            "path": info.path})
    manifest = {
        "name": f"synthetic-{spec.mode}",
        "synthetic": True,
        "mode": spec.mode,
        "resolution": spec.resolution,
        "units": "pixels",
        "normalization": {"mean": 0.5, "std": 0.5},
        "detect": {"crop": spec.detect_crop, "delta1": 6.0, "delta2": 0.16},
        "trials": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root
