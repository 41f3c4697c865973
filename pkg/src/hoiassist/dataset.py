"""Synthetic gesture trajectories and the windowed training set built from them."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from enum import IntEnum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import posekit
from .posekit import HandPose, NUM_JOINTS, window_span

MANIFEST_SCHEMA = "hoi-dataset/1"


class MotionClass(IntEnum):
    KEEP = 0
    COME = 1
    BACK = 2
    RING = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value) -> "MotionClass":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown motion class {value!r}") from None
        try:
            return cls(int(value))
        except ValueError:
            raise ValueError(f"unknown motion class {value!r}") from None


DEFAULT_CLASSES = tuple(c.label for c in MotionClass)


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    """Every constant the synthetic generator uses."""

    frame_rate: float = 30.0
    jitter: float = 0.001
    # slow whole-hand wander while a gesture is held, as a multiple of jitter
    wander_ratio: float = 5.0
    wander_period: float = 7.0
    # index-finger displacement for Come/Back: constant offset + one-sided oscillation
    beckon_offset: float = 0.020
    beckon_amplitude: float = 0.020
    beckon_period: float = 1.2
    ring_drift: float = 0.005
    ring_drift_period: float = 20.0
    hand_scale_spread: float = 0.03
    placement_spread: float = 0.005
    wrist_position: tuple = (0.0, 0.62, 0.30)


# Per-finger (MCP, PIP, DIP) flexion in degrees for each posture.
_OPEN = {"index": (10, 15, 10), "middle": (10, 15, 10), "ring": (12, 15, 10), "pinky": (14, 15, 10)}
_POINT = {"index": (5, 12, 8), "middle": (75, 95, 60), "ring": (75, 95, 60), "pinky": (75, 95, 60)}
_FINGERS = {
    # name: (joint indices, lateral offset, MCP reach, segment lengths)
    "index": (posekit.INDEX, 0.022, 0.095, (0.040, 0.024, 0.021)),
    "middle": (posekit.MIDDLE, 0.002, 0.095, (0.044, 0.027, 0.022)),
    "ring": (posekit.RING, -0.017, 0.090, (0.041, 0.026, 0.021)),
    "pinky": (posekit.PINKY, -0.034, 0.082, (0.032, 0.020, 0.019)),
}

# Local hand axes expressed in world coordinates: finger direction, palm side, lateral.
_FORWARD = np.array([0.0, -1.0, 0.0])
_PALM = np.array([0.0, 0.0, -1.0])
_LATERAL = np.cross(_FORWARD, _PALM)


@dataclass
class HandModel:
    """Kinematic stand-in for one person's hand, placed in the world frame.

    Fingers point along -y (toward the robot) with the palm facing down, so the
    index finger bends toward -z.
    """

    scale: float = 1.0
    wrist: np.ndarray = field(default_factory=lambda: np.array(GeneratorConfig.wrist_position))

    @classmethod
    def from_seed(cls, seed: int, config: GeneratorConfig = GeneratorConfig()) -> "HandModel":
        rng = np.random.default_rng([seed, 7919])
        scale = 1.0 + rng.uniform(-config.hand_scale_spread, config.hand_scale_spread)
        wrist = np.asarray(config.wrist_position, float) + rng.uniform(-1, 1, 3) * config.placement_spread
        return cls(scale=scale, wrist=wrist)

    def joints(self, posture: str = "open", index_bend: float = 0.0) -> np.ndarray:
        """Joint positions (21, 3) for a named posture.

        ``index_bend`` adds flexion (radians) at the index MCP, rotating the
        rest of the index finger rigidly about it.
        """
        flex = {"open": _OPEN, "point": _POINT}[posture]
        s = self.scale
        out = np.zeros((NUM_JOINTS, 3))
        out[posekit.WRIST] = self.wrist
        for name, (idx, lateral, reach, lengths) in _FINGERS.items():
            base = self.wrist + s * (reach * _FORWARD + lateral * _LATERAL)
            out[idx[0]] = base
            angle = 0.0
            angles = np.radians(flex[name])
            if name == "index":
                angles = angles.copy()
                angles[0] += index_bend
            p = base
            for k in range(3):
                angle += angles[k]
                p = p + s * lengths[k] * (np.cos(angle) * _FORWARD + np.sin(angle) * _PALM)
                out[idx[k + 1]] = p
        # thumb: short chain angled across the palm; curled for the pointing posture
        cmc = self.wrist + s * (0.030 * _FORWARD + 0.030 * _LATERAL + 0.010 * _PALM)
        sweep = 0.9 if posture == "point" else 0.35
        direction = np.cos(sweep) * _FORWARD + np.sin(sweep) * (0.5 * _PALM + 0.85 * _LATERAL)
        direction /= np.linalg.norm(direction)
        across = np.cross(direction, _LATERAL)
        p = cmc
        out[posekit.THUMB[0]] = p
        for k, length in enumerate((0.035, 0.030, 0.025)):
            bend = (0.3 if posture == "point" else 0.1) * (k + 1)
            p = p + s * length * (np.cos(bend) * direction + np.sin(bend) * across)
            out[posekit.THUMB[k + 1]] = p
        return out


def _index_weights() -> np.ndarray:
    w = np.zeros(NUM_JOINTS)
    w[list(posekit.INDEX)] = (0.4, 0.7, 0.85, 1.0)
    return w


def class_joints(
    motion: MotionClass,
    hand: HandModel,
    t: float,
    config: GeneratorConfig = GeneratorConfig(),
    phase: float = 0.0,
) -> np.ndarray:
    """Noise-free joints for ``motion`` at time ``t`` seconds."""
    motion = MotionClass.parse(motion)
    if motion is MotionClass.RING:
        joints = hand.joints("point")
        drift = config.ring_drift * np.sin(2 * np.pi * t / config.ring_drift_period + phase)
        return joints + drift * np.array([1.0, 0.0, 0.5])
    joints = hand.joints("open")
    if motion is MotionClass.KEEP:
        return joints
    swing = 0.5 * (1 - np.cos(2 * np.pi * t / config.beckon_period + phase))
    shift = config.beckon_offset + config.beckon_amplitude * swing
    sign = -1.0 if motion is MotionClass.COME else 1.0
    joints = joints.copy()
    joints[:, 1] += sign * shift * _index_weights()
    return joints


def generate_motion_trajectory(
    motion,
    frames: int = 2000,
    seed: int = 0,
    jitter: float | None = None,
    config: GeneratorConfig = GeneratorConfig(),
    hand: HandModel | None = None,
    t0: float = 0.0,
) -> list[HandPose]:
    """Deterministic synthetic recording of one held gesture.

    The hand geometry depends on ``seed`` only, so one seed describes one
    person across all classes; noise and phase depend on (seed, class).
    """
    motion = MotionClass.parse(motion)
    if frames < 100:
        raise ValueError("frames must be >= 100")
    jitter = config.jitter if jitter is None else jitter
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    hand = hand or HandModel.from_seed(seed, config)
    rng = np.random.default_rng([seed, int(motion)])
    phase = 0.0 if motion is MotionClass.KEEP else rng.uniform(0, 2 * np.pi)
    noise = rng.normal(0.0, 1.0, (frames, NUM_JOINTS, 3)) * jitter
    dt = 1.0 / config.frame_rate
    t = np.arange(frames) * dt
    wander_phase = rng.uniform(0, 2 * np.pi, 3)
    wander_rate = 2 * np.pi / config.wander_period * rng.uniform(0.7, 1.3, 3)
    wander = config.wander_ratio * jitter * np.sin(np.outer(t, wander_rate) + wander_phase)
    return [
        HandPose(t0 + t[i], class_joints(motion, hand, t[i], config, phase) + wander[i] + noise[i])
        for i in range(frames)
    ]


@dataclass
class LabeledDataset:
    windows: np.ndarray  # (n, 10, 63)
    labels: np.ndarray  # (n,) int
    offsets: np.ndarray  # (n,) first-frame index within the class trajectory
    class_names: tuple = DEFAULT_CLASSES

    def __post_init__(self):
        self.windows = np.asarray(self.windows, float).reshape(-1, posekit.WINDOW_LENGTH, posekit.NUM_FEATURES)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.offsets = np.asarray(self.offsets, dtype=np.int64).reshape(-1)
        if not (len(self.windows) == len(self.labels) == len(self.offsets)):
            raise ValueError("windows, labels and offsets must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.labels == k)) for k, name in enumerate(self.class_names)}

    def identities(self) -> set[tuple[int, int]]:
        return set(zip(self.labels.tolist(), self.offsets.tolist()))

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.windows[index], self.labels[index], self.offsets[index], self.class_names)

    def __iter__(self):
        for w, y in zip(self.windows, self.labels):
            yield posekit.FeatureWindow(w, 0.0), int(y)


def window_offsets(num_frames: int, count: int, stride: int = posekit.DEFAULT_STRIDE) -> np.ndarray:
    """Evenly spread, distinct start offsets for ``count`` windows."""
    available = num_frames - window_span(stride) + 1
    if count > max(available, 0):
        raise InsufficientData(f"{num_frames} frames yield at most {max(available, 0)} windows, {count} requested")
    return (np.arange(count) * available) // max(count, 1)


def build_dataset(
    trajectories: Mapping,
    window_stride: int = posekit.DEFAULT_STRIDE,
    samples_per_class: int = 250,
    smoothing: int = posekit.DEFAULT_SMOOTHING,
    class_names: Sequence[str] = DEFAULT_CLASSES,
) -> LabeledDataset:
    """Cut ``samples_per_class`` strided windows from each class trajectory.

    Trajectories go through the same moving-average smoother the runtime uses.
    """
    windows, labels, offsets = [], [], []
    for key in sorted(trajectories, key=lambda k: int(MotionClass.parse(k)) if not isinstance(k, int) else k):
        code = int(MotionClass.parse(key)) if not isinstance(key, int) else key
        poses = trajectories[key]
        try:
            starts = window_offsets(len(poses), samples_per_class, window_stride)
        except InsufficientData as exc:
            raise InsufficientData(f"class {class_names[code]}: {exc}") from None
        smoothed = posekit.smooth_sequence(poses, smoothing)
        stacked = np.stack([p.joints.reshape(-1) for p in smoothed])
        span = window_stride * np.arange(posekit.WINDOW_LENGTH)
        for s in starts:
            windows.append(stacked[s + span])
            labels.append(code)
            offsets.append(s)
    if not windows:
        return LabeledDataset(np.zeros((0, posekit.WINDOW_LENGTH, posekit.NUM_FEATURES)), [], [], tuple(class_names))
    return LabeledDataset(np.stack(windows), labels, offsets, tuple(class_names))


def stratified_split(data: LabeledDataset, train_fraction: float = 0.8, seed: int = 0):
    """Per-class shuffle, then floor(fraction * count) of each class to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for k in range(data.num_classes):
        members = np.flatnonzero(data.labels == k)
        if len(members) == 0:
            continue
        if len(members) < 2:
            raise ValueError(f"class {data.class_names[k]} has fewer than 2 samples")
        members = rng.permutation(members)
        cut = int(np.floor(train_fraction * len(members)))
        train_idx.extend(members[:cut])
        val_idx.extend(members[cut:])
    return data.subset(sorted(train_idx)), data.subset(sorted(val_idx))


def generate_default_trajectories(
    seed: int = 0, frames: int = 2000, jitter: float | None = None, config: GeneratorConfig = GeneratorConfig()
) -> dict[MotionClass, list[HandPose]]:
    return {c: generate_motion_trajectory(c, frames, seed, jitter, config) for c in MotionClass}


def default_dataset(seed: int = 0, frames: int = 2000, samples_per_class: int = 250) -> LabeledDataset:
    return build_dataset(generate_default_trajectories(seed, frames), samples_per_class=samples_per_class)


# --- on-disk layout ----------------------------------------------------------

@dataclass
class DatasetManifest:
    seed: int = 0
    frames: int = 2000
    jitter: float = GeneratorConfig.jitter
    window_stride: int = posekit.DEFAULT_STRIDE
    samples_per_class: int = 250
    smoothing: int = posekit.DEFAULT_SMOOTHING
    classes: tuple = DEFAULT_CLASSES
    schema: str = MANIFEST_SCHEMA

    @property
    def total_windows(self) -> int:
        return self.samples_per_class * len(self.classes)


def save_dataset(out_dir: str | Path, manifest: DatasetManifest, trajectories: Mapping) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for cls, poses in trajectories.items():
        posekit.write_trajectory(out / f"{MotionClass.parse(cls).label.lower()}.csv", poses)
    info = asdict(manifest)
    info["classes"] = list(manifest.classes)
    info["total_windows"] = manifest.total_windows
    info["window_shape"] = [posekit.WINDOW_LENGTH, posekit.NUM_FEATURES]
    (out / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out


def load_manifest(data_dir: str | Path) -> DatasetManifest:
    info = json.loads((Path(data_dir) / "manifest.json").read_text())
    if info.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"unsupported dataset schema {info.get('schema')!r}")
    if info.get("window_shape", [posekit.WINDOW_LENGTH, posekit.NUM_FEATURES]) != [posekit.WINDOW_LENGTH, posekit.NUM_FEATURES]:
        raise ValueError(f"window shape {info['window_shape']} does not match ({posekit.WINDOW_LENGTH}, {posekit.NUM_FEATURES})")
    keep = {k: info[k] for k in DatasetManifest.__dataclass_fields__ if k in info}
    keep["classes"] = tuple(keep.get("classes", DEFAULT_CLASSES))
    return DatasetManifest(**keep)


def load_dataset(data_dir: str | Path) -> tuple[DatasetManifest, LabeledDataset]:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    trajectories = {}
    for name in manifest.classes:
        trajectories[MotionClass.parse(name)] = posekit.read_trajectory(data_dir / f"{name.lower()}.csv")
    data = build_dataset(trajectories, manifest.window_stride, manifest.samples_per_class,
                         manifest.smoothing, manifest.classes)
    return manifest, data
