"""Hand pose samples, stream smoothing, feature windows and the fingertip frame.

Joint layout follows the 21-joint MANO/FreiHAND ordering::

    0        wrist
    1 - 4    thumb  (CMC, MCP, IP, tip)
    5 - 8    index  (MCP, PIP, DIP, tip)
    9 - 12   middle (MCP, PIP, DIP, tip)
    13 - 16  ring   (MCP, PIP, DIP, tip)
    17 - 20  pinky  (MCP, PIP, DIP, tip)

All coordinates are meters.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NUM_JOINTS = 21
NUM_FEATURES = NUM_JOINTS * 3
WINDOW_LENGTH = 10
DEFAULT_STRIDE = 10
DEFAULT_SMOOTHING = 5

WRIST = 0
THUMB = (1, 2, 3, 4)
INDEX = (5, 6, 7, 8)
MIDDLE = (9, 10, 11, 12)
RING = (13, 14, 15, 16)
PINKY = (17, 18, 19, 20)
INDEX_MCP, INDEX_PIP, INDEX_DIP, INDEX_TIP = INDEX

TRAJECTORY_SCHEMA = "hoi-trajectory/1"

_DEGENERATE_TOL = 1e-6


class PoseError(ValueError):
    """Raised for malformed pose samples."""


class RejectedSample(PoseError):
    """A sample was refused by the smoother; its state is left untouched."""


class DegenerateFrame(ValueError):
    """The index finger joints do not span a frame."""


@dataclass(frozen=True)
class HandPose:
    timestamp: float
    joints: np.ndarray  # (21, 3)

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=float)
        if joints.shape == (NUM_FEATURES,):
            joints = joints.reshape(NUM_JOINTS, 3)
        if joints.shape != (NUM_JOINTS, 3):
            raise PoseError(f"expected {NUM_JOINTS} joints of 3 coordinates, got shape {joints.shape}")
        if not np.all(np.isfinite(joints)) or not math.isfinite(self.timestamp):
            raise PoseError("pose contains non-finite values")
        joints = joints.copy()
        joints.flags.writeable = False
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "timestamp", float(self.timestamp))

    def flatten(self) -> np.ndarray:
        """Joint-major features ``x1, y1, z1, ..., x21, y21, z21``."""
        return self.joints.reshape(-1).copy()

    @classmethod
    def from_flat(cls, timestamp: float, features: Sequence[float]) -> "HandPose":
        return cls(timestamp, np.asarray(features, dtype=float).reshape(NUM_JOINTS, 3))

    @property
    def fingertip(self) -> np.ndarray:
        return self.joints[INDEX_TIP]


@dataclass(frozen=True)
class FeatureWindow:
    frames: np.ndarray  # (10, 63)
    start_timestamp: float
    timestamps: tuple = ()

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        if frames.shape != (WINDOW_LENGTH, NUM_FEATURES):
            raise PoseError(f"window must be ({WINDOW_LENGTH}, {NUM_FEATURES}), got {frames.shape}")
        if self.timestamps and any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise PoseError("window rows must be strictly time-ordered")
        object.__setattr__(self, "frames", frames)

    def poses(self) -> list[HandPose]:
        """Unflatten back into poses (timestamps required)."""
        stamps = self.timestamps or tuple(self.start_timestamp + i for i in range(WINDOW_LENGTH))
        return [HandPose.from_flat(t, row) for t, row in zip(stamps, self.frames)]


@dataclass(frozen=True)
class HandFrame:
    origin: np.ndarray
    axes: np.ndarray  # rows are x_h, y_h, z_h

    @property
    def x(self) -> np.ndarray:
        return self.axes[0]

    @property
    def y(self) -> np.ndarray:
        return self.axes[1]

    @property
    def z(self) -> np.ndarray:
        return self.axes[2]

    def matrix(self) -> np.ndarray:
        """Rotation whose columns are the frame axes in world coordinates."""
        return self.axes.T.copy()


@dataclass
class MovingAverageSmoother:
    """Per-coordinate moving average over the last ``window`` samples.

    During warm-up the mean is taken over however many samples exist.
    """

    window: int = DEFAULT_SMOOTHING
    _buffer: deque = field(init=False, repr=False)
    _sum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("smoothing window must be >= 1")
        self.reset()

    def reset(self) -> None:
        self._buffer = deque()
        self._sum = np.zeros((NUM_JOINTS, 3))

    def __len__(self) -> int:
        return len(self._buffer)

    def update(self, pose: HandPose) -> HandPose:
        joints = np.asarray(pose.joints, dtype=float)
        if not np.all(np.isfinite(joints)):
            raise RejectedSample("non-finite coordinates")
        self._buffer.append(joints)
        if len(self._buffer) > self.window:
            self._buffer.popleft()
        # Recompute instead of a running sum so long streams do not accumulate
        # rounding error; W is small.
        mean = np.mean(np.stack(self._buffer), axis=0)
        return HandPose(pose.timestamp, mean)


def smooth_stream(sample: HandPose, smoother: MovingAverageSmoother) -> HandPose:
    return smoother.update(sample)


def smooth_sequence(poses: Iterable[HandPose], window: int = DEFAULT_SMOOTHING) -> list[HandPose]:
    smoother = MovingAverageSmoother(window)
    return [smoother.update(p) for p in poses]


def window_span(stride: int) -> int:
    """Number of raw frames a window covers."""
    return WINDOW_LENGTH * stride - (stride - 1)


def make_window(buffer: Sequence[HandPose], stride: int = DEFAULT_STRIDE) -> FeatureWindow | None:
    """Build a (10, 63) window from the most recent poses in ``buffer``.

    Rows are taken ``stride`` frames apart starting at the oldest buffered
    pose. The live pipeline keeps exactly ``window_span(stride)`` poses, so
    there the window ends at the newest one. Returns None when too few poses
    are buffered.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    span = window_span(stride)
    if len(buffer) < span:
        return None
    picked = [buffer[i * stride] for i in range(WINDOW_LENGTH)]
    frames = np.stack([p.joints.reshape(-1) for p in picked])
    stamps = tuple(p.timestamp for p in picked)
    return FeatureWindow(frames, stamps[0], stamps)


def hold_window(pose: HandPose) -> FeatureWindow:
    """Window of one pose repeated on every row.

    Used by the live pipeline: a 10-frame history takes a third of a second
    to turn over at 30 Hz, so the newest pose is classified on its own and
    the stability gate supplies the temporal evidence.
    """
    row = pose.joints.reshape(1, -1)
    return FeatureWindow(np.repeat(row, WINDOW_LENGTH, axis=0), pose.timestamp)


def window_at(poses: Sequence[HandPose], start: int, stride: int = DEFAULT_STRIDE) -> FeatureWindow:
    """Window whose first row is ``poses[start]``."""
    span = window_span(stride)
    if start < 0 or start + span > len(poses):
        raise IndexError(f"window at {start} with stride {stride} exceeds {len(poses)} poses")
    return make_window(poses[start:start + span], stride)


def _unit(v: np.ndarray) -> tuple[np.ndarray, float]:
    n = float(np.linalg.norm(v))
    return (v / n if n > 0 else v), n


def hand_frame(pose: HandPose) -> HandFrame:
    """Fingertip-anchored frame of the index finger.

    y points from the distal joint out through the fingertip, x points toward
    the bending side (fingertip -> MCP, with the y component removed), and
    z = x cross y.
    """
    j = pose.joints
    tip = j[INDEX_TIP]
    y, length = _unit(tip - j[INDEX_DIP])
    if length <= _DEGENERATE_TOL:
        raise DegenerateFrame("fingertip coincides with the distal joint")
    toward_mcp = j[INDEX_MCP] - tip
    x, side = _unit(toward_mcp - np.dot(toward_mcp, y) * y)
    if side <= _DEGENERATE_TOL:
        raise DegenerateFrame("index finger is straight or collapsed; bending side undefined")
    # one Gram-Schmidt pass leaves ~1e-16 residue; a second keeps the 1e-9 contract robust
    x, _ = _unit(x - np.dot(x, y) * y)
    z = np.cross(x, y)
    return HandFrame(tip.copy(), np.stack([x, y, z]))


# --- trajectory files ------------------------------------------------------

def write_trajectory(path: str | Path, poses: Iterable[HandPose]) -> None:
    """One line per sample: timestamp then 63 joint-major coordinates."""
    path = Path(path)
    lines = [f"# {TRAJECTORY_SCHEMA}"]
    for p in poses:
        lines.append(",".join([repr(p.timestamp)] + [repr(float(v)) for v in p.joints.reshape(-1)]))
    path.write_text("\n".join(lines) + "\n")


def read_trajectory(path: str | Path) -> list[HandPose]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        if header != f"# {TRAJECTORY_SCHEMA}":
            raise PoseError(f"{path}: unsupported trajectory header {header!r}")
        poses = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            values = line.split(",")
            if len(values) != 1 + NUM_FEATURES:
                raise PoseError(f"{path}:{lineno}: expected {1 + NUM_FEATURES} fields, got {len(values)}")
            nums = [float(v) for v in values]
            poses.append(HandPose.from_flat(nums[0], nums[1:]))
    return poses
