"""Closed-loop alignment of a held ring with the operator's fingertip.

Target relation: the ring normal x_o points against the fingertip direction
y_h (cos alpha = -1), the gripper line y_o runs along the hand z axis
(cos beta = 1), the ring center sits on the finger axis, and the gap along
that axis closes at a constant approach speed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .posekit import DegenerateFrame, HandFrame, HandPose, hand_frame
from .rotations import matrix_to_quat, quat_to_matrix, rotvec_from_matrix

ORTHO_TOL = 1e-6


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectFrame:
    origin: np.ndarray
    axes: np.ndarray  # rows x_o (ring normal), y_o (gripper line), z_o

    @classmethod
    def from_pose(cls, position, orientation) -> "ObjectFrame":
        """Frame of an object rigidly held at the TCP (quaternion orientation)."""
        return cls(np.asarray(position, float), quat_to_matrix(orientation).T)

    def matrix(self) -> np.ndarray:
        return self.axes.T.copy()


@dataclass(frozen=True)
class ApproachPolicy:
    approach_speed: float = 0.01  # v_h, m/s along the finger axis
    vertical_speed: float = 0.05  # v_v, cap on off-axis correction speed
    release_gap: float = 0.002
    angular_tolerance: float = 0.026
    lateral_tolerance: float = 0.001
    position_gain: float = 10.0  # 1/s on off-axis offset
    rotation_gain: float = 2.0  # 1/s on orientation error
    max_rotation_rate: float = math.radians(30.0)
    # approach only while the off-axis offset stays below this fraction of the gap
    approach_slope: float = 0.2
    stale_after: float = 0.2
    # add the hand's own velocity, estimated over this baseline, to the P terms
    feedforward: bool = True
    rate_baseline: float = 0.2

    def __post_init__(self):
        for name in ("approach_speed", "vertical_speed", "release_gap", "angular_tolerance",
                     "lateral_tolerance", "position_gain", "rotation_gain", "max_rotation_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class AlignmentError:
    alpha: float
    beta: float
    lateral: float  # off-axis distance of the ring center, m
    gap: float  # distance ahead of the fingertip along the finger axis, m
    rotation: float  # full angle to the aligned orientation, rad
    lateral_vector: np.ndarray = field(default=None, repr=False)

    @property
    def alpha_error(self) -> float:
        return math.pi - self.alpha

    @property
    def beta_error(self) -> float:
        return self.beta

    def aligned(self, policy: ApproachPolicy) -> bool:
        return (self.alpha_error <= policy.angular_tolerance and self.beta_error <= policy.angular_tolerance
                and self.lateral <= policy.lateral_tolerance)


def _check_frame(axes, what: str) -> None:
    axes = np.asarray(axes, float)
    if axes.shape != (3, 3) or not np.allclose(axes @ axes.T, np.eye(3), atol=ORTHO_TOL, rtol=0):
        raise FrameError(f"{what} axes are not orthonormal")
    if abs(np.linalg.det(axes) - 1.0) > ORTHO_TOL:
        raise FrameError(f"{what} axes are not right-handed")


def rotation_between_frames(source, target) -> np.ndarray:
    """Rotation T with T @ source_axis_i = target_axis_i for every axis."""
    _check_frame(source.axes, "source")
    _check_frame(target.axes, "target")
    return target.axes.T @ source.axes


def angular_deviations(obj: ObjectFrame, hand: HandFrame) -> tuple[float, float]:
    alpha = math.acos(max(-1.0, min(1.0, float(obj.axes[0] @ hand.axes[1]))))
    beta = math.acos(max(-1.0, min(1.0, float(obj.axes[1] @ hand.axes[2]))))
    return alpha, beta


def aligned_axes(hand: HandFrame) -> np.ndarray:
    """Object axes (rows) satisfying cos alpha = -1 and cos beta = 1."""
    return np.stack([-hand.axes[1], hand.axes[2], -hand.axes[0]])


def alignment_error(obj: ObjectFrame, hand: HandFrame) -> AlignmentError:
    alpha, beta = angular_deviations(obj, hand)
    offset = obj.origin - hand.origin
    gap = float(offset @ hand.axes[1])
    lateral_vec = offset - gap * hand.axes[1]
    rot = rotvec_from_matrix(aligned_axes(hand).T @ obj.axes)
    return AlignmentError(alpha, beta, float(np.linalg.norm(lateral_vec)), gap,
                          float(np.linalg.norm(rot)), lateral_vec)


def target_pose(obj: ObjectFrame, hand: HandFrame) -> tuple[np.ndarray, np.ndarray]:
    """Where the TCP should be right now: on the finger axis at the current gap, aligned."""
    gap = float((obj.origin - hand.origin) @ hand.axes[1])
    return hand.origin + gap * hand.axes[1], matrix_to_quat(aligned_axes(hand).T)


@dataclass(frozen=True)
class Increment:
    translation: np.ndarray
    rotation: np.ndarray  # axis-angle, world frame
    release_ready: bool
    error: Optional[AlignmentError]
    tracking_loss: bool = False

    @classmethod
    def hold(cls, error=None, tracking_loss=True) -> "Increment":
        return cls(np.zeros(3), np.zeros(3), False, error, tracking_loss)


def _clip(v: np.ndarray, limit: float) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v * (limit / n) if n > limit else v


def alignment_setpoint(obj: ObjectFrame, hand: Optional[HandFrame], policy: ApproachPolicy,
                       dt: float, hand_rate: Optional[tuple] = None, approach: bool = True) -> Increment:
    """TCP increment for one control period of length ``dt``.

    ``hand_rate`` is an optional (fingertip velocity, angular velocity) pair
    in world coordinates; when given it is fed forward so the ring moves with
    the hand and the proportional terms only remove the residual error.
    With ``approach`` False the gap is held and the ring just follows the hand.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if hand is None:
        return Increment.hold()
    err = alignment_error(obj, hand)

    # off-axis correction, speed capped at v_v
    v_perp = _clip(-policy.position_gain * err.lateral_vector, policy.vertical_speed)
    translation = v_perp * dt

    aligned = err.aligned(policy)
    near_axis = err.lateral <= max(policy.lateral_tolerance, 0.0) and err.lateral <= policy.approach_slope * max(err.gap, 0.0)
    if approach and err.gap > policy.release_gap and near_axis and err.rotation <= 2 * policy.angular_tolerance:
        advance = min(policy.approach_speed * dt, err.gap - policy.release_gap)
        translation = translation - advance * hand.axes[1]

    R_err = aligned_axes(hand).T @ obj.axes
    omega = _clip(policy.rotation_gain * rotvec_from_matrix(R_err), policy.max_rotation_rate)
    release_ready = aligned and err.gap <= policy.release_gap + 1e-12
    if release_ready and approach:
        return Increment(np.zeros(3), np.zeros(3), True, err)
    if hand_rate is not None:
        v_tip, w_hand = (np.asarray(v, float) for v in hand_rate)
        w_hand = _clip(w_hand, policy.max_rotation_rate)
        v_ff = _clip(v_tip + np.cross(w_hand, err.gap * hand.axes[1]), policy.vertical_speed)
        translation = translation + v_ff * dt
        omega = omega + w_hand
    return Increment(translation, omega * dt, release_ready, err)


class Phase(str, Enum):
    APPROACHING = "approaching"
    ALIGNED = "aligned"
    RELEASED = "released"


@dataclass
class CooperationController:
    """Per-tick cooperation logic; owns the phase and recent hand frames."""

    policy: ApproachPolicy = field(default_factory=ApproachPolicy)
    phase: Phase = Phase.APPROACHING
    tracking_loss: bool = False
    last_error: Optional[AlignmentError] = None
    first_aligned_time: Optional[float] = None
    release_time: Optional[float] = None
    history: list = field(default_factory=list)  # (timestamp, HandFrame), oldest first

    def _observe(self, pose: HandPose) -> Optional[HandFrame]:
        if self.history and self.history[-1][0] == pose.timestamp:
            return self.history[-1][1]
        try:
            frame = hand_frame(pose)
        except DegenerateFrame:
            return None
        self.history.append((pose.timestamp, frame))
        # keep one sample at or beyond the baseline
        while len(self.history) > 2 and pose.timestamp - self.history[1][0] >= self.policy.rate_baseline - 1e-9:
            self.history.pop(0)
        return frame

    def hand_rate(self) -> Optional[tuple]:
        """Fingertip velocity and angular velocity over the rate baseline."""
        if len(self.history) < 2:
            return None
        (t0, f0), (t1, f1) = self.history[0], self.history[-1]
        if t1 - t0 < self.policy.rate_baseline - 1e-9:
            return None
        span = t1 - t0
        rot = aligned_axes(f1).T @ aligned_axes(f0)
        return (f1.origin - f0.origin) / span, rotvec_from_matrix(rot) / span

    def step(self, obj: ObjectFrame, pose: Optional[HandPose], now: float, dt: float) -> Increment:
        if self.phase is Phase.RELEASED:
            return Increment(np.zeros(3), np.zeros(3), True, self.last_error)
        frame = self._current_frame(pose, now)
        if frame is None:
            return Increment.hold(self.last_error)
        rate = self.hand_rate() if self.policy.feedforward else None
        inc = alignment_setpoint(obj, frame, self.policy, dt, rate)
        self.last_error = inc.error
        if inc.release_ready:
            self.phase = Phase.RELEASED
            self.release_time = now
        elif inc.error.aligned(self.policy):
            self.phase = Phase.ALIGNED
            if self.first_aligned_time is None:
                self.first_aligned_time = now
        else:
            self.phase = Phase.APPROACHING
        return inc

    def follow(self, obj: ObjectFrame, pose: Optional[HandPose], now: float, dt: float) -> Increment:
        """Keep the ring still relative to the hand without closing the gap (used while the gripper opens)."""
        frame = self._current_frame(pose, now)
        if frame is None:
            return Increment.hold(self.last_error)
        rate = self.hand_rate() if self.policy.feedforward else None
        return alignment_setpoint(obj, frame, self.policy, dt, rate, approach=False)

    def _current_frame(self, pose: Optional[HandPose], now: float) -> Optional[HandFrame]:
        frame = None
        if pose is not None and now - pose.timestamp <= self.policy.stale_after + 1e-9:
            frame = self._observe(pose)
        if frame is None:
            self.tracking_loss = True
            self.history.clear()
            return None
        self.tracking_loss = False
        return frame


def cooperation_step(controller: CooperationController, obj: ObjectFrame, pose: Optional[HandPose],
                     now: float, dt: float):
    inc = controller.step(obj, pose, now, dt)
    return inc, controller.phase


def apply_increment(position, orientation, inc: Increment):
    """Pose target obtained by applying ``inc`` to the current TCP pose."""
    from .rotations import quat_from_axis_angle, quat_mul, quat_normalize

    return (np.asarray(position, float) + inc.translation,
            quat_normalize(quat_mul(quat_from_axis_angle(inc.rotation), orientation)))
