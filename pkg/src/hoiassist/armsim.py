"""Kinematic TCP simulator standing in for the arm, gripper and servo link.

The servo loop runs at 500 Hz. Each tick moves the TCP toward the most
recent pose target with translation and rotation speeds clamped to the
configured limits. A command posted during tick k is first acted on at
tick k + 1.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .mailbox import LatestValue
from .rotations import (IDENTITY_QUAT, quat_conj, quat_from_axis_angle, quat_mul, quat_normalize,
                        quat_to_axis_angle)

log = logging.getLogger(__name__)

SERVO_RATE = 500.0
SERVO_DT = 1.0 / SERVO_RATE


class Gripper(str, Enum):
    OPEN = "open"
    CLOSED = "closed"


class Status(str, Enum):
    OK = "ok"
    SAFETY_STOP = "safety_stop"


@dataclass(frozen=True)
class SafetyZone:
    """Sphere around a hand point the TCP may only enter along the approach cone.

    ``axis`` points out of the hand along the approach direction.
    """

    center: np.ndarray
    axis: np.ndarray
    radius: float = 0.05
    cone_half_angle: float = math.radians(15.0)
    active: bool = True

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("safety radius must be positive")

    def violates(self, point) -> bool:
        if not self.active:
            return False
        d = np.asarray(point, float) - self.center
        r = math.sqrt(float(d @ d))
        if r >= self.radius:
            return False
        if r < 1e-9:
            return True
        cos_angle = float(d @ self.axis) / r
        return cos_angle < math.cos(self.cone_half_angle)


@dataclass(frozen=True)
class TcpState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    gripper: Gripper = Gripper.OPEN
    linear_limit: float = 0.25
    angular_limit: float = 1.0
    status: Status = Status.OK
    time: float = 0.0
    # (action, due time) of a gripper change still in flight
    gripper_pending: Optional[tuple] = None

    @property
    def axis_angle(self) -> np.ndarray:
        return quat_to_axis_angle(self.orientation)


@dataclass(frozen=True)
class ServoCommand:
    """Pose target for the servo; optionally a gripper action or a safety reset."""

    id: int
    position: np.ndarray
    orientation: np.ndarray
    gripper: Optional[Gripper] = None
    reset: bool = False
    source: str = ""


def servo_to(state: TcpState, target_position, target_orientation, dt: float = SERVO_DT,
             zone: Optional[SafetyZone] = None) -> TcpState:
    """One servo step toward a pose target with speed limits.

    Reaches the target exactly when it lies within one step's reach.
    Halts with a latched safety stop if the target or the next position
    would fall inside the zone outside its exemption cone.
    """
    if state.status is Status.SAFETY_STOP:
        return replace(state, time=state.time + dt)
    target_position = np.asarray(target_position, float)
    if not np.all(np.isfinite(target_position)) or not np.all(np.isfinite(target_orientation)):
        raise ValueError("servo target must be finite")
    delta = target_position - state.position
    dist = math.sqrt(float(delta @ delta))
    reach = state.linear_limit * dt
    if dist <= reach:
        position = target_position.copy()
    else:
        position = state.position + delta * (reach / dist)

    q = state.orientation
    q_target = np.asarray(target_orientation, float)
    err = quat_mul(q_target, quat_conj(q))
    if err[0] < 0:
        err = -err
    err_vec = quat_to_axis_angle(err)
    angle = math.sqrt(float(err_vec @ err_vec))
    turn = state.angular_limit * dt
    if angle <= turn:
        orientation = quat_normalize(q_target if q_target @ q >= 0 else -q_target)
    else:
        orientation = quat_normalize(quat_mul(quat_from_axis_angle(err_vec * (turn / angle)), q))

    if zone is not None and (zone.violates(target_position) or zone.violates(position)):
        log.warning("safety stop at t=%.3f: target inside the hand safety zone", state.time)
        return replace(state, status=Status.SAFETY_STOP, time=state.time + dt)
    return replace(state, position=position, orientation=orientation, time=state.time + dt)


GRIPPER_DELAY = 0.5


def gripper_command(state: TcpState, action, now: Optional[float] = None,
                    delay: float = GRIPPER_DELAY) -> TcpState:
    """Schedule an open/close; honoured even during a safety stop."""
    action = Gripper(action if action in (Gripper.OPEN, Gripper.CLOSED) else
                     {"open": Gripper.OPEN, "close": Gripper.CLOSED, "closed": Gripper.CLOSED}[action])
    now = state.time if now is None else now
    if state.gripper_pending is not None:
        if state.gripper_pending[0] is action:
            return state
    elif state.gripper is action:
        return state
    return replace(state, gripper_pending=(action, now + delay))


def settle_gripper(state: TcpState) -> TcpState:
    pending = state.gripper_pending
    if pending is not None and state.time >= pending[1] - 1e-12:
        return replace(state, gripper=pending[0], gripper_pending=None)
    return state


def reset_safety(state: TcpState) -> TcpState:
    return replace(state, status=Status.OK)


@dataclass(frozen=True)
class TraceRecord:
    tick: int
    time: float
    position: tuple
    axis_angle: tuple
    gripper: str
    command_id: int
    status: str


class ServoArm:
    """Owns the TCP state; consumes the newest command once per tick."""

    def __init__(self, state: TcpState, dt: float = SERVO_DT):
        self.state = state
        self.dt = dt
        self.commands: LatestValue[ServoCommand] = LatestValue()
        self.zone: Optional[SafetyZone] = None
        self.active: Optional[ServoCommand] = None
        self.tick = 0
        self.trace: list[TraceRecord] = []

    def step(self) -> TraceRecord:
        cmd = self.commands.take()
        if cmd is not None:
            if cmd.reset:
                self.state = reset_safety(self.state)
            if cmd.gripper is not None:
                self.state = gripper_command(self.state, cmd.gripper)
            self.active = cmd
        if self.active is not None:
            self.state = servo_to(self.state, self.active.position, self.active.orientation, self.dt, self.zone)
        else:
            self.state = replace(self.state, time=self.state.time + self.dt)
        self.state = settle_gripper(self.state)
        rec = TraceRecord(self.tick, self.state.time, tuple(self.state.position.tolist()),
                          tuple(self.state.axis_angle.tolist()), self.state.gripper.value,
                          self.active.id if self.active is not None else -1, self.state.status.value)
        self.trace.append(rec)
        self.tick += 1
        return rec


class SimulatedClock:
    """Fixed ticks; never sleeps."""

    def __init__(self, dt: float = SERVO_DT):
        self.dt = dt

    def ticks(self, duration: float):
        n = int(round(duration / self.dt))
        yield from range(n)


class WallClock:
    """Paces ticks against ``time.perf_counter``; late ticks are skipped, never doubled."""

    def __init__(self, dt: float = SERVO_DT):
        self.dt = dt
        self.missed = 0

    def ticks(self, duration: float):
        n = int(round(duration / self.dt))
        start = time.perf_counter()
        k = 0
        while k < n:
            yield k
            k += 1
            due = start + k * self.dt
            now = time.perf_counter()
            if now < due:
                time.sleep(due - now)
            else:
                behind = int((now - due) / self.dt)
                if behind:
                    self.missed += behind
                    log.debug("servo loop missed %d tick(s)", behind)
                    k += behind


def run_servo_loop(source: Optional[Callable[[int, TcpState], Optional[ServoCommand]]],
                   clock, duration: float, state: Optional[TcpState] = None) -> list[TraceRecord]:
    """Run the servo for ``duration`` seconds.

    ``source(tick, state)`` is polled after each servo step and may post a
    command; it takes effect on the following tick.
    """
    arm = ServoArm(state or TcpState(), clock.dt)
    for k in clock.ticks(duration):
        arm.step()
        if source is not None:
            cmd = source(k, arm.state)
            if cmd is not None:
                arm.commands.put(cmd)
    return arm.trace


TRACE_HEADER = ["tick", "time", "x", "y", "z", "rx", "ry", "rz", "gripper", "command_id"]


def write_trace_csv(path, trace) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER + ["status"])
        for r in trace:
            w.writerow([r.tick, repr(r.time), *map(repr, r.position), *map(repr, r.axis_angle),
                        r.gripper, r.command_id, r.status])


def read_trace_csv(path) -> list[TraceRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(TraceRecord(int(row["tick"]), float(row["time"]),
                                   (float(row["x"]), float(row["y"]), float(row["z"])),
                                   (float(row["rx"]), float(row["ry"]), float(row["rz"])),
                                   row["gripper"], int(row["command_id"]), row.get("status", "ok")))
    return out
