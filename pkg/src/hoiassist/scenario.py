"""Scripted ring-wearing runs on a shared simulated clock.

Three contexts share one clock: the pose producer (30 Hz), recognition and
control (per delivered pose, plus every servo tick while cooperating), and
the servo loop (500 Hz). They exchange data only through the wire module's
loopback transport. Within a tick the order is fixed: servo step, state
report, pose delivery, recognition, control. Runs are bit-reproducible.
"""
from __future__ import annotations

import collections
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from . import wire
from .align import ApproachPolicy, CooperationController, ObjectFrame, Phase, apply_increment, target_pose
from .armsim import SERVO_DT, Gripper, SafetyZone, ServoArm, ServoCommand, Status, TcpState
from .armsim import TraceRecord, read_trace_csv, write_trace_csv
from .dataset import GeneratorConfig, HandModel, MotionClass, class_joints
from .mpm.gate import StabilityGate
from .mpm.network import MpmNetwork
from .posekit import NUM_JOINTS, DegenerateFrame, HandPose, MovingAverageSmoother, hand_frame, make_window
from .posekit import hold_window, window_span
from .primitives import ControllerMode, Displacement, Registry, default_bindings, finish, step_fsm
from .rotations import angle_between, matrix_to_quat, quat_from_axis_angle, quat_to_axis_angle

log = logging.getLogger(__name__)

SCRIPT_SCHEMA = "hoi-scenario/1"
SEGMENT_KINDS = ("pick", "gesture", "hold", "bend", "lift")
STAGES = ("pick", "teleop", "cooperation", "done")
# phase names in the order they must occur
PHASE_ORDER = ("pick", "teleop", "cooperation", "aligned", "release", "released")


class ScriptError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    """One stretch of scripted hand behaviour.

    kinds: ``pick`` (hand idle while the arm picks the ring), ``gesture``
    (params: class), ``hold`` (pointing pose held still), ``bend`` (params:
    to_deg, absolute index flexion reached with a half-cosine ramp), ``lift``
    (params: to_mm, absolute vertical hand offset, same ramp).
    """

    kind: str
    duration: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise ScriptError(f"unknown segment kind {self.kind!r}")
        if not (self.duration > 0 and math.isfinite(self.duration)):
            raise ScriptError(f"segment duration must be positive, got {self.duration}")
        if self.kind == "gesture":
            MotionClass.parse(self.params.get("class"))
        if self.kind == "bend" and "to_deg" not in self.params:
            raise ScriptError("bend segment needs to_deg")
        if self.kind == "lift" and "to_mm" not in self.params:
            raise ScriptError("lift segment needs to_mm")

    @property
    def motion(self) -> Optional[MotionClass]:
        if self.kind == "gesture":
            return MotionClass.parse(self.params["class"])
        if self.kind == "pick":
            return MotionClass.KEEP
        return None

    @property
    def pointing(self) -> bool:
        return self.kind in ("hold", "bend", "lift") or self.motion is MotionClass.RING


@dataclass
class Thresholds:
    max_latency: float = 0.3
    max_translation_mm: float = 2.5
    max_rotation_deg: float = 1.5
    require_phases: tuple = ()


@dataclass
class ScenarioScript:
    name: str = "scenario"
    segments: list = field(default_factory=list)
    initial_mode: str = "pick"
    seed: int = 101  # operator hand; training uses other seeds
    jitter: float = 0.0001
    ring_drift: float = 0.005
    pose_rate: float = 30.0
    smoothing: int = 5
    gate_length: int = 4
    # 0 classifies the newest smoothed pose on its own; >= 1 uses a strided history window
    window_stride: int = 0
    step: float = 0.020
    home: tuple = (0.15, 0.15, 0.35)
    pick_position: tuple = (0.20, 0.20, 0.15)
    tcp_start: tuple = (0.02, 0.20, 0.25)
    initial_gap: float = 0.10  # cooperation starts: ring placed aligned this far ahead
    policy: dict = field(default_factory=dict)
    linear_limit: float = 0.25
    angular_limit: float = 1.0
    safety_radius: float = 0.05
    stop_after_release: float = 1.0
    retreat: float = 0.08  # m backed off along the finger axis after release
    tracking_settle: float = 1.0  # s after first alignment before errors count
    cooperation_timeout: float = 120.0
    thresholds: Thresholds = field(default_factory=Thresholds)

    def __post_init__(self):
        self.segments = [s if isinstance(s, Segment) else Segment(**s) for s in self.segments]
        if isinstance(self.thresholds, dict):
            self.thresholds = Thresholds(**{**self.thresholds,
                                            "require_phases": tuple(self.thresholds.get("require_phases", ()))})
        if self.initial_mode not in ("pick", "teleop", "cooperation"):
            raise ScriptError(f"initial_mode must be pick, teleop or cooperation, not {self.initial_mode!r}")
        if self.gate_length < 1 or self.window_stride < 0 or self.smoothing < 1:
            raise ScriptError("gate_length and smoothing must be >= 1 and window_stride >= 0")
        if self.pose_rate <= 0:
            raise ScriptError("pose_rate must be positive")
        for name in ("home", "pick_position", "tcp_start"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))

    @property
    def duration(self) -> float:
        return float(sum(s.duration for s in self.segments))

    def boundaries(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum([s.duration for s in self.segments])])

    def approach_policy(self) -> ApproachPolicy:
        return ApproachPolicy(**self.policy)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["segments"] = [asdict(s) for s in self.segments]
        d["thresholds"]["require_phases"] = list(self.thresholds.require_phases)
        return {"schema": SCRIPT_SCHEMA, **d}

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioScript":
        data = dict(data)
        schema = data.pop("schema", SCRIPT_SCHEMA)
        if schema != SCRIPT_SCHEMA:
            raise ScriptError(f"unsupported scenario schema {schema!r}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ScriptError(str(exc)) from None


def load_script(path) -> ScenarioScript:
    with Path(path).open() as fh:
        return ScenarioScript.from_dict(json.load(fh))


def save_script(path, script: ScenarioScript) -> None:
    Path(path).write_text(json.dumps(script.to_dict(), indent=2) + "\n")


# --- scripted hand ------------------------------------------------------------------

def _ramp(u: float) -> float:
    """Half-cosine ease from 0 to 1 over u in [0, 1]."""
    u = min(max(u, 0.0), 1.0)
    return 0.5 * (1.0 - math.cos(math.pi * u))


class ScriptedHand:
    """Ground-truth joints for a script at any time, plus sensor noise."""

    def __init__(self, script: ScenarioScript, config: GeneratorConfig = GeneratorConfig()):
        self.script = script
        self.config = config
        self.hand = HandModel.from_seed(script.seed, config)
        self.bounds = script.boundaries()
        self.rng = np.random.default_rng([script.seed, 4242])
        # bend/lift level at the start of each segment
        bend, lift = 0.0, 0.0
        self._levels = []
        for seg in script.segments:
            self._levels.append((bend, lift))
            if seg.kind == "bend":
                bend = math.radians(float(seg.params["to_deg"]))
            elif seg.kind == "lift":
                lift = float(seg.params["to_mm"]) / 1000.0
        self._levels.append((bend, lift))
        starts = [self.bounds[i] for i, s in enumerate(script.segments) if s.pointing]
        self._point_origin = starts[0] if starts else 0.0

    def segment_at(self, t: float) -> int:
        """Index of the segment active at ``t`` (the last one past the end)."""
        i = int(np.searchsorted(self.bounds, t, side="right")) - 1
        return min(max(i, 0), len(self.script.segments) - 1)

    def levels(self, t: float) -> tuple[float, float]:
        i = self.segment_at(t)
        seg = self.script.segments[i]
        bend, lift = self._levels[i]
        u = (t - self.bounds[i]) / seg.duration
        if seg.kind == "bend":
            bend += (self._levels[i + 1][0] - bend) * _ramp(u)
        elif seg.kind == "lift":
            lift += (self._levels[i + 1][1] - lift) * _ramp(u)
        return bend, lift

    def true_joints(self, t: float) -> np.ndarray:
        i = self.segment_at(t)
        seg = self.script.segments[i]
        if not seg.pointing:
            return class_joints(seg.motion, self.hand, t - self.bounds[i], self.config)
        bend, lift = self.levels(t)
        joints = self.hand.joints("point", bend)
        drift = self.script.ring_drift * math.sin(2 * math.pi * (t - self._point_origin)
                                                  / self.config.ring_drift_period)
        return joints + drift * np.array([1.0, 0.0, 0.5]) + np.array([0.0, 0.0, lift])

    def sample(self, t: float) -> np.ndarray:
        return self.true_joints(t) + self.rng.normal(0.0, self.script.jitter, (NUM_JOINTS, 3))


# --- run records ----------------------------------------------------------------------

@dataclass(frozen=True)
class GestureRecord:
    segment: int
    label: str
    onset: Optional[float]  # delivery time of the first frame; None if never delivered
    counted: bool  # False before teleop starts and for continuations of the previous hand shape


@dataclass(frozen=True)
class CommandRecord:
    id: int
    tick: int
    time: float
    source: int  # gesture segment index; -1 for pick or controller commands without a gesture
    kind: str


@dataclass(frozen=True)
class HandSample:
    frame: int
    timestamp: float
    tick: int  # servo tick in which it was delivered
    segment: int
    joints: np.ndarray  # smoothed, as perceived


@dataclass(frozen=True)
class GestureLatency:
    segment: int
    label: str
    onset: float
    action_time: float
    latency: float


@dataclass
class MetricsReport:
    latencies: list = field(default_factory=list)  # GestureLatency per confirmed gesture
    unconfirmed: list = field(default_factory=list)  # segment indices never acted on
    max_translation_mm: float = 0.0
    mean_translation_mm: float = 0.0
    max_rotation_deg: float = 0.0
    mean_rotation_deg: float = 0.0
    tracked_ticks: int = 0
    phases: dict = field(default_factory=dict)
    confirmations: dict = field(default_factory=dict)
    spurious_confirmations: int = 0
    release_gap_mm: Optional[float] = None
    release_alpha_error_deg: Optional[float] = None
    release_beta_error_deg: Optional[float] = None
    release_lateral_mm: Optional[float] = None
    tcp_dz_max_mm: float = 0.0
    tcp_rotation_max_deg: float = 0.0
    safety_stops: int = 0
    incomplete: bool = False
    duration: float = 0.0

    @property
    def latency_values(self) -> list:
        return [g.latency for g in self.latencies]

    @property
    def max_latency(self) -> float:
        return max(self.latency_values, default=0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["max_latency"] = self.max_latency
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        data = dict(data)
        data.pop("max_latency", None)
        data["latencies"] = [GestureLatency(**g) for g in data.get("latencies", [])]
        return cls(**data)

    def check(self, thresholds: Thresholds) -> list:
        """(name, passed, detail) for every threshold in the scenario config."""
        out = [("latency", self.max_latency <= thresholds.max_latency + 1e-9,
                f"max {self.max_latency:.3f} s over {len(self.latencies)} gestures (limit {thresholds.max_latency} s)"),
               ("translation", self.max_translation_mm <= thresholds.max_translation_mm,
                f"max {self.max_translation_mm:.3f} mm (limit {thresholds.max_translation_mm} mm)"),
               ("rotation", self.max_rotation_deg <= thresholds.max_rotation_deg,
                f"max {self.max_rotation_deg:.3f} deg (limit {thresholds.max_rotation_deg} deg)"),
               ("safety", self.safety_stops == 0, f"{self.safety_stops} safety stop(s)")]
        for phase in thresholds.require_phases:
            out.append((f"phase:{phase}", phase in self.phases, f"t={self.phases.get(phase)}"))
        if thresholds.require_phases:
            out.append(("complete", not self.incomplete, "cooperation reached" if not self.incomplete
                        else "scenario never reached cooperation"))
        return out

    def passed(self, thresholds: Thresholds) -> bool:
        return all(ok for _, ok, _ in self.check(thresholds))

    def summary(self, thresholds: Optional[Thresholds] = None) -> str:
        lines = [f"duration {self.duration:.3f} s"]
        for g in self.latencies:
            lines.append(f"gesture {g.segment:2d} {g.label:<5} onset {g.onset:7.3f} s  "
                         f"action {g.action_time:7.3f} s  latency {g.latency:.3f} s")
        if self.unconfirmed:
            lines.append(f"unconfirmed gesture segments: {self.unconfirmed}")
        lines.append(f"tracking error: translation max {self.max_translation_mm:.3f} mm "
                     f"mean {self.mean_translation_mm:.3f} mm; rotation max {self.max_rotation_deg:.3f} deg "
                     f"mean {self.mean_rotation_deg:.3f} deg over {self.tracked_ticks} ticks")
        for name in PHASE_ORDER:
            if name in self.phases:
                lines.append(f"phase {name:<12} {self.phases[name]:.3f} s")
        lines.append("confirmations " + ", ".join(f"{k}={v}" for k, v in self.confirmations.items())
                     + f"; spurious {self.spurious_confirmations}")
        lines.append(f"cooperation excursion: tcp dz max {self.tcp_dz_max_mm:.2f} mm, "
                     f"rotation max {self.tcp_rotation_max_deg:.2f} deg")
        if self.release_gap_mm is not None:
            lines.append(f"release: gap {self.release_gap_mm:.3f} mm, alpha error "
                         f"{self.release_alpha_error_deg:.3f} deg, beta error {self.release_beta_error_deg:.3f} deg, "
                         f"lateral {self.release_lateral_mm:.3f} mm")
        if self.incomplete:
            lines.append("INCOMPLETE: scenario never reached cooperation")
        if thresholds is not None:
            for name, ok, detail in self.check(thresholds):
                lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return "\n".join(lines) + "\n"


@dataclass
class ScenarioRun:
    script: ScenarioScript
    report: MetricsReport
    trace: list
    hand_samples: list
    commands: list
    gestures: list
    events: list  # (time, name, detail)
    targets: list  # (tick, time, target position, target rotvec, err mm, err deg)


# --- metrics --------------------------------------------------------------------------

def _quat(rotvec) -> np.ndarray:
    return quat_from_axis_angle(np.asarray(rotvec, float))


def tracking_errors(trace, hand_samples, start: Optional[float], stop: Optional[float]):
    """Per-tick error between the TCP and the target predicted from the perceived hand.

    The target lies on the perceived finger axis at the TCP's current gap,
    with the aligned orientation. Only ticks in [start, stop] count.
    """
    rows = []
    if start is None:
        return rows
    stop = math.inf if stop is None else stop
    order = sorted(hand_samples, key=lambda s: (s.tick, s.frame))
    ticks = [s.tick for s in order]
    frames = {}
    for rec in trace:
        if rec.time < start - 1e-12 or rec.time > stop + 1e-12:
            continue
        j = int(np.searchsorted(ticks, rec.tick, side="right")) - 1
        if j < 0:
            continue
        if j not in frames:
            try:
                frames[j] = hand_frame(HandPose(order[j].timestamp, order[j].joints))
            except DegenerateFrame:
                frames[j] = None
        hf = frames[j]
        if hf is None:
            continue
        q = _quat(rec.axis_angle)
        obj = ObjectFrame.from_pose(rec.position, q)
        p_target, q_target = target_pose(obj, hf)
        err_t = float(np.linalg.norm(np.asarray(rec.position) - p_target))
        err_r = angle_between(q, q_target)
        rows.append((rec.tick, rec.time, p_target, quat_to_axis_angle(q_target), err_t * 1000.0,
                     math.degrees(err_r)))
    return rows


def tracking_window(script: ScenarioScript, phases: dict) -> tuple:
    """Ticks that count as tracking: from settled alignment until the release command."""
    aligned = phases.get("aligned")
    if aligned is None:
        return None, None
    end = phases.get("release")
    if end is None and script.segments:
        end = script.duration
    start = aligned + script.tracking_settle
    if end is not None and start > end:
        return None, None
    return start, end


def _cooperation_excursion(trace, start: Optional[float]) -> tuple:
    """Largest |dz| (mm) and rotation (deg) of the TCP relative to the cooperation start."""
    if start is None:
        return 0.0, 0.0
    recs = [r for r in trace if r.time >= start - 1e-12]
    if not recs:
        return 0.0, 0.0
    z0, q0 = recs[0].position[2], _quat(recs[0].axis_angle)
    dz = max(abs(r.position[2] - z0) for r in recs)
    rot = max(angle_between(q0, _quat(r.axis_angle)) for r in recs[::10])
    return dz * 1000.0, math.degrees(rot)


def compute_metrics(script: ScenarioScript, trace, hand_samples, commands, gestures, events) -> MetricsReport:
    report = MetricsReport(duration=(trace[-1].time if trace else 0.0))
    for time, name, detail in events:
        if name == "phase" and detail not in report.phases:
            report.phases[detail] = time
        elif name == "confirm":
            label, _, tag = detail.partition(":")
            report.confirmations[label] = report.confirmations.get(label, 0) + 1
            if tag == "spurious":
                report.spurious_confirmations += 1
        elif name == "safety_stop":
            report.safety_stops += 1
        elif name == "release_state":
            gap, a, b, lat = (float(v) for v in detail.split(","))
            report.release_gap_mm, report.release_alpha_error_deg = gap, a
            report.release_beta_error_deg, report.release_lateral_mm = b, lat

    # first servo tick whose active command derives from each gesture
    source_of = {c.id: c.source for c in commands}
    first_active = {}
    for rec in trace:
        src = source_of.get(rec.command_id, -1)
        if src >= 0 and src not in first_active:
            first_active[src] = rec.time
    for g in gestures:
        if not g.counted or g.onset is None:
            continue
        if g.segment in first_active:
            t = first_active[g.segment]
            report.latencies.append(GestureLatency(g.segment, g.label, g.onset, t, t - g.onset))
        else:
            report.unconfirmed.append(g.segment)

    rows = tracking_errors(trace, hand_samples, *tracking_window(script, report.phases))
    if rows:
        et = np.array([r[4] for r in rows])
        er = np.array([r[5] for r in rows])
        report.max_translation_mm, report.mean_translation_mm = float(et.max()), float(et.mean())
        report.max_rotation_deg, report.mean_rotation_deg = float(er.max()), float(er.mean())
        report.tracked_ticks = len(rows)
    report.incomplete = bool(script.segments) and "cooperation" not in report.phases
    report.tcp_dz_max_mm, report.tcp_rotation_max_deg = _cooperation_excursion(trace, report.phases.get("cooperation"))
    return report


# --- the pipeline ---------------------------------------------------------------------

def _default_orientation() -> np.ndarray:
    # ring normal toward the operator (+y), gripper line along -x, z up
    return matrix_to_quat(np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))


def _pose6(position, orientation) -> tuple:
    return tuple(np.concatenate([position, quat_to_axis_angle(orientation)]).tolist())


class _Pipeline:
    def __init__(self, script: ScenarioScript, network: Optional[MpmNetwork], registry: Optional[Registry],
                 class_names, config: GeneratorConfig):
        self.s = script
        self.net = network
        self.registry = registry or default_bindings(script.step)
        self.class_names = list(class_names)
        self.hand = ScriptedHand(script, config)
        self.dt = SERVO_DT
        self.tick = 0
        self.now_us = 0
        clock = lambda: self.now_us  # noqa: E731
        # perception -> control, control -> arm, arm -> control
        self.pose_tx = wire.stream_session(wire.LoopbackTransport(), "producer")
        self.pose_rx = wire.stream_session(self.pose_tx.transport, "consumer", clock)
        self.cmd_tx = wire.stream_session(wire.LoopbackTransport(), "producer")
        self.cmd_rx = wire.stream_session(self.cmd_tx.transport, "consumer", clock)
        self.state_tx = wire.stream_session(wire.LoopbackTransport(), "producer")
        self.state_rx = wire.stream_session(self.state_tx.transport, "consumer", clock)
        self.gate_tx = wire.stream_session(wire.LoopbackTransport(), "producer")
        self.gate_rx = wire.stream_session(self.gate_tx.transport, "consumer", clock)

        self.smoother = MovingAverageSmoother(script.smoothing)
        self.buffer = collections.deque(maxlen=window_span(max(script.window_stride, 1)))
        self.gate = StabilityGate(script.gate_length, len(self.class_names))
        self.mode = ControllerMode.TELEOP
        self.stage = "pick"
        self.controller = CooperationController(script.approach_policy())
        self.perceived: Optional[HandPose] = None
        self.perceived_segment = -1
        self.tcp_report = None

        self.next_frame = 0
        self.next_cmd_id = 0
        self.commands: list[CommandRecord] = []
        self._pending_cmd: collections.deque = collections.deque()
        self.events: list = []
        self.decisions: list = []
        self.hand_samples: list[HandSample] = []
        self.onsets: dict[int, float] = {}
        self.teleop_start: Optional[float] = None
        self.teleop_target = np.asarray(script.tcp_start, float)
        self.orientation = _default_orientation()
        self.pick_queue: list = []
        self.release_at: Optional[float] = None
        self.last_confirm_source = -1

        state = TcpState(linear_limit=script.linear_limit, angular_limit=script.angular_limit)
        if script.initial_mode == "pick":
            state = replace(state, position=np.asarray(script.home, float), orientation=self.orientation)
        elif script.initial_mode == "teleop":
            state = replace(state, position=self.teleop_target.copy(), orientation=self.orientation,
                            gripper=Gripper.CLOSED)
        else:
            position, orientation = self._aligned_start()
            state = replace(state, position=position, orientation=orientation, gripper=Gripper.CLOSED)
        self.arm = ServoArm(state, self.dt)

    def _aligned_start(self):
        hf = hand_frame(HandPose(0.0, self.hand.true_joints(0.0)))
        obj = ObjectFrame(hf.origin + self.s.initial_gap * hf.axes[1], np.eye(3))
        return target_pose(obj, hf)

    # -- helpers
    @property
    def time(self) -> float:
        return self.tick * self.dt

    def event(self, name: str, detail: str = "") -> None:
        self.events.append((self.time, name, detail))

    def phase(self, name: str) -> None:
        self.event("phase", name)

    def post(self, position, orientation, source: int, kind: str, gripper: int = wire.GRIPPER_NONE) -> None:
        self.cmd_tx.send(wire.WireMessage(self.now_us, wire.ServoSetpoint(_pose6(position, orientation), gripper)))
        self._pending_cmd.append((self.next_cmd_id, source, kind))
        self.commands.append(CommandRecord(self.next_cmd_id, self.tick, self.time, source, kind))
        self.next_cmd_id += 1

    # -- servo side
    def servo_side(self) -> None:
        # drain commands in order; the mailbox keeps the newest
        for msg in self.cmd_rx.poll():
            cid, source, kind = self._pending_cmd.popleft()
            body = msg.body
            pose = np.asarray(body.pose, float)
            grip = {wire.GRIPPER_OPEN: Gripper.OPEN, wire.GRIPPER_CLOSE: Gripper.CLOSED}.get(body.gripper)
            self.arm.commands.put(ServoCommand(cid, pose[:3], _quat(pose[3:]), grip, source=kind))
        before = self.arm.state.status
        self.arm.step()
        if self.arm.state.status is Status.SAFETY_STOP and before is not Status.SAFETY_STOP:
            self.event("safety_stop")
        st = self.arm.state
        grip = wire.GRIPPER_CLOSE if st.gripper is Gripper.CLOSED else wire.GRIPPER_OPEN
        status = wire.STATUS_SAFETY_STOP if st.status is Status.SAFETY_STOP else wire.STATUS_OK
        self.state_tx.send(wire.WireMessage(self.now_us, wire.StateReport(_pose6(st.position, st.orientation),
                                                                          grip, status)))

    # -- perception side
    def produce_poses(self) -> None:
        period = 1.0 / self.s.pose_rate
        while self.next_frame * period <= self.time + 1e-9 and self.next_frame * period < self.s.duration:
            t = self.next_frame * period
            joints = self.hand.sample(t)
            self.pose_tx.send(wire.WireMessage(int(round(t * 1e6)), wire.PoseSample(tuple(joints.ravel()))))
            self.next_frame += 1

    # -- control side
    def control_side(self) -> None:
        for msg in self.state_rx.poll():
            self.tcp_report = msg
        for msg in self.pose_rx.poll():
            self.on_pose(msg)
        if self.stage == "pick":
            self.run_pick()
        elif self.stage == "cooperation":
            self.run_cooperation()
        elif self.stage == "done" and self.release_at is None:
            self.run_release()

    def on_pose(self, msg) -> None:
        ts = msg.timestamp_us / 1e6
        frame = len(self.hand_samples)
        segment = self.hand.segment_at(ts)
        pose = HandPose(ts, np.asarray(msg.body.joints, float).reshape(NUM_JOINTS, 3))
        smoothed = self.smoother.update(pose)
        self.perceived = smoothed
        self.perceived_segment = segment
        self.hand_samples.append(HandSample(frame, ts, self.tick, segment, smoothed.joints.copy()))
        if segment not in self.onsets:
            self.onsets[segment] = self.time
        self.buffer.append(smoothed)
        try:
            hf = hand_frame(smoothed)
            self.arm.zone = SafetyZone(hf.origin, hf.axes[1], self.s.safety_radius)
        except DegenerateFrame:
            pass
        if self.stage == "teleop":
            self.recognize(segment)

    def recognize(self, segment: int) -> None:
        if self.net is None:
            return
        if self.s.window_stride == 0:
            window = hold_window(self.buffer[-1])
        else:
            window = make_window(list(self.buffer), self.s.window_stride)
        if window is None:
            return
        decision = int(self.net.predict(window.frames[None])[0])
        self.decisions.append((self.time, segment, decision))
        confirmed = self.gate.push(decision)
        if confirmed is None:
            return
        self.gate.reset()
        label = self.class_names[confirmed]
        source = self._attribute(label, segment)
        self.event("confirm", label + (":spurious" if source < 0 else ""))
        self.gate_tx.send(wire.WireMessage(self.now_us, wire.GateDecision(confirmed)))
        mode, action = step_fsm(self.mode, MotionClass.parse(label), self.registry)
        if mode is not self.mode:
            self.mode = mode
            self.stage = "cooperation"
            self.coop_source = source
            self.phase("cooperation")
            self.run_cooperation()
            return
        if action is not None:
            if isinstance(action, Displacement):
                self.teleop_target = self.teleop_target + np.asarray(action.translation, float)
            self.post(self.teleop_target, self.orientation, source, "teleop")

    def _attribute(self, label: str, segment: int) -> int:
        """Gesture segment a confirmation belongs to, or -1 for a spurious one."""
        for seg in (segment, segment - 1):
            if 0 <= seg < len(self.s.segments):
                m = self.s.segments[seg].motion
                if m is not None and m.label == label:
                    return seg
        return -1

    def run_pick(self) -> None:
        st = self.arm.state
        if not self.pick_queue and self.stage == "pick" and not getattr(self, "_pick_started", False):
            self._pick_started = True
            above = np.asarray(self.s.pick_position) + np.array([0.0, 0.0, 0.05])
            lifted = np.asarray(self.s.pick_position) + np.array([0.0, 0.0, 0.10])
            self.pick_queue = [(above, None), (np.asarray(self.s.pick_position), None),
                               (np.asarray(self.s.pick_position), wire.GRIPPER_CLOSE), (lifted, None),
                               (np.asarray(self.s.tcp_start), None)]
            self.phase("pick")
            self._pick_target = None
        if self._pick_target is not None:
            pos, grip = self._pick_target
            # targets cross the wire as 32-bit floats
            reached = np.allclose(st.position, pos, rtol=0, atol=1e-6) and st.gripper_pending is None
            if not reached:
                return
        if not self.pick_queue:
            self.stage = "teleop"
            self.teleop_start = self.time
            self.gate.reset()
            self.phase("teleop")
            return
        pos, grip = self.pick_queue.pop(0)
        self._pick_target = (pos, grip)
        self.post(pos, self.orientation, -1, "pick", grip or wire.GRIPPER_NONE)

    def run_cooperation(self) -> None:
        if self.tcp_report is None:
            return
        pose = np.asarray(self.tcp_report.body.pose, float)
        q = _quat(pose[3:])
        obj = ObjectFrame.from_pose(pose[:3], q)
        before = self.controller.phase
        inc = self.controller.step(obj, self.perceived, self.time, self.dt)
        if self.controller.first_aligned_time is not None and "aligned" not in self._phase_names():
            self.phase("aligned")
        source = getattr(self, "coop_source", -1)
        if inc.release_ready and before is not Phase.RELEASED:
            err = inc.error
            self.event("release_state", f"{err.gap * 1000!r},{math.degrees(err.alpha_error)!r},"
                                        f"{math.degrees(err.beta_error)!r},{err.lateral * 1000!r}")
            self.phase("release")
            self.post(pose[:3], q, source, "release", wire.GRIPPER_OPEN)
            self.mode = finish(self.mode)
            self.stage = "done"
            return
        if self.time - self._phase_time("cooperation") > self.s.cooperation_timeout:
            self.event("timeout")
            self.stage = "done"
            return
        position, orientation = apply_increment(pose[:3], q, inc)
        self.post(position, orientation, source, "cooperation")

    def run_release(self) -> None:
        """Follow the hand while the gripper opens, then back off along the finger axis."""
        if self.tcp_report is None:
            return
        pose = np.asarray(self.tcp_report.body.pose, float)
        q = _quat(pose[3:])
        source = getattr(self, "coop_source", -1)
        if self.arm.state.gripper is Gripper.OPEN:
            self.release_at = self.time
            self.phase("released")
            frame = self.controller.history[-1][1] if self.controller.history else None
            if frame is not None:
                self.post(pose[:3] + self.s.retreat * frame.axes[1], q, source, "retreat")
            return
        inc = self.controller.follow(ObjectFrame.from_pose(pose[:3], q), self.perceived, self.time, self.dt)
        position, orientation = apply_increment(pose[:3], q, inc)
        self.post(position, orientation, source, "release")

    def _phase_names(self) -> set:
        return {d for _, n, d in self.events if n == "phase"}

    def _phase_time(self, name: str) -> float:
        for t, n, d in self.events:
            if n == "phase" and d == name:
                return t
        return self.time

    # -- main loop
    def run(self) -> ScenarioRun:
        s = self.s
        if s.initial_mode == "teleop":
            self.stage = "teleop"
            self.teleop_start = 0.0
            self.phase("teleop")
        elif s.initial_mode == "cooperation":
            self.stage = "cooperation"
            self.mode = ControllerMode.COOPERATION
            self.phase("cooperation")
        n_ticks = int(round(s.duration / self.dt))
        while self.tick < n_ticks:
            self.now_us = int(round(self.time * 1e6))
            self.servo_side()
            self.produce_poses()
            self.control_side()
            self.tick += 1
            if self.release_at is not None and self.time >= self.release_at + s.stop_after_release:
                break
        return self.finish_run()

    def finish_run(self) -> ScenarioRun:
        self.gate_rx.poll()
        gestures = []
        for i, seg in enumerate(self.s.segments):
            if seg.kind != "gesture":
                continue
            onset = self.onsets.get(i)
            prev = self.s.segments[i - 1].motion if i > 0 else None
            # a segment that repeats the hand shape already on show has no onset to measure
            counted = (onset is not None and self.teleop_start is not None and onset >= self.teleop_start
                       and prev is not seg.motion)
            gestures.append(GestureRecord(i, seg.motion.label, onset, counted))
        report = compute_metrics(self.s, self.arm.trace, self.hand_samples, self.commands, gestures, self.events)
        rows = tracking_errors(self.arm.trace, self.hand_samples, *tracking_window(self.s, report.phases))
        return ScenarioRun(self.s, report, self.arm.trace, self.hand_samples, self.commands, gestures,
                           self.events, rows)


def run_scenario(script: ScenarioScript, network: Optional[MpmNetwork] = None, registry: Optional[Registry] = None,
                 class_names=None, config: GeneratorConfig = GeneratorConfig()) -> ScenarioRun:
    """Run a script end to end on the simulated clock."""
    names = class_names or [c.label for c in MotionClass]
    if network is None and any(seg.kind == "gesture" for seg in script.segments) and script.initial_mode != "cooperation":
        raise ScriptError("gesture segments need a trained network")
    return _Pipeline(script, network, registry, names, config).run()


# --- files ------------------------------------------------------------------------

def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _opt(text: str) -> Optional[float]:
    return None if text == "" else float(text)


def write_outputs(run: ScenarioRun, out_dir) -> Path:
    """Write traces, metrics and a summary; every float is written with repr."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_script(out / "scenario.json", run.script)
    write_trace_csv(out / "tcp_trace.csv", run.trace)
    coords = [f"j{j}{a}" for j in range(NUM_JOINTS) for a in "xyz"]
    _write_rows(out / "hand_trace.csv", ["frame", "timestamp", "tick", "segment"] + coords,
                ([h.frame, repr(h.timestamp), h.tick, h.segment, *map(repr, h.joints.ravel().tolist())]
                 for h in run.hand_samples))
    _write_rows(out / "target_trace.csv", ["tick", "time", "x", "y", "z", "rx", "ry", "rz", "error_mm", "error_deg"],
                ([r[0], repr(r[1]), *map(repr, np.asarray(r[2]).tolist()), *map(repr, np.asarray(r[3]).tolist()),
                  repr(r[4]), repr(r[5])] for r in run.targets))
    _write_rows(out / "commands.csv", ["id", "tick", "time", "source", "kind"],
                ([c.id, c.tick, repr(c.time), c.source, c.kind] for c in run.commands))
    latency = {g.segment: g.latency for g in run.report.latencies}
    _write_rows(out / "gestures.csv", ["segment", "label", "onset", "counted", "latency"],
                ([g.segment, g.label, "" if g.onset is None else repr(g.onset), int(g.counted),
                  repr(latency[g.segment]) if g.segment in latency else ""] for g in run.gestures))
    _write_rows(out / "events.csv", ["time", "event", "detail"], ([repr(t), n, d] for t, n, d in run.events))
    checks = run.report.check(run.script.thresholds)
    metrics = {"scenario": run.script.name, **run.report.to_dict(),
               "checks": [{"name": n, "passed": ok, "detail": d} for n, ok, d in checks],
               "passed": all(ok for _, ok, _ in checks)}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    (out / "summary.txt").write_text(f"scenario {run.script.name}\n" + run.report.summary(run.script.thresholds))
    return out


def replay(out_dir, script: Optional[ScenarioScript] = None) -> MetricsReport:
    """Recompute the metrics of a finished run from its saved traces."""
    out = Path(out_dir)
    script = script or load_script(out / "scenario.json")
    trace = read_trace_csv(out / "tcp_trace.csv")
    hand = []
    for row in _read_rows(out / "hand_trace.csv"):
        joints = np.array([float(row[f"j{j}{a}"]) for j in range(NUM_JOINTS) for a in "xyz"]).reshape(NUM_JOINTS, 3)
        hand.append(HandSample(int(row["frame"]), float(row["timestamp"]), int(row["tick"]), int(row["segment"]),
                               joints))
    commands = [CommandRecord(int(r["id"]), int(r["tick"]), float(r["time"]), int(r["source"]), r["kind"])
                for r in _read_rows(out / "commands.csv")]
    gestures = [GestureRecord(int(r["segment"]), r["label"], _opt(r["onset"]), bool(int(r["counted"])))
                for r in _read_rows(out / "gestures.csv")]
    events = [(float(r["time"]), r["event"], r["detail"]) for r in _read_rows(out / "events.csv")]
    return compute_metrics(script, trace, hand, commands, gestures, events)


# --- bundled scripts ----------------------------------------------------------------

def ring_script(**overrides) -> ScenarioScript:
    """Pick, a short teleop approach, Ring, then cooperation with one finger bend."""
    def gesture(label, duration):
        return Segment("gesture", duration, {"class": label})

    segments = [Segment("pick", 3.5), gesture("Keep", 1.0), gesture("Come", 0.8), gesture("Keep", 1.0),
                gesture("Back", 0.5), gesture("Keep", 1.0), gesture("Come", 0.7), gesture("Keep", 1.0),
                gesture("Ring", 1.5), Segment("hold", 3.0), Segment("bend", 4.0, {"to_deg": 10.0}),
                Segment("hold", 14.0)]
    base = dict(name="ring", segments=segments, jitter=0.00002,
                thresholds=Thresholds(require_phases=PHASE_ORDER))
    return ScenarioScript(**{**base, **overrides})


def disturbance_script(**overrides) -> ScenarioScript:
    """Cooperation from an aligned start: 18 degree finger bend, then a 74.23 mm lift, over 30 s."""
    segments = [Segment("bend", 15.0, {"to_deg": 18.0}), Segment("lift", 15.0, {"to_mm": 74.23})]
    base = dict(name="disturbance", segments=segments, initial_mode="cooperation", jitter=0.00002,
                ring_drift=0.0, initial_gap=0.10, policy={"approach_speed": 0.002},
                thresholds=Thresholds(require_phases=("cooperation", "aligned")))
    return ScenarioScript(**{**base, **overrides})
