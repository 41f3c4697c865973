"""Gesture-driven teleoperation and ring-fitting cooperation on a simulated arm."""
from .posekit import (HandFrame, HandPose, FeatureWindow, MovingAverageSmoother, hand_frame, hold_window,
                      make_window, smooth_stream)
from .dataset import (LabeledDataset, MotionClass, build_dataset, generate_motion_trajectory,
                      stratified_split)
from .mpm import MpmNetwork, StabilityGate, TrainingConfig, classify, gate_decision, train_mpm
from .primitives import ControllerMode, default_bindings, step_fsm
from .align import (ApproachPolicy, CooperationController, ObjectFrame, alignment_setpoint,
                    angular_deviations, cooperation_step, rotation_between_frames)
from .armsim import SafetyZone, TcpState, gripper_command, run_servo_loop, servo_to
from .scenario import MetricsReport, ScenarioScript, run_scenario

__version__ = "0.1.0"
