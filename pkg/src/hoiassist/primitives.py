"""Motion-primitive registry and the teleop -> cooperation -> done mode machine."""
from __future__ import annotations

import configparser
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .dataset import MotionClass

DEFAULT_STEP = 0.020  # m per confirmed Come/Back


class Level(str, Enum):
    LOW = "low"
    HIGH = "high"


class Directive(str, Enum):
    COOPERATE = "cooperate"


class ControllerMode(Enum):
    TELEOP = 0
    COOPERATION = 1
    DONE = 2

    def __le__(self, other):
        return self.value <= other.value

    def __lt__(self, other):
        return self.value < other.value


class UnregisteredClass(KeyError):
    pass


@dataclass(frozen=True)
class Displacement:
    """Incremental TCP motion: translation (m) and axis-angle rotation (rad)."""

    translation: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (0.0, 0.0, 0.0)

    @property
    def is_zero(self) -> bool:
        return not any(self.translation) and not any(self.rotation)


@dataclass(frozen=True)
class PrimitiveBinding:
    motion: MotionClass
    level: Level
    action: object  # Displacement for LOW, Directive for HIGH

    def __post_init__(self):
        if self.level is Level.LOW and not isinstance(self.action, Displacement):
            raise ValueError(f"{self.motion.label}: low-level bindings carry displacements")
        if self.level is Level.HIGH and not isinstance(self.action, Directive):
            raise ValueError(f"{self.motion.label}: high-level bindings carry directives")


class Registry(dict):
    def lookup(self, motion) -> PrimitiveBinding:
        try:
            return self[MotionClass.parse(motion)]
        except (KeyError, ValueError):
            raise UnregisteredClass(motion) from None

    def register(self, binding: PrimitiveBinding) -> None:
        if binding.motion in self:
            raise ValueError(f"{binding.motion.label} already bound")
        self[binding.motion] = binding


def default_bindings(step: float = DEFAULT_STEP) -> Registry:
    reg = Registry()
    reg.register(PrimitiveBinding(MotionClass.KEEP, Level.LOW, Displacement()))
    reg.register(PrimitiveBinding(MotionClass.COME, Level.LOW, Displacement((0.0, step, 0.0))))
    reg.register(PrimitiveBinding(MotionClass.BACK, Level.LOW, Displacement((0.0, -step, 0.0))))
    reg.register(PrimitiveBinding(MotionClass.RING, Level.HIGH, Directive.COOPERATE))
    return reg


def _vec(text: str) -> tuple:
    vals = tuple(float(v) for v in text.replace(",", " ").split())
    if len(vals) != 3:
        raise ValueError(f"expected three numbers, got {text!r}")
    return vals


def load_bindings(path: str | Path) -> Registry:
    """Read bindings from an INI file, one section per class::

        [Come]
        level = low
        translation = 0 0.02 0
        rotation = 0 0 0

        [Ring]
        level = high
        directive = cooperate
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    reg = Registry()
    for section in parser.sections():
        sec = parser[section]
        level = Level(sec.get("level", "low").strip().lower())
        if level is Level.LOW:
            action = Displacement(_vec(sec.get("translation", "0 0 0")), _vec(sec.get("rotation", "0 0 0")))
        else:
            action = Directive(sec.get("directive", "cooperate").strip().lower())
        reg.register(PrimitiveBinding(MotionClass.parse(section), level, action))
    return reg


def step_fsm(mode: ControllerMode, confirmed, registry: Registry):
    """Advance the mode machine by one gate output.

    Returns ``(mode, action)``; action is a Displacement or None. A step that
    changes mode never emits an action.
    """
    if confirmed is None:
        return mode, None
    binding = registry.lookup(confirmed)
    if mode is not ControllerMode.TELEOP:
        # cooperation: the alignment controller owns the arm
        return mode, None
    if binding.level is Level.HIGH:
        if binding.action is Directive.COOPERATE:
            return ControllerMode.COOPERATION, None
        return mode, None
    return mode, binding.action


def finish(mode: ControllerMode) -> ControllerMode:
    """Cooperation ends when the object has been released."""
    if mode is ControllerMode.TELEOP:
        raise ValueError("cannot finish before cooperation")
    return ControllerMode.DONE


def apply_displacement(position: np.ndarray, displacement: Displacement) -> np.ndarray:
    return np.asarray(position, float) + np.asarray(displacement.translation, float)
