import numpy as np
import pytest
from hypothesis import given, strategies as st

from hoiassist.dataset import MotionClass
from hoiassist.primitives import (ControllerMode, Directive, Displacement, Level, PrimitiveBinding, Registry,
                                  UnregisteredClass, default_bindings, finish, load_bindings, step_fsm)

REG = default_bindings()


def test_default_bindings():
    come = REG.lookup(MotionClass.COME)
    assert come.level is Level.LOW and come.action.translation == (0.0, 0.020, 0.0)
    assert REG.lookup("Back").action.translation == (0.0, -0.020, 0.0)
    ring = REG.lookup("Ring")
    assert ring.level is Level.HIGH and ring.action is Directive.COOPERATE
    keep = REG.lookup("Keep")
    assert keep.level is Level.LOW and keep.action.is_zero
    assert len(REG) == 4


def test_step_examples():
    mode, action = step_fsm(ControllerMode.TELEOP, MotionClass.COME, REG)
    assert mode is ControllerMode.TELEOP and action.translation == (0.0, 0.02, 0.0)
    assert step_fsm(ControllerMode.TELEOP, MotionClass.RING, REG) == (ControllerMode.COOPERATION, None)
    assert step_fsm(ControllerMode.TELEOP, None, REG) == (ControllerMode.TELEOP, None)


def test_cooperation_ignores_gestures():
    for c in MotionClass:
        assert step_fsm(ControllerMode.COOPERATION, c, REG) == (ControllerMode.COOPERATION, None)


def test_unregistered_class():
    partial = Registry()
    partial.register(PrimitiveBinding(MotionClass.KEEP, Level.LOW, Displacement()))
    with pytest.raises(UnregisteredClass):
        step_fsm(ControllerMode.TELEOP, MotionClass.COME, partial)


def test_binding_level_must_match_action():
    with pytest.raises(ValueError):
        PrimitiveBinding(MotionClass.KEEP, Level.LOW, Directive.COOPERATE)
    with pytest.raises(ValueError):
        PrimitiveBinding(MotionClass.RING, Level.HIGH, Displacement())
    reg = default_bindings()
    with pytest.raises(ValueError):
        reg.register(PrimitiveBinding(MotionClass.KEEP, Level.LOW, Displacement()))


def test_done_only_after_cooperation():
    assert finish(ControllerMode.COOPERATION) is ControllerMode.DONE
    with pytest.raises(ValueError):
        finish(ControllerMode.TELEOP)


@given(st.lists(st.one_of(st.none(), st.sampled_from(list(MotionClass))), max_size=60))
def test_fsm_properties(stream):
    mode = ControllerMode.TELEOP
    actions = {c: REG.lookup(c).action for c in MotionClass}
    for confirmed in stream:
        new, action = step_fsm(mode, confirmed, REG)
        assert mode <= new  # monotone
        if new is not mode:
            assert action is None  # never act while switching
        if action is not None:
            assert action is actions[confirmed]  # verbatim from the registry
        mode = new


def test_load_bindings(tmp_path):
    path = tmp_path / "b.ini"
    path.write_text("[Keep]\nlevel = low\n[Come]\nlevel = low\ntranslation = 0 0.05 0\n"
                    "[Back]\nlevel=low\ntranslation = 0, -0.05, 0\n[Ring]\nlevel = high\ndirective = cooperate\n")
    reg = load_bindings(path)
    assert reg.lookup("Come").action.translation == (0.0, 0.05, 0.0)
    assert reg.lookup("Back").action.translation == (0.0, -0.05, 0.0)
    assert reg.lookup("Ring").action is Directive.COOPERATE
    with pytest.raises(FileNotFoundError):
        load_bindings(tmp_path / "missing.ini")


def test_packaged_bindings_match_defaults():
    from hoiassist.cli import data_path

    assert load_bindings(data_path("bindings.ini")) == REG


def test_bad_binding_file(tmp_path):
    path = tmp_path / "b.ini"
    path.write_text("[Come]\nlevel = low\ntranslation = 0 1\n")
    with pytest.raises(ValueError):
        load_bindings(path)
    path.write_text("[Wave]\nlevel = low\n")
    with pytest.raises(ValueError):
        load_bindings(path)
