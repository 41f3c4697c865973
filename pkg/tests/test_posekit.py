import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from hoiassist import posekit as pk
from hoiassist.posekit import HandPose, MovingAverageSmoother


def const_pose(t, value=0.1):
    return HandPose(t, np.full((21, 3), value))


def test_joint_layout_is_mano():
    assert pk.INDEX == (5, 6, 7, 8)
    assert pk.INDEX_TIP == 8 and pk.INDEX_MCP == 5
    groups = [pk.WRIST, *pk.THUMB, *pk.INDEX, *pk.MIDDLE, *pk.RING, *pk.PINKY]
    assert sorted(groups) == list(range(21))


def test_pose_validation():
    with pytest.raises(pk.PoseError):
        HandPose(0.0, np.zeros((20, 3)))
    bad = np.zeros((21, 3))
    bad[3, 1] = np.nan
    with pytest.raises(pk.PoseError):
        HandPose(0.0, bad)
    flat = HandPose(0.0, np.arange(63.0))
    assert flat.joints[1].tolist() == [3.0, 4.0, 5.0]


def test_smoother_constant_stream():
    sm = MovingAverageSmoother(5)
    for t in range(12):
        out = sm.update(const_pose(t))
        np.testing.assert_allclose(out.joints, 0.1, rtol=0, atol=1e-15)
        assert out.timestamp == t


def test_smoother_w2_by_hand():
    sm = MovingAverageSmoother(2)
    outs = [sm.update(const_pose(t, v)).joints[0, 0] for t, v in enumerate([0.0, 1.0, 1.0])]
    assert outs == [0.0, 0.5, 1.0]


def test_smoother_rejects_nonfinite_and_keeps_state():
    sm = MovingAverageSmoother(3)
    sm.update(const_pose(0, 1.0))

    class Fake:
        timestamp = 1.0
        joints = np.full((21, 3), np.inf)

    with pytest.raises(pk.RejectedSample):
        sm.update(Fake())
    assert len(sm) == 1
    assert sm.update(const_pose(2, 3.0)).joints[0, 0] == 2.0


def test_smoother_window_must_be_positive():
    with pytest.raises(ValueError):
        MovingAverageSmoother(0)


finite = st.floats(-2.0, 2.0, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=1, max_size=30), st.integers(1, 7))
def test_smoother_matches_direct_mean(values, w):
    # oracle: mean of the trailing min(count, w) raw values, computed independently
    sm = MovingAverageSmoother(w)
    for i, v in enumerate(values):
        out = sm.update(const_pose(i, v)).joints[4, 2]
        tail = values[max(0, i + 1 - w):i + 1]
        assert out == pytest.approx(sum(tail) / len(tail), abs=1e-12)
        assert min(tail) - 1e-12 <= out <= max(tail) + 1e-12


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(float, (6, 21, 3), elements=finite))
def test_w1_is_identity(stream):
    sm = MovingAverageSmoother(1)
    for i, joints in enumerate(stream):
        assert np.array_equal(sm.update(HandPose(i, joints)).joints, joints)


def ramp(n):
    return [HandPose(i * 0.01, np.full((21, 3), float(i))) for i in range(n)]


def test_make_window_picks_every_tenth():
    w = pk.make_window(ramp(100), 10)
    assert w.frames.shape == (10, 63)
    assert w.frames[:, 0].tolist() == list(range(0, 100, 10))
    assert w.start_timestamp == 0.0


def test_make_window_on_exact_span_ends_at_newest():
    w = pk.make_window(ramp(150)[-91:], 10)
    assert w.frames[-1, 0] == 149 and w.frames[0, 0] == 59


def test_make_window_not_ready():
    assert pk.make_window(ramp(5), 10) is None
    assert pk.make_window(ramp(90), 10) is None
    assert pk.make_window(ramp(91), 10) is not None


def test_make_window_zeros_stride_one():
    poses = [HandPose(i, np.zeros((21, 3))) for i in range(10)]
    w = pk.make_window(poses, 1)
    assert w.frames.shape == (10, 63) and not w.frames.any()


def test_window_rows_are_joint_major():
    joints = np.arange(63.0).reshape(21, 3)
    w = pk.make_window([HandPose(i, joints + i) for i in range(10)], 1)
    assert w.frames[0, :6].tolist() == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(float, (19, 21, 3), elements=finite), st.sampled_from([1, 2]))
def test_window_roundtrip(stream, stride):
    poses = [HandPose(0.5 + 0.03 * i, j) for i, j in enumerate(stream)]
    w = pk.make_window(poses, stride)
    stamps = w.timestamps
    assert all(a < b for a, b in zip(stamps, stamps[1:]))
    picked = poses[:pk.window_span(stride):stride]
    for orig, back in zip(picked, w.poses()):
        assert back.timestamp == orig.timestamp and np.array_equal(back.joints, orig.joints)


def test_window_rejects_bad_shape_and_order():
    with pytest.raises(pk.PoseError):
        pk.FeatureWindow(np.zeros((9, 63)), 0.0)
    with pytest.raises(pk.PoseError):
        pk.FeatureWindow(np.zeros((10, 63)), 0.0, tuple(range(9)) + (3,))


def test_hold_window_repeats_pose():
    p = HandPose(2.5, np.random.default_rng(0).normal(size=(21, 3)))
    w = pk.hold_window(p)
    assert w.start_timestamp == 2.5
    assert np.array_equal(w.frames, np.tile(p.flatten(), (10, 1)))


def straight_finger_pose():
    """Index finger straight along +y, MCP knuckle displaced toward +x (the bending side)."""
    j = np.zeros((21, 3))
    j[:, 0] = np.linspace(0.0, 0.05, 21)  # other joints off to the side, distinct
    j[pk.INDEX_MCP] = (0.02, 0.00, 0.0)
    j[6] = (0.0, 0.04, 0.0)
    j[7] = (0.0, 0.06, 0.0)
    j[pk.INDEX_TIP] = (0.0, 0.08, 0.0)
    return HandPose(0.0, j)


def test_hand_frame_constructed_by_hand():
    f = pk.hand_frame(straight_finger_pose())
    np.testing.assert_allclose(f.origin, [0.0, 0.08, 0.0])
    np.testing.assert_allclose(f.y, [0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(f.x, [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(f.z, [0, 0, 1], atol=1e-12)


def test_hand_frame_degenerate():
    j = straight_finger_pose().joints.copy()
    j[7] = j[pk.INDEX_TIP]
    with pytest.raises(pk.DegenerateFrame):
        pk.hand_frame(HandPose(0.0, j))
    j = straight_finger_pose().joints.copy()
    j[pk.INDEX_MCP] = (0.0, -0.02, 0.0)  # collinear with the distal segment
    with pytest.raises(pk.DegenerateFrame):
        pk.hand_frame(HandPose(0.0, j))


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(float, (21, 3), elements=st.floats(-1.0, 1.0, allow_nan=False)))
def test_hand_frame_orthonormal(joints):
    try:
        f = pk.hand_frame(HandPose(0.0, joints))
    except pk.DegenerateFrame:
        return
    np.testing.assert_allclose(f.axes @ f.axes.T, np.eye(3), rtol=0, atol=1e-9)
    assert abs(np.linalg.det(f.axes) - 1.0) < 1e-9
    assert np.array_equal(f.origin, joints[pk.INDEX_TIP])


def test_trajectory_file_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    poses = [HandPose(i / 30, rng.normal(size=(21, 3))) for i in range(20)]
    path = tmp_path / "t.csv"
    pk.write_trajectory(path, poses)
    assert path.read_text().startswith("# hoi-trajectory/1\n")
    back = pk.read_trajectory(path)
    assert all(a.timestamp == b.timestamp and np.array_equal(a.joints, b.joints) for a, b in zip(poses, back))


def test_trajectory_file_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("# something-else\n")
    with pytest.raises(pk.PoseError):
        pk.read_trajectory(path)
    path.write_text("# hoi-trajectory/1\n0.0,1,2\n")
    with pytest.raises(pk.PoseError, match=":2:"):
        pk.read_trajectory(path)
