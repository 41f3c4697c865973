"""Small rotation toolkit. Quaternions are (w, x, y, z) numpy arrays."""
from __future__ import annotations

import math

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, float)
    return q / math.sqrt(float(q @ q))


def quat_from_axis_angle(rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, float)
    angle = math.sqrt(float(rotvec @ rotvec))
    if angle < 1e-12:
        # second-order accurate near zero
        return quat_normalize(np.concatenate([[1.0], 0.5 * rotvec]))
    s = math.sin(0.5 * angle) / angle
    return np.array([math.cos(0.5 * angle), rotvec[0] * s, rotvec[1] * s, rotvec[2] * s])


def quat_to_axis_angle(q) -> np.ndarray:
    q = np.asarray(q, float)
    if q[0] < 0:
        q = -q
    v = q[1:]
    s = math.sqrt(float(v @ v))
    if s < 1e-15:
        return 2.0 * v
    angle = 2.0 * math.atan2(s, q[0])
    return v * (angle / s)


def quat_angle(q) -> float:
    """Rotation angle in [0, pi] of a unit quaternion."""
    w = min(1.0, abs(float(q[0])))
    v = np.asarray(q[1:], float)
    return 2.0 * math.atan2(math.sqrt(float(v @ v)), w)


def angle_between(q1, q2) -> float:
    return quat_angle(quat_mul(q2, quat_conj(q1)))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


def rotation_about(axis, angle: float) -> np.ndarray:
    """3x3 rotation matrix (Rodrigues)."""
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def rotvec_from_matrix(R) -> np.ndarray:
    return quat_to_axis_angle(matrix_to_quat(R))


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, float)
    return (R.shape == (3, 3) and np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(R) - 1.0) <= tol)
