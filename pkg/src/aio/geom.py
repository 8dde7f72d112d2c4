"""SO(3) helpers: hat/vee, exponential and logarithm maps, Jacobians, Euler angles.

Rotations are stored as 3x3 matrices mapping body-frame vectors to the world
frame.
"""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-6


def hat(r):
    """Skew-symmetric matrix such that ``hat(r) @ x == np.cross(r, x)``."""
    x, y, z = r
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S):
    """Inverse of :func:`hat`."""
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def exp_so3(phi):
    """Rodrigues formula. Below 1e-6 rad a second-order series is used."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = hat(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / angle**2
    return np.eye(3) + a * K + b * K @ K


def log_so3(R):
    """Principal logarithm of a rotation matrix, returned as a rotation vector.

    The norm of the result is at most pi. For rotations by (almost exactly) pi
    the axis is taken from the symmetric part of ``(R + I) / 2``.
    """
    R = np.asarray(R, dtype=float)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    angle = np.arctan2(np.linalg.norm(w), 0.5 * (np.trace(R) - 1.0))
    if angle < _SMALL_ANGLE:
        # sin(angle)/angle ~ 1 - angle^2/6
        return w * (1.0 + angle**2 / 6.0)
    if np.pi - angle < 1e-5:
        B = 0.25 * (R + R.T) + 0.5 * np.eye(3)
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        # fix the sign with the (tiny) antisymmetric part when present
        if np.dot(axis, w) < 0.0:
            axis = -axis
        return angle * axis
    return w * (angle / np.sin(angle))


def left_jacobian(phi):
    """Left Jacobian of SO(3): ``exp(phi + d) ~= exp(J_l(phi) d) exp(phi)``."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = hat(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    a = (1.0 - np.cos(angle)) / angle**2
    b = (angle - np.sin(angle)) / angle**3
    return np.eye(3) + a * K + b * K @ K


def right_jacobian(phi):
    """Right Jacobian of SO(3), equal to ``left_jacobian(-phi)``."""
    return left_jacobian(-np.asarray(phi, dtype=float))


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    orth = np.linalg.norm(R @ R.T - np.eye(3))
    return bool(orth < tol and abs(np.linalg.det(R) - 1.0) < tol)


def project_to_so3(R):
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


def rot_z(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_zyx(R):
    """Return ``(yaw, pitch, roll)`` for ``R = Rz(yaw) Ry(pitch) Rx(roll)``.

    Works on a single matrix or a stack of shape ``(N, 3, 3)``.
    """
    R = np.asarray(R, dtype=float)
    yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    pitch = -np.arcsin(np.clip(R[..., 2, 0], -1.0, 1.0))
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    return yaw, pitch, roll


def from_euler_zyx(yaw, pitch, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    Ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return Rz @ Ry @ Rx


def wrap_angle(a):
    """Wrap angles to the interval (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)
