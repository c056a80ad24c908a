"""Rotation and pose primitives.

Rotations are plain 3x3 ``numpy`` arrays. ``R_i`` maps world coordinates to
camera ``i`` coordinates, so the relative rotation from frame ``i`` to frame
``j`` is ``R_j @ R_i.T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMatrix, NearPiSingularity, ZeroTranslation

ORTHO_TOL = 1e-9


def is_rotation(m, tol: float = ORTHO_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return (np.linalg.norm(m.T @ m - np.eye(3)) <= tol
            and abs(np.linalg.det(m) - 1.0) <= tol)


def repair_rotation(m, tol: float = ORTHO_TOL) -> np.ndarray:
    """Return ``m`` unchanged if it is a rotation, else its projection."""
    m = np.asarray(m, dtype=float)
    return m if is_rotation(m, tol) else project_to_rotation(m)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass
class Pose:
    """Absolute pose: world-to-camera rotation and camera center in world units."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not is_rotation(self.rotation):
            raise ValueError("pose rotation is not in SO(3)")


def skew(t) -> np.ndarray:
    x, y, z = np.asarray(t, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def essential_from_pose(R, t) -> np.ndarray:
    """E = [t]x R, so that f_j^T E f_i = 0 for x_j = R x_i + t."""
    t = np.asarray(t, dtype=float).reshape(3)
    if np.linalg.norm(t) < 1e-12:
        raise ZeroTranslation("essential matrix needs a nonzero translation")
    return skew(t) @ np.asarray(R, dtype=float)


def relative_rotation(R_i, R_j) -> np.ndarray:
    return np.asarray(R_j) @ np.asarray(R_i).T


def chordal_distance(A, B) -> float:
    return float(np.linalg.norm(np.asarray(A) - np.asarray(B)))


def angular_distance(A, B) -> float:
    """Geodesic angle of A B^T.

    The trace cosine is paired with the sine from the antisymmetric part;
    arccos of the trace alone loses about 1e-8 rad near zero.
    """
    return rotation_angle(np.asarray(A) @ np.asarray(B).T)


def project_to_rotation(M) -> np.ndarray:
    """Frobenius-nearest rotation via SVD with a determinant sign fix."""
    M = np.asarray(M, dtype=float)
    U, s, Vt = np.linalg.svd(M)
    if s[1] <= 1e-12 * max(s[0], 1e-300) or s[0] == 0.0:
        raise DegenerateMatrix(f"rank < 2 (singular values {s})")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return R


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(3)
    th = np.linalg.norm(w)
    K = skew(w)
    if th < 1e-8:
        # second-order Taylor keeps exp(log(R)) accurate near identity
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(th) / th * K
            + (1.0 - np.cos(th)) / th**2 * K @ K)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(v)
    c = (np.trace(R) - 1.0) / 2.0
    th = np.arctan2(s, c)
    if th >= np.pi - 1e-6:
        raise NearPiSingularity(f"rotation angle {th:.9f} too close to pi")
    if s < 1e-15:
        return v
    return v * (th / s)


def rotation_angle(R) -> float:
    """Accurate rotation angle of R (atan2 form, valid on all of [0, pi])."""
    R = np.asarray(R, dtype=float)
    v = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(np.linalg.norm(v), (np.trace(R) - 1.0) / 2.0))


def axis_angle(axis, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=float).reshape(3)
    return so3_exp(a / np.linalg.norm(a) * angle)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform random rotation from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def batch_rotation_angles(Rs) -> np.ndarray:
    """Angles of a stack of rotations (n, 3, 3)."""
    Rs = np.asarray(Rs, dtype=float)
    v = 0.5 * np.stack([Rs[:, 2, 1] - Rs[:, 1, 2], Rs[:, 0, 2] - Rs[:, 2, 0],
                        Rs[:, 1, 0] - Rs[:, 0, 1]], axis=1)
    c = (np.trace(Rs, axis1=1, axis2=2) - 1.0) / 2.0
    return np.arctan2(np.linalg.norm(v, axis=1), c)


def batch_log(Rs) -> np.ndarray:
    """Tangent vectors of a stack of rotations; no near-pi check."""
    Rs = np.asarray(Rs, dtype=float)
    v = 0.5 * np.stack([Rs[:, 2, 1] - Rs[:, 1, 2], Rs[:, 0, 2] - Rs[:, 2, 0],
                        Rs[:, 1, 0] - Rs[:, 0, 1]], axis=1)
    s = np.linalg.norm(v, axis=1)
    th = np.arctan2(s, (np.trace(Rs, axis1=1, axis2=2) - 1.0) / 2.0)
    scale = np.where(s > 1e-15, th / np.maximum(s, 1e-300), 1.0)
    out = v * scale[:, None]
    # near pi the antisymmetric part vanishes; recover the axis from R + I
    bad = th > np.pi - 1e-6
    for k in np.flatnonzero(bad):
        B = (Rs[k] + np.eye(3)) / 2.0
        col = np.argmax(np.diag(B))
        axis = B[:, col] / np.sqrt(max(B[col, col], 1e-300))
        if axis @ v[k] < 0:
            axis = -axis
        out[k] = axis * th[k]
    return out


def batch_exp(W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    th = np.linalg.norm(W, axis=1)
    K = np.zeros((len(W), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -W[:, 2], W[:, 1]
    K[:, 1, 0], K[:, 1, 2] = W[:, 2], -W[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -W[:, 1], W[:, 0]
    small = th < 1e-8
    ths = np.where(small, 1.0, th)
    a = np.where(small, 1.0, np.sin(ths) / ths)
    b = np.where(small, 0.5, (1.0 - np.cos(ths)) / ths**2)
    KK = K @ K
    return np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * KK
