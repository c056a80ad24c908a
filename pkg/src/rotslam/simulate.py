"""Deterministic synthetic scenes used as ground-truth oracles.

Noise levels are mean perturbation angles in radians: a bearing or
direction is tilted by an isotropic tangent-plane Gaussian whose mean norm
equals the nominal value, and rotation noise is an isotropic tangent
vector scaled the same way.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correspond import CorrespondenceSet
from .errors import InvalidSpec
from .geometry import CameraIntrinsics, axis_angle, so3_exp

SHAPES = ("line", "circle", "square-loop", "random-walk")
# mean norm of a standard Gaussian in 2 and 3 dimensions
_MEAN_NORM_2D = np.sqrt(np.pi / 2.0)
_MEAN_NORM_3D = 2.0 * np.sqrt(2.0 / np.pi)


@dataclass
class SceneSpec:
    shape: str = "circle"
    n_frames: int = 120
    n_points: int = 600
    size: float = 10.0
    level: str = "backend"
    covis_span: int = 3
    rotation_noise: float = 0.0
    direction_noise: float = 0.0
    bearing_noise: float = 0.0
    outlier_fraction: float = 0.0
    loop_radius: float = 0.0
    frame_dt: float = 0.1
    seed: int = 0
    intrinsics: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(500.0, 500.0, 320.0, 240.0))
    image_w: float = 640.0
    image_h: float = 480.0

    def validate(self):
        if self.shape not in SHAPES:
            raise InvalidSpec(f"unknown trajectory shape {self.shape!r}")
        if self.level not in ("backend", "frontend"):
            raise InvalidSpec(f"unknown level {self.level!r}")
        if self.n_frames < 2:
            raise InvalidSpec("need at least two frames")
        if self.covis_span < 1:
            raise InvalidSpec("covis_span must be >= 1")
        if self.level == "frontend" and self.n_points < 6:
            raise InvalidSpec("front-end scenes need at least six points")
        for name in ("rotation_noise", "direction_noise", "bearing_noise", "loop_radius"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be non-negative")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise InvalidSpec("outlier_fraction must lie in [0, 1]")
        if self.size <= 0 or self.frame_dt <= 0:
            raise InvalidSpec("size and frame_dt must be positive")


@dataclass
class EdgeMeasurement:
    """Relative motion i -> j: rotation R_j R_i^T and the unit direction of
    c_j - c_i in camera-i coordinates (None when unobservable)."""

    i: int
    j: int
    rotation: np.ndarray
    direction: np.ndarray | None
    inliers: int | None = None


@dataclass
class SyntheticScene:
    spec: SceneSpec
    timestamps: np.ndarray
    rotations: np.ndarray  # (n, 3, 3) world-to-camera
    positions: np.ndarray  # (n, 3) camera centers
    points: np.ndarray
    edges: list
    correspondences: dict
    corrupted: list


def _path(spec: SceneSpec, rng):
    n, L = spec.n_frames, spec.size
    s = np.linspace(0.0, 1.0, n)
    if spec.shape == "line":
        P = np.column_stack([L * s, 0.02 * L * np.sin(6 * np.pi * s), np.zeros(n)])
    elif spec.shape == "circle":
        th = 2 * np.pi * np.arange(n) / n
        P = np.column_stack([L / 2 * np.cos(th), L / 2 * np.sin(th), 0.02 * L * np.sin(3 * th)])
    elif spec.shape == "square-loop":
        # perimeter parametrization; the last frame revisits the start
        u = 4.0 * s
        side = np.minimum(np.floor(u).astype(int), 3)
        f = u - side
        corners = L * np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]], dtype=float)
        xy = corners[side] + f[:, None] * (corners[side + 1] - corners[side])
        P = np.column_stack([xy, 0.01 * L * np.sin(2 * np.pi * s)])
    else:
        steps = rng.normal(size=(n, 3)) * np.array([1.0, 1.0, 0.2])
        kernel = np.ones(9) / 9.0
        steps = np.column_stack([np.convolve(steps[:, k], kernel, mode="same") for k in range(3)])
        steps *= L / (np.sum(np.linalg.norm(steps, axis=1)) + 1e-12)
        P = np.cumsum(steps, axis=0)
        P -= P[0]
    return P


def _orientations(spec: SceneSpec, P, rng):
    """Cameras look along a smoothly turning heading with a small wobble."""
    n = len(P)
    if spec.shape == "square-loop":
        yaw = 2 * np.pi * np.arange(n) / max(n - 1, 1)
    else:
        d = np.gradient(P[:, :2], axis=0)
        yaw = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
    Rs = np.empty((n, 3, 3))
    for k in range(n):
        z = np.array([np.cos(yaw[k]), np.sin(yaw[k]), 0.0])
        y = np.array([0.0, 0.0, -1.0])
        x = np.cross(y, z)
        C = np.column_stack([x, y, z])  # camera-to-world
        wob = axis_angle([1.0, 0.3, 0.2], 0.02 * np.sin(0.3 * k))
        Rs[k] = wob @ C.T
    return Rs


def perturb_direction(v, mean_angle, rng):
    """Tilt unit vector(s) by an isotropic tangent Gaussian of given mean angle."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if mean_angle == 0:
        return v.copy()
    sigma = mean_angle / _MEAN_NORM_2D
    g = rng.normal(size=v.shape) * sigma
    g -= np.sum(g * v, axis=1, keepdims=True) * v
    ang = np.linalg.norm(g, axis=1, keepdims=True)
    axis = np.divide(g, ang, out=np.zeros_like(g), where=ang > 0)
    return np.cos(ang) * v + np.sin(ang) * axis


def perturb_rotation(R, mean_angle, rng):
    if mean_angle == 0:
        return R.copy()
    return so3_exp(rng.normal(size=3) * mean_angle / _MEAN_NORM_3D) @ R


def _pairs(spec: SceneSpec, P):
    n = len(P)
    out = [(i, j) for i in range(n) for j in range(i + 1, min(n, i + spec.covis_span + 1))]
    if spec.loop_radius > 0:
        gap = 3 * spec.covis_span + 1
        for i in range(n):
            for j in range(i + gap, n):
                if np.linalg.norm(P[j] - P[i]) < spec.loop_radius:
                    out.append((i, j))
    return out


def _project(spec, R, c, X):
    K = spec.intrinsics
    Y = (X - c) @ R.T
    z = Y[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Y[:, 0] / z + K.cx
        v = K.fy * Y[:, 1] / z + K.cy
    ok = (z > 0.1) & (u >= 0) & (u < spec.image_w) & (v >= 0) & (v < spec.image_h)
    return np.column_stack([u, v]), ok


def simulate_scene(spec: SceneSpec) -> SyntheticScene:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    P = _path(spec, rng)
    Rs = _orientations(spec, P, rng)
    n = spec.n_frames
    ts = np.arange(n) * spec.frame_dt
    pairs = _pairs(spec, P)
    lo, hi = P.min(axis=0), P.max(axis=0)
    span = np.maximum(hi - lo, 0.2 * spec.size)
    pts = rng.uniform(lo - 0.6 * span, hi + 0.6 * span, size=(spec.n_points, 3))
    pts[:, 2] = rng.uniform(lo[2] - 0.3 * spec.size, hi[2] + 0.3 * spec.size, spec.n_points)
    edges, corrs, corrupted = [], {}, []
    if spec.level == "backend":
        n_bad = int(round(spec.outlier_fraction * len(pairs)))
        bad = set(rng.choice(len(pairs), size=n_bad, replace=False).tolist()) if n_bad else set()
        corrupted = sorted(bad)
        for k, (i, j) in enumerate(pairs):
            Rij = perturb_rotation(Rs[j] @ Rs[i].T, spec.rotation_noise, rng)
            if k in bad:
                Rij = axis_angle(rng.normal(size=3), np.pi / 2) @ Rij
            d = Rs[i] @ (P[j] - P[i])
            nd = np.linalg.norm(d)
            direction = None if nd < 1e-12 else perturb_direction(d / nd, spec.direction_noise, rng)[0]
            edges.append(EdgeMeasurement(i, j, Rij, direction, None))
    else:
        proj = [_project(spec, Rs[k], P[k], pts) for k in range(n)]
        conf_all = rng.uniform(0.3, 1.0, size=spec.n_points)
        for k, (i, j) in enumerate(pairs):
            vis = np.flatnonzero(proj[i][1] & proj[j][1])
            pi = proj[i][0][vis].copy()
            pj = proj[j][0][vis].copy()
            if spec.bearing_noise > 0:
                pi = _noisy_pixels(spec, pi, rng)
                pj = _noisy_pixels(spec, pj, rng)
            conf = conf_all[vis].copy()
            if spec.outlier_fraction > 0 and len(vis):
                n_bad = int(round(spec.outlier_fraction * len(vis)))
                bad = rng.choice(len(vis), size=n_bad, replace=False)
                pj[bad] = rng.uniform([0, 0], [spec.image_w, spec.image_h], size=(n_bad, 2))
                conf[bad] = rng.uniform(0.0, 0.3, size=n_bad)
                corrupted.extend((i, j, int(b)) for b in sorted(bad))
            pi = _clip_to_image(spec, pi)
            pj = _clip_to_image(spec, pj)
            corrs[(i, j)] = CorrespondenceSet(pi, pj, conf, i, j)
    return SyntheticScene(spec, ts, Rs, P, pts, edges, corrs, corrupted)


def _clip_to_image(spec, p):
    hi = np.array([np.nextafter(spec.image_w, 0), np.nextafter(spec.image_h, 0)])
    return np.clip(p, 0.0, hi)


def _noisy_pixels(spec, p, rng):
    """Pixel noise equivalent to the bearing noise at the image center."""
    K = spec.intrinsics
    sigma = spec.bearing_noise / _MEAN_NORM_2D
    return p + rng.normal(size=p.shape) * sigma * np.array([K.fx, K.fy])


def consistent(scene: SyntheticScene, tol: float = 1e-9) -> bool:
    """True when every emitted relative rotation matches ground truth."""
    Rs = scene.rotations
    for e in scene.edges:
        if np.linalg.norm(e.rotation - Rs[e.j] @ Rs[e.i].T) > tol:
            return False
    return True
