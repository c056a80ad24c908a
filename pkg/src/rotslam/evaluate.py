"""Similarity-aligned trajectory error."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoOverlap


@dataclass
class Trajectory:
    """Time-indexed camera poses; ``rotations`` are world-to-camera."""

    timestamps: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if self.rotations is None:
            self.rotations = np.repeat(np.eye(3)[None], len(self.timestamps), axis=0)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(-1, 3, 3)
        if not (len(self.timestamps) == len(self.positions) == len(self.rotations)):
            raise ValueError("trajectory arrays differ in length")

    def __len__(self):
        return len(self.timestamps)


@dataclass
class Alignment:
    rmse: float
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    pairs: np.ndarray  # (k, 2) associated indices into (estimate, ground truth)
    residuals: np.ndarray

    def apply(self, positions) -> np.ndarray:
        return self.scale * np.asarray(positions) @ self.rotation.T + self.translation


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> np.ndarray:
    """Greedy one-to-one nearest-timestamp matching within ``max_dt``."""
    if len(est) == 0 or len(gt) == 0:
        return np.zeros((0, 2), dtype=int)
    order = np.argsort(gt.timestamps, kind="stable")
    tg = gt.timestamps[order]
    cands = []
    for a, t in enumerate(est.timestamps):
        k = np.searchsorted(tg, t)
        for b in (k - 1, k):
            if 0 <= b < len(tg) and abs(tg[b] - t) <= max_dt:
                cands.append((abs(tg[b] - t), a, int(order[b])))
    cands.sort()
    used_a, used_b, out = set(), set(), []
    for _, a, b in cands:
        if a not in used_a and b not in used_b:
            used_a.add(a)
            used_b.add(b)
            out.append((a, b))
    out.sort()
    return np.array(out, dtype=int).reshape(-1, 2)


def umeyama(src, dst, with_scale: bool = True):
    """Least-squares similarity with dst ~ s R src + t."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.mean(np.sum(xs**2, axis=1))
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s) if with_scale and var_s > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def evaluate_rmse(est: Trajectory, gt: Trajectory, max_dt: float = 0.02) -> Alignment:
    pairs = associate(est, gt, max_dt)
    if len(pairs) < 2:
        raise NoOverlap(f"only {len(pairs)} associated poses")
    src = est.positions[pairs[:, 0]]
    dst = gt.positions[pairs[:, 1]]
    s, R, t = umeyama(src, dst)
    res = np.linalg.norm(s * src @ R.T + t - dst, axis=1)
    return Alignment(float(np.sqrt(np.mean(res**2))), s, R, t, pairs, res)
