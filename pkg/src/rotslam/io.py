"""Text formats: correspondences, g2o pose graphs, TUM/KITTI trajectories.

Quaternions are ordered (qx, qy, qz, qw) and describe camera-to-world
rotations, i.e. the transpose of the internal world-to-camera matrices.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .correspond import CorrespondenceSet
from .errors import FormatError
from .evaluate import Trajectory
from .geometry import project_to_rotation
from .simulate import EdgeMeasurement

_IDENTITY_INFO = [1.0 if a == b else 0.0 for a in range(6) for b in range(a, 6)]


def quat_from_matrix(R) -> np.ndarray:
    q = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    # fix the sign so output is deterministic: qw >= 0, then first nonzero > 0
    if q[3] < 0 or (q[3] == 0 and q[np.flatnonzero(q)[0]] < 0):
        q = -q
    return q


def matrix_from_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)) or np.linalg.norm(q) < 1e-12:
        raise ValueError("invalid quaternion")
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()


def _fmt(x) -> str:
    v = float(x)
    return "0.000000000" if v == 0 else f"{v:.9f}"


def _records(path):
    """Yield (line number, tokens) for non-empty, non-comment lines."""
    with open(path, encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield no, line.split()


def _floats(path, no, toks):
    try:
        vals = [float(t) for t in toks]
    except ValueError as exc:
        raise FormatError(path, no, f"not a number ({exc})") from None
    if not np.all(np.isfinite(vals)):
        raise FormatError(path, no, "non-finite value")
    return vals


def _ints(path, no, toks):
    try:
        return [int(t) for t in toks]
    except ValueError:
        raise FormatError(path, no, f"expected integer ids, got {toks}") from None


def read_correspondences(path):
    """Parse a match file into ({(i, j): CorrespondenceSet}, (image_w, image_h))."""
    path = Path(path)
    size = None
    rows = {}
    for no, toks in _records(path):
        if size is None:
            if toks[0] != "CORRS" or len(toks) != 4 or toks[1] != "v1":
                raise FormatError(path, no, "expected header 'CORRS v1 <image_w> <image_h>'")
            w, h = _floats(path, no, toks[2:])
            if w <= 0 or h <= 0:
                raise FormatError(path, no, "image size must be positive")
            size = (w, h)
            continue
        if toks[0] != "MATCH" or len(toks) != 8:
            raise FormatError(path, no, "expected 'MATCH i j u_i v_i u_j v_j confidence'")
        i, j = _ints(path, no, toks[1:3])
        ui, vi, uj, vj, c = _floats(path, no, toks[3:])
        if not (0 <= ui <= size[0] and 0 <= uj <= size[0] and 0 <= vi <= size[1] and 0 <= vj <= size[1]):
            raise FormatError(path, no, "pixel outside the declared image bounds")
        if not 0.0 <= c <= 1.0:
            raise FormatError(path, no, "confidence outside [0, 1]")
        if i == j:
            raise FormatError(path, no, "match between a frame and itself")
        if i > j:
            i, j, ui, vi, uj, vj = j, i, uj, vj, ui, vi
        rows.setdefault((i, j), []).append((ui, vi, uj, vj, c))
    if size is None:
        raise FormatError(path, 1, "missing CORRS header")
    out = {}
    for (i, j), r in sorted(rows.items()):
        a = np.array(r)
        out[(i, j)] = CorrespondenceSet(a[:, 0:2], a[:, 2:4], a[:, 4], i, j)
    return out, size


def write_correspondences(path, corrs: dict, image_w: float, image_h: float):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"CORRS v1 {_fmt(image_w)} {_fmt(image_h)}\n")
        for (i, j) in sorted(corrs):
            c = corrs[(i, j)]
            for k in range(len(c)):
                vals = " ".join(_fmt(v) for v in (*c.pts_i[k], *c.pts_j[k], c.confidence[k]))
                fh.write(f"MATCH {i} {j} {vals}\n")


def read_g2o(path):
    """Parse a pose graph into (vertices, edges).

    ``vertices`` maps id -> (center, world-to-camera rotation); every edge is
    an EdgeMeasurement whose rotation is R_j R_i^T and whose direction is the
    normalized edge translation (camera-i frame), None if it is zero.
    """
    path = Path(path)
    vertices, edges = {}, []
    for no, toks in _records(path):
        tag = toks[0]
        if tag == "VERTEX_SE3:QUAT":
            if len(toks) != 9:
                raise FormatError(path, no, "VERTEX_SE3:QUAT needs id and 7 numbers")
            (vid,) = _ints(path, no, toks[1:2])
            v = _floats(path, no, toks[2:])
            try:
                Rcw = matrix_from_quat(v[3:7])
            except ValueError as exc:
                raise FormatError(path, no, str(exc)) from None
            vertices[vid] = (np.array(v[:3]), Rcw.T)
        elif tag == "EDGE_SE3:QUAT":
            if len(toks) != 3 + 7 + 21:
                raise FormatError(path, no, "EDGE_SE3:QUAT needs 2 ids, 7 numbers and 21 information entries")
            i, j = _ints(path, no, toks[1:3])
            v = _floats(path, no, toks[3:])
            if i == j:
                raise FormatError(path, no, "self-loop edge")
            try:
                Rrel = matrix_from_quat(v[3:7])  # R_i R_j^T
            except ValueError as exc:
                raise FormatError(path, no, str(exc)) from None
            t = np.array(v[:3])
            nt = np.linalg.norm(t)
            d = t / nt if nt > 1e-12 else None
            if i > j:
                # reverse: rotation transposes, direction moves into camera j
                d = None if d is None else -(Rrel.T @ d)
                i, j, Rrel = j, i, Rrel.T
            edges.append(EdgeMeasurement(i, j, Rrel.T, d, None))
        else:
            raise FormatError(path, no, f"unknown record type {tag!r}")
    return vertices, edges


def write_g2o(path, vertices: dict, edges):
    with open(path, "w", encoding="utf-8") as fh:
        for vid in sorted(vertices):
            c, R = vertices[vid]
            vals = " ".join(_fmt(x) for x in (*c, *quat_from_matrix(R.T)))
            fh.write(f"VERTEX_SE3:QUAT {vid} {vals}\n")
        info = " ".join(_fmt(x) for x in _IDENTITY_INFO)
        for e in edges:
            t = np.zeros(3) if e.direction is None else e.direction
            vals = " ".join(_fmt(x) for x in (*t, *quat_from_matrix(e.rotation.T)))
            fh.write(f"EDGE_SE3:QUAT {e.i} {e.j} {vals} {info}\n")


def read_trajectory(path, fmt: str = "tum", frame_dt: float = 0.1) -> Trajectory:
    path = Path(path)
    ts, pos, rots = [], [], []
    for no, toks in _records(path):
        if fmt == "tum":
            if len(toks) != 8:
                raise FormatError(path, no, "TUM lines need 8 numbers")
            v = _floats(path, no, toks)
            try:
                Rcw = matrix_from_quat(v[4:8])
            except ValueError as exc:
                raise FormatError(path, no, str(exc)) from None
            ts.append(v[0])
            pos.append(v[1:4])
            rots.append(Rcw.T)
        elif fmt == "kitti":
            if len(toks) != 12:
                raise FormatError(path, no, "KITTI lines need 12 numbers")
            M = np.array(_floats(path, no, toks)).reshape(3, 4)
            ts.append(len(ts) * frame_dt)
            pos.append(M[:, 3])
            rots.append(project_to_rotation(M[:, :3]).T)
        else:
            raise ValueError(f"unknown trajectory format {fmt!r}")
    if ts and np.any(np.diff(ts) <= 0):
        raise FormatError(path, 0, "timestamps must be strictly increasing")
    return Trajectory(np.array(ts), np.array(pos).reshape(-1, 3), np.array(rots).reshape(-1, 3, 3))


def write_trajectory(path, traj: Trajectory, fmt: str = "tum"):
    with open(path, "w", encoding="utf-8") as fh:
        for k in range(len(traj)):
            c = traj.positions[k]
            Rcw = traj.rotations[k].T
            if fmt == "tum":
                vals = " ".join(_fmt(x) for x in (*c, *quat_from_matrix(Rcw)))
                fh.write(f"{traj.timestamps[k]:.6f} {vals}\n")
            elif fmt == "kitti":
                M = np.column_stack([Rcw, c])
                fh.write(" ".join(_fmt(x) for x in M.ravel()) + "\n")
            else:
                raise ValueError(f"unknown trajectory format {fmt!r}")


def write_rotations(path, rotations: dict):
    """One line per vertex: ``id qx qy qz qw`` of the camera-to-world rotation."""
    with open(path, "w", encoding="utf-8") as fh:
        for vid in sorted(rotations):
            q = quat_from_matrix(rotations[vid].T)
            fh.write(f"{vid} " + " ".join(_fmt(x) for x in q) + "\n")


def read_rotations(path) -> dict:
    path = Path(path)
    out = {}
    for no, toks in _records(path):
        if len(toks) != 5:
            raise FormatError(path, no, "rotation lines need id and 4 quaternion entries")
        (vid,) = _ints(path, no, toks[:1])
        try:
            out[vid] = matrix_from_quat(_floats(path, no, toks[1:])).T
        except ValueError as exc:
            raise FormatError(path, no, str(exc)) from None
    return out
