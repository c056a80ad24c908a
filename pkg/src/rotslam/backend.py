"""Keyframed back-end: windowed rotation and translation averaging plus loops.

Frames are processed in windows bounded by consecutive keyframes. Each
window re-solves a few already-published frames so the new translations can
be scaled and shifted onto the published trajectory; rotations are solved
directly in the world gauge by fixing the entry keyframe.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (DisconnectedGraph, InsufficientConstraints, NegativeDepth,
                     ParallelDirections, RotSlamError)
from .evaluate import Trajectory
from .geometry import so3_exp, so3_log
from .rotavg import RotAvgParams, RotEdge, RotGraph, rotation_averaging
from .transavg import AdmmParams, l1_regression, translation_averaging


@dataclass
class BackendConfig:
    keyframe_interval: int = 30
    window_overlap: int = 2
    loop_dist_frac: float = 0.01
    loop_inlier_thresh: int = 50
    loop_exclusion_intervals: int = 3
    loop_weight: float = 10.0
    refine_rotations: bool = False
    detect_loops: bool = True
    max_step_disagreement: float = 0.1
    rotavg: RotAvgParams = field(default_factory=RotAvgParams)
    admm: AdmmParams = field(default_factory=AdmmParams)


@dataclass
class Frame:
    id: int
    timestamp: float
    keyframe: bool = False


@dataclass
class LoopCandidate:
    s: int
    t: int
    distance: float
    inlier_count: int

    def __post_init__(self):
        if self.s <= self.t:
            raise ValueError("loop candidate needs s > t")


@dataclass
class WindowReport:
    start: int
    end: int
    n_frames: int
    n_edges: int
    rot_time: float = 0.0
    trans_time: float = 0.0
    total_time: float = 0.0
    replaced: list = field(default_factory=list)
    prune_rounds: int = 0
    certificate: object = None
    rot_converged: bool = True
    trans_converged: bool = True
    admm_iterations: int = 0
    failed: bool = False
    reason: str = ""


@dataclass
class ClosureResult:
    positions: dict
    converged: bool
    gap_before: float
    gap_after: float
    iterations: int


@dataclass
class LoopReport:
    candidate: LoopCandidate
    accepted: bool
    gap_before: float = float("nan")
    gap_after: float = float("nan")
    converged: bool = True
    reason: str = ""


@dataclass
class BackendResult:
    frames: list
    rotations: dict
    positions: dict
    windows: list
    loops: list
    low_confidence: set

    @property
    def converged(self) -> bool:
        return (all(w.rot_converged and w.trans_converged for w in self.windows)
                and all(lp.converged for lp in self.loops))

    def trajectory(self) -> Trajectory:
        ids = [f.id for f in self.frames]
        return Trajectory(np.array([f.timestamp for f in self.frames]),
                          np.array([self.positions[i] for i in ids]),
                          np.array([self.rotations[i] for i in ids]))


def mark_keyframes(frames, interval: int = 30) -> list:
    """Flag frames 0, interval, 2*interval, ... and the final frame."""
    if not frames:
        raise ValueError("empty frame stream")
    if interval < 1:
        raise ValueError("interval must be positive")
    out = []
    for k, f in enumerate(frames):
        out.append(Frame(f.id, f.timestamp, k % interval == 0 or k == len(frames) - 1))
    return out


def _window_edges(ids, measurements):
    s = set(ids)
    return [m for (i, j), m in sorted(measurements.items()) if i in s and j in s]


def _anchor_scale(X, ids, published, step_ref, max_ratio=3.0):
    """Scale and shift mapping solved positions onto published ones.

    The scale is fitted to the published anchors when they span a baseline.
    A fit that is not positive or disagrees with the previous mean step by
    more than ``max_ratio`` (a few nearly coincident anchors on a straight
    segment make it ill-conditioned) gives way to the step-length scale.
    Returns (s, T, used_anchors).
    """
    anchors = [f for f in ids if f in published]
    P = np.array([published[f][1] for f in anchors])
    Y = np.array([X[f] for f in anchors])
    steps = [np.linalg.norm(X[b] - X[a]) for a, b in zip(ids[:-1], ids[1:])]
    mean_step = float(np.mean(steps)) if steps else 0.0
    s_step = step_ref / mean_step if mean_step > 0 else 1.0
    s = None
    if len(anchors) >= 2:
        dp = P - P.mean(axis=0)
        dy = Y - Y.mean(axis=0)
        den = float(np.sum(dy * dy))
        if np.sqrt(np.sum(dp * dp)) > 1e-9 * max(1.0, step_ref) and den > 1e-24:
            s = float(np.sum(dy * dp)) / den
            if not (np.isfinite(s) and s > 0 and 1 / max_ratio <= s / s_step <= max_ratio):
                s = None
            used = s is not None
            s = s_step if s is None else s
        else:
            used, s = False, s_step
    else:
        used, s = False, s_step
    gauge = anchors[-1]
    T = published[gauge][1] - s * X[gauge]
    return s, T, used


def process_window(ids, measurements: dict, published: dict, cfg: BackendConfig,
                   step_ref: float = 1.0):
    """Solve one window; ``ids`` starts with re-solved published frames.

    Returns ({id: (R, c)} for every frame in ``ids``, WindowReport). The last
    published frame in ``ids`` is the gauge: its pose is kept exactly.
    """
    t0 = time.perf_counter()
    gauge = [f for f in ids if f in published][-1]
    edges = _window_edges(ids, measurements)
    rep = WindowReport(ids[0], ids[-1], len(ids), len(edges))
    graph = RotGraph(list(ids), [RotEdge(m.i, m.j, m.rotation.copy()) for m in edges], gauge,
                     {gauge: published[gauge][0].copy()})
    ra = rotation_averaging(graph, cfg.rotavg, prune=cfg.rotavg.prune_rounds > 0)
    rep.rot_time = time.perf_counter() - t0
    rep.replaced = [r for p in ra.reports for r in p.replaced_edges]
    rep.prune_rounds = len(ra.reports)
    rep.certificate = ra.certificate
    rep.rot_converged = ra.converged
    R = ra.rotations
    t1 = time.perf_counter()
    dirs = {}
    for m in edges:
        if m.direction is not None:
            dirs[(m.i, m.j)] = R[m.i].T @ m.direction
    try:
        if not dirs:
            # nothing observes a baseline: the window stays at the entry position
            c0 = published[gauge][1]
            poses = {f: (R[f], c0.copy()) for f in ids}
        else:
            ta = translation_averaging(ids, dirs, cfg.admm)
            rep.trans_converged = ta.converged
            rep.admm_iterations = ta.admm.iterations
            s, T, used = _anchor_scale(ta.positions, list(ids), published, step_ref)
            if not used and len([f for f in ids if f in published]) >= 2:
                rep.reason = "anchor scale rejected; step length used"
            poses = {f: (R[f], s * ta.positions[f] + T) for f in ids}
            bad = _step_disagreement(ids, ta.positions, dirs)
            if bad > cfg.max_step_disagreement:
                raise InsufficientConstraints(
                    f"solved steps disagree with measured directions (median {bad:.3g} rad)")
    except (RotSlamError, np.linalg.LinAlgError) as exc:
        # rotations are still good; only the positions fall back
        rep.failed = True
        rep.reason = f"{type(exc).__name__}: {exc}"
        poses = dead_reckon(ids, published, R, dirs, step_ref)
    poses[gauge] = (published[gauge][0].copy(), published[gauge][1].copy())
    rep.trans_time = time.perf_counter() - t1
    rep.total_time = time.perf_counter() - t0
    return poses, rep


def _step_disagreement(ids, X, world_dirs) -> float:
    """Median angle between solved consecutive steps and measured directions."""
    ang = []
    for a, b in zip(ids[:-1], ids[1:]):
        d = world_dirs.get((a, b))
        v = X[b] - X[a]
        nv = np.linalg.norm(v)
        if d is None:
            continue
        ang.append(np.pi if nv == 0 else float(np.arccos(np.clip(d @ v / nv, -1.0, 1.0))))
    return float(np.median(ang)) if ang else 0.0


def extrapolate(ids, published: dict, rotations: dict | None = None) -> dict:
    """Constant-velocity continuation from the last two published frames."""
    done = sorted(published)
    last = done[-1]
    R1, c1 = published[last]
    if len(done) >= 2:
        R0, c0 = published[done[-2]]
        v, w = c1 - c0, so3_log(R1 @ R0.T) if _safe_angle(R1 @ R0.T) else np.zeros(3)
    else:
        v, w = np.zeros(3), np.zeros(3)
    out = {}
    for f in ids:
        if f in published:
            continue
        k = f - last
        Rf = rotations[f] if rotations and f in rotations else so3_exp(k * w) @ R1
        out[f] = (Rf, c1 + k * v)
    return out


def dead_reckon(ids, published: dict, rotations: dict, world_dirs: dict, step: float) -> dict:
    """Chain consecutive measured directions at a fixed step length.

    Used when translation averaging cannot fix the window (for example on a
    straight segment, where pairwise directions carry no relative scale).
    Steps without a consecutive direction repeat the previous displacement.
    """
    out = {f: published[f] for f in ids if f in published}
    cv = extrapolate(ids, published, rotations)
    last = max(f for f in ids if f in published)
    c = published[last][1]
    done = sorted(published)
    v = c - published[done[-2]][1] if len(done) >= 2 else np.zeros(3)
    for a, b in zip(ids[:-1], ids[1:]):
        if b in published or a < last:
            continue
        d = world_dirs.get((a, b))
        if d is not None:
            v = step * d
        elif not np.any(v):
            c = cv[b][1]
            out[b] = (rotations[b], c)
            continue
        c = c + v
        out[b] = (rotations[b], c)
    return out


def _safe_angle(R):
    return np.trace(R) > -1.0 + 1e-6


def detect_loop(s: int, positions: dict, history, dist_thresh: float, inlier_thresh: int,
                inliers) -> LoopCandidate | None:
    """Nearest non-recent frame within ``dist_thresh`` that has enough inliers.

    ``inliers(t, s)`` returns the correspondence count between the frames,
    None for a verified edge without counts, or 0 when unmatched.
    """
    best = None
    for t in history:
        if t >= s:
            continue
        d = float(np.linalg.norm(positions[s] - positions[t]))
        if d >= dist_thresh:
            continue
        n = inliers(t, s)
        n = inlier_thresh if n is None else n
        if n < inlier_thresh:
            continue
        if best is None or d < best.distance:
            best = LoopCandidate(s, t, d, int(n))
    return best


def loop_vector(cand: LoopCandidate, positions: dict, rotations: dict, measurements: dict):
    """World displacement c_s - c_t implied by the loop measurement.

    The direction comes from the loop edge; its length is triangulated
    against a second edge from t into the recent chain when one exists and
    otherwise taken from the current estimate.
    """
    t, s = cand.t, cand.s
    m = measurements.get((t, s))
    current = positions[s] - positions[t]
    if m is None:
        return current
    if m.direction is None:
        return np.zeros(3)
    u = rotations[t].T @ m.direction
    for k in range(1, 4):
        m2 = measurements.get((t, s - k))
        if m2 is None or m2.direction is None or s - k <= t:
            continue
        u2 = rotations[t].T @ m2.direction
        M = np.column_stack([u, -u2])
        if np.linalg.norm(np.cross(u, u2)) < 1e-10:
            continue
        L = np.linalg.lstsq(M, positions[s] - positions[s - k], rcond=None)[0]
        if L[0] > 0 and L[1] > 0:
            return L[0] * u
    return float(np.linalg.norm(current)) * u


def close_loop(cand: LoopCandidate, keyframes, positions: dict, loop_disp,
               weight: float = 10.0, params: AdmmParams | None = None) -> ClosureResult:
    """Re-solve interval keyframe translations with the loop edge added.

    Consecutive keyframe displacements are held at their current values
    (rotations and scales are fixed), the loop edge asks for
    ``c_s - c_t = loop_disp``, and the weighted l1 misfit is minimized by
    ADMM with ``c_t`` pinned. Rotations are not touched.
    """
    kf = sorted(k for k in keyframes if cand.t <= k <= cand.s)
    if kf[0] != cand.t or kf[-1] != cand.s:
        raise ValueError("loop ends must be keyframes")
    free = kf[1:]
    col = {f: k for k, f in enumerate(free)}
    n = len(free)
    rows = []
    rhs = []
    ct = positions[cand.t]
    for a, b in zip(kf[:-1], kf[1:]):
        d = positions[b] - positions[a]
        for ax in range(3):
            r = np.zeros(3 * n)
            r[3 * col[b] + ax] = 1.0
            if a in col:
                r[3 * col[a] + ax] = -1.0
                rhs.append(d[ax])
            else:
                rhs.append(d[ax] + ct[ax])
            rows.append(r)
    for ax in range(3):
        r = np.zeros(3 * n)
        r[3 * col[cand.s] + ax] = weight
        rows.append(r)
        rhs.append(weight * (loop_disp[ax] + ct[ax]))
    A = np.array(rows)
    b = np.array(rhs)
    x0 = np.concatenate([positions[f] for f in free])
    gap_before = float(np.linalg.norm(positions[cand.s] - ct - loop_disp))
    res = l1_regression(A, b, params, x0=x0)
    X = res.x.reshape(-1, 3)
    new = {cand.t: ct.copy()}
    new.update({f: X[col[f]].copy() for f in free})
    gap_after = float(np.linalg.norm(new[cand.s] - ct - loop_disp))
    return ClosureResult(new, res.converged, gap_before, gap_after, res.iterations)


def propagate_to_frames(old_kf: dict, new_kf: dict, positions: dict, keyframes) -> dict:
    """Shift every frame by the displacement of its owning keyframe."""
    kfs = np.array(sorted(keyframes))
    out = {}
    for f, c in positions.items():
        k = np.searchsorted(kfs, f, side="right") - 1
        owner = int(kfs[k]) if k >= 0 else None
        if owner is not None and owner in new_kf and owner in old_kf:
            out[f] = c + (new_kf[owner] - old_kf[owner])
        else:
            out[f] = c.copy()
    return out


class Backend:
    """Runs the windowed pipeline over a frame stream and its measurements.

    ``measurements`` maps (i, j) with i < j to EdgeMeasurement objects.
    """

    def __init__(self, frames, measurements: dict, cfg: BackendConfig | None = None):
        self.cfg = cfg or BackendConfig()
        self.frames = mark_keyframes(list(frames), self.cfg.keyframe_interval)
        self.measurements = dict(measurements)

    def _inliers(self, t, s):
        m = self.measurements.get((t, s))
        return 0 if m is None else m.inliers

    def run(self) -> BackendResult:
        cfg = self.cfg
        ids = [f.id for f in self.frames]
        kpos = [k for k, f in enumerate(self.frames) if f.keyframe]
        published = {ids[0]: (np.eye(3), np.zeros(3))}
        keyframes = {ids[0]}
        windows, loops, low = [], [], set()
        step_ref = 1.0
        for a, b in zip(kpos[:-1], kpos[1:]):
            lo = max(0, a - cfg.window_overlap)
            wids = ids[lo:b + 1]
            try:
                poses, rep = process_window(wids, self.measurements, published, cfg, step_ref)
            except (RotSlamError, np.linalg.LinAlgError) as exc:
                rep = WindowReport(wids[0], wids[-1], len(wids),
                                   len(_window_edges(wids, self.measurements)),
                                   failed=True, reason=f"{type(exc).__name__}: {exc}")
                poses = extrapolate(wids, published)
            if rep.failed:
                low.update(f for f in wids if f not in published)
            for f in wids:
                if f not in published:
                    published[f] = poses[f]
            keyframes.add(ids[b])
            steps = [np.linalg.norm(published[q][1] - published[p][1])
                     for p, q in zip(wids[:-1], wids[1:])]
            if steps and np.mean(steps) > 0:
                step_ref = float(np.mean(steps))
            windows.append(rep)
            if cfg.detect_loops:
                lp = self.try_loop(ids[b], published, keyframes, ids)
                if lp is not None:
                    loops.append(lp)
        rotations = {f: published[f][0] for f in ids}
        positions = {f: published[f][1] for f in ids}
        return BackendResult(self.frames, rotations, positions, windows, loops, low)

    def try_loop(self, s, published: dict, keyframes: set, ids) -> LoopReport | None:
        """Detect a loop ending at keyframe ``s`` and close it in ``published``.

        ``published`` maps frame id to (R, c) and is updated in place; only the
        positions change unless rotation refinement is enabled.
        """
        cfg = self.cfg
        pos = {f: published[f][1] for f in published}
        P = np.array(list(pos.values()))
        extent = float(np.linalg.norm(P.max(axis=0) - P.min(axis=0)))
        if extent <= 0:
            return None
        horizon = s - cfg.loop_exclusion_intervals * cfg.keyframe_interval
        history = [f for f in ids if f in published and f <= horizon]
        cand = detect_loop(s, pos, history, cfg.loop_dist_frac * extent,
                           cfg.loop_inlier_thresh, self._inliers)
        if cand is None:
            return None
        keyframes.update((cand.t, cand.s))
        rots = {f: published[f][0] for f in published}
        disp = loop_vector(cand, pos, rots, self.measurements)
        try:
            res = close_loop(cand, keyframes, pos, disp, cfg.loop_weight, cfg.admm)
        except (RotSlamError, np.linalg.LinAlgError, ValueError) as exc:
            return LoopReport(cand, False, reason=f"{type(exc).__name__}: {exc}")
        old = {k: pos[k] for k in res.positions}
        inside = {f: c for f, c in pos.items() if cand.t <= f <= cand.s}
        moved = propagate_to_frames(old, res.positions, inside, keyframes)
        for f, c in moved.items():
            published[f] = (published[f][0], c)
        if cfg.refine_rotations:
            self._refine_rotations(cand, published)
        return LoopReport(cand, True, res.gap_before, res.gap_after, res.converged)

    def _refine_rotations(self, cand, published):
        ids = [f for f in sorted(published) if cand.t <= f <= cand.s]
        edges = _window_edges(ids, self.measurements)
        graph = RotGraph(ids, [RotEdge(m.i, m.j, m.rotation.copy()) for m in edges], cand.t,
                         {cand.t: published[cand.t][0].copy()})
        try:
            ra = rotation_averaging(graph, self.cfg.rotavg)
        except (DisconnectedGraph, ParallelDirections, NegativeDepth):
            return
        for f in ids:
            published[f] = (ra.rotations[f], published[f][1])
