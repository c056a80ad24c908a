"""Relative rotation and translation direction from six bearing pairs.

Convention: a point ``x_i`` in camera ``i`` maps to ``x_j = R x_i + t`` and the
essential matrix ``E = [t]x R`` satisfies ``f_j^T E f_i = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .correspond import CorrespondenceSet, GridConfig, select_correspondences
from .errors import CheiralityAmbiguity, DegenerateConfiguration, NoValidHypothesis
from .geometry import CameraIntrinsics, project_to_rotation, skew, so3_exp

_UNRELIABLE_DIR = np.array([0.0, 0.0, 1.0])


@dataclass
class RelativeMotion:
    rotation: np.ndarray
    direction: np.ndarray  # unit vector from camera i to camera j, camera-i frame
    residual: float
    reliable: bool = True


def bearings_from_pixels(points, K: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    f = np.column_stack([(p[:, 0] - K.cx) / K.fx, (p[:, 1] - K.cy) / K.fy,
                         np.ones(len(p))])
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def _design(f_i, f_j):
    # row k dotted with vec(E) (row-major) gives f_j^T E f_i
    return np.einsum("ka,kb->kab", f_j, f_i).reshape(len(f_i), 9)


_MONO = [(0, 0, 0), (1, 1, 1), (2, 2, 2), (0, 0, 1), (0, 0, 2),
         (0, 1, 1), (1, 1, 2), (0, 2, 2), (1, 2, 2), (0, 1, 2)]
_SAMPLES = np.random.default_rng(12345).normal(size=(10, 3))
_SAMPLE_INV = np.linalg.inv(np.array([[s[a] * s[b] * s[c] for a, b, c in _MONO]
                                      for s in _SAMPLES]))
_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def _cubic_system(basis):
    """Monomial coefficients of det(E) and 2 E E^T E - tr(E E^T) E.

    Each constraint is a homogeneous cubic in the nullspace coordinates, so
    ten generic samples determine its coefficients exactly.
    """
    vals = np.zeros((10, 10))
    for k, (x, y, z) in enumerate(_SAMPLES):
        E = x * basis[0] + y * basis[1] + z * basis[2]
        vals[k, 0] = np.linalg.det(E)
        vals[k, 1:] = (2.0 * E @ E.T @ E - np.trace(E @ E.T) * E).ravel()
    return (_SAMPLE_INV @ vals).T


def linear_essential_6pt(f_i, f_j) -> np.ndarray:
    """Closed-form six-point estimate from the 3-dim epipolar nullspace."""
    A = _design(f_i, f_j)
    _, s, Vt = np.linalg.svd(A)
    if s[5] <= 1e-10 * s[0]:
        raise DegenerateConfiguration("epipolar design matrix has rank < 6")
    basis = [Vt[k].reshape(3, 3) for k in (6, 7, 8)]
    m = np.linalg.svd(_cubic_system(basis))[2][-1]
    lead = int(np.argmax(np.abs(m[:3])))
    if m[lead] == 0.0:
        raise DegenerateConfiguration("no admissible essential matrix in the nullspace")
    # divide the x^2 y, x^2 z style monomials by the leading pure cube
    if lead == 0:
        coords = np.array([1.0, m[3] / m[0], m[4] / m[0]])
    elif lead == 1:
        coords = np.array([m[5] / m[1], 1.0, m[6] / m[1]])
    else:
        coords = np.array([m[7] / m[2], m[8] / m[2], 1.0])
    E = sum(c * B for c, B in zip(coords, basis))
    U, _, Vt2 = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt2


def _best_direction(R, f_i, f_j):
    n = _cross(f_i @ R.T, f_j)
    w, V = np.linalg.eigh(n.T @ n)
    return w[0], V[:, 0]


def _cross3(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def _tangent_basis(t):
    a = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = _cross3(t, a)
    b1 /= np.linalg.norm(b1)
    return np.column_stack([b1, _cross3(t, b1)])


def refine_epipolar(R, t, f_i, f_j, max_iters: int = 20):
    """Gauss-Newton on sum_k (t . ((R f_i) x f_j))^2 over rotations and unit t."""
    a = f_i @ R.T
    n = _cross(a, f_j)
    cost = float(np.sum((n @ t) ** 2))
    for _ in range(max_iters):
        r = n @ t
        B = _tangent_basis(t)
        # rows of f_j @ skew(t) are f_j x t
        J = np.hstack([_cross(a, f_j @ skew(t)), n @ B])
        H = J.T @ J
        try:
            d = -np.linalg.solve(H + 1e-14 * np.trace(H) * np.eye(5), J.T @ r)
        except np.linalg.LinAlgError:
            break
        R_new = so3_exp(d[:3]) @ R
        t_new = t + B @ d[3:]
        t_new /= np.linalg.norm(t_new)
        a_new = f_i @ R_new.T
        n_new = _cross(a_new, f_j)
        new_cost = float(np.sum((n_new @ t_new) ** 2))
        if new_cost > cost:
            break
        done = cost - new_cost <= 1e-12 * cost or np.max(np.abs(d)) < 1e-14
        R, t, a, n, cost = R_new, t_new, a_new, n_new, new_cost
        if done:
            break
    return R, t, cost


def estimate_essential_6pt(f_i, f_j, seeds=()) -> np.ndarray:
    """Least-squares essential matrix from exactly six bearing pairs.

    The closed-form linear estimate, the identity and any rotation ``seeds`` start a
    Gauss-Newton refinement of the algebraic epipolar error on the essential
    manifold; the lowest-cost result is returned with singular values (1, 1, 0).
    """
    f_i = np.asarray(f_i, dtype=float)
    f_j = np.asarray(f_j, dtype=float)
    if len(f_i) != 6 or len(f_j) != 6:
        raise ValueError("exactly six bearing pairs are required")
    E0 = linear_essential_6pt(f_i, f_j)
    U, _, Vt = np.linalg.svd(E0)
    starts = []
    for Wm in (_W, _W.T):
        R = U @ Wm @ Vt
        starts.append((R * np.sign(np.linalg.det(R)), U[:, 2]))
    # consecutive frames rotate little, so the identity is a useful extra start
    starts += [(R, _best_direction(R, f_i, f_j)[1]) for R in (np.eye(3), *seeds)]
    best = min((refine_epipolar(R, t, f_i, f_j) for R, t in starts), key=lambda x: x[2])
    return skew(best[1]) @ best[0]


def epipolar_residuals(E, f_i, f_j) -> np.ndarray:
    return np.abs(np.einsum("ka,ab,kb->k", f_j, E, f_i))


def _cross(a, b):
    # np.cross carries heavy axis bookkeeping; this is the hot path
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


_TRIPLES = {}


def _triples(n):
    if n not in _TRIPLES:
        _TRIPLES[n] = np.array(list(combinations(range(n), 3)), dtype=int).reshape(-1, 3)
    return _TRIPLES[n]


def _depths(R, t, f_i, f_j):
    a = f_i @ R.T
    out = np.empty((len(f_i), 2))
    for k in range(len(f_i)):
        M = np.column_stack([a[k], -f_j[k]])
        out[k] = np.linalg.lstsq(M, -t, rcond=None)[0]
    return out


def decompose_essential(E, f_i, f_j) -> RelativeMotion:
    """Pick the (R, t) candidate with the most points in front of both cameras."""
    E = np.asarray(E, dtype=float)
    f_i = np.asarray(f_i, dtype=float)
    f_j = np.asarray(f_j, dtype=float)
    U, _, Vt = np.linalg.svd(E)
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    cands = []
    for Wm in (W, W.T):
        R = U @ Wm @ Vt
        if np.linalg.det(R) < 0:
            R = -R
        R = project_to_rotation(R)
        for sgn in (1.0, -1.0):
            t = sgn * U[:, 2]
            d = _depths(R, t, f_i, f_j)
            cands.append((int(np.count_nonzero((d[:, 0] > 0) & (d[:, 1] > 0))), R, t))
    cands.sort(key=lambda c: -c[0])
    if cands[0][0] == cands[1][0]:
        raise CheiralityAmbiguity(f"two decompositions with {cands[0][0]} points in front")
    _, R, t = cands[0]
    Eu = skew(t) @ R
    direction = -R.T @ t
    direction /= np.linalg.norm(direction)
    return RelativeMotion(R, direction, float(np.mean(epipolar_residuals(Eu, f_i, f_j))))


def coplanarity_normals(f_i, f_j, R) -> np.ndarray:
    return _cross(np.asarray(f_i) @ np.asarray(R).T, f_j)


def independence_measure(f_i, f_j, R) -> float:
    """Largest triple product of epipolar-plane normals under rotation ``R``.

    All normals (R f_i) x f_j are orthogonal to the translation when ``R`` is
    right, so they are coplanar and every triple product vanishes; for a pure
    rotation they vanish individually. Two pairs are always coplanar.
    """
    n = coplanarity_normals(f_i, f_j, R)
    if len(n) < 3:
        return 0.0
    return float(np.max(np.abs(np.linalg.det(n[_triples(len(n))]))))


def independence_check(f_i, f_j, R, tol: float) -> bool:
    if len(f_i) < 2:
        raise ValueError("at least two bearing pairs are required")
    return independence_measure(f_i, f_j, R) < tol


def two_pair_rotation(f_i, f_j) -> np.ndarray:
    """Rotation-only fit R f_i ~ f_j (Kabsch) on two or more pairs."""
    a = np.asarray(f_i, dtype=float)
    b = np.asarray(f_j, dtype=float)
    H = b.T @ a
    if len(a) == 2:
        # the cross products add a third direction so two pairs fix R
        H = H + np.outer(_cross(b[0], b[1]), _cross(a[0], a[1]))
    return project_to_rotation(H)


def motion_from_bearings(f_i, f_j, tol: float = 1e-6,
                         explain_ratio: float = 1e-8) -> RelativeMotion:
    """Gated hypothesis search over six bearing pairs.

    Each two-pair subset gives a rotation-only hypothesis, kept when it passes
    ``independence_check`` on all pairs (the translation is too small to
    disturb the rotation). The six-point epipolar least-squares solution is
    the competing hypothesis. A kept rotation-only fit, refit on every pair,
    wins unless the epipolar model reduces the squared residual by more than
    ``explain_ratio``, which happens only when the translation is observable
    well above the noise.
    """
    f_i = np.asarray(f_i, dtype=float)
    f_j = np.asarray(f_j, dtype=float)
    hyps = []
    kept = []
    for a, b in combinations(range(len(f_i)), 2):
        R = two_pair_rotation(f_i[[a, b]], f_j[[a, b]])
        hyps.append((_best_direction(R, f_i, f_j)[0], R))
        if independence_check(f_i, f_j, R, tol):
            kept.append(R)
    rot = None
    if kept:
        kept.append(two_pair_rotation(f_i, f_j))
        rot = min((RelativeMotion(R, _UNRELIABLE_DIR.copy(), _rotation_residual(R, f_i, f_j),
                                  reliable=False) for R in kept), key=lambda c: c.residual)
        if rot.residual <= 1e-10:
            return rot
    hyps.sort(key=lambda h: h[0])
    try:
        ess = essential_motion(f_i, f_j, seeds=[R for _, R in hyps[:2]])
        if not independence_check(f_i, f_j, ess.rotation, tol):
            ess = None
    except (DegenerateConfiguration, CheiralityAmbiguity):
        ess = None
    if rot is not None:
        if ess is None:
            return rot
        rot_cost = np.sum(coplanarity_normals(f_i, f_j, rot.rotation) ** 2)
        t_j = ess.rotation @ ess.direction
        ess_cost = np.sum((coplanarity_normals(f_i, f_j, ess.rotation) @ t_j) ** 2)
        return ess if ess_cost <= explain_ratio * rot_cost else rot
    if ess is None:
        raise NoValidHypothesis("no hypothesis passed the independence gate")
    return ess


def _rotation_residual(R, f_i, f_j):
    return float(np.mean(np.linalg.norm(coplanarity_normals(f_i, f_j, R), axis=1)))


def essential_motion(f_i, f_j, seeds=()) -> RelativeMotion:
    """Ungated six-point solve plus decomposition."""
    return decompose_essential(estimate_essential_6pt(f_i, f_j, seeds), f_i, f_j)


def estimate_relative_rotation(corrs: CorrespondenceSet, K: CameraIntrinsics,
                               cfg: GridConfig, tol: float = 1e-6) -> RelativeMotion:
    idx = select_correspondences(corrs, cfg)
    f_i = bearings_from_pixels(corrs.pts_i[idx], K)
    f_j = bearings_from_pixels(corrs.pts_j[idx], K)
    return motion_from_bearings(f_i, f_j, tol)


def relative_motion(corrs: CorrespondenceSet, K: CameraIntrinsics, cfg: GridConfig,
                    tol: float = 1e-6, explain_ratio: float = 1e-8) -> RelativeMotion:
    """estimate_relative_rotation with the ungated essential fallback."""
    idx = select_correspondences(corrs, cfg)
    f_i = bearings_from_pixels(corrs.pts_i[idx], K)
    f_j = bearings_from_pixels(corrs.pts_j[idx], K)
    return motion_with_fallback(f_i, f_j, tol, explain_ratio)


def motion_with_fallback(f_i, f_j, tol: float = 1e-6, explain_ratio: float = 1e-8) -> RelativeMotion:
    try:
        return motion_from_bearings(f_i, f_j, tol, explain_ratio)
    except NoValidHypothesis:
        return essential_motion(f_i, f_j, seeds=[two_pair_rotation(f_i, f_j)])
