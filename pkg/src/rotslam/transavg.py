"""Translation averaging with fixed rotations.

Every triangle of covisible frames ``(i, j, p)`` yields a virtual point: the
rays from ``c_i`` towards ``c_p`` and from ``c_j`` towards ``c_p`` meet at
``c_p`` when the baseline ``c_j - c_i`` has unit length. Solving that
intersection once fixes per-camera scale factors, after which each triangle
gives linear, scale-free constraints on the stacked camera centers ``x``.
Positions are recovered by minimizing ``||A x||_1`` on the unit sphere with
ADMM; uniform shifts are excluded by working in the zero-mean subspace.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import sparse
from scipy.linalg import lu_factor, lu_solve

from .errors import InsufficientConstraints, NegativeDepth, ParallelDirections


@dataclass(frozen=True)
class ScalePair:
    s_i: float
    s_j: float

    def __post_init__(self):
        if not (self.s_i > 0 and self.s_j > 0):
            raise ValueError("scale parameters must be positive")


@dataclass
class PairConstraint:
    """Linear coefficients tying cameras ``i``, ``j`` to the virtual point.

    ``direction`` is the unit baseline i->j in world coordinates; ``point``
    is the frame whose center plays the virtual point (None for an anchor).
    """

    i: int
    j: int
    direction: np.ndarray
    A_i: np.ndarray
    A_j: np.ndarray
    point: int | None = None

    @classmethod
    def anchor(cls, p: int, q: int) -> "PairConstraint":
        # with A_p = 0 and A_q = I the pair expression reduces to 2 c_p
        return cls(p, q, np.array([1.0, 0.0, 0.0]), np.zeros((3, 3)), np.eye(3), None)


@dataclass
class AdmmParams:
    beta: float = 1.0
    primal_tol: float = 1e-8
    dual_tol: float = 1e-8
    max_iters: int = 2000
    polish: bool = True
    polish_patience: int = 20


@dataclass
class AdmmResult:
    x: np.ndarray
    e: np.ndarray
    lam: np.ndarray
    iterations: int
    converged: bool
    primal_residual: float
    dual_residual: float
    objective: float
    initial_objective: float
    x_norm_error: float = 0.0


@dataclass
class TransAvgResult:
    positions: dict
    admm: AdmmResult
    A: sparse.csr_matrix
    frames: list

    @property
    def converged(self) -> bool:
        return self.admm.converged


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def solve_pair_scales(ray_i, ray_j, baseline) -> ScalePair:
    """Scales placing the virtual point on both rays under a unit baseline.

    ``ray_i`` and ``ray_j`` are world directions from cameras i and j towards
    the virtual point and ``baseline`` the unit direction from i to j. With
    depths d = 1/s the point is c_i + d_i ray_i = c_j + d_j ray_j, so
    d_i ray_i - d_j ray_j = baseline, solved in least squares.
    """
    a, b, u = _unit(ray_i), _unit(ray_j), _unit(baseline)
    if np.linalg.norm(np.cross(a, b)) < 1e-10:
        raise ParallelDirections("virtual-point rays are parallel")
    d = np.linalg.lstsq(np.column_stack([a, -b]), u, rcond=None)[0]
    if d[0] <= 0 or d[1] <= 0:
        raise NegativeDepth(f"virtual point behind a camera (depths {d})")
    return ScalePair(1.0 / d[0], 1.0 / d[1])


def scale_constraint_residual(ray_i, ray_j, baseline, scales: ScalePair) -> np.ndarray:
    """Cross-product form: (a x b) x (-u + a / s_i - b / s_j)."""
    a, b, u = _unit(ray_i), _unit(ray_j), _unit(baseline)
    return np.cross(np.cross(a, b), -u + a / scales.s_i - b / scales.s_j)


def pair_constraint(i, j, p, directions: dict) -> PairConstraint:
    """Coefficient blocks for the pair (i, j) with frame p as virtual point.

    ``directions[(a, b)]`` is the unit world direction from camera a to b.
    """
    u = _world_dir(directions, i, j)
    a = _world_dir(directions, i, p)
    b = _world_dir(directions, j, p)
    sc = solve_pair_scales(a, b, u)
    A_i = np.outer(a, u) / sc.s_i
    A_j = -np.outer(b, u) / sc.s_j
    return PairConstraint(i, j, u, A_i, A_j, p)


def _world_dir(directions, a, b):
    if (a, b) in directions:
        return _unit(directions[(a, b)])
    return -_unit(directions[(b, a)])


def covisible_pairs(directions: dict) -> list:
    """Pair-of-pairs list from every triangle of the direction graph.

    Each triangle contributes three rows blocks, one per choice of virtual
    point, each matched with an anchor pair that reproduces that point.
    Triangles with parallel rays or negative depths are skipped.
    """
    adj = {}
    for a, b in directions:
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    out = []
    for i, j, k in combinations(sorted(adj), 3):
        if j in adj[i] and k in adj[i] and k in adj[j]:
            for a, b, p in ((i, j, k), (i, k, j), (j, k, i)):
                try:
                    pc = pair_constraint(a, b, p, directions)
                except (ParallelDirections, NegativeDepth):
                    continue
                out.append((pc, PairConstraint.anchor(p, a)))
    return out


def constraint_blocks(pp) -> list:
    """(column frame, 3x3 block) terms of one pair-of-pairs constraint."""
    (P, Q) = pp
    terms = {}

    def add(f, blk):
        terms[f] = terms.get(f, 0.0) + blk

    eye = np.eye(3)
    for pc, sgn in ((P, 1.0), (Q, -1.0)):
        M = pc.A_j - pc.A_i
        add(pc.i, sgn * (eye + M))
        add(pc.j, sgn * (eye - M))
    return [(f, b) for f, b in terms.items() if np.any(b != 0.0)]


def build_constraint_matrix(pairs_of_pairs, frames, check_rank: bool = True) -> sparse.csr_matrix:
    """Stack one 3-row block per pair-of-pairs over the columns of ``frames``."""
    col = {f: k for k, f in enumerate(frames)}
    m = len(frames)
    rows, cols, vals = [], [], []
    for r, pp in enumerate(pairs_of_pairs):
        for f, blk in constraint_blocks(pp):
            c = col[f]
            for a in range(3):
                for b in range(3):
                    if blk[a, b] != 0.0:
                        rows.append(3 * r + a)
                        cols.append(3 * c + b)
                        vals.append(blk[a, b])
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(3 * len(pairs_of_pairs), 3 * m))
    if check_rank:
        need = 3 * m - 4
        rank = np.linalg.matrix_rank(A.toarray()) if A.shape[0] else 0
        if rank < need:
            raise InsufficientConstraints(f"constraint rank {rank} < {need} for {m} frames")
    return A


def shift_basis(m: int) -> np.ndarray:
    """Orthonormal basis (3m x 3) of uniform translations 1_m (x) c."""
    return np.kron(np.ones((m, 1)), np.eye(3)) / np.sqrt(m)


def _complement(N: np.ndarray) -> np.ndarray:
    n = N.shape[0]
    U = np.linalg.svd(np.eye(n) - N @ N.T)[0]
    return U[:, :n - N.shape[1]]


def _soft(v, k):
    return np.sign(v) * np.maximum(np.abs(v) - k, 0.0)


class _SphereLstsq:
    """min ||B y - v||^2 subject to ||y|| = 1 via the secular equation."""

    def __init__(self, B):
        self.h, self.Q = np.linalg.eigh(B.T @ B)
        self.scale = max(1.0, abs(self.h[-1]))
        self.mu = -np.inf

    def __call__(self, g, prev):
        h, Q = self.h, self.Q
        gam = Q.T @ g
        hmin = h[0]
        low = (h - hmin) <= 1e-10 * self.scale
        if np.linalg.norm(gam[low]) <= 1e-13 * max(1.0, np.linalg.norm(gam)):
            z = np.zeros_like(gam)
            z[~low] = gam[~low] / (h[~low] - hmin)
            zz = z @ z
            if zz <= 1.0:
                # hard case: the minimizer set is a circle; stay near prev
                k = int(np.argmax(low))
                z[k] = np.sqrt(1.0 - zz)
                y1 = Q @ z
                z[k] = -z[k]
                y2 = Q @ z
                return y1 if np.linalg.norm(y1 - prev) <= np.linalg.norm(y2 - prev) else y2
        lo, hi = hmin - np.linalg.norm(gam), hmin
        mu = self.mu if lo < self.mu < hi else lo
        for _ in range(100):
            d = h - mu
            ny = np.sqrt(np.sum((gam / d) ** 2))
            f = 1.0 / ny - 1.0
            if f > 0:
                lo = mu
            else:
                hi = mu
            if abs(f) < 1e-14:
                break
            df = -np.sum(gam**2 / d**3) / ny**3
            step = mu - f / df
            mu = step if lo < step < hi else 0.5 * (lo + hi)
            if hi - lo < 1e-15 * self.scale:
                break
        self.mu = mu
        y = Q @ (gam / (h - mu))
        return y / np.linalg.norm(y)


def _crash_vertex(B, y, indep=1e-4):
    """Zero d-1 rows one at a time, always the row nearest to vanishing.

    ``y`` is projected onto the nullspace of the chosen rows after each pick,
    so the resulting vertex stays close to the starting point.
    """
    m, d = B.shape
    norms = np.linalg.norm(B, axis=1)
    proj = B.copy()
    avail = np.ones(m, dtype=bool)
    y = y.copy()
    sel = []
    for _ in range(d - 1):
        pn = np.linalg.norm(proj, axis=1)
        ok = avail & (pn > indep * norms)
        if not ok.any():
            return None
        score = np.full(m, np.inf)
        score[ok] = np.abs(B[ok] @ y) / pn[ok]
        i = int(np.argmin(score))
        q = proj[i] / pn[i]
        proj -= np.outer(proj @ q, q)
        y -= q * (q @ y)
        y /= np.linalg.norm(y)
        sel.append(i)
        avail[i] = False
    return sel, y


def _vertex_descent(B, y, indep=1e-4, max_pivots=None):
    """Stationary point of ||B y||_1 on the unit sphere by active-set pivoting.

    Starts from a vertex near ``y`` where d-1 rows vanish and
    repeatedly releases the zero row whose multiplier exceeds one, sliding
    along the great circle of the enlarged face to the first minimum; the
    objective is concave between breakpoints so minima sit where a new row
    hits zero. Returns (y, B y, multipliers) once every zero row has a
    multiplier in [-1, 1], or None.
    """
    m, d = B.shape
    norms = np.linalg.norm(B, axis=1)
    start = _crash_vertex(B, y, indep)
    if start is None:
        return None
    Z = np.zeros(m, dtype=bool)
    Z[start[0]] = True
    y = start[1]
    prev, flat = np.inf, 0
    for _ in range(max_pivots or 10 * d):
        zi = np.flatnonzero(Z)
        r = B @ y
        r[Z] = 0.0
        f = np.abs(r).sum()
        flat = flat + 1 if f > prev * (1.0 - 1e-13) else 0
        # stalling, or on a face where extra rows vanish and signs are unreliable
        if flat > 5 or np.any(np.abs(r[~Z]) <= 1e-11 * norms[~Z]):
            return None
        prev = min(prev, f)
        s = np.sign(r)
        M = np.column_stack([B[zi].T, -y])
        try:
            lu = lu_factor(M, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return None
        sol = lu_solve(lu, -(B.T @ s), check_finite=False)
        if not np.all(np.isfinite(sol)):
            return None
        lz = np.abs(sol[:-1])
        q = int(np.argmax(lz))
        if lz[q] <= 1.0 + 1e-10:
            lam = s
            lam[zi] = sol[:-1]
            return y, r, lam
        k = zi[q]
        unit = np.zeros(d)
        unit[q] = np.sign(sol[q])
        w = lu_solve(lu, unit, trans=1, check_finite=False)
        w /= np.linalg.norm(w)
        Z[k] = False
        a, b = r, B @ w
        ok = ~Z & (np.hypot(a, b) > indep * norms)
        cand = np.flatnonzero(ok)
        th = np.arctan2(-a[cand], b[cand]) % np.pi
        keep = (th > 1e-12) & (th < np.pi - 1e-9)
        cand, th = cand[keep], th[keep]
        o = np.argsort(th, kind="stable")
        cand, th = cand[o], th[o]
        an, bn = a[~Z], b[~Z]
        best, bj, f_prev = np.inf, -1, np.abs(an).sum()
        for c0 in range(0, len(th), 32):
            tt = th[c0:c0 + 32]
            f = np.abs(np.outer(an, np.cos(tt)) + np.outer(bn, np.sin(tt))).sum(axis=0)
            j = int(np.argmin(f))
            if f[j] < best:
                best, bj = f[j], c0 + j
            if np.any(np.diff(np.r_[f_prev, f]) > 0):
                break
            f_prev = f[-1]
        if bj < 0:
            return None
        y = np.cos(th[bj]) * y + np.sin(th[bj]) * w
        y /= np.linalg.norm(y)
        Z[cand[bj]] = True
    return None


def admm_solve(A, params: AdmmParams | None = None, exclude: np.ndarray | None = None,
               x0: np.ndarray | None = None) -> AdmmResult:
    """Minimize ||A x||_1 subject to ||x||_2 = 1 by ADMM.

    Splitting A x = e gives three steps per iteration: soft-thresholding of
    A x + lam/beta for e, the sphere-constrained least-squares x-update
    (solved exactly), and the multiplier ascent lam += beta (A x - e).
    ``exclude`` is an orthonormal basis of directions x must avoid (the
    uniform-shift gauge); iterates stay orthogonal to it. ``A`` is rescaled
    internally so that beta is relative to the typical residual.
    """
    params = params or AdmmParams()
    A = sparse.csr_matrix(A) if sparse.issparse(A) else np.asarray(A, dtype=float)
    Ad = A.toarray() if sparse.issparse(A) else A
    n = Ad.shape[1]
    P = np.eye(n) if exclude is None or exclude.shape[1] == 0 else _complement(exclude)
    B = Ad @ P
    rows = B.shape[0]
    if not np.any(B):
        y = np.zeros(P.shape[1])
        y[0] = 1.0
        x = P @ y
        return AdmmResult(x, np.zeros(rows), np.zeros(rows), 1, True, 0.0, 0.0, 0.0, 0.0,
                          abs(np.linalg.norm(x) - 1.0))
    if x0 is None:
        y = np.linalg.eigh(B.T @ B)[1][:, 0]
    else:
        y = P.T @ x0
        y /= np.linalg.norm(y)
    s = float(np.mean(np.abs(B @ y)))
    s = s if s > 1e-12 * np.abs(B).max() else 1.0
    Bn = B / s
    solver = _SphereLstsq(Bn)
    beta = params.beta
    lam = np.zeros(rows)
    obj0 = float(np.abs(B @ y).sum())
    best = (obj0, y.copy())
    next_polish = params.polish_patience
    polished = False
    norm_err = abs(np.linalg.norm(P @ y) - 1.0)
    pr = dx = np.inf
    it = 0
    e = np.zeros(rows)
    for it in range(1, params.max_iters + 1):
        Bx = Bn @ y
        e = _soft(Bx + lam / beta, 1.0 / beta)
        y_new = solver(Bn.T @ (e - lam / beta), y)
        Bx = Bn @ y_new
        lam = lam + beta * (Bx - e)
        dx = float(np.max(np.abs(P @ (y_new - y))))
        pr = float(np.max(np.abs(Bx - e))) * s
        y = y_new
        norm_err = max(norm_err, abs(np.linalg.norm(P @ y) - 1.0))
        obj = float(np.abs(Bx).sum()) * s
        if obj < best[0]:
            best = (obj, y.copy())
        if pr < params.primal_tol and dx < params.dual_tol:
            break
        if params.polish and not polished and it == next_polish:
            next_polish *= 2
            out = _vertex_descent(Bn, y)
            if out is not None and np.abs(out[1]).sum() * s <= obj + 1e-12 * max(obj, 1.0):
                # a certified stationary point is an exact fixed point of the
                # iteration once beta exceeds ||B y||_1 / lambda_min(B^T B)
                y, e, lam = out
                beta = max(beta, 1.5 * float(np.abs(e).sum()) / max(solver.h[0], 1e-300))
                polished = True
    converged = pr < params.primal_tol and dx < params.dual_tol
    if not converged and best[0] < float(np.abs(B @ y).sum()):
        y = best[1]
    x = P @ y
    return AdmmResult(x, e * s, lam, it, converged, pr, dx, float(np.abs(Ad @ x).sum()),
                      obj0, norm_err)


def _lad_vertex(A, b, lam, r, indep=1e-6):
    """Exact basic solution of min ||A x - b||_1 guessed from ADMM state.

    Rows whose multipliers sit inside (-1, 1) are taken as the zero set; the
    point is returned with certified multipliers, or None.
    """
    m, n = A.shape
    order = np.lexsort((np.abs(r), np.abs(lam)))
    sel = _independent_rows(A, order, n, indep)
    if len(sel) < n:
        return None
    Z = np.zeros(m, dtype=bool)
    Z[sel] = True
    try:
        x = np.linalg.solve(A[Z], b[Z])
        res = A @ x - b
        res[Z] = 0.0
        s = np.sign(res)
        lz = np.linalg.solve(A[Z].T, -(A.T @ s))
    except np.linalg.LinAlgError:
        return None
    if np.abs(lz).max() > 1.0 + 1e-10:
        return None
    s[Z] = lz
    return x, res, s


def _independent_rows(B, order, count, indep):
    """Greedy choice of ``count`` rows, in ``order``, that stay well independent."""
    basis, sel = [], []
    norms = np.linalg.norm(B, axis=1)
    for i in order:
        v = B[i].copy()
        for q in basis:
            v -= (q @ v) * q
        nv = np.linalg.norm(v)
        if nv > indep * norms[i]:
            basis.append(v / nv)
            sel.append(i)
            if len(sel) == count:
                break
    return sel


def l1_regression(A, b, params: AdmmParams | None = None, x0=None) -> AdmmResult:
    """min ||A x - b||_1 by the same ADMM splitting without the sphere.

    Used when the scale is already fixed; the x-update is an ordinary least
    squares solve. As in admm_solve, a certified basic solution guessed from
    the iterates is injected as an exact fixed point.
    """
    params = params or AdmmParams()
    A = A.toarray() if sparse.issparse(A) else np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    s = float(np.mean(np.abs(b))) if np.any(b) else 1.0
    An, bn = A / s, b / s
    pinv_solve = np.linalg.pinv(An)
    x = pinv_solve @ bn if x0 is None else np.asarray(x0, dtype=float).copy()
    obj0 = float(np.abs(A @ x - b).sum())
    lam = np.zeros(len(b))
    beta = params.beta
    pr = dx = np.inf
    it = 0
    e = An @ x - bn
    best = (obj0, x.copy())
    next_polish, polished = params.polish_patience, False
    full_rank = np.linalg.matrix_rank(A) == A.shape[1]
    for it in range(1, params.max_iters + 1):
        e = _soft(An @ x - bn + lam / beta, 1.0 / beta)
        x_new = pinv_solve @ (e + bn - lam / beta)
        r = An @ x_new - bn
        lam = lam + beta * (r - e)
        dx = float(np.max(np.abs(x_new - x)))
        pr = float(np.max(np.abs(r - e))) * s
        x = x_new
        obj = float(np.abs(r).sum()) * s
        if obj < best[0]:
            best = (obj, x.copy())
        if pr < params.primal_tol and dx < params.dual_tol:
            break
        if params.polish and full_rank and not polished and it == next_polish:
            next_polish *= 2
            out = _lad_vertex(An, bn, lam, r)
            if out is not None and np.abs(out[1]).sum() * s <= obj + 1e-12 * max(obj, 1.0):
                x, e, lam = out
                polished = True
    converged = pr < params.primal_tol and dx < params.dual_tol
    if not converged:
        x = best[1]
    return AdmmResult(x, e * s, lam, it, converged, pr, dx,
                      float(np.abs(A @ x - b).sum()), obj0)


def translation_averaging(frames, directions: dict, params: AdmmParams | None = None,
                          covis=None) -> TransAvgResult:
    """Camera centers (up to similarity) from unit world directions.

    ``directions[(i, j)]`` is the unit world direction from camera i to j.
    The returned positions are zero-mean with unit stacked norm; the sign is
    chosen so the baselines agree with the measured directions.
    """
    frames = list(frames)
    pp = covisible_pairs(directions) if covis is None else covis
    if not pp:
        raise InsufficientConstraints("no covisible triangles among the frames")
    A = build_constraint_matrix(pp, frames)
    res = admm_solve(A, params, exclude=shift_basis(len(frames)))
    X = res.x.reshape(-1, 3)
    idx = {f: k for k, f in enumerate(frames)}
    agree = sum(float(_world_dir(directions, a, b) @ (X[idx[b]] - X[idx[a]]))
                for a, b in directions if a in idx and b in idx)
    if agree < 0:
        X = -X
        res.x = -res.x
    return TransAvgResult({f: X[k].copy() for f, k in idx.items()}, res, A, frames)
