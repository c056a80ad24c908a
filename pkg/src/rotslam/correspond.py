"""Grid scoring of feature matches and selection of six representative pairs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, InsufficientRegions


@dataclass(frozen=True)
class GridConfig:
    rows: int = 8
    cols: int = 8
    image_w: float = 640.0
    image_h: float = 480.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 6:
            raise ValueError("grid needs rows*cols >= 6")
        if not (self.image_w > 0 and self.image_h > 0):
            raise ValueError("image size must be positive")


@dataclass
class CorrespondenceSet:
    """Matches between two frames, stored column-wise.

    ``pts_i`` and ``pts_j`` are (N, 2) pixel arrays, ``confidence`` is (N,).
    """

    pts_i: np.ndarray
    pts_j: np.ndarray
    confidence: np.ndarray
    frame_i: int = 0
    frame_j: int = 1

    def __post_init__(self):
        self.pts_i = np.asarray(self.pts_i, dtype=float).reshape(-1, 2)
        self.pts_j = np.asarray(self.pts_j, dtype=float).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(-1)
        if not (len(self.pts_i) == len(self.pts_j) == len(self.confidence)):
            raise ValueError("correspondence arrays differ in length")

    def __len__(self):
        return len(self.confidence)

    def subset(self, idx) -> "CorrespondenceSet":
        idx = np.asarray(idx, dtype=int)
        return CorrespondenceSet(self.pts_i[idx], self.pts_j[idx],
                                 self.confidence[idx], self.frame_i, self.frame_j)


@dataclass(frozen=True)
class RegionScore:
    cell: tuple
    score: int


def cell_of(pts, cfg: GridConfig) -> np.ndarray:
    """(row, col) for each pixel; cells are half-open, the last one closed."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    col = np.floor(pts[:, 0] * cfg.cols / cfg.image_w).astype(int)
    row = np.floor(pts[:, 1] * cfg.rows / cfg.image_h).astype(int)
    return np.stack([np.clip(row, 0, cfg.rows - 1),
                     np.clip(col, 0, cfg.cols - 1)], axis=1)


def grid_partition(corrs: CorrespondenceSet, cfg: GridConfig) -> dict:
    """Map every cell to the indices of matches whose frame-i point lies in it."""
    if len(corrs) == 0:
        raise EmptyInput("no correspondences")
    cells = cell_of(corrs.pts_i, cfg)
    out = {(r, c): [] for r in range(cfg.rows) for c in range(cfg.cols)}
    for k, (r, c) in enumerate(cells):
        out[(int(r), int(c))].append(k)
    return out


def _matched_mask(corrs: CorrespondenceSet, cfg: GridConfig) -> tuple:
    ci = cell_of(corrs.pts_i, cfg)
    cj = cell_of(corrs.pts_j, cfg)
    return ci, np.all(ci == cj, axis=1)


def correspondence_score(cell, corrs: CorrespondenceSet, cfg: GridConfig) -> int:
    """Matches with both endpoints in ``cell`` (not the raw feature count)."""
    if len(corrs) == 0:
        return 0
    ci, same = _matched_mask(corrs, cfg)
    inside = (ci[:, 0] == cell[0]) & (ci[:, 1] == cell[1])
    return int(np.count_nonzero(inside & same))


def region_scores(corrs: CorrespondenceSet, cfg: GridConfig) -> list:
    counts = np.zeros((cfg.rows, cfg.cols), dtype=int)
    if len(corrs):
        ci, same = _matched_mask(corrs, cfg)
        np.add.at(counts, (ci[same, 0], ci[same, 1]), 1)
    return [RegionScore((r, c), int(counts[r, c]))
            for r in range(cfg.rows) for c in range(cfg.cols)]


def select_top_regions(scores, k: int = 6) -> list:
    nonzero = [s for s in scores if s.score >= 1]
    if len(nonzero) < k:
        raise InsufficientRegions(f"only {len(nonzero)} cells with matches, need {k}")
    ranked = sorted(nonzero, key=lambda s: (-s.score, s.cell))
    return [s.cell for s in ranked[:k]]


def select_six_points(cells, corrs: CorrespondenceSet, cfg: GridConfig) -> list:
    """Index of the most confident counted match in each cell."""
    ci, same = _matched_mask(corrs, cfg)
    chosen = []
    for cell in cells:
        idx = np.flatnonzero(same & (ci[:, 0] == cell[0]) & (ci[:, 1] == cell[1]))
        if len(idx) == 0:
            raise InsufficientRegions(f"cell {cell} has no matches")
        # argmax returns the first maximum, i.e. the lowest index on ties
        chosen.append(int(idx[np.argmax(corrs.confidence[idx])]))
    return chosen


def select_correspondences(corrs: CorrespondenceSet, cfg: GridConfig, k: int = 6) -> list:
    """Six match indices, relaxing to fewer regions when the grid is sparse.

    Missing picks are filled with the globally most confident unused matches.
    """
    if len(corrs) < k:
        raise InsufficientRegions(f"{len(corrs)} correspondences, need {k}")
    scores = region_scores(corrs, cfg)
    try:
        return select_six_points(select_top_regions(scores, k), corrs, cfg)
    except InsufficientRegions:
        pass
    avail = sum(1 for s in scores if s.score >= 1)
    picks = select_six_points(select_top_regions(scores, avail), corrs, cfg) if avail else []
    order = np.lexsort((np.arange(len(corrs)), -corrs.confidence))
    for idx in order:
        if len(picks) == k:
            break
        if int(idx) not in picks:
            picks.append(int(idx))
    return picks
