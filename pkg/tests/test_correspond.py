import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rotslam.correspond import (CorrespondenceSet, GridConfig, RegionScore, cell_of,
                                correspondence_score, grid_partition, region_scores,
                                select_correspondences, select_six_points, select_top_regions)
from rotslam.errors import EmptyInput, InsufficientRegions


def make_set(pi, pj, conf=None):
    pi = np.asarray(pi, dtype=float).reshape(-1, 2)
    conf = np.full(len(pi), 0.5) if conf is None else conf
    return CorrespondenceSet(pi, pj, conf)


def random_set(seed, n=200, w=640.0, h=480.0, jitter=40.0):
    rng = np.random.default_rng(seed)
    pi = rng.uniform([0, 0], [w, h], size=(n, 2))
    pj = np.clip(pi + rng.normal(scale=jitter, size=(n, 2)), 0, [w - 1e-9, h - 1e-9])
    return CorrespondenceSet(pi, pj, rng.uniform(0, 1, n))


def test_grid_config_validation():
    with pytest.raises(ValueError):
        GridConfig(2, 2)
    with pytest.raises(ValueError):
        GridConfig(3, 3, 0, 10)


def test_partition_corner_point():
    cfg = GridConfig(2, 3, 100, 100)
    part = grid_partition(make_set([[0, 0]], [[0, 0]]), cfg)
    assert part[(0, 0)] == [0]
    assert sum(len(v) for v in part.values()) == 1


def test_partition_empty_raises():
    with pytest.raises(EmptyInput):
        grid_partition(make_set(np.zeros((0, 2)), np.zeros((0, 2))), GridConfig())


def test_boundary_points_go_to_higher_cell():
    cfg = GridConfig(2, 4, 400, 200)
    # enumerate every interior boundary: x = 100, 200, 300 and y = 100
    pts = [[100, 50], [200, 50], [300, 50], [50, 100], [400, 200]]
    cells = [tuple(c) for c in cell_of(pts, cfg)]
    assert cells == [(0, 1), (0, 2), (0, 3), (1, 0), (1, 3)]


@given(st.integers(0, 10_000), st.integers(1, 9), st.integers(1, 9))
def test_partition_is_exact(seed, rows, cols):
    if rows * cols < 6:
        return
    cfg = GridConfig(rows, cols)
    corrs = random_set(seed, n=97)
    part = grid_partition(corrs, cfg)
    idx = sorted(k for v in part.values() for k in v)
    assert idx == list(range(len(corrs)))


def test_score_fig2_configuration():
    # two gridded views; cell (1, 1) of view i holds nine features and six of
    # their matches stay in cell (1, 1) of view j
    pi, pj = [], []
    for k in range(6):
        pi.append([110 + 10 * k, 120 + 5 * k])
        pj.append([115 + 10 * k, 150 - 4 * k])
    for k in range(3):
        pi.append([150 + 10 * k, 170])
        pj.append([20 + 10 * k, 150 + 10 * k])
    pi += [[20, 20], [60, 40], [150, 30]]
    pj += [[25, 22], [130, 40], [155, 35]]
    corrs = make_set(pi, pj)
    cfg = GridConfig(2, 3, 300, 200)
    cells = [tuple(c) for c in cell_of(pi, cfg)]
    assert cells[:9] == [(1, 1)] * 9
    assert correspondence_score((1, 1), corrs, cfg) == 6


def test_score_zero_when_all_matches_leave_cell():
    cfg = GridConfig(2, 3, 300, 200)
    corrs = make_set([[10, 10], [20, 30]], [[250, 150], [150, 150]])
    assert correspondence_score((0, 0), corrs, cfg) == 0


@given(st.integers(0, 10_000))
def test_score_identity_pair_equals_raw_count_and_bounds(seed):
    cfg = GridConfig(4, 4)
    c = random_set(seed, n=80)
    same = CorrespondenceSet(c.pts_i, c.pts_i.copy(), c.confidence)
    part = grid_partition(same, cfg)
    for cell, members in part.items():
        assert correspondence_score(cell, same, cfg) == len(members)
    part_i = grid_partition(c, cfg)
    cj = [tuple(x) for x in cell_of(c.pts_j, cfg)]
    for cell, members in part_i.items():
        score = correspondence_score(cell, c, cfg)
        assert score <= min(len(members), cj.count(cell))
    # region_scores is the vectorized form of correspondence_score
    assert [s.score for s in region_scores(c, cfg)] == \
        [correspondence_score(s.cell, c, cfg) for s in region_scores(c, cfg)]


def test_top_regions_exactly_six_and_ties():
    scores = [RegionScore((r, c), 0) for r in range(3) for c in range(3)]
    vals = {(0, 0): 5, (0, 2): 9, (1, 1): 9, (2, 0): 1, (2, 2): 3, (1, 0): 2}
    scores = [RegionScore(s.cell, vals.get(s.cell, 0)) for s in scores]
    assert select_top_regions(scores) == [(0, 2), (1, 1), (0, 0), (2, 2), (1, 0), (2, 0)]


def test_top_regions_insufficient():
    scores = [RegionScore((0, k), 1) for k in range(5)] + [RegionScore((1, 0), 0)]
    with pytest.raises(InsufficientRegions):
        select_top_regions(scores)


@given(st.lists(st.integers(0, 5), min_size=36, max_size=36), st.integers(1, 6))
def test_top_regions_match_sort_oracle(vals, k):
    scores = [RegionScore((n // 6, n % 6), v) for n, v in enumerate(vals)]
    nonzero = [(v, n // 6, n % 6) for n, v in enumerate(vals) if v >= 1]
    if len(nonzero) < k:
        with pytest.raises(InsufficientRegions):
            select_top_regions(scores, k)
        return
    # brute force: repeatedly take the max score, smallest cell among equals
    pool = list(nonzero)
    want = []
    for _ in range(k):
        best = max(pool, key=lambda t: (t[0], -t[1], -t[2]))
        pool.remove(best)
        want.append((best[1], best[2]))
    assert select_top_regions(scores, k) == want


def test_select_six_single_per_cell():
    cfg = GridConfig(2, 3, 300, 200)
    pts = [[50, 50], [150, 50], [250, 50], [50, 150], [150, 150], [250, 150]]
    corrs = make_set(pts, pts, np.linspace(0.1, 0.6, 6))
    cells = select_top_regions(region_scores(corrs, cfg))
    assert sorted(select_six_points(cells, corrs, cfg)) == list(range(6))


def test_select_six_confidence_tie_takes_lowest_index():
    cfg = GridConfig(2, 3, 300, 200)
    pts = [[10, 10], [20, 20], [30, 30]] + [[150, 50], [250, 50], [50, 150], [150, 150], [250, 150]]
    conf = [0.3, 0.9, 0.9, 0.5, 0.5, 0.5, 0.5, 0.5]
    corrs = make_set(pts, pts, np.array(conf))
    picks = select_six_points([(0, 0)], corrs, cfg)
    assert picks == [1]


@given(st.integers(0, 10_000))
def test_select_six_matches_per_cell_scan(seed):
    cfg = GridConfig(4, 4)
    corrs = random_set(seed, n=150, jitter=10.0)
    cells = select_top_regions(region_scores(corrs, cfg))
    picks = select_six_points(cells, corrs, cfg)
    ci = [tuple(c) for c in cell_of(corrs.pts_i, cfg)]
    cj = [tuple(c) for c in cell_of(corrs.pts_j, cfg)]
    assert len({ci[p] for p in picks}) == 6
    for cell, p in zip(cells, picks):
        best, best_k = -1.0, None
        for k in range(len(corrs)):
            if ci[k] == cell and cj[k] == cell and corrs.confidence[k] > best:
                best, best_k = corrs.confidence[k], k
        assert p == best_k
    assert select_six_points(cells, corrs, cfg) == picks


def test_fallback_fills_with_confident_unused():
    cfg = GridConfig(2, 3, 300, 200)
    # all matches in two cells: regions relax to 2, the rest come from confidence
    pts = [[10, 10], [20, 20], [30, 30], [40, 40], [160, 20], [170, 30], [180, 40], [190, 50]]
    conf = np.array([0.1, 0.8, 0.7, 0.2, 0.3, 0.95, 0.6, 0.4])
    corrs = make_set(pts, pts, conf)
    picks = select_correspondences(corrs, cfg)
    assert len(picks) == 6 and len(set(picks)) == 6
    assert picks == [1, 5, 2, 6, 7, 4]


def test_fallback_needs_six_matches():
    with pytest.raises(InsufficientRegions):
        select_correspondences(make_set(np.ones((5, 2)), np.ones((5, 2))), GridConfig())
