import math
from fractions import Fraction as F

import numpy as np
import pytest
from scipy import stats

from permix.core import ValidationError, sample_environment
from permix.counterexample import (FOUND, PLANTED, _ball, build_counterexample, build_tree_T, find_or_plant_trap,
                                   plant_trap, ruin_monte_carlo, ruin_probability, search_success_bound, search_trap,
                                   slowdown_audit, survival_curve, trap_isomorphic, trapping_ratio)


def test_segment_rows():
    spec = build_counterexample(1, F(1, 20))
    Q1 = spec.P1.csr.toarray()[:3, :3]
    expected = [[0.95, 0.05, 0], [0.95, 0, 0.05], [0, 0.95, 0.05]]
    assert np.allclose(Q1, expected)
    Q2 = spec.P2.csr.toarray()[:2, :2]
    assert np.allclose(Q2, [[0.95, 0.05], [0.95, 0.05]])
    assert np.allclose(spec.P.sum(axis=1), 1)
    assert spec.n == 6 and spec.Delta == 3


def test_bias_outside_unit_interval():
    with pytest.raises(ValidationError):
        build_counterexample(4, 0)
    with pytest.raises(ValidationError):
        build_counterexample(4, F(3, 2))


def test_trapping_ratio():
    assert trapping_ratio(0.05, 5) == pytest.approx((0.1 / 0.95) ** 5)
    assert trapping_ratio(0.05, 5) == pytest.approx(1.2923554348998168e-05, rel=1e-12)
    assert build_tree_T(3, F(1, 3)).r >= 1
    assert not build_tree_T(3, F(2, 5)).trapping
    assert build_tree_T(3, F(1, 20)).trapping


def test_ruin_closed_form():
    assert ruin_probability(0.25, 2) == pytest.approx(0.4)
    rho = 0.75 / 0.5
    assert ruin_probability(0.25, 5) == pytest.approx((rho - 1) / (rho ** 5 - 1))
    assert ruin_probability(1 / 3, 4) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        ruin_probability(0.25, 2, start=3)


@pytest.mark.parametrize("delta,l", [(0.05, 2), (0.1, 3), (0.25, 2), (0.3, 4), (0.45, 3), (1 / 3, 5)])
def test_ruin_matches_monte_carlo(delta, l):
    p, se = ruin_monte_carlo(delta, l, 40_000, seed=l)
    assert abs(p - ruin_probability(delta, l)) <= 3 * se + 1e-12


def test_tree_T_shape():
    tree = build_tree_T(2, F(1, 20))
    assert np.bincount([d for d in tree.dist if d <= 2]).tolist() == [1, 2, 3]
    assert tree.ball_size() == 6
    rows = tree.matrix.sum(axis=1)
    inner = np.asarray(tree.dist) <= tree.depth
    assert np.allclose(rows[inner], 1)
    killed = tree.killed_matrix()
    assert np.all(killed.sum(axis=1) <= 1 + 1e-12)
    assert killed.sum(axis=1).min() < 1


def test_survival_curve_matches_matrix_powers():
    tree = build_tree_T(3, F(1, 10))
    killed = tree.killed_matrix()
    grid = [0, 1, 5, 40, 200]
    curve = survival_curve(killed, 0, grid)
    for t, s in zip(grid, curve):
        assert s == pytest.approx(np.linalg.matrix_power(killed, t)[0].sum(), abs=1e-10)


def test_planted_trap_is_isomorphic():
    spec = build_counterexample(64, F(1, 20))
    for seed in range(5):
        env, x = plant_trap(spec, 3, seed=seed)
        assert trap_isomorphic(spec, env, x, 3)
        assert len(_ball(spec, env, x, 3)) == build_tree_T(3, F(1, 20)).ball_size()


def test_planted_complement_is_uniform():
    spec = build_counterexample(6, F(1, 20))
    n = spec.n
    ranks = []
    probe = n - 1
    for seed in range(3000):
        env, x = plant_trap(spec, 1, seed=seed, center=0)
        ball = _ball(spec, env, x, 1)
        if probe in ball:
            continue
        sigma = np.asarray(env.sigma)
        free = np.setdiff1d(np.arange(n, 2 * n), sigma[sorted(ball)])
        ranks.append(int(np.searchsorted(free, sigma[probe])))
    counts = np.bincount(ranks, minlength=n - 3)
    assert counts.size == n - 3
    assert stats.chisquare(counts).pvalue > 1e-3


def test_plant_rejects_bad_center():
    spec = build_counterexample(8, F(1, 20))
    with pytest.raises(ValidationError):
        plant_trap(spec, 1, center=1)


def test_search_finds_depth_one_trap():
    spec = build_counterexample(4096, F(1, 20))
    env = sample_environment(spec.n, 1)
    x, tried = search_trap(spec, env, 1, 5000, seed=0)
    assert x is not None and tried <= 5000
    assert trap_isomorphic(spec, env, x, 1)
    env2, report = find_or_plant_trap(spec, env, 1, 5000)
    assert report.mode == FOUND and report.match
    assert search_success_bound(10 ** 6, 1) > 0.99


def test_infeasible_depth():
    spec = build_counterexample(2, F(1, 20))
    with pytest.raises(ValidationError):
        find_or_plant_trap(spec, None, 5, 10)


def test_plant_when_search_fails():
    spec = build_counterexample(64, F(1, 20))
    env = sample_environment(spec.n, 2)
    env2, report = find_or_plant_trap(spec, env, 4, 5)
    assert report.mode == PLANTED and report.match
    assert report.candidates_tried == 5


def test_slowdown_small_chain():
    spec = build_counterexample(64, F(1, 20))
    env, trap = find_or_plant_trap(spec, None, 3, 0, seed=1)
    report = slowdown_audit(spec, env, trap, [1, 10, 100, 1000, 10 ** 4], typical=3)
    assert report.dominated
    assert report.median_escape >= 0.1 / report.r
    assert np.all(np.diff(report.survival) <= 1e-12)
    q = trap.escape_quantiles
    assert q[0.1] <= q[0.5] <= q[0.9]
    assert report.escape_rate > 0
    rows = list(report.curve_rows())
    assert rows[0] == ("t", "in_ball", "geometric_bound") and len(rows) == 6


def test_unbiased_segments_do_not_trap():
    spec = build_counterexample(64, F(1, 2))
    env, trap = find_or_plant_trap(spec, None, 3, 0, seed=1)
    report = slowdown_audit(spec, env, trap, [1, 10, 100], typical=3)
    assert report.ratio <= 1
    assert math.isfinite(report.t_mix_typical)
