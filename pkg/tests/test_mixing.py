from fractions import Fraction as F

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from permix.core import BudgetError, build_lifted_kernel, project_kernel, sample_environment
from permix.counterexample import build_counterexample
from permix.invariant import class_measures
from permix.mixing import (NotIrreducible, chain_kernel, cutoff_scan, l2_flatness, mixing_profile, mixing_times,
                           stationary_direct, stationary_distribution, tv_curves, tv_distance)
from permix.specs import demo_spec, tiny6


def test_tv_examples():
    assert tv_distance([1, 0], [1, 0]) == 0
    assert tv_distance([1, 0], [0, 1]) == 1
    assert tv_distance([0.5, 0.5], [0.75, 0.25]) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        tv_distance([1], [0.5, 0.5])


def _simplex(k):
    return arrays(float, k, elements=st.floats(0.01, 1)).map(lambda v: v / v.sum())


@given(_simplex(5), _simplex(5), _simplex(5))
@settings(max_examples=100, deadline=None)
def test_tv_is_a_metric(a, b, c):
    assert tv_distance(a, b) == pytest.approx(tv_distance(b, a))
    assert tv_distance(a, c) <= tv_distance(a, b) + tv_distance(b, c) + 1e-12
    assert 0 <= tv_distance(a, b) <= 1


def test_two_state_stationary():
    pi = stationary_distribution(np.array([[0.9, 0.1], [0.2, 0.8]]))
    assert pi == pytest.approx([2 / 3, 1 / 3], abs=1e-10)


def test_doubly_stochastic_uniform():
    K = np.array([[0.2, 0.5, 0.3], [0.3, 0.2, 0.5], [0.5, 0.3, 0.2]])
    assert stationary_distribution(K) == pytest.approx(np.full(3, 1 / 3), abs=1e-10)


def test_segment_stationary():
    spec = build_counterexample(1, F(1, 20))
    Q1 = spec.P1.csr[:3, :3].toarray()
    r = 0.05 / 0.95
    assert stationary_distribution(Q1) == pytest.approx(np.array([1, r, r * r]) / (1 + r + r * r), abs=1e-10)


def test_reducible_detected():
    with pytest.raises(NotIrreducible):
        stationary_distribution(np.eye(2))


def test_budget_without_fallback():
    # a nearly reducible chain keeps power iteration far from converged after a few steps
    K = np.array([[1 - 1e-6, 1e-6], [3e-6, 1 - 3e-6]])
    with pytest.raises(BudgetError):
        stationary_distribution(K, max_iter=10, fallback=False)
    assert stationary_distribution(K, max_iter=10) == pytest.approx([0.75, 0.25])


def test_stationary_residual(demo96):
    K = chain_kernel(demo96, sample_environment(96, 0))
    pi = stationary_distribution(K)
    assert np.abs(K.T @ pi - pi).sum() <= 1e-12 * 10
    assert pi == pytest.approx(stationary_direct(K), abs=1e-10)


def test_identity_never_mixes():
    prof = mixing_profile(sp.identity(3, format="csr"), 0, [0.25], t_max=20, pi=np.full(3, 1 / 3))
    assert prof.censored[0.25]


def test_rows_equal_pi_mix_in_one_step():
    pi = np.array([0.2, 0.3, 0.5])
    prof = mixing_profile(np.tile(pi, (3, 1)), 1, [0.25, 0.01])
    assert prof.tmix == {0.25: 1, 0.01: 1}


def test_tiny_profile_matches_dense_powers(tiny):
    env = sample_environment(6, 5)
    K = build_lifted_kernel(tiny, env).matrix
    pi = stationary_distribution(K)
    prof = mixing_profile(K, 0, [0.25], 200, pi)
    dense = K.toarray()
    row = np.eye(12)[0]
    t = 0
    while tv_distance(row, pi) >= 0.25:
        row = row @ dense
        t += 1
    assert prof.tmix[0.25] == t


def test_compiled_mixing_times_agree(demo96):
    K = chain_kernel(demo96, sample_environment(96, 1))
    pi = stationary_distribution(K)
    starts = [0, 17, 101]
    ref = [mixing_profile(K, x, [0.25], 500, pi).tmix[0.25] for x in starts]
    assert mixing_times(K, starts, pi, 0.25, 500).tolist() == ref


@pytest.mark.parametrize("seed", range(20))
def test_monotone_and_projection_inequality(demo96, seed):
    env = sample_environment(96, seed)
    lift = build_lifted_kernel(demo96, env)
    bar = project_kernel(lift, env).matrix
    pi = stationary_distribution(lift.matrix)
    bar_pi = pi[:96] + pi[96:][env.perm]
    starts = [0, 40, 95]
    up = tv_curves(lift.matrix, starts, pi, 300)
    down = tv_curves(bar, starts, bar_pi, 300)
    assert np.all(np.diff(up, axis=1) <= 1e-12)
    assert np.all(down <= up + 1e-12)


def test_projected_mixes_no_later(demo96):
    env = sample_environment(96, 3)
    lift = build_lifted_kernel(demo96, env)
    bar = project_kernel(lift, env).matrix
    for eps in (0.1, 0.25, 0.5):
        assert (mixing_profile(bar, 5, [eps], 500).tmix[eps] <= mixing_profile(lift.matrix, 5, [eps], 500).tmix[eps])


def test_cutoff_scan_small():
    res = cutoff_scan(demo_spec, [96, 192], 0.25, seeds_per_n=2, starts_per_seed=3, t_max=2000)
    assert len(res.records) == 12
    assert all(r.t_comp <= r.t_eps for r in res.records)
    assert res.h_hat > 0
    # eps = 1/2 lies between the two thresholds
    half = cutoff_scan(demo_spec, [96], 0.5, 1, 3, 2000)
    for a, b in zip(res.records[:3], half.records):
        assert a.t_comp <= b.t_eps <= a.t_eps


def test_cutoff_scan_reproducible():
    a = cutoff_scan(demo_spec, [96], 0.25, 2, 2, 2000, seed=4)
    b = cutoff_scan(demo_spec, [96], 0.25, 2, 2, 2000, seed=4)
    assert a.records == b.records


def test_l2_flatness_examples():
    n = 100
    mass_small, l2, mass_large = l2_flatness(np.full(n, 1 / n), 1, n)
    assert mass_large == 0 and l2 == pytest.approx(1 / n)
    assert l2_flatness(np.eye(n)[0], 1, n)[2] == 1


def test_l2_flatness_demo():
    n = 4096
    pi = stationary_distribution(chain_kernel(demo_spec(n), sample_environment(n, 0)))
    _, l2, _ = l2_flatness(pi, 3, 2 * n)
    assert l2 * 2 * n / np.log(2 * n) ** 3 <= 1


def test_class_measure_matches_stationary(tiny):
    assert class_measures(tiny.P).recurrent == [True] * 5
