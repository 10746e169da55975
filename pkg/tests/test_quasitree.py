from fractions import Fraction as F

import numpy as np
import pytest

from permix.core import MixingTable, MixtureSpec
from permix.quasitree import (LazyQuasiTree, RegenerationRecord, RegenerationRun, WalkerState, _rng_state,
                              coupled_generation, estimate_drift_entropy, estimate_escape_probability,
                              exponential_fit, qt_step, random_tree, records_table, renewal_statistics,
                              run_regenerations, stretched_exponential_fit, wilson_interval)
from permix.specs import demo_spec


@pytest.fixture(scope="module")
def demo1024():
    return demo_spec(1024)


def test_tree_redraw_identical(demo1024):
    a, b = random_tree(demo1024, 3), random_tree(demo1024, 3)
    ka, kb = a.materialize_depth(3), b.materialize_depth(3)
    assert [a.vertex_type(k, 0) for k in ka] == [b.vertex_type(k, 0) for k in kb]
    assert a.label(ka[-1], 0) == b.label(kb[-1], 0)


def test_memoized_partner(demo1024):
    tree = random_tree(demo1024, 0)
    assert tree.partner(0, 2) == tree.partner(0, 2)
    c = tree.child(0, 1)
    assert tree.partner(c, 0) == (0, 1)


def test_rollback_redraws_same(demo1024):
    tree = random_tree(demo1024, 5)
    mark = tree.checkpoint()
    first = [tree.vertex_type(tree.child(0, j), 0) for j in range(1, 4)]
    tree.rollback(mark)
    assert [tree.vertex_type(tree.child(0, j), 0) for j in range(1, 4)] == first


def test_child_types_uniform_opposite_side(demo1024):
    n = demo1024.n
    draws = []
    for s in range(3000):
        tree = LazyQuasiTree(demo1024, 0, s)
        draws.append(tree.vertex_type(tree.child(0, 1), 0))
    draws = np.array(draws)
    assert np.all(draws >= n)
    # coarse uniformity over eight bins of the second side
    counts = np.bincount((draws - n) * 8 // n, minlength=8)
    assert counts.min() > 300 and counts.max() < 450


def test_ulam_labels_alternate_sides(demo1024):
    tree = random_tree(demo1024, 1)
    ks = tree.materialize_depth(3)
    n = demo1024.n
    for k in ks[1:]:
        lab = tree.label(k, 0)
        sides = [t >= n for t in lab.prefix] + [lab.tip >= n]
        # each long-range edge switches sides
        assert all(a != b for a, b in zip(sides, sides[1:]))


def test_stay_one_never_crosses():
    base = demo_spec(16)
    spec = MixtureSpec(16, base.P1, base.P2, MixingTable.constant(16, 1), F(0), 3)
    tree = LazyQuasiTree(spec, 0, 0)
    k, _ = tree.walk(WalkerState(0, 0, 0), 400, _rng_state(0, 1))
    assert np.all(k == 0)


def test_one_step_law_at_root(demo1024):
    tree = random_tree(demo1024, 2)
    x = tree.root_type
    y = tree.partner_type(0, 0)
    p = float(demo1024.p.p(x, y))
    P = demo1024.P
    expected = p * P[x].toarray().ravel() + (1 - p) * P[y].toarray().ravel()
    rng = _rng_state(0, 9)
    samples = 100_000
    counts = np.zeros(2 * demo1024.n)
    for _ in range(samples):
        w = qt_step(tree, qt_step(tree, WalkerState(0, 0, 0), rng), rng)
        counts[tree.vertex_type(w.comp, w.local)] += 1
    sigma = np.sqrt(samples * expected * (1 - expected))
    assert np.all(np.abs(counts - samples * expected) <= 4 * sigma + 1e-9)


def test_escape_trials_validation(demo1024):
    with pytest.raises(ValueError):
        estimate_escape_probability(random_tree(demo1024, 0), 0, 0, trials=0)


def test_escape_zero_when_forced_out():
    # p = 0 on the first side forces a crossing, so a first-side non-root center goes straight back up
    base = demo_spec(16)
    spec = MixtureSpec(16, base.P1, base.P2, MixingTable.constant(16, 0), F(0), 3)
    tree = LazyQuasiTree(spec, 0, 0)
    c = tree.child(tree.child(0, 0), 1)
    assert tree.vertex_type(c, 0) < 16
    est = estimate_escape_probability(tree, c, 0, horizon=50, trials=200)
    assert est.q_hat == 0


def test_escape_mean_bounded_below(demo1024):
    q = [estimate_escape_probability(random_tree(demo1024, 0, i), 0, 0, 300, 100, i).q_hat for i in range(200)]
    assert np.mean(q) >= 0.05


def test_wilson_interval_contains_estimate():
    lo, hi = wilson_interval(30, 100)
    assert lo < 0.3 < hi


def test_regeneration_records_monotone(demo1024):
    for r in range(5):
        res = run_regenerations(random_tree(demo1024, 0, r), 2000, None, 0, r)
        T = [rec.T for rec in res.records]
        L = [rec.L for rec in res.records]
        assert np.all(np.diff(T) > 0) and np.all(np.diff(L) >= 0)
        assert len(T) > 10
    assert records_table([res]).startswith("k,Y,T,L,run\n")


def _fake_runs(increments_per_run):
    runs = []
    for r, inc in enumerate(increments_per_run):
        T = np.cumsum(inc)
        recs = [RegenerationRecord(k + 1, 0, float(t), k + 1) for k, t in enumerate(T)]
        runs.append(RegenerationRun(recs, int(2 * T[-1]) + 2, 0))
    return runs


def test_renewal_deterministic_increments():
    runs = _fake_runs([np.full(500, 4.0) for _ in range(5)])
    rep = renewal_statistics(runs, 4, t_grid=(100, 1000))
    assert rep.count_rate[1000] == pytest.approx(0.25)
    assert rep.mean_increment == 4.0


def test_renewal_geometric_variance_flat():
    rng = np.random.default_rng(0)
    runs = _fake_runs([rng.geometric(0.3, 200).astype(float) for _ in range(400)])
    rep = renewal_statistics(runs, 4)
    target = 0.7 / 0.09
    for v in rep.variance_ratio.values():
        assert v == pytest.approx(target, rel=0.2)


def test_renewal_needs_records():
    with pytest.raises(ValueError):
        renewal_statistics(_fake_runs([np.ones(10)]), 4)


def test_tail_fits_recover_parameters():
    rng = np.random.default_rng(1)
    weib = rng.weibull(0.6, 50_000) * 3
    fit = stretched_exponential_fit(weib)
    assert fit.alpha == pytest.approx(0.6, abs=0.05) and fit.r2 > 0.99
    geo = rng.geometric(0.4, 50_000)
    assert exponential_fit(geo).c == pytest.approx(-np.log(0.6), rel=0.1)


def test_nu_spread_n1024(demo1024):
    runs = [run_regenerations(random_tree(demo1024, 1, r), 300, None, 1, r) for r in range(30_000)]
    rep = renewal_statistics(runs, 1024)
    assert rep.nu_spread <= 20


def test_drift_entropy_small(demo1024):
    est = estimate_drift_entropy(demo1024, 20, 200, seed=0, n_inner=200)
    assert 0 < est.d_hat <= 1
    assert est.h_hat > 0
    assert est.d_ci[0] <= est.d_hat <= est.d_ci[1]


def test_drift_band_shrinks(demo1024):
    # relative deviation of depth / t from the drift shrinks with t on held-out runs
    est = estimate_drift_entropy(demo1024, 30, 400, seed=1, n_inner=100)
    errs = {}
    for t in (50, 400):
        vals = []
        for r in range(100):
            res = run_regenerations(random_tree(demo1024, 77, r), t, None, 77, r, keep_path=True)
            vals.append(res.depths[-1] / t)
        errs[t] = np.mean(np.abs(np.array(vals) - est.d_hat))
    assert errs[400] < errs[50]


def test_coupling_contract(demo1024):
    for seed in range(30):
        res = coupled_generation(demo1024, seed, 2, 2, 10, seed)
        end = len(res.finite_path) if res.censored else int(2 * res.t_coup)
        for i in range(end):
            assert res.finite_path[i] == res.tree_path[i][1]


def test_coupling_t0_positive(demo1024):
    res = coupled_generation(demo_spec(4096), 5, 2, 1, 0, 3)
    assert res.censored or res.t_coup == 0
