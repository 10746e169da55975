import math
from itertools import product

import networkx as nx
import numpy as np
import pytest
from fractions import Fraction as F
from hypothesis import given, settings
from hypothesis import strategies as st

from permix.core import Environment, sample_environment
from permix.counterexample import build_counterexample, plant_trap
from permix.specs import demo_spec
from permix.topology import (BACKTRACK, DEVIATE, CrossingStatus, PathClassConfig, Trajectory, detect_backtrack,
                             detect_deviation, gamma_membership, growth_bound, is_non_backtracking, loop_erase,
                             quasi_tree_like, regeneration_edges, reverse, sample_trajectories, sample_trajectory,
                             unfold_ball)

A, A_REV, B = (0, 1), (1, 0), (2, 3)
ALPHABET = (A, A_REV, B)
SIX = ((0, 1), (1, 0), (2, 3), (3, 2), (4, 5), (5, 4))


def erase_by_rescanning(seq):
    """Delete the leftmost adjacent (e, reverse(e)) pair until none is left."""
    seq = list(seq)
    changed = True
    while changed:
        changed = False
        for i in range(len(seq) - 1):
            if seq[i + 1] == reverse(seq[i]):
                del seq[i:i + 2]
                changed = True
                break
    return seq


def backtrack_by_windows(edges, L):
    """Smallest closing index of a block of L distinct edges followed by its mirrored reversal."""
    best = None
    for i in range(len(edges)):
        for j in range(i + 2 * L, len(edges) + 1):
            window = edges[i:i + L]
            mirror = [reverse(e) for e in reversed(window)]
            if j - i == 2 * L and len(set(window)) == L and edges[i + L:j] == mirror:
                best = j - 1 if best is None else min(best, j - 1)
    return best


def all_sequences(alphabet, max_len):
    for k in range(max_len + 1):
        yield from product(alphabet, repeat=k)


def test_loop_erase_examples():
    e1, e2, e3 = (0, 10), (1, 11), (2, 12)
    assert loop_erase([e1]) == [e1]
    assert loop_erase([e1, e2, reverse(e2), e3]) == [e1, e3]


def test_loop_erase_exhaustive():
    mismatches = sum(loop_erase(s) != erase_by_rescanning(s) for s in all_sequences(ALPHABET, 8))
    assert mismatches == 0


@given(st.lists(st.sampled_from(SIX), max_size=30))
@settings(max_examples=300, deadline=None)
def test_loop_erase_properties(seq):
    xi = loop_erase(seq)
    assert is_non_backtracking(xi)
    assert loop_erase(xi) == xi
    assert len(xi) <= len(seq)
    assert xi == erase_by_rescanning(seq)


@pytest.mark.parametrize("L", [1, 2, 3, 4])
def test_backtrack_exhaustive(L):
    mismatches = 0
    for seq in all_sequences(ALPHABET, 8):
        crossings = list(enumerate(seq))
        if detect_backtrack(crossings, L) != backtrack_by_windows(list(seq), L):
            mismatches += 1
    assert mismatches == 0


@given(st.lists(st.sampled_from(SIX), max_size=10), st.integers(1, 4))
@settings(max_examples=300, deadline=None)
def test_backtrack_random(seq, L):
    assert detect_backtrack(list(enumerate(seq)), L) == backtrack_by_windows(seq, L)


def test_backtrack_examples():
    e1, e2 = (0, 10), (1, 11)
    assert detect_backtrack(list(enumerate([e1, e2])), 1) is None
    assert detect_backtrack(list(enumerate([e1, e2, reverse(e2), reverse(e1)])), 2) == 3


# ---------------------------------------------------------------- trajectories


def test_trajectory_crossings_are_matching_moves(demo96):
    env = sample_environment(96, 0)
    traj = sample_trajectory(demo96, env, 3, 40, seed=1)
    for tick, (a, b) in traj.lr_crossings:
        assert env.eta[a] == b and tick % 2 == 1
    lines = traj.dump().splitlines()
    assert len(lines) == traj.states.size
    assert sum(int(line.split()[2]) for line in lines) == len(traj.lr_crossings)


def _deviation_oracle(traj, spec, env, R):
    g = nx.DiGraph()
    rows, cols = spec.P.nonzero()
    g.add_edges_from(zip(rows.tolist(), cols.tolist()))
    states = traj.states.tolist()
    path = []
    for i in range(1, len(states)):
        if env.eta[states[i - 1]] == states[i]:
            path.append((states[i - 1], states[i]))
        xi = loop_erase(path)
        center = xi[-1][1] if xi else states[0]
        try:
            d = nx.shortest_path_length(g, center, states[i])
        except nx.NetworkXNoPath:
            d = math.inf
        if d >= R:
            return traj.tick0 + i
    return None


@pytest.mark.parametrize("seed", range(30))
def test_deviation_matches_bfs_oracle(demo96, seed):
    env = sample_environment(96, seed % 5)
    traj = sample_trajectory(demo96, env, seed, 25, seed=seed)
    for R in (1, 2, 3):
        assert detect_deviation(traj, demo96, env, R) == _deviation_oracle(traj, demo96, env, R)


def test_deviation_large_radius_no_crossing(demo96):
    env = sample_environment(96, 0)
    traj = Trajectory(np.array([0, 0, 1, 1, 2, 2, 3]), 0, 96)
    assert detect_deviation(traj, demo96, env, 10) is None


def test_deviation_on_segment():
    spec = build_counterexample(1, F(1, 20))
    env = Environment(6, np.arange(6, 12))
    # two small-range steps from the left end of a 3-segment, no matching moves
    traj = Trajectory(np.array([0, 0, 1, 1, 2]), 0, 6)
    assert detect_deviation(traj, spec, env, 2) == 4
    assert detect_deviation(traj, spec, env, 3) is None


def _regeneration_oracle(states, eta, L):
    """Status codes with an unbounded future, from loop-erased segment lengths."""
    out = []
    seen = set()
    for i in range(1, len(states)):
        a = states[i - 1]
        if eta[a] != states[i]:
            continue
        key = min(a, eta[a])
        if key in seen:
            out.append(CrossingStatus.REPEATED)
            continue
        seen.add(key)
        status = CrossingStatus.PATH_ENDED
        segment = []
        for k in range(i, len(states)):
            if k > i - 1 + 0 and eta[states[k - 1]] == states[k]:
                segment.append((states[k - 1], states[k]))
            if states[k] == a:
                status = CrossingStatus.RETURNED
                break
            if len(loop_erase(segment)) >= L:
                status = CrossingStatus.QUALIFIES
                break
        out.append(status)
    return out


@pytest.mark.parametrize("seed", range(20))
def test_regeneration_matches_full_trace_oracle(seed):
    spec = demo_spec(96)
    env = sample_environment(96, seed % 4)
    traj = sample_trajectory(spec, env, seed, 15, seed=seed)
    for L in (1, 2, 3):
        scan = regeneration_edges(traj, env, L)
        assert scan.statuses == _regeneration_oracle(traj.states.tolist(), env.eta, L)
        short = regeneration_edges(traj, env, L, W=3)
        for s_short, s_full in zip(short.statuses, scan.statuses):
            if s_short is not CrossingStatus.UNRESOLVED:
                assert s_short == s_full


def test_regeneration_definition_cases():
    spec = demo_spec(8)
    env = Environment(8, np.array([8, 9, 10, 11, 12, 13, 14, 15]))
    # cross 0 -> 8 and never come back: with L=1 the crossing qualifies at once
    scan = regeneration_edges(Trajectory(np.array([0, 8, 9]), 0, 8), env, 1)
    assert scan.statuses == [CrossingStatus.QUALIFIES]
    # cross 0 -> 8 then step back across to 0 before reaching distance 2
    scan = regeneration_edges(Trajectory(np.array([0, 8, 8, 0]), 0, 8), env, 2)
    assert scan.statuses[0] is CrossingStatus.RETURNED


def test_gamma_examples(demo96):
    env = sample_environment(96, 0)
    cfg = PathClassConfig(2, 2, 10)
    assert gamma_membership(Trajectory(np.array([5]), 0, 96), demo96, env, cfg).member
    traj = Trajectory(np.array([0, 0, 1, 1, 2, 2, 3]), 0, 96)
    verdict = gamma_membership(traj, demo96, env, PathClassConfig(1, 2, 10))
    assert not verdict.member and DEVIATE in verdict.reasons
    e = (0, int(env.eta[0]))
    back = Trajectory(np.array([0, e[1], e[1], 0]), 0, 96)
    assert BACKTRACK in gamma_membership(back, demo96, env, PathClassConfig(3, 1, 10)).reasons


def test_gamma_monotone(demo96):
    env = sample_environment(96, 1)
    trajs = sample_trajectories(demo96, env, range(0, 192, 8), 20, seed=3)
    grid = [(R, L, M) for R in (1, 2, 3) for L in (1, 2, 3) for M in (2, 5, 20)]
    for traj in trajs:
        member = {k: gamma_membership(traj, demo96, env, PathClassConfig(*k)).member for k in grid}
        for (R, L, M), ok in member.items():
            for bigger in ((R + 1, L, M), (R, L + 1, M)):
                if bigger in member and ok:
                    assert member[bigger]
            if ok and (R, L, M * 2) in member:
                assert member[(R, L, M * 2)]


def test_path_config_validation():
    with pytest.raises(ValueError):
        PathClassConfig(0, 1, 1)


def test_lr_cycle_detected(tiny, identity_env6):
    # states 0 and 1 share a triangle and their partners 6 and 7 share a flip pair
    assert not quasi_tree_like(tiny, identity_env6, 0, 2, "lr", R=2)


def test_planted_tree_is_quasi_tree_like():
    spec = build_counterexample(64, F(1, 20))
    env, x = plant_trap(spec, 2, seed=0)
    assert quasi_tree_like(spec, env, x, 2, "graph")


def test_ball_growth_bound():
    assert growth_bound(3, 2) == 13
    spec = demo_spec(4096)
    env = sample_environment(4096, 0)
    for x in range(0, 8192, 512):
        for r in (1, 2, 3):
            assert unfold_ball(spec, env, x, r, "graph").size <= growth_bound(3, r)


def test_gamma_rate_short_paths_n4096():
    n = 4096
    spec = demo_spec(n)
    env = sample_environment(n, 0)
    starts = np.random.default_rng(0).integers(0, 2 * n, 10_000)
    trajs = sample_trajectories(spec, env, starts, math.ceil(math.log(n)), seed=5)
    cfg = PathClassConfig(4, 4, 10)
    rate = np.mean([gamma_membership(t, spec, env, cfg).member for t in trajs])
    assert rate >= 0.99
