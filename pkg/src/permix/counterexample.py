"""Biased-segment mixture with trapping neighbourhoods and its worst-case slowdown."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.sparse as sp

from permix.core import (Environment, MixingTable, MixtureSpec, ValidationError, as_fraction, block_matrix,
                         build_lifted_kernel, graph_degree, project_kernel)
from permix.mixing import mixing_times, stationary_direct
from permix.rng import task_rng

FOUND = "FOUND"
PLANTED = "PLANTED"


def segment_chain(size: int, delta) -> list[list[Fraction]]:
    """Walk on {0, ..., size - 1}: right with prob delta, left with 1 - delta, holding at the ends."""
    delta = as_fraction(delta)
    rows = [[Fraction(0)] * size for _ in range(size)]
    for i in range(size):
        if i + 1 < size:
            rows[i][i + 1] += delta
        else:
            rows[i][i] += delta
        if i > 0:
            rows[i][i - 1] += 1 - delta
        else:
            rows[i][i] += 1 - delta
    return rows


def build_counterexample(n: int, delta) -> MixtureSpec:
    """Mixture of 2n copies of the 3-segment chain with 3n copies of the 2-segment chain, p = 1/2.

    Each side has 6n states; state i sits at position i mod 3 of its
    3-segment on the first side and at position i mod 2 of its 2-segment on
    the second side.
    """
    delta = as_fraction(delta)
    if not 0 < delta < 1:
        raise ValidationError("delta must lie in (0, 1)")
    if n < 1:
        raise ValidationError("n must be at least 1")
    side = 6 * n
    P1 = block_matrix([segment_chain(3, delta)] * (2 * n))
    P2 = block_matrix([segment_chain(2, delta)] * (3 * n))
    half = Fraction(1, 2)
    floor = min(delta, 1 - delta, half)
    spec = MixtureSpec(side, P1, P2, MixingTable.constant(side, half), floor, 3, f"counterexample-{n}-{delta}")
    degree = graph_degree(spec.P)
    if degree > 3:
        raise ValidationError(f"degree {degree} above 3")
    return spec


def segment_bias(spec: MixtureSpec) -> float:
    """delta, read off the first segment of the first side."""
    entries = {(i, j): v for i, j, v in spec.P1.entries}
    return float(entries[(0, 1)])


def positions(spec: MixtureSpec, env: Environment, x) -> tuple:
    """(position in the 3-segment, position in the 2-segment) of first-side state x."""
    x = np.asarray(x)
    return x % 3, (np.asarray(env.sigma)[x] - spec.n) % 2


# ---------------------------------------------------------------- gambler's ruin and the tree T


def trapping_ratio(delta, l: int) -> float:
    """r = (2 delta / (1 - delta))^l; r >= 1 means no trapping."""
    delta = as_fraction(delta)
    return float((2 * delta / (1 - delta)) ** l)


def ruin_probability(delta, l: int, start: int = 1) -> float:
    """P(hit l before 0 from ``start``) for the lazy walk right w.p. delta, left w.p. (1 - delta) / 2."""
    delta = float(delta)
    if not 0 <= start <= l:
        raise ValueError("start must lie in [0, l]")
    rho = (1 - delta) / (2 * delta)
    if math.isclose(rho, 1.0):
        return start / l
    return (rho ** start - 1) / (rho ** l - 1)


def ruin_monte_carlo(delta, l: int, trials: int, seed: int = 0, start: int = 1) -> tuple[float, float]:
    """Monte Carlo estimate of :func:`ruin_probability` with its standard error."""
    delta = float(delta)
    rng = task_rng(seed, 51)
    pos = np.full(trials, start)
    alive = (pos > 0) & (pos < l)
    while alive.any():
        u = rng.random(alive.sum())
        step = np.where(u < delta, 1, np.where(u < delta + (1 - delta) / 2, -1, 0))
        pos[alive] += step
        alive = (pos > 0) & (pos < l)
    p = float(np.mean(pos == l))
    return p, math.sqrt(max(p * (1 - p), 1e-300) / trials)


@dataclass
class TrapTree:
    """The periodic tree T cut at graph distance ``depth`` from its root.

    Vertex v has positions ``pos[v] = (position in 3-segment, position in
    2-segment)``; ``parent[v]`` is its neighbour towards the root and
    ``dist[v]`` its distance.  Vertices at distance depth + 1 are kept as
    the exterior boundary.  ``matrix`` is the chain on all of them.
    """

    depth: int
    delta: Fraction
    pos: list
    parent: list
    dist: list
    segments: list
    matrix: np.ndarray

    @property
    def r(self) -> float:
        return trapping_ratio(self.delta, self.depth)

    @property
    def trapping(self) -> bool:
        return self.r < 1

    @property
    def ball(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.dist) <= self.depth)

    def ball_size(self) -> int:
        return int(self.ball.size)

    def killed_matrix(self) -> np.ndarray:
        b = self.ball
        return self.matrix[np.ix_(b, b)]


def build_tree_T(l: int, delta) -> TrapTree:
    """Tree where every segment is entered at its left end, down to distance l + 1 from the root."""
    if l < 1:
        raise ValueError("l must be at least 1")
    delta = as_fraction(delta)
    Q = {3: np.array(segment_chain(3, delta), dtype=float), 2: np.array(segment_chain(2, delta), dtype=float)}
    pos = [[0, 0]]
    parent = [-1]
    dist = [0]
    segments = []  # (size, members by position)
    queue = deque()

    def open_segment(size, v):
        members = [v] + [-1] * (size - 1)
        segments.append((size, members))
        queue.append(len(segments) - 1)

    open_segment(3, 0)
    open_segment(2, 0)
    while queue:
        sid = queue.popleft()
        size, members = segments[sid]
        for p in range(1, size):
            v = len(pos)
            d = dist[members[0]] + p
            if d > l + 1:
                break
            members[p] = v
            pos.append([p, 0] if size == 3 else [0, p])
            parent.append(members[p - 1])
            dist.append(d)
            if d <= l:
                open_segment(5 - size, v)
    m = len(pos)
    matrix = np.zeros((m, m))
    for size, members in segments:
        for a, u in enumerate(members):
            if u < 0:
                continue
            for b, w in enumerate(members):
                if w >= 0 and Q[size][a, b]:
                    matrix[u, w] += 0.5 * Q[size][a, b]
    return TrapTree(l, delta, [tuple(p) for p in pos], parent, dist, segments, matrix)


# ---------------------------------------------------------------- finding and planting traps


def _segment_members(spec: MixtureSpec, env: Environment, x: int) -> tuple[list, list]:
    """First-side states of the 3-segment and of the 2-segment through x, listed by position."""
    a = 3 * (x // 3)
    seg3 = [a, a + 1, a + 2]
    y = int(env.sigma[x]) - spec.n
    b = 2 * (y // 2)
    eta = env.eta
    seg2 = [int(eta[spec.n + b]), int(eta[spec.n + b + 1])]
    return seg3, seg2


def trap_isomorphic(spec: MixtureSpec, env: Environment, x: int, l: int) -> bool:
    """Exact test that the ball of radius l around x, with its transition weights, is the tree T cut at l.

    Every state within distance l must sit at the left end of the segment it
    does not share with its parent, and no state may be reached twice.
    """
    seg3, seg2 = _segment_members(spec, env, x)
    if seg3[0] != x or seg2[0] != x:
        return False
    seen = {x: 0}
    outside = set()
    queue = deque([(seg3, 0), (seg2, 0)])
    while queue:
        members, d0 = queue.popleft()
        for p, v in enumerate(members[1:], start=1):
            d = d0 + p
            if d > l:
                outside.add(v)
                break
            if v in seen:
                return False
            seen[v] = d
            other3, other2 = _segment_members(spec, env, v)
            other = other2 if len(members) == 3 else other3
            if other[0] != v:
                return False
            queue.append((other, d))
    return not (outside & set(seen))


@dataclass
class TrapReport:
    center: int
    depth: int
    mode: str
    match: bool
    ball_size: int
    candidates_tried: int = 0
    escape_quantiles: dict = field(default_factory=dict)
    escape_rate: float = math.nan
    t_mix_typical: float = math.nan
    ratio: float = math.nan
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def plant_trap(spec: MixtureSpec, l: int, seed: int = 0, center: int | None = None) -> tuple[Environment, int]:
    """Matching that realizes the tree T cut at l around ``center``; uniform on everything left free."""
    n = spec.n
    if n % 6:
        raise ValidationError("the segment mixture has 6n states per side")
    tree = build_tree_T(l, Fraction(1, 4))
    need3 = sum(1 for size, _ in tree.segments if size == 3)
    need2 = sum(1 for size, _ in tree.segments if size == 2)
    if need3 > n // 3 or need2 > n // 2:
        raise ValidationError(f"depth {l} does not fit in {n} states")
    rng = task_rng(seed, 52)
    free3 = list(rng.permutation(n // 3))
    free2 = list(rng.permutation(n // 2))
    if center is None:
        center = 3 * int(free3.pop())
    else:
        if center % 3:
            raise ValidationError("the trap center must be a left end")
        free3.remove(center // 3)
    sigma = np.full(n, -1, dtype=np.int64)
    used2 = np.zeros(n, dtype=bool)
    # root: left end of a fresh 2-segment
    b = 2 * int(free2.pop())
    sigma[center] = b
    used2[b] = True
    queue = deque([("3", [center, center + 1, center + 2], 0), ("2", [center, None], 0)])
    while queue:
        kind, members, d0 = queue.popleft()
        if kind == "3":
            for p in (1, 2):
                v = members[p]
                d = d0 + p
                if d > l:
                    break
                b = 2 * int(free2.pop())
                sigma[v] = b
                used2[b] = True
                queue.append(("2", [v, None], d))
        else:
            v = members[0]
            y = int(sigma[v]) + 1  # right end of its 2-segment
            d = d0 + 1
            if d > l:
                continue
            a = 3 * int(free3.pop())
            sigma[a] = y
            used2[y] = True
            queue.append(("3", [a, a + 1, a + 2], d))
    rest1 = np.flatnonzero(sigma < 0)
    rest2 = np.flatnonzero(~used2)
    sigma[rest1] = rest2[rng.permutation(rest2.size)]
    env = Environment(n, sigma + n, seed)
    if not trap_isomorphic(spec, env, center, l):
        raise AssertionError("planted neighbourhood is not the tree T")
    return env, center


def search_trap(spec: MixtureSpec, env: Environment, l: int, budget: int, seed: int = 0) -> tuple[int | None, int]:
    """Test up to ``budget`` left-end centers with pairwise disjoint balls; return (center or None, tried)."""
    rng = task_rng(seed, 53)
    order = 3 * rng.permutation(spec.n // 3)
    blocked: set = set()
    tried = 0
    for x in order.tolist():
        if tried >= budget:
            break
        if x in blocked:
            continue
        ball = _ball(spec, env, x, l)
        if ball & blocked:
            continue
        tried += 1
        if trap_isomorphic(spec, env, x, l):
            return x, tried
        blocked |= ball
    return None, tried


def _neighbours(spec: MixtureSpec, env: Environment, v: int) -> list:
    seg3, seg2 = _segment_members(spec, env, v)
    p = v % 3
    out = [seg3[q] for q in (p - 1, p + 1) if 0 <= q < 3]
    out.append(seg2[1] if seg2[0] == v else seg2[0])
    return out


def _ball(spec: MixtureSpec, env: Environment, x: int, l: int) -> set:
    seen = {x: 0}
    queue = deque([x])
    while queue:
        v = queue.popleft()
        if seen[v] == l:
            continue
        for w in _neighbours(spec, env, v):
            if w not in seen:
                seen[w] = seen[v] + 1
                queue.append(w)
    return set(seen)


def search_success_bound(k: int, l: int, Delta: int = 3) -> float:
    """Lower bound 1 - exp(-k 3^(-Delta^(l + 1))) on finding a trap among k disjoint centers."""
    return 1 - math.exp(-k * 3.0 ** (-(Delta ** (l + 1))))


def find_or_plant_trap(spec: MixtureSpec, env: Environment | None, l: int, search_budget: int,
                       seed: int = 0) -> tuple[Environment, TrapReport]:
    """Search for a depth-l trap in ``env``; plant one when the search fails or no environment is given."""
    tree = build_tree_T(l, Fraction(1, 4))
    if 4 * tree.ball_size() > spec.n:
        raise ValidationError(f"depth {l} is infeasible for {spec.n} states per side")
    tried = 0
    if env is not None:
        x, tried = search_trap(spec, env, l, search_budget, seed)
        if x is not None:
            return env, TrapReport(x, l, FOUND, True, tree.ball_size(), tried)
    env, x = plant_trap(spec, l, seed)
    report = TrapReport(x, l, PLANTED, trap_isomorphic(spec, env, x, l), tree.ball_size(), tried)
    return env, report


# ---------------------------------------------------------------- slowdown


def projected_matrix(spec: MixtureSpec, env: Environment) -> sp.csr_matrix:
    return project_kernel(build_lifted_kernel(spec, env), env).matrix


def ball_states(spec: MixtureSpec, env: Environment, x: int, l: int) -> np.ndarray:
    return np.array(sorted(_ball(spec, env, x, l)), dtype=np.int64)


def survival_curve(killed: np.ndarray, start: int, t_grid) -> np.ndarray:
    """P(no exit by time t) for the chain killed outside the ball, exactly via eigen-decomposition."""
    vals, vecs = np.linalg.eig(killed)
    coef = np.linalg.solve(vecs, np.ones(killed.shape[0]))
    row = vecs[start] * coef
    t = np.asarray(t_grid, dtype=float)
    return np.real(row[None, :] * vals[None, :] ** t[:, None]).sum(axis=1).clip(0, 1)


def escape_quantile(killed: np.ndarray, start: int, q: float) -> float:
    """Smallest integer t with P(exit by t) >= q."""
    lo, hi = 0, 1
    while survival_curve(killed, start, [hi])[0] > 1 - q:
        lo, hi = hi, 2 * hi
        if hi > 1e18:
            return math.inf
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if survival_curve(killed, start, [mid])[0] > 1 - q:
            lo = mid
        else:
            hi = mid
    return float(hi)


@dataclass
class SlowdownReport:
    trap: TrapReport
    t_grid: list
    survival: list
    escape_rate: float
    r: float
    rate_over_r: float
    median_escape: float
    t_mix_typical: float
    ratio: float
    dominated: bool
    typical_starts: list
    censored: bool = False

    def curve_rows(self):
        yield ("t", "in_ball", "geometric_bound")
        for t, s in zip(self.t_grid, self.survival):
            yield (t, s, (1 - self.r) ** t if self.r < 1 else 0.0)


def typical_mixing_time(K: sp.csr_matrix, starts, eps: float = 0.25, t_max: int = 1_000_000,
                        pi: np.ndarray | None = None) -> float:
    """Mean over starts of t_mix(x, eps); inf if some start is still above eps at t_max."""
    if pi is None:
        pi = stationary_direct(K)
    times = mixing_times(K, starts, pi, eps, t_max)
    return math.inf if np.any(times < 0) else float(times.mean())


def slowdown_audit(spec: MixtureSpec, env: Environment, trap: TrapReport, t_grid, typical: int = 10,
                   seed: int = 0, t_max: int = 1_000_000) -> SlowdownReport:
    """Exact escape curve from the trap center against the mixing time from typical starts."""
    K = projected_matrix(spec, env)
    ball = ball_states(spec, env, trap.center, trap.depth)
    killed = K[ball][:, ball].toarray()
    start = int(np.searchsorted(ball, trap.center))
    survival = survival_curve(killed, start, t_grid)
    lam = float(np.max(np.abs(np.linalg.eigvals(killed))))
    rate = 1 - lam
    r = trapping_ratio(segment_bias(spec), trap.depth)
    median = escape_quantile(killed, start, 0.5)
    rng = task_rng(seed, 54)
    starts = rng.choice(np.setdiff1d(np.arange(spec.n), ball), typical, replace=False)
    t_mix = typical_mixing_time(K, starts, 0.25, t_max)
    # P(exit by t) <= 1 - (1 - r)^t along the grid
    dominated = bool(np.all(1 - survival <= 1 - (1 - min(r, 1)) ** np.asarray(t_grid, dtype=float) + 1e-12))
    trap.escape_quantiles = {q: escape_quantile(killed, start, q) for q in (0.1, 0.5, 0.9)}
    trap.escape_rate = rate
    censored = math.isinf(t_mix)
    # a censored t_mix only says t_mix > t_max, so the ratio becomes an upper bound
    ratio = median / (t_max if censored else t_mix)
    if censored:
        trap.notes.append(f"typical t_mix above t_max={t_max}; ratio is an upper bound")
    trap.t_mix_typical = t_mix
    trap.ratio = ratio
    return SlowdownReport(trap, list(t_grid), survival.tolist(), rate, r, rate / r, median, t_mix, ratio,
                          dominated, starts.tolist(), censored)
