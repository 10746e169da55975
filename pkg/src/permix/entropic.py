"""Trace weights of the finite chain, entropy and drift audits, neighbourhood explorations and pi-hat."""

from __future__ import annotations

import heapq
import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from permix import _engine as eng
from permix.core import BudgetError, Environment, MixtureSpec, ValidationError, build_lifted_kernel, walker_tables
from permix.mixing import stationary_distribution, tv_distance
from permix.rng import task_rng, task_seed64
from permix.topology import (PathClassConfig, Trajectory, gamma_membership, growth_bound, loop_erase,
                             regeneration_edges, sample_trajectories, unfold_ball)

NOT_NICE = "NOT_NICE"


# ---------------------------------------------------------------- weights


@dataclass
class FirstEdgeLaw:
    """Empirical law of the tail of the first loop-erased edge.

    ``counts[v]`` is the number of walkers whose first edge was (v, eta v)
    when the trace reached length L before deviating (and, in the
    conditional case, before visiting eta of the base).
    """

    base: int
    conditional: bool
    counts: Counter
    trials: int
    accepted: int
    codes: Counter

    def weight(self, tail: int) -> float:
        denom = self.accepted if self.conditional else self.trials
        return self.counts.get(tail, 0) / denom if denom else float("nan")

    def stderr(self, tail: int) -> float:
        denom = self.accepted if self.conditional else self.trials
        if not denom:
            return float("nan")
        p = self.weight(tail)
        return math.sqrt(max(p * (1 - p), 0.0) / denom)

    def total(self) -> float:
        denom = self.accepted if self.conditional else self.trials
        return sum(self.counts.values()) / denom if denom else float("nan")

    def total_stderr(self) -> float:
        denom = self.accepted if self.conditional else self.trials
        p = self.total()
        return math.sqrt(max(p * (1 - p), 0.0) / denom) if denom else float("nan")


class WeightOracle:
    """Monte Carlo first-edge laws of one environment, cached per base state."""

    def __init__(self, spec: MixtureSpec, env: Environment, R: int, L: int, trials: int, seed: int = 0,
                 max_ticks: int = 100_000):
        self.spec, self.env = spec, env
        self.R, self.L, self.trials = R, L, trials
        self.seed = seed
        self.max_ticks = max_ticks
        self.fm = walker_tables(spec, env)
        self.eta = np.asarray(env.eta)
        self._cache: dict = {}

    def law(self, x: int, conditional: bool = False) -> FirstEdgeLaw:
        key = (x, conditional)
        if key not in self._cache:
            out_edge = np.empty(self.trials, dtype=np.int64)
            out_code = np.empty(self.trials, dtype=np.int64)
            rng = np.array([task_seed64(self.seed, x, int(conditional), 21)], dtype=np.uint64)
            tick0 = 1 if conditional else 0
            forbid = int(self.eta[x]) if conditional else -1
            eng.fin_first_edges(self.fm, x, tick0, self.R, self.L, forbid, self.trials, self.max_ticks, rng,
                                out_edge, out_code)
            ok = out_code == eng.REACHED
            counts = Counter(out_edge[ok].tolist())
            self._cache[key] = FirstEdgeLaw(x, conditional, counts, self.trials, int(ok.sum()),
                                            Counter(out_code.tolist()))
        return self._cache[key]

    def weight(self, x: int, tail: int, conditional: bool = False) -> float:
        return self.law(x, conditional).weight(tail)

    def trace_weight(self, x: int, xi) -> float:
        """w_x(xi_1) times the conditional weights of each later edge given the head of the previous one."""
        if not xi:
            return 1.0
        w = self.weight(x, xi[0][0])
        for prev, e in zip(xi, xi[1:]):
            if w == 0:
                break
            w *= self.weight(prev[1], e[0], conditional=True)
        return w


def finite_weight(spec: MixtureSpec, env: Environment, x: int, tail: int, R: int, L: int, trials: int,
                  conditional: bool = False, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo weight of the edge (tail, eta tail) as first loop-erased edge from x, with its standard error."""
    law = WeightOracle(spec, env, R, L, trials, seed).law(x, conditional)
    if conditional and law.accepted == 0:
        raise ValueError("no accepted walker for the conditional weight")
    return law.weight(tail), law.stderr(tail)


def exact_first_edge_weights(spec: MixtureSpec, env: Environment, x: int, R: int, L: int,
                             conditional: bool = False, max_states: int = 200_000) -> dict:
    """Exact first-edge weights by solving the absorbing chain on (state, loop-erased stack, parity).

    Returns {tail: weight}; in the conditional case the weights are divided
    by the probability of the conditioning event.
    """
    K = build_lifted_kernel(spec, env)
    P = spec.P
    eta = env.eta
    balls = spec.forward_balls
    forbid = int(eta[x]) if conditional else -1
    tick0 = 1 if conditional else 0
    index: dict = {}
    rows, cols, vals = [], [], []
    absorb: dict = {}
    start = (x, (), tick0 % 2)
    queue = deque([start])
    index[start] = 0

    def center_of(stack):
        return x if not stack else int(eta[stack[-1]])

    def target(state, prob, src):
        pos, stack, parity = state
        if pos == forbid:
            return
        if balls.distance(center_of(stack), pos) >= R:
            return
        if len(stack) == L:
            absorb[(src, stack[0])] = absorb.get((src, stack[0]), 0.0) + prob
            return
        if state not in index:
            if len(index) >= max_states:
                raise BudgetError(f"more than {max_states} transient states")
            index[state] = len(index)
            queue.append(state)
        rows.append(src)
        cols.append(index[state])
        vals.append(prob)

    while queue:
        state = queue.popleft()
        src = index[state]
        pos, stack, parity = state
        if parity == 0:
            jump = float(K.jump[pos])
            if jump < 1:
                target((pos, stack, 1), 1 - jump, src)
            if jump > 0:
                y = int(eta[pos])
                if stack and int(eta[stack[-1]]) == pos:
                    new = stack[:-1]
                else:
                    new = stack + (pos,)
                target((y, new, 1), jump, src)
        else:
            for a in range(P.indptr[pos], P.indptr[pos + 1]):
                target((int(P.indices[a]), stack, 0), float(P.data[a]), src)
    m = len(index)
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
    tails = sorted({t for _, t in absorb})
    B = np.zeros((m, len(tails)))
    col = {t: i for i, t in enumerate(tails)}
    for (s, t), p in absorb.items():
        B[s, col[t]] += p
    A = (sp.identity(m, format="csc") - Q.tocsc())
    sol = spla.splu(A).solve(B) if tails else np.zeros((m, 0))
    w = {t: float(sol[0, col[t]]) for t in tails}
    if conditional:
        total = sum(w.values())
        if total == 0:
            raise ValueError("conditioning event has probability zero")
        w = {t: v / total for t, v in w.items()}
    return w


# ---------------------------------------------------------------- entropy and drift audit


@dataclass
class AuditRun:
    start: int
    t: float
    trace_length: int
    neg_log_weight: float
    nice: bool
    reason: str = ""


@dataclass
class EntropyDriftAudit:
    runs: list
    t_grid: list
    d_hat: float
    h_hat: float
    d_intercept: float
    h_intercept: float
    params: dict

    def by_t(self, t) -> list:
        return [r for r in self.runs if r.t == t and r.nice]

    def band_fraction(self, t, C_lr: float, C_h: float) -> float:
        rs = self.by_t(t)
        if not rs:
            return float("nan")
        ok = [abs(r.trace_length - self.d_hat * t - self.d_intercept) <= C_lr * math.sqrt(t) and
              abs(r.neg_log_weight - self.h_hat * t - self.h_intercept) <= C_h * math.sqrt(t) for r in rs]
        return float(np.mean(ok))

    def quantiles(self, t, qs=(0.05, 0.25, 0.5, 0.75, 0.95)) -> dict:
        rs = self.by_t(t)
        a = np.array([(r.trace_length - self.d_hat * t) / math.sqrt(t) for r in rs])
        b = np.array([(r.neg_log_weight - self.h_hat * t) / math.sqrt(t) for r in rs])
        return {"trace": np.quantile(a, qs).tolist(), "weight": np.quantile(b, qs).tolist()}

    def fitted_band(self, t, coverage: float = 0.9) -> tuple[float, float]:
        """Smallest constants (C_lr, C_h) whose bands each hold the given fraction of runs."""
        rs = self.by_t(t)
        a = np.abs([r.trace_length - self.d_hat * t - self.d_intercept for r in rs]) / math.sqrt(t)
        b = np.abs([r.neg_log_weight - self.h_hat * t - self.h_intercept for r in rs]) / math.sqrt(t)
        return float(np.quantile(a, coverage)), float(np.quantile(b, coverage))


def entropy_drift_audit(spec: MixtureSpec, env: Environment, t_grid, R: int, L: int, runs: int,
                        trials: int = 2000, seed: int = 0, starts=None) -> EntropyDriftAudit:
    """|xi(X_0..X_t)| and -log w(xi) over runs from uniform starts, with slopes fitted across ``t_grid``.

    The slopes d_hat and h_hat come from least squares of the run means
    against t, so constant offsets from the start and the unfinished end of
    the trace drop out.  Runs whose trace weight is zero are flagged
    NOT_NICE and left out of the fits.
    """
    oracle = WeightOracle(spec, env, R, L, trials, seed)
    rng = task_rng(seed, 22)
    if starts is None:
        starts = rng.integers(0, 2 * spec.n, runs)
    starts = np.asarray(starts)
    out = []
    t_grid = list(t_grid)
    t_max = max(t_grid)
    trajs = sample_trajectories(spec, env, starts, t_max, seed, 0, 23)
    for x, traj in zip(starts.tolist(), trajs):
        for t in t_grid:
            part = Trajectory(traj.states[:int(2 * t) + 1], 0, spec.n)
            xi = loop_erase(part.lr_path())
            w = oracle.trace_weight(int(x), xi)
            if w > 0:
                out.append(AuditRun(int(x), t, len(xi), -math.log(w), True))
            else:
                out.append(AuditRun(int(x), t, len(xi), float("inf"), False, NOT_NICE))
    nice = [r for r in out if r.nice]
    ts = np.array([r.t for r in nice], dtype=float)
    if len(t_grid) > 1:
        d_slope, d_int = np.polyfit(ts, [r.trace_length for r in nice], 1)
        h_slope, h_int = np.polyfit(ts, [r.neg_log_weight for r in nice], 1)
    else:
        d_slope, d_int = np.mean([r.trace_length for r in nice]) / t_grid[0], 0.0
        h_slope, h_int = np.mean([r.neg_log_weight for r in nice]) / t_grid[0], 0.0
    params = {"R": R, "L": L, "runs": runs, "trials": trials, "seed": seed, "t_grid": t_grid}
    return EntropyDriftAudit(out, t_grid, float(d_slope), float(h_slope), float(d_int), float(h_int), params)


# ---------------------------------------------------------------- forward neighbourhood


@dataclass
class Piece:
    center: int
    parent: int
    entry: int
    depth: int
    states: list


@dataclass
class ForwardNeighbourhood:
    x: int
    l: int
    L: int
    R: int
    w_min: float
    pieces: list
    queue: dict
    order: list
    kappa: int
    kappa_trace: list
    W_trace: list
    cycles: int
    stopped: str
    children: dict = field(default_factory=dict)
    step_bound_violations: int = 0

    @property
    def states(self) -> set:
        return {s for p in self.pieces for s in p.states}

    def boundary(self, depth: int) -> set:
        """Vertices of pieces at long-range depth ``depth`` whose partners are not revealed."""
        out = set()
        for k, p in enumerate(self.pieces):
            if p.depth != depth:
                continue
            for s in p.states:
                if (k, s) not in self.children and not (k > 0 and s == p.center):
                    out.add((k, s))
        return out

    def path_edges(self, k: int) -> list:
        """Long-range edges (tail, head) from x down to piece k."""
        out = []
        while self.pieces[k].parent >= 0:
            p = self.pieces[k]
            out.append((p.entry, p.center))
            k = p.parent
        return out[::-1]


def explore_forward(spec: MixtureSpec, env: Environment, x: int, l: int, w_min: float, R: int, L: int,
                    oracle: WeightOracle | None = None, eps: float = 0.2, C: float = 1.0,
                    trials: int = 2000, seed: int = 0) -> ForwardNeighbourhood:
    """Priority exploration of the long-range ball of x by cumulative weight.

    Starts from the depth-L long-range ball; repeatedly picks the queued edge
    of largest cumulative weight (ties by tail state), reveals the partners
    of its depth-L descendants and either accepts them or, on a collision,
    prunes the queue.  ``kappa`` counts the long-range edges revealed.
    """
    if oracle is None:
        oracle = WeightOracle(spec, env, R, L, trials, seed)
    eta = env.eta
    balls = spec.forward_balls

    def sr_ball(c):
        lo, hi = balls.ptr[c], balls.ptr[c + 1]
        return [int(s) for s, d in zip(balls.states[lo:hi], balls.dist[lo:hi]) if d < R]

    pieces = [Piece(x, -1, -1, 0, sr_ball(x))]
    children: dict = {}
    owner = {s: 0 for s in pieces[0].states}
    kappa = 0
    cycle = False

    def out_edges(k):
        p = pieces[k]
        return [s for s in p.states if not (k > 0 and s == p.center)]

    # initial ball
    frontier = [0]
    for _ in range(L):
        nxt = []
        for k in frontier:
            for s in out_edges(k):
                c = int(eta[s])
                kappa += 1
                new = Piece(c, k, s, pieces[k].depth + 1, sr_ball(c))
                if any(v in owner for v in new.states):
                    cycle = True
                pieces.append(new)
                children[(k, s)] = len(pieces) - 1
                for v in new.states:
                    owner.setdefault(v, len(pieces) - 1)
                nxt.append(len(pieces) - 1)
        frontier = nxt
    fn = ForwardNeighbourhood(x, l, L, R, w_min, pieces, {}, [], kappa, [], [], 0, "", children)
    if cycle:
        fn.stopped = "initial ball not quasi-tree-like"
        fn.W_trace = [1.0]
        fn.pieces = pieces[:1]
        fn.children = {}
        return fn
    what: dict = {}  # (piece, tail) -> cumulative weight
    for s in out_edges(0):
        what[(0, s)] = oracle.weight(x, s)
    heap = [(-w, s, 0) for (k, s), w in what.items()]
    heapq.heapify(heap)
    W = 0.0
    bound = C * max(l, 1) * spec.Delta ** (R * L) / w_min if w_min > 0 else math.inf

    def ancestors(k):
        out = set()
        while k >= 0:
            out.add(k)
            k = pieces[k].parent
        return out

    def descendants_of_edge(k, s):
        c = children.get((k, s))
        out = set()
        stack = [c] if c is not None else []
        while stack:
            a = stack.pop()
            out.add(a)
            for v in pieces[a].states:
                b = children.get((a, v))
                if b is not None:
                    stack.append(b)
        return out

    while heap:
        negw, s, k = heapq.heappop(heap)
        if (k, s) not in what:
            continue
        w = -negw
        if pieces[k].depth > l or w < w_min:
            if w < w_min:
                break
            continue
        del what[(k, s)]
        fn.order.append(((k, s), w))
        # depth-L descendants of the edge sit at depth(k) + L; reveal their partners
        child = children[(k, s)]
        level = [child]
        for _ in range(L - 1):
            level = [children[(a, v)] for a in level for v in out_edges(a) if (a, v) in children]
        revealed = []
        new_owner: dict = {}
        hit_K = None
        hit_new = False
        for a in level:
            for v in out_edges(a):
                c = int(eta[v])
                kappa += 1
                new = Piece(c, a, v, pieces[a].depth + 1, sr_ball(c))
                clash = [u for u in new.states if u in owner]
                if clash:
                    hit_K = clash
                    break
                if any(u in new_owner for u in new.states):
                    hit_new = True
                    break
                for u in new.states:
                    new_owner[u] = True
                revealed.append(new)
            if hit_K or hit_new:
                break
        fn.kappa_trace.append(kappa)
        if w > C * max(l, 1) * spec.Delta ** (R * L) / kappa:
            fn.step_bound_violations += 1
        if kappa > 2 * bound:
            raise BudgetError(f"kappa={kappa} exceeds twice the bound {bound:.3g}")
        if hit_K or hit_new:
            fn.cycles += 1
            W += min(w, eps / 2)
            if hit_K:
                zs = {owner[u] for u in hit_K}
                bad = set()
                for z in zs:
                    bad |= ancestors(z)
                for key in list(what):
                    kk, ss = key
                    desc = descendants_of_edge(kk, ss)
                    if kk in bad or desc & zs:
                        del what[key]
        else:
            for new in revealed:
                pieces.append(new)
                children[(new.parent, new.entry)] = len(pieces) - 1
                for u in new.states:
                    owner.setdefault(u, len(pieces) - 1)
            head = pieces[child].center
            for v in out_edges(child):
                what[(child, v)] = w * oracle.weight(head, v, conditional=True)
                heapq.heappush(heap, (-what[(child, v)], v, child))
        fn.W_trace.append(W)
    fn.pieces = pieces
    fn.children = children
    fn.queue = dict(what)
    fn.kappa = kappa
    fn.stopped = fn.stopped or "no admissible edge"
    return fn


# ---------------------------------------------------------------- backward neighbourhood


@dataclass
class BackwardNeighbourhood:
    y: int
    steps: float
    l: int
    B: set
    lr_distance: dict
    F_prime: set
    F: set
    path_counts: dict
    F_of: dict


class BackwardIndex:
    """Distances to a fixed endpoint y, shared by every backward neighbourhood B(r, r + s, l) of y.

    ``tick_distance[z]`` is the least number of ticks (half steps) after
    which the walk from z can sit at y; ``lr_distance[z]`` is the least
    number of long-range edges on a path from z to y, up to ``l_max``.
    """

    def __init__(self, spec: MixtureSpec, env: Environment, y: int, max_steps: float, l_max: int):
        self.spec, self.env, self.y = spec, env, y
        self.max_steps = max_steps
        self.l_max = l_max
        lift = build_lifted_kernel(spec, env)
        tick_graph = (lift.half + spec.P).T.tocsr()
        limit = int(math.ceil(2 * max_steps))
        dist = {y: 0}
        frontier = [y]
        for d in range(1, limit + 1):
            nxt = []
            for u in frontier:
                for v in tick_graph.indices[tick_graph.indptr[u]:tick_graph.indptr[u + 1]]:
                    v = int(v)
                    if v not in dist:
                        dist[v] = d
                        nxt.append(v)
            frontier = nxt
        self.tick_distance = dist
        self.lr_distance = backward_lr_distances(spec, env, y, l_max)
        self._cache: dict = {}

    def neighbourhood(self, steps: float, l: int, L: int, R: int) -> BackwardNeighbourhood:
        key = (steps, l, L, R)
        if key not in self._cache:
            self._cache[key] = self._build(steps, l, L, R)
        return self._cache[key]

    def _build(self, steps, l, L, R) -> BackwardNeighbourhood:
        if steps > self.max_steps or l > self.l_max:
            raise ValueError("neighbourhood beyond the indexed range")
        spec, env = self.spec, self.env
        ticks = int(round(2 * steps))
        ball = [z for z, d in self.tick_distance.items() if d <= ticks]
        bound = growth_bound(max(spec.Delta, 2), ticks)
        if len(ball) > bound:
            raise BudgetError(f"backward ball of size {len(ball)} above the growth bound {bound:.0f}")
        lr = self.lr_distance
        B = {z for z in ball if lr.get(z, math.inf) <= l}
        eta = env.eta
        balls = spec.forward_balls
        # number of distinct shortest long-range edge sequences from z to y inside B
        counts: dict = {}
        nxt_edge: dict = {}
        for z in sorted(B, key=lambda v: lr[v]):
            d = lr[z]
            if d == 0:
                counts[z] = 1
                continue
            total = 0
            first = None
            for u in balls.ball(z):
                u = int(u)
                if u not in B or lr.get(u) != d:
                    continue
                v = int(eta[u])
                if v in B and lr.get(v) == d - 1:
                    total += counts.get(v, 0)
                    first = (u, v)
            counts[z] = total
            nxt_edge[z] = first
        tree_like: dict = {}
        F_prime, F, F_of = set(), set(), {}
        for z in B:
            if lr[z] != l or counts.get(z) != 1:
                continue
            path = []
            v = z
            ok = True
            while lr[v] > 0:
                e = nxt_edge[v]
                path.append(e)
                if v not in tree_like:
                    tree_like[v] = unfold_ball(spec, env, v, L, "lr", R, within=B).cycle is None
                if not tree_like[v]:
                    ok = False
                    break
                v = e[1]
            if not ok:
                continue
            F_prime.add(z)
            if len(path) >= L:
                F.add(path[L - 1])
                F_of[z] = path[L - 1]
        return BackwardNeighbourhood(self.y, steps, l, B, {z: lr[z] for z in B}, F_prime, F, counts, F_of)


def backward_lr_distances(spec: MixtureSpec, env: Environment, y: int, l: int, within=None) -> dict:
    """Least number of long-range edges on a path from z to y, for values up to l (0-1 BFS)."""
    back = spec.P.T.tocsr()
    eta = env.eta
    dist = {y: 0}
    dq = deque([y])
    while dq:
        u = dq.popleft()
        d = dist[u]
        for v in back.indices[back.indptr[u]:back.indptr[u + 1]]:
            v = int(v)
            if (within is None or v in within) and dist.get(v, math.inf) > d:
                dist[v] = d
                dq.appendleft(v)
        v = int(eta[u])
        if d + 1 <= l and (within is None or v in within) and dist.get(v, math.inf) > d + 1:
            dist[v] = d + 1
            dq.append(v)
    return dist


def explore_backward(spec: MixtureSpec, env: Environment, y: int, r: float, s: float, l: int, L: int = 1,
                     R: int | None = None) -> BackwardNeighbourhood:
    """B = (states that can reach y within r + s steps) intersected with (long-range distance <= l to y).

    F' holds the states of B at long-range distance exactly l whose shortest
    long-range path to y is unique and has quasi-tree-like neighbourhoods in
    B; F holds, for each of them, the L-th long-range edge of that path.
    """
    if R is None:
        R = int(spec.forward_balls.dist.max()) + 1
    return BackwardIndex(spec, env, y, r + s, l).neighbourhood(r + s, l, L, R)


# ---------------------------------------------------------------- nice paths


@dataclass(frozen=True)
class NicePathConfig:
    """Scales of the nice-path decomposition.

    ``s``, ``t``: lengths of the final segment and of the whole path;
    ``l1``: long-range depth that ends the first segment; ``l_window``:
    admissible long-range lengths of the final segment; ``C2``, ``C3``:
    window of the middle segment in units of sqrt(log n).
    """

    s: float
    t: float
    l1: int
    w_min: float
    w_max: float
    R: int
    L: int
    M: float
    C2: float = 3.0
    C3: float = 0.5
    l_window: tuple = (0, 0)

    def __post_init__(self):
        if not self.s < self.t:
            raise ValueError("need s < t")
        if not self.w_min < self.w_max:
            raise ValueError("need w_min < w_max")

    @classmethod
    def from_constants(cls, n: int, h: float, d: float, Delta: int, R: int, L: int, M: float,
                       C0: float = 1.0, C1: float = 1.0, C2: float = 3.0, C3: float = 0.5, C4: float = 1.0,
                       C5: float = 1.0, Ch: float = 1.0, s: float | None = None) -> "NicePathConfig":
        logn = math.log(n)
        if s is None:
            s = max(1, min(math.floor(logn / (10 * math.log(Delta))), math.floor(logn / (10 * h))))
        t = math.floor(logn / h + C0 * math.sqrt(logn))
        l1 = max(1, math.floor(d * (t - s) - C4 * math.sqrt(t)))
        w_min = math.exp(-h * (t - s) - Ch * math.sqrt(t))
        w_max = math.exp(-h * t + C1 * math.sqrt(t))
        lo = max(0, math.ceil(d * s - C5 * math.sqrt(s)))
        hi = max(lo, math.floor(d * s + C5 * math.sqrt(s)))
        return cls(s, t, l1, w_min, w_max, R, L, M, C2, C3, (lo, hi))


def nice_defaults() -> dict:
    """Versioned default knobs for nice-path audits."""
    return json.loads(resources.files("permix").joinpath("data/nice_defaults.json").read_text())


@dataclass
class NiceVerdict:
    nice: bool
    reasons: list
    split: tuple = ()
    r: float = math.nan
    l: int = -1


GAMMA = "GAMMA"
NO_P1 = "NO_P1"
NO_SPLIT = "NO_SPLIT"
L_WINDOW = "L_WINDOW"
P2_LENGTH = "P2_LENGTH"
P2_NO_REGENERATION = "P2_NO_REGENERATION"
P2_ENTERS_B = "P2_ENTERS_B"
P3_START = "P3_START"
P3_OUTSIDE_B = "P3_OUTSIDE_B"
P3_REGENERATION = "P3_REGENERATION"
WEIGHT = "WEIGHT"


def first_segment(trajectory: Trajectory, K: ForwardNeighbourhood, depth: int):
    """Index of the first arrival in a piece of K at long-range depth ``depth``, following the piece tree.

    Returns (index, piece), or (None, reason) if the walk leaves K first.
    """
    states = trajectory.states
    if int(states[0]) != K.x:
        return None, "start"
    piece = 0
    for i in range(1, states.size):
        a, b = int(states[i - 1]), int(states[i])
        if (a >= trajectory.n_side) != (b >= trajectory.n_side):
            p = K.pieces[piece]
            if piece > 0 and a == p.center:
                piece = p.parent
            elif (piece, a) in K.children:
                piece = K.children[(piece, a)]
            else:
                return None, "left K"
            if K.pieces[piece].depth == depth:
                return i, piece
        elif b not in K.pieces[piece].states:
            return None, "left K"
    return None, "never reached"


def nice_path_check(trajectory: Trajectory, spec: MixtureSpec, env: Environment, K: ForwardNeighbourhood,
                    config: NicePathConfig, oracle: WeightOracle, backward: BackwardIndex | None = None,
                    p3_start: int | None = None) -> NiceVerdict:
    """Test whether a length-t trajectory is nice; failures come back as reason codes.

    The first segment ends on arrival at long-range depth l1 inside K.  The
    final segment starts right after the last regeneration crossing that
    precedes the final s steps, which fixes r (its length minus s) and l
    (the long-range distance of its start to the endpoint).  ``p3_start``
    overrides that split.
    """
    reasons = []
    pc = PathClassConfig(config.R, config.L, config.M)
    if not gamma_membership(trajectory, spec, env, pc).member:
        reasons.append(GAMMA)
    states = trajectory.states
    last = states.size - 1
    y = int(states[-1])
    end1, piece = first_segment(trajectory, K, config.l1)
    if end1 is None:
        return NiceVerdict(False, reasons + [NO_P1])
    scan = regeneration_edges(trajectory, env, config.L, None)
    regen_idx = sorted(tick - trajectory.tick0 for tick, _ in scan.edges)
    if p3_start is None:
        cut = last - int(round(2 * config.s))
        before = [i for i in regen_idx if end1 < i <= cut]
        if not before:
            return NiceVerdict(False, reasons + [NO_SPLIT], (end1,))
        start3 = before[-1]
    else:
        start3 = p3_start
    r = (last - start3) / 2 - config.s
    if not (start3 > end1 and config.L <= r <= config.M):
        return NiceVerdict(False, reasons + [NO_SPLIT], (end1, start3), r)
    if backward is None:
        backward = BackwardIndex(spec, env, y, config.M + config.s, config.l_window[1])
    lo, hi = config.l_window
    l = backward.lr_distance.get(int(states[start3]), math.inf)
    if not lo <= l <= hi:
        return NiceVerdict(False, reasons + [L_WINDOW], (end1, start3), r)
    Bn = backward.neighbourhood(r + config.s, int(l), config.L, config.R)
    logn = math.log(spec.n)
    len2 = (start3 - end1) / 2
    if not config.C3 * math.sqrt(logn) <= len2 <= config.C2 * math.sqrt(logn):
        reasons.append(P2_LENGTH)
    K_edges = set()
    for p in K.pieces[1:]:
        K_edges.add((p.entry, p.center))
        K_edges.add((p.center, p.entry))
    limit = end1 + int(round(2 * config.M * config.L))
    if not any(end1 < i <= min(limit, start3) and (int(states[i - 1]), int(states[i])) not in K_edges
               for i in regen_idx):
        reasons.append(P2_NO_REGENERATION)
    if any(int(v) in Bn.B for v in states[end1:start3]):
        reasons.append(P2_ENTERS_B)
    if int(states[start3]) not in Bn.F_prime:
        reasons.append(P3_START)
    if any(int(v) not in Bn.B for v in states[start3:]):
        reasons.append(P3_OUTSIDE_B)
    if any(start3 < i <= start3 + int(round(2 * r)) for i in regen_idx):
        reasons.append(P3_REGENERATION)
    # w_E: weight of the K-path up to its edge left in the exploration queue
    keys = []
    k = piece
    while K.pieces[k].parent >= 0:
        keys.append((K.pieces[k].parent, K.pieces[k].entry))
        k = K.pieces[k].parent
    keys.reverse()
    xi1 = [(a, int(env.eta[a])) for _, a in keys]
    cut_e = next((i + 1 for i, key in enumerate(keys) if key in K.queue), max(1, len(xi1) - config.L + 1))
    w_E = oracle.trace_weight(K.x, xi1[:cut_e])
    xi3 = loop_erase(Trajectory(states[start3:], 0, spec.n).lr_path())
    w_F = 1.0
    f = Bn.F_of.get(int(states[start3]))
    if f is not None and f in xi3:
        i = xi3.index(f)
        rest = xi3[i + 1:len(xi3) - config.L + 1]
        if rest:
            w_F = oracle.trace_weight(f[1], rest)
    if w_E * w_F > config.w_max:
        reasons.append(WEIGHT)
    return NiceVerdict(not reasons, reasons, (end1, start3), r, int(l))


@dataclass
class NiceAudit:
    verdicts: list
    config: NicePathConfig
    starts: list

    @property
    def fraction(self) -> float:
        return float(np.mean([v.nice for v in self.verdicts])) if self.verdicts else float("nan")

    def reason_counts(self) -> Counter:
        return Counter(code for v in self.verdicts for code in v.reasons)


def nice_audit(spec: MixtureSpec, env: Environment, config: NicePathConfig, starts, runs_per_start: int,
               trials: int = 2000, seed: int = 0, eps: float = 0.2) -> NiceAudit:
    """Nice fraction of length-t trajectories from the given starts."""
    oracle = WeightOracle(spec, env, config.R, config.L, trials, seed)
    verdicts = []
    backs: dict = {}
    for i, x in enumerate(starts):
        K = explore_forward(spec, env, int(x), config.l1, config.w_min, config.R, config.L, oracle, eps)
        trajs = sample_trajectories(spec, env, [int(x)] * runs_per_start, config.t, seed, 0, 40 + i)
        for traj in trajs:
            y = int(traj.states[-1])
            if y not in backs:
                backs[y] = BackwardIndex(spec, env, y, config.M + config.s, config.l_window[1])
            verdicts.append(nice_path_check(traj, spec, env, K, config, oracle, backs[y]))
    return NiceAudit(verdicts, config, list(starts))


# ---------------------------------------------------------------- pi-hat


@dataclass
class PiHatEstimate:
    pihat: np.ndarray
    tv: float
    mass: float
    accepted: int
    proposed: int
    acceptance: float
    mean_T1_capped: float
    params: dict


def first_regeneration_times(states: np.ndarray, eta, n_side: int, L: int, tick0: int = 1) -> float:
    """Time (tick / 2) of the first qualifying long-range crossing of a path, or inf."""
    idx, codes = eng.classify_crossings(states, eta, n_side, L, states.size)
    hit = idx[codes == 1]
    return (tick0 + float(hit[0])) / 2 if hit.size else math.inf


def estimate_pihat(spec: MixtureSpec, env: Environment, samples: int, L: int, M: float, s0: int,
                   nu=None, seed: int = 0, rao_blackwell: bool = True, min_acceptance: float = 1e-3,
                   lookahead: float | None = None, pi=None) -> PiHatEstimate:
    """Renewal-type approximation of the stationary law.

    Starts u are drawn from ``nu`` (uniform if None), the walk begins at
    time 1/2 and is kept only if its trace reaches length L before visiting
    eta(u).  With T1 the first regeneration time, the estimator accumulates
    the law of X_(r + s0) over r < T1 <= M and divides by the mean of T1 ^ M.
    With ``rao_blackwell`` the position at an integer time past the decision
    is pushed forward with the exact kernel instead of being sampled.
    """
    if M <= 0:
        raise ValidationError("M must be positive")
    K = build_lifted_kernel(spec, env).matrix
    N = 2 * spec.n
    eta = np.asarray(env.eta, dtype=np.int64)
    fm = walker_tables(spec, env)
    rng = task_rng(seed, 31)
    look = 20 * M if lookahead is None else lookahead
    r_max = int(math.floor(M))
    decide = int(math.ceil(M + look))  # integer time after which T1 <= M is settled
    if rao_blackwell and decide > s0:
        s0_eff = decide
    else:
        s0_eff = s0
    horizon = decide if rao_blackwell else max(decide, r_max + s0_eff)
    n_ticks = 2 * horizon - 1  # from tick 1 to tick 2 * horizon
    p = None if nu is None else np.asarray(nu, dtype=float) / np.sum(nu)
    batch = min(samples, 20_000)
    accepted = proposed = 0
    numer_rb = np.zeros((r_max + 1, N))
    numer = np.zeros(N)
    t1_sum = 0.0
    task = 0
    while accepted < samples:
        task += 1
        m = min(batch, 2 * (samples - accepted) + 16)
        starts = rng.choice(N, m, p=p) if p is not None else rng.integers(0, N, m)
        out = np.empty((m, n_ticks + 1), dtype=np.int64)
        ok = np.empty(m, dtype=np.bool_)
        eng.fin_regeneration_runs(fm, starts.astype(np.int64), L, n_ticks,
                                  np.array([task_seed64(seed, task, 32)], dtype=np.uint64), out, ok)
        proposed += m
        for w in np.flatnonzero(ok):
            if accepted >= samples:
                break
            accepted += 1
            path = out[w]
            T1 = first_regeneration_times(path, eta, spec.n, L, 1)
            t1_sum += min(T1, M)
            if T1 > M:
                continue
            count = int(math.ceil(T1))  # r = 0 .. count - 1 satisfy r < T1
            count = min(count, r_max + 1)
            if rao_blackwell:
                anchor = int(path[2 * horizon - 1])
                numer_rb[:count, anchor] += 1
            else:
                for r in range(count):
                    numer[int(path[2 * (r + s0_eff) - 1])] += 1
        if proposed >= 1000 and accepted / proposed < min_acceptance:
            raise BudgetError(f"acceptance {accepted / proposed:.2e} below {min_acceptance}")
    if rao_blackwell:
        # sum_r m_r K^(r + s0 - horizon), evaluated by Horner's rule
        KT = K.T.tocsr()
        vec = numer_rb[r_max].copy()
        for r in range(r_max - 1, -1, -1):
            vec = KT @ vec + numer_rb[r]
        for _ in range(s0_eff - horizon):
            vec = KT @ vec
        numer = vec
    mean_T = t1_sum / accepted
    pihat = numer / accepted / mean_T
    if pi is None:
        pi = stationary_distribution(K)
    params = {"samples": samples, "L": L, "M": M, "s0": s0_eff, "lookahead": look, "seed": seed,
              "rao_blackwell": rao_blackwell, "nu": "uniform" if nu is None else "given"}
    return PiHatEstimate(pihat, tv_distance(pihat / pihat.sum(), pi), float(pihat.sum()), accepted, proposed,
                         accepted / proposed, mean_T, params)
