"""Long-range structure of paths: loop erasure, backtracking, deviation, regeneration."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from permix import _engine as eng
from permix.core import BudgetError, Environment, MixtureSpec, walker_tables
from permix.rng import task_seed64

Edge = tuple  # oriented long-range edge (tail, head) with head = eta(tail)


def reverse(edge: Edge) -> Edge:
    return (edge[1], edge[0])


@dataclass
class Trajectory:
    """A walk recorded tick by tick, starting at ``tick0``."""

    states: np.ndarray
    tick0: int = 0
    n_side: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        if not self.n_side:
            raise ValueError("n_side is required to tell the two sides apart")

    @property
    def ticks(self) -> np.ndarray:
        return self.tick0 + np.arange(self.states.size)

    @property
    def duration(self) -> float:
        """Length in time units (two ticks per unit)."""
        return (self.states.size - 1) / 2

    def crossing_indices(self) -> np.ndarray:
        return eng.crossing_table(self.states, self.n_side)

    @property
    def lr_crossings(self) -> list[tuple[int, Edge]]:
        idx = self.crossing_indices()
        return [(int(self.tick0 + i), (int(self.states[i - 1]), int(self.states[i]))) for i in idx]

    def lr_path(self) -> list[Edge]:
        return [e for _, e in self.lr_crossings]

    def dump(self) -> str:
        crossed = set(self.crossing_indices().tolist())
        return "".join(f"{self.tick0 + i} {s} {int(i in crossed)}\n" for i, s in enumerate(self.states.tolist()))


def sample_trajectory(spec: MixtureSpec, env: Environment, x0: int, n_steps: float, seed: int,
                      tick0: int = 0, task: int = 0) -> Trajectory:
    """Simulate ``n_steps`` time units (2 * n_steps ticks) of the finite chain."""
    return sample_trajectories(spec, env, [x0], n_steps, seed, tick0, task)[0]


def sample_trajectories(spec, env, starts, n_steps, seed, tick0=0, task=0) -> list[Trajectory]:
    fm = walker_tables(spec, env)
    n_ticks = int(round(2 * n_steps))
    starts = np.asarray(starts, dtype=np.int64)
    out = np.empty((starts.size, n_ticks + 1), dtype=np.int64)
    rng = np.array([task_seed64(seed, task)], dtype=np.uint64)
    eng.fin_walks(fm, starts, tick0, n_ticks, rng, out)
    return [Trajectory(row, tick0, spec.n) for row in out]


def loop_erase(lr_path) -> list[Edge]:
    """Remove adjacent (e, reverse(e)) pairs until none remain."""
    stack: list[Edge] = []
    for e in lr_path:
        e = tuple(e)
        if stack and stack[-1] == reverse(e):
            stack.pop()
        else:
            stack.append(e)
    return stack


def is_non_backtracking(xi) -> bool:
    return all(tuple(b) != reverse(tuple(a)) for a, b in zip(xi, xi[1:]))


def detect_backtrack(crossings, L: int):
    """First tick at which L distinct edges are immediately followed by their reversals in mirror order.

    ``crossings`` is a list of (tick, edge).  Returns None when no backtrack occurs.
    """
    edges = [tuple(e) for _, e in crossings]
    for end in range(2 * L - 1, len(edges)):
        i = end - 2 * L + 1
        window = edges[i:i + L]
        if len(set(window)) < L:
            continue
        if all(edges[i + L + j] == reverse(edges[i + L - 1 - j]) for j in range(L)):
            return crossings[end][0]
    return None


def detect_deviation(trajectory: Trajectory, spec: MixtureSpec, env: Environment, R: int):
    """First tick with small-range distance >= R from the current center, or None."""
    balls = spec.forward_balls
    i = eng.deviation_index(trajectory.states, np.asarray(env.eta), spec.n, balls.ptr, balls.states, balls.dist, R)
    return None if i < 0 else int(trajectory.tick0 + i)


class CrossingStatus(Enum):
    REPEATED = 0
    QUALIFIES = 1
    RETURNED = 2
    UNRESOLVED = 3
    PATH_ENDED = 4


@dataclass
class RegenerationScan:
    """Status of every long-range crossing; ``edges`` holds the qualifying ones outside the final window."""

    crossings: list
    statuses: list
    edges: list
    final_window_start: int
    unresolved: int
    warning: str = ""


def regeneration_edges(trajectory: Trajectory, env: Environment, L: int, W: float | None = None) -> RegenerationScan:
    """Crossings that qualify as regeneration edges with horizon L.

    A first crossing of an edge qualifies when the walk then reaches
    long-range distance L from the first endpoint before visiting it again.
    The search looks ``W`` time units ahead (unbounded if None); crossings in
    the final W-window are kept in ``crossings`` but left out of ``edges``.
    """
    w_ticks = trajectory.states.size if W is None else int(2 * W)
    idx, codes = eng.classify_crossings(trajectory.states, np.asarray(env.eta), trajectory.n_side, L, w_ticks)
    last = trajectory.states.size - 1
    cut = last - (0 if W is None else w_ticks)
    crossings = []
    statuses = []
    edges = []
    for i, c in zip(idx.tolist(), codes.tolist()):
        tick = trajectory.tick0 + i
        edge = (int(trajectory.states[i - 1]), int(trajectory.states[i]))
        status = CrossingStatus(c)
        crossings.append((tick, edge))
        statuses.append(status)
        if status is CrossingStatus.QUALIFIES and i <= cut:
            edges.append((tick, edge))
        elif W is None and status is CrossingStatus.PATH_ENDED:
            edges.append((tick, edge))
    unresolved = sum(s is CrossingStatus.UNRESOLVED for s in statuses)
    warning = "lookahead shorter than some return times" if unresolved else ""
    return RegenerationScan(crossings, statuses, edges, trajectory.tick0 + cut, unresolved, warning)


@dataclass(frozen=True)
class PathClassConfig:
    R: int
    L: int
    M: float

    def __post_init__(self):
        if self.R < 1 or self.L < 1 or self.M < 1:
            raise ValueError("R, L and M must be at least 1")

    @classmethod
    def for_size(cls, n: int, c_r: float = 2.0, c_l: float = 2.0, kappa: float = 2.0) -> "PathClassConfig":
        """R = ceil(c_r log log n), L = ceil(c_l log log n), M = (log log n)^kappa."""
        ll = math.log(math.log(n))
        return cls(max(1, math.ceil(c_r * ll)), max(1, math.ceil(c_l * ll)), max(1.0, ll ** kappa))


@dataclass
class GammaVerdict:
    member: bool
    reasons: list = field(default_factory=list)


DEVIATE = "DEVIATE"
BACKTRACK = "BACKTRACK"
NO_REGENERATION = "NO_REGENERATION"


def gamma_membership(trajectory: Trajectory, spec: MixtureSpec, env: Environment,
                     config: PathClassConfig) -> GammaVerdict:
    """Membership of a finite path in the typical class: no deviation, no backtrack, regenerations every M."""
    reasons = []
    if trajectory.states.size <= 1:
        return GammaVerdict(True)
    if detect_deviation(trajectory, spec, env, config.R) is not None:
        reasons.append(DEVIATE)
    if detect_backtrack(trajectory.lr_crossings, config.L) is not None:
        reasons.append(BACKTRACK)
    span = int(round(2 * config.M))
    last = trajectory.states.size - 1
    if span < last:
        scan = regeneration_edges(trajectory, env, config.L, None)
        marks = np.array(sorted(t - trajectory.tick0 for t, _ in scan.edges), dtype=np.int64)
        for start in range(0, last - span + 1):
            lo = np.searchsorted(marks, start, side="left")
            if lo >= marks.size or marks[lo] > start + span:
                reasons.append(NO_REGENERATION)
                break
    return GammaVerdict(not reasons, reasons)


# ---------------------------------------------------------------- neighbourhoods


@dataclass
class Unfolding:
    """Explored ball seen as a tree of small-range pieces.

    Pieces are numbered in discovery order; ``piece_states[k]`` lists the
    states of piece k and ``piece_parent[k]`` its parent piece.
    """

    piece_center: list
    piece_parent: list
    piece_depth: list
    piece_states: list
    node_dist: dict
    cycle: tuple | None

    @property
    def size(self) -> int:
        return len(self.node_dist)

    @property
    def states(self) -> set:
        return {s for states in self.piece_states for s in states}


def growth_bound(Delta: int, r: int, R: int | None = None) -> float:
    """Ball size bounds: graph balls (R None) and long-range balls restricted to small-range radius R."""
    if Delta == 1:
        return r + 1 if R is None else (r + 1)
    if R is None:
        return (Delta ** (r + 1) - 1) / (Delta - 1)
    base = Delta ** R
    return base * (base ** (r + 1) - 1) / (base - 1)


def unfold_ball(spec: MixtureSpec, env: Environment, x: int, r: int, mode: str = "lr", R: int | None = None,
                budget: int | None = None, within=None) -> Unfolding:
    """Explore a ball around x as a tree of pieces and record the first repeated state.

    ``mode="graph"``: every small-range or long-range edge costs one and the
    radius bounds the total cost.  ``mode="lr"``: the radius bounds the number
    of long-range edges and pieces are cut at small-range distance R from
    their entry point.  ``within`` restricts the exploration to a set of states.
    """
    eta = env.eta
    P = spec.P
    indptr, indices = P.indptr, P.indices
    balls = spec.forward_balls
    if mode not in ("graph", "lr"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "lr" and R is None:
        raise ValueError("long-range balls need R")
    centers = [x]
    parents = [-1]
    depths = [0]
    pieces: list[list[int]] = [[]]
    owner: dict[int, int] = {}
    dist: dict[tuple, int] = {}
    cycle = None
    queue = deque()

    def add(piece, state, d):
        nonlocal cycle
        if (piece, state) in dist or (within is not None and state not in within):
            return
        if state in owner and owner[state] != piece and cycle is None:
            cycle = (owner[state], piece, state)
        owner.setdefault(state, piece)
        dist[(piece, state)] = d
        pieces[piece].append(state)
        queue.append((piece, state))
        if budget is not None and len(dist) > budget:
            raise BudgetError(f"ball exceeded {budget} vertices")

    add(0, x, 0)
    while queue:
        piece, v = queue.popleft()
        d = dist[(piece, v)]
        if mode == "graph" and d >= r:
            continue
        center = centers[piece]
        for w in indices[indptr[v]:indptr[v + 1]]:
            w = int(w)
            if w == v:
                continue
            if mode == "lr" and balls.distance(center, w) >= R:
                continue
            add(piece, w, d + 1 if mode == "graph" else d)
        # the matching edge: back to the parent piece or into a child piece
        partner = int(eta[v])
        if piece > 0 and v == center:
            if mode == "graph":
                add(parents[piece], partner, d + 1)
            continue
        if mode == "lr" and depths[piece] >= r:
            continue
        if within is not None and partner not in within:
            continue
        centers.append(partner)
        parents.append(piece)
        depths.append(depths[piece] + 1)
        pieces.append([])
        add(len(centers) - 1, partner, d + 1 if mode == "graph" else 0)
    return Unfolding(centers, parents, depths, pieces, dist, cycle)


def quasi_tree_like(spec: MixtureSpec, env: Environment, x: int, r: int, mode: str = "lr", R: int | None = None,
                    check_budget: bool = True) -> bool:
    """True when the ball around x contains no long-range cycle."""
    budget = None
    if check_budget:
        Delta = max(spec.Delta, 2)
        budget = int(growth_bound(Delta, r, None if mode == "graph" else R))
    return unfold_ball(spec, env, x, r, mode, R, budget).cycle is None
