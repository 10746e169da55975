"""Deterministic chain data, the random matching, and the lifted/projected kernels.

States are 0-based: the first side is ``0..n-1`` and the second side is
``n..2n-1``.  Time is counted in integer ticks; an even tick is followed by
the matching (half) step and an odd tick by a step of the block chain.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from permix.rng import task_rng

ROW_TOL = 1e-12


class ValidationError(ValueError):
    """Input data violates a structural requirement."""


class BudgetError(RuntimeError):
    """A computation exceeded its configured work budget."""


def as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


@dataclass(frozen=True)
class StochasticMatrix:
    """Sparse row-stochastic matrix with exact rational entries.

    ``entries`` holds ``(row, col, prob)`` triplets sorted row-major; zero
    entries are dropped.
    """

    n: int
    entries: tuple

    def __post_init__(self):
        cleaned = {}
        for r, c, v in self.entries:
            r, c, v = int(r), int(c), as_fraction(v)
            if not (0 <= r < self.n and 0 <= c < self.n):
                raise ValidationError(f"entry ({r},{c}) outside a {self.n}x{self.n} matrix")
            if v < 0 or v > 1:
                raise ValidationError(f"entry ({r},{c}) = {v} not in [0,1]")
            if v:
                cleaned[(r, c)] = cleaned.get((r, c), Fraction(0)) + v
        object.__setattr__(self, "entries", tuple((r, c, v) for (r, c), v in sorted(cleaned.items())))
        sums = np.zeros(self.n)
        for r, _, v in self.entries:
            sums[r] += float(v)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_TOL)
        if bad.size:
            raise ValidationError(f"row {bad[0]} sums to {sums[bad[0]]!r}, not 1")

    @classmethod
    def from_dense(cls, rows: Sequence[Sequence]) -> "StochasticMatrix":
        n = len(rows)
        return cls(n, tuple((i, j, v) for i, row in enumerate(rows) for j, v in enumerate(row) if v))

    @cached_property
    def csr(self) -> sp.csr_matrix:
        if not self.entries:
            return sp.csr_matrix((self.n, self.n))
        r, c, v = zip(*self.entries)
        return sp.csr_matrix((np.array([float(x) for x in v]), (r, c)), shape=(self.n, self.n))

    @cached_property
    def row_nnz(self) -> np.ndarray:
        return np.diff(self.csr.indptr)

    @cached_property
    def col_nnz(self) -> np.ndarray:
        return np.bincount(self.csr.indices, minlength=self.n)

    def exact_rows(self) -> list[dict[int, Fraction]]:
        rows: list[dict[int, Fraction]] = [{} for _ in range(self.n)]
        for r, c, v in self.entries:
            rows[r][c] = v
        return rows

    def min_positive(self) -> Fraction:
        return min(v for _, _, v in self.entries)


@dataclass(frozen=True)
class MixingTable:
    """The mixing probability p(x, y) for x on the first side and y on the second.

    States are grouped into classes on each side and ``values[a][b]`` is p for
    a first-side state of class ``a`` matched with a second-side state of class
    ``b``.  For a second-side state x, p(x, y) = 1 - p(y, x).
    """

    classes1: tuple
    classes2: tuple
    values: tuple

    def __post_init__(self):
        vals = tuple(tuple(as_fraction(v) for v in row) for row in self.values)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "classes1", tuple(int(c) for c in self.classes1))
        object.__setattr__(self, "classes2", tuple(int(c) for c in self.classes2))
        if len(self.classes1) != len(self.classes2):
            raise ValidationError("class vectors of the two sides differ in length")
        for row in vals:
            if len(row) != len(vals[0]):
                raise ValidationError("ragged mixing table")
            for v in row:
                if v < 0 or v > 1:
                    raise ValidationError(f"mixing probability {v} not in [0,1]")
        if self.classes1 and (max(self.classes1) >= len(vals) or max(self.classes2) >= len(vals[0])):
            raise ValidationError("class index outside the mixing table")

    @classmethod
    def constant(cls, n: int, value) -> "MixingTable":
        return cls((0,) * n, (0,) * n, ((value,),))

    @property
    def is_constant(self) -> bool:
        return len(self.values) == 1 and len(self.values[0]) == 1

    @property
    def n(self) -> int:
        return len(self.classes1)

    def p(self, x: int, y: int) -> Fraction:
        n = self.n
        if x < n <= y:
            return self.values[self.classes1[x]][self.classes2[y - n]]
        if y < n <= x:
            return 1 - self.values[self.classes1[y]][self.classes2[x - n]]
        raise ValueError("p is defined only across the two sides")

    def q(self, x: int, y: int) -> Fraction:
        return 1 - self.p(x, y)

    @cached_property
    def _float_table(self) -> np.ndarray:
        return np.array([[float(v) for v in row] for row in self.values])

    def p_array(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Vectorized p(x, y) as floats."""
        x = np.asarray(x)
        y = np.asarray(y)
        n = self.n
        c1 = np.asarray(self.classes1)
        c2 = np.asarray(self.classes2)
        first = x < n
        a = np.where(first, x, y)
        b = np.where(first, y, x) - n
        val = self._float_table[c1[a], c2[b]]
        return np.where(first, val, 1.0 - val)


@dataclass(frozen=True)
class MixtureSpec:
    """Everything of the model except the random matching."""

    n: int
    P1: StochasticMatrix
    P2: StochasticMatrix
    p: MixingTable
    delta_floor: Fraction
    Delta: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "delta_floor", as_fraction(self.delta_floor))
        if self.P1.n != self.n or self.P2.n != self.n or self.p.n != self.n:
            raise ValidationError("dimension mismatch between n, P1, P2 and p")
        positives = [v for _, _, v in self.P1.entries + self.P2.entries]
        for row in self.p.values:
            positives += [v for v in row if v] + [1 - v for v in row if v != 1]
        low = min(positives)
        if low < self.delta_floor:
            raise ValidationError(f"entry {low} below the declared floor {self.delta_floor}")

    @cached_property
    def P(self) -> sp.csr_matrix:
        """Block-diagonal chain on both sides."""
        return sp.block_diag([self.P1.csr, self.P2.csr], format="csr")

    @cached_property
    def forward_balls(self) -> "BallTable":
        return BallTable.forward(self.P)

    @cached_property
    def row_tables(self) -> tuple:
        """(indptr, indices, cumulative row probabilities) of the block chain."""
        P = self.P
        indptr = P.indptr.astype(np.int64)
        cum = np.empty(P.nnz)
        for x in range(P.shape[0]):
            lo, hi = indptr[x], indptr[x + 1]
            cum[lo:hi] = np.cumsum(P.data[lo:hi])
        return indptr, P.indices.astype(np.int64), cum

    @cached_property
    def quasi_tables(self) -> tuple:
        """Arrays consumed by the compiled quasi-tree walkers."""
        indptr, indices, cum = self.row_tables
        balls = self.forward_balls
        ptab = np.array([[float(v) for v in row] for row in self.p.values])
        return (np.int64(self.n), indptr, indices, cum, balls.ptr, balls.states,
                np.asarray(self.p.classes1, dtype=np.int64), np.asarray(self.p.classes2, dtype=np.int64), ptab)

    def side(self, x) -> np.ndarray:
        return np.asarray(x) >= self.n


@dataclass(frozen=True)
class BallTable:
    """Forward reachable sets of every state with directed graph distances.

    ``states[ptr[x]:ptr[x+1]]`` lists the reachable set of x in BFS order
    (x first) and ``dist`` the matching distances.
    """

    ptr: np.ndarray
    states: np.ndarray
    dist: np.ndarray

    @classmethod
    def forward(cls, P: sp.csr_matrix, radius: int | None = None) -> "BallTable":
        n = P.shape[0]
        indptr, indices = P.indptr, P.indices
        ptr = [0]
        states: list[int] = []
        dist: list[int] = []
        for x in range(n):
            seen = {x: 0}
            queue = deque([x])
            while queue:
                u = queue.popleft()
                d = seen[u]
                if radius is not None and d >= radius:
                    continue
                for v in indices[indptr[u]:indptr[u + 1]]:
                    v = int(v)
                    if v not in seen:
                        seen[v] = d + 1
                        queue.append(v)
            states.extend(seen.keys())
            dist.extend(seen.values())
            ptr.append(len(states))
        return cls(np.array(ptr, dtype=np.int64), np.array(states, dtype=np.int64), np.array(dist, dtype=np.int64))

    def ball(self, x: int) -> np.ndarray:
        return self.states[self.ptr[x]:self.ptr[x + 1]]

    def distance(self, x: int, y: int) -> float:
        seg = slice(self.ptr[x], self.ptr[x + 1])
        hit = np.flatnonzero(self.states[seg] == y)
        return float(self.dist[seg][hit[0]]) if hit.size else float("inf")

    def sizes(self) -> np.ndarray:
        return np.diff(self.ptr)

    @property
    def max_size(self) -> int:
        return int(self.sizes().max())


@dataclass(frozen=True)
class Environment:
    """A matching of the two sides: ``sigma[x]`` is the partner of first-side state x."""

    n: int
    sigma: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.int64)
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)
        if sigma.shape != (self.n,) or not np.array_equal(np.sort(sigma), np.arange(self.n, 2 * self.n)):
            raise ValidationError("sigma is not a bijection onto the second side")

    @cached_property
    def eta(self) -> np.ndarray:
        eta = np.empty(2 * self.n, dtype=np.int64)
        eta[: self.n] = self.sigma
        eta[self.sigma] = np.arange(self.n)
        eta.setflags(write=False)
        return eta

    @property
    def perm(self) -> np.ndarray:
        """sigma as a permutation of ``0..n-1``."""
        return self.sigma - self.n


def sample_environment(n: int, seed: int) -> Environment:
    """Uniform matching drawn by a seeded Fisher-Yates shuffle."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    rng = task_rng(seed, 0)
    return Environment(n, n + rng.permutation(n), seed)


@dataclass(frozen=True)
class LiftedKernel:
    """The chain on both sides, stored with its two half steps.

    ``matrix = half @ P`` where ``half`` stays with probability ``stay[x]`` and
    moves to the partner with probability ``jump[x]``.
    """

    matrix: sp.csr_matrix
    stay: np.ndarray
    jump: np.ndarray
    P: sp.csr_matrix
    eta: np.ndarray

    @cached_property
    def half(self) -> sp.csr_matrix:
        m = self.stay.size
        jump_part = sp.csr_matrix((self.jump, (np.arange(m), self.eta)), shape=(m, m))
        return (sp.diags(self.stay) + jump_part).tocsr()


@dataclass(frozen=True)
class ProjectedKernel:
    matrix: sp.csr_matrix


def build_lifted_kernel(spec: MixtureSpec, env: Environment) -> LiftedKernel:
    if env.n != spec.n:
        raise ValidationError("environment and spec sizes differ")
    eta = env.eta
    states = np.arange(2 * spec.n)
    stay = spec.p.p_array(states, eta)
    jump = 1.0 - stay
    P = spec.P
    # row x of the cross part is q(x, eta(x)) * P(eta(x), .)
    cross = sp.diags(jump) @ P[eta]
    matrix = (sp.diags(stay) @ P + cross).tocsr()
    matrix.eliminate_zeros()
    return LiftedKernel(matrix, stay, jump, P, eta)


def project_kernel(lift: LiftedKernel, env: Environment, spec: MixtureSpec | None = None,
                   check: bool = True) -> ProjectedKernel:
    """Fold the lifted chain onto the first side.

    With ``spec`` given, the result is checked entry-wise against the direct
    construction from (P1, P2, p, sigma).
    """
    n = env.n
    M = lift.matrix
    # column y of the folded part holds M[x, sigma(y)]
    bar = (M[:n, :n] + M[:n, n:][:, env.perm]).tocsr()
    bar.eliminate_zeros()
    if spec is not None and check:
        direct = mixture_kernel(spec, env)
        gap = abs(bar - direct).max() if bar.nnz or direct.nnz else 0.0
        if gap > ROW_TOL:
            raise AssertionError(f"projection differs from the direct mixture by {gap}")
    return ProjectedKernel(bar)


def mixture_kernel(spec: MixtureSpec, env: Environment) -> sp.csr_matrix:
    """Direct mixture kernel on the first side, built without the lift."""
    n = spec.n
    perm = env.perm
    p1 = spec.p.p_array(np.arange(n), env.sigma)
    P2_moved = spec.P2.csr[perm][:, perm]
    out = (sp.diags(p1) @ spec.P1.csr + sp.diags(1.0 - p1) @ P2_moved).tocsr()
    out.eliminate_zeros()
    return out


def step(state: int, tick: int, lift: LiftedKernel, rng: np.random.Generator) -> int:
    """One tick of the walk: matching half step on even ticks, block step on odd ticks."""
    if tick % 2 == 0:
        return int(lift.eta[state]) if rng.random() < lift.jump[state] else state
    P = lift.P
    lo, hi = P.indptr[state], P.indptr[state + 1]
    k = np.searchsorted(np.cumsum(P.data[lo:hi]), rng.random() * P.data[lo:hi].sum(), side="right")
    return int(P.indices[lo + min(k, hi - lo - 1)])


# exact rational constructions, used for algebraic identities on small n

ExactRows = list  # list[dict[int, Fraction]]


def _block_rows(spec: MixtureSpec) -> ExactRows:
    n = spec.n
    rows = spec.P1.exact_rows()
    rows += [{c + n: v for c, v in r.items()} for r in spec.P2.exact_rows()]
    return rows


def exact_lifted_rows(spec: MixtureSpec, env: Environment) -> ExactRows:
    P = _block_rows(spec)
    eta = env.eta
    out = []
    for x in range(2 * spec.n):
        p = spec.p.p(x, int(eta[x]))
        row: dict[int, Fraction] = {}
        for y, v in P[x].items():
            row[y] = row.get(y, Fraction(0)) + p * v
        for y, v in P[int(eta[x])].items():
            row[y] = row.get(y, Fraction(0)) + (1 - p) * v
        out.append({y: v for y, v in row.items() if v})
    return out


def exact_half_rows(spec: MixtureSpec, env: Environment) -> ExactRows:
    eta = env.eta
    out = []
    for x in range(2 * spec.n):
        p = spec.p.p(x, int(eta[x]))
        out.append({k: v for k, v in ((x, p), (int(eta[x]), 1 - p)) if v})
    return out


def compose_exact(A: ExactRows, B: ExactRows) -> ExactRows:
    out = []
    for row in A:
        acc: dict[int, Fraction] = {}
        for k, a in row.items():
            for j, b in B[k].items():
                acc[j] = acc.get(j, Fraction(0)) + a * b
        out.append({j: v for j, v in acc.items() if v})
    return out


def exact_projected_rows(spec: MixtureSpec, env: Environment) -> ExactRows:
    n = spec.n
    lifted = exact_lifted_rows(spec, env)
    eta = env.eta
    out = []
    for x in range(n):
        row = {}
        for y in range(n):
            v = lifted[x].get(y, Fraction(0)) + lifted[x].get(int(eta[y]), Fraction(0))
            if v:
                row[y] = v
        out.append(row)
    return out


def exact_mixture_rows(spec: MixtureSpec, env: Environment) -> ExactRows:
    n = spec.n
    P1 = spec.P1.exact_rows()
    P2 = spec.P2.exact_rows()
    perm = [int(v) for v in env.perm]
    inverse = {s: i for i, s in enumerate(perm)}
    out = []
    for x in range(n):
        p1 = spec.p.p(x, int(env.sigma[x]))
        row = {y: p1 * v for y, v in P1[x].items()}
        for s, v in P2[perm[x]].items():
            y = inverse[s]
            row[y] = row.get(y, Fraction(0)) + (1 - p1) * v
        out.append({y: v for y, v in row.items() if v})
    return out


def block_rows_exact(spec: MixtureSpec) -> ExactRows:
    return _block_rows(spec)


# hypothesis report


@dataclass
class HypothesisReport:
    delta: float
    Delta: int
    reach1: np.ndarray
    reach2: np.ndarray
    reversible_counts: dict = field(default_factory=dict)
    n: int = 0
    messages: list = field(default_factory=list)

    @property
    def bounded_entries(self) -> bool:
        return self.delta > 0

    @property
    def reach_ok(self) -> bool:
        return bool(self.reach1.min() >= 3 and self.reach2.min() >= 2)

    def reversible_fraction(self, l: int) -> float:
        return self.reversible_counts[l] / (2 * self.n)

    def smallest_full_l(self) -> int | None:
        for l in sorted(self.reversible_counts):
            if self.reversible_counts[l] == 2 * self.n:
                return l
        return None

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "delta": self.delta,
            "Delta": self.Delta,
            "reach_min_side1": int(self.reach1.min()),
            "reach_min_side2": int(self.reach2.min()),
            "reach_ok": self.reach_ok,
            "reversible_counts": {str(k): int(v) for k, v in self.reversible_counts.items()},
            "reversible_fraction": {str(k): self.reversible_fraction(k) for k in self.reversible_counts},
            "messages": list(self.messages),
        }


def graph_degree(P: sp.csr_matrix) -> int:
    """Largest in- or out-degree of the graph made of the off-diagonal support of P plus one matching edge."""
    off = sp.csr_matrix(P - sp.diags(P.diagonal()))
    off.eliminate_zeros()
    m = P.shape[0]
    return 1 + int(max(np.diff(off.indptr).max(initial=0), np.bincount(off.indices, minlength=m).max(initial=0)))


def walker_tables(spec: MixtureSpec, env: Environment) -> tuple:
    """Arrays consumed by the compiled finite-chain walkers."""
    lift = build_lifted_kernel(spec, env)
    indptr, indices, cum = spec.row_tables
    balls = spec.forward_balls
    return (indptr, indices, cum, np.asarray(env.eta, dtype=np.int64), lift.jump.astype(np.float64),
            balls.ptr, balls.states, balls.dist)


def reversible_within(P: sp.csr_matrix, l: int) -> np.ndarray:
    """Mask of states x whose every transition x->y can be undone in at most l steps."""
    m = P.shape[0]
    back = P.T.tocsr()
    ok = np.zeros(m, dtype=bool)
    for x in range(m):
        reached = {x}
        frontier = [x]
        for _ in range(l):
            nxt = []
            for u in frontier:
                for v in back.indices[back.indptr[u]:back.indptr[u + 1]]:
                    v = int(v)
                    if v not in reached:
                        reached.add(v)
                        nxt.append(v)
            frontier = nxt
        ok[x] = all(int(y) in reached for y in P.indices[P.indptr[x]:P.indptr[x + 1]])
    return ok


def validate_hypotheses(spec: MixtureSpec, l_max: int = 3) -> HypothesisReport:
    n = spec.n
    positives = [v for _, _, v in spec.P1.entries + spec.P2.entries]
    for row in spec.p.values:
        positives += [v for v in row if v] + [1 - v for v in row if v != 1]
    P = spec.P
    degree = graph_degree(P)
    sizes = spec.forward_balls.sizes()
    report = HypothesisReport(float(min(positives)), degree, sizes[:n], sizes[n:], n=n)
    if report.reach1.min() < 3:
        report.messages.append(f"side-1 reachable set of size {int(report.reach1.min())} below 3")
    if report.reach2.min() < 2:
        report.messages.append(f"side-2 reachable set of size {int(report.reach2.min())} below 2")
    if degree > spec.Delta:
        report.messages.append(f"observed degree {degree} exceeds declared bound {spec.Delta}")
    for l in range(1, l_max + 1):
        report.reversible_counts[l] = int(reversible_within(P, l).sum())
    return report


# file formats


def _fmt(v: Fraction) -> str:
    return str(v)


def dumps_spec(spec: MixtureSpec) -> str:
    lines = [f"n {spec.n}", f"delta_floor {_fmt(spec.delta_floor)}", f"Delta {spec.Delta}"]
    if spec.name:
        lines.insert(0, f"name {spec.name}")
    if spec.p.is_constant:
        lines.append(f"p constant {_fmt(spec.p.values[0][0])}")
    else:
        lines.append(f"p table {len(spec.p.values)} {len(spec.p.values[0])}")
        lines.append("classes1 " + " ".join(map(str, spec.p.classes1)))
        lines.append("classes2 " + " ".join(map(str, spec.p.classes2)))
        lines += [" ".join(_fmt(v) for v in row) for row in spec.p.values]
    for label, mat in (("P1", spec.P1), ("P2", spec.P2)):
        lines.append(f"{label} {len(mat.entries)}")
        lines += [f"{r} {c} {_fmt(v)}" for r, c, v in mat.entries]
    return "\n".join(lines) + "\n"


def loads_spec(text: str) -> MixtureSpec:
    lines = deque(line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#"))
    fields: dict = {}
    try:
        while lines:
            key, *rest = lines.popleft().split()
            if key in ("n", "Delta"):
                fields[key] = int(rest[0])
            elif key == "name":
                fields["name"] = " ".join(rest)
            elif key == "delta_floor":
                fields[key] = Fraction(rest[0])
            elif key == "p" and rest[0] == "constant":
                fields["p"] = ("constant", Fraction(rest[1]))
            elif key == "p" and rest[0] == "table":
                k1, k2 = int(rest[1]), int(rest[2])
                c1 = tuple(int(v) for v in lines.popleft().split()[1:])
                c2 = tuple(int(v) for v in lines.popleft().split()[1:])
                values = tuple(tuple(Fraction(v) for v in lines.popleft().split()) for _ in range(k1))
                if any(len(r) != k2 for r in values):
                    raise ValidationError("mixing table row has the wrong length")
                fields["p"] = MixingTable(c1, c2, values)
            elif key in ("P1", "P2"):
                count = int(rest[0])
                triplets = []
                for _ in range(count):
                    r, c, v = lines.popleft().split()
                    triplets.append((int(r), int(c), Fraction(v)))
                fields[key] = triplets
            else:
                raise ValidationError(f"unknown field {key!r}")
        n = fields["n"]
        p = fields["p"]
        if isinstance(p, tuple):
            p = MixingTable.constant(n, p[1])
        return MixtureSpec(n, StochasticMatrix(n, tuple(fields["P1"])), StochasticMatrix(n, tuple(fields["P2"])),
                           p, fields["delta_floor"], fields["Delta"], fields.get("name", ""))
    except (KeyError, IndexError, ValueError, ZeroDivisionError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed spec file: {exc}") from exc


def dumps_environment(env: Environment) -> str:
    seed = "none" if env.seed is None else str(env.seed)
    return f"seed {seed}\nn {env.n}\nsigma " + " ".join(map(str, env.sigma.tolist())) + "\n"


def loads_environment(text: str) -> Environment:
    try:
        fields = dict(line.split(maxsplit=1) for line in text.splitlines() if line.strip())
        seed = None if fields["seed"].strip() == "none" else int(fields["seed"])
        sigma = np.array([int(v) for v in fields["sigma"].split()], dtype=np.int64)
        return Environment(int(fields["n"]), sigma, seed)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed environment file: {exc}") from exc


def cycle_block(size: int, forward, backward, stay) -> list[list[Fraction]]:
    rows = [[Fraction(0)] * size for _ in range(size)]
    for i in range(size):
        rows[i][(i + 1) % size] += as_fraction(forward)
        rows[i][(i - 1) % size] += as_fraction(backward)
        rows[i][i] += as_fraction(stay)
    return rows


def block_matrix(blocks: Iterable[list[list[Fraction]]]) -> StochasticMatrix:
    entries = []
    offset = 0
    for block in blocks:
        for i, row in enumerate(block):
            entries += [(offset + i, offset + j, v) for j, v in enumerate(row) if v]
        offset += len(block)
    return StochasticMatrix(offset, tuple(entries))
