"""Random quasi-trees generated on demand, their walker, escape probabilities and regenerations."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from permix import _engine as eng
from permix.core import MixtureSpec
from permix.rng import task_rng, task_seed64


def _rng_state(seed: int, *task: int) -> np.ndarray:
    return np.array([task_seed64(seed, *task)], dtype=np.uint64)


@dataclass(frozen=True)
class UlamLabel:
    """Path of vertex types through which the long-range edges were taken, plus the vertex type."""

    prefix: tuple
    tip: int


@dataclass
class WalkerState:
    comp: int
    local: int
    tick: int


class LazyQuasiTree:
    """Ulam-labelled random quasi-tree whose components are created when first reached.

    A component is the small-range component of its center type.  The type of
    a child center is drawn uniformly on the opposite side from a hash of the
    parent label, so the realization is a function of ``seed`` only and
    discarded components are redrawn identically.
    """

    def __init__(self, spec: MixtureSpec, root_type: int, seed: int, capacity: int = 256):
        if not 0 <= root_type < 2 * spec.n:
            raise ValueError(f"root type {root_type} outside [0, {2 * spec.n})")
        self.spec = spec
        self.seed = seed
        self.qm = spec.quasi_tables
        self.balls = spec.forward_balls
        self.width = int(self.balls.max_size)
        self._alloc(max(capacity, 4))
        self.ctype[0] = root_type
        self.cparent[0] = -1
        self.cplocal[0] = -1
        self.cdepth[0] = 0
        self.ckey[0] = np.uint64(task_seed64(seed, 0x51))
        self.meta[:] = (1, 0)

    def _alloc(self, cap: int, keep: int = 0):
        def grow(old, shape, dtype, fill):
            new = np.full(shape, fill, dtype=dtype)
            if keep:
                new[:keep] = old[:keep]
            return new

        self.ctype = grow(getattr(self, "ctype", None), cap, np.int64, -1)
        self.cparent = grow(getattr(self, "cparent", None), cap, np.int64, -1)
        self.cplocal = grow(getattr(self, "cplocal", None), cap, np.int64, -1)
        self.cdepth = grow(getattr(self, "cdepth", None), cap, np.int64, 0)
        self.ckey = grow(getattr(self, "ckey", None), cap, np.uint64, 0)
        self.cchild = grow(getattr(self, "cchild", None), (cap, self.width), np.int64, -1)
        self.log = grow(getattr(self, "log", None), cap, np.int64, -1)
        if not keep:
            self.meta = np.zeros(2, dtype=np.int64)

    def reserve(self, extra: int):
        """Make room for ``extra`` more components (one per tick is the worst case)."""
        need = int(self.meta[0]) + extra + 2
        logs = int(self.meta[1]) + extra + 2
        cap = self.ctype.size
        if need > cap or logs > cap:
            self._alloc(max(2 * cap, need, logs), keep=cap)

    @property
    def tree(self) -> tuple:
        return (self.ctype, self.cparent, self.cplocal, self.cdepth, self.ckey, self.cchild, self.meta, self.log)

    @property
    def n_components(self) -> int:
        return int(self.meta[0])

    @property
    def root_type(self) -> int:
        return int(self.ctype[0])

    def component_states(self, k: int) -> np.ndarray:
        return self.balls.ball(int(self.ctype[k]))

    def component_size(self, k: int) -> int:
        t = int(self.ctype[k])
        return int(self.balls.ptr[t + 1] - self.balls.ptr[t])

    def vertex_type(self, k: int, j: int) -> int:
        return int(eng.vertex_type(self.tree, self.qm, k, j))

    def is_center(self, k: int, j: int) -> bool:
        return j == 0

    def partner(self, k: int, j: int) -> tuple[int, int]:
        """The long-range neighbour of (k, j), materializing a child component if needed."""
        if j == 0 and self.cparent[k] >= 0:
            return int(self.cparent[k]), int(self.cplocal[k])
        self.reserve(1)
        return int(eng.materialize(self.tree, self.qm, k, j)), 0

    def partner_type(self, k: int, j: int) -> int:
        return int(eng.partner_type(self.tree, self.qm, k, j))

    def child(self, k: int, j: int) -> int:
        if j == 0 and self.cparent[k] >= 0:
            raise ValueError("the center of a non-root component has no child")
        return self.partner(k, j)[0]

    def label(self, k: int, j: int) -> UlamLabel:
        path = []
        c = k
        while self.cparent[c] >= 0:
            path.append(self.vertex_type(int(self.cparent[c]), int(self.cplocal[c])))
            c = int(self.cparent[c])
        return UlamLabel(tuple(reversed(path)), self.vertex_type(k, j))

    def ancestors(self, k: int) -> list[int]:
        out = [k]
        while self.cparent[out[-1]] >= 0:
            out.append(int(self.cparent[out[-1]]))
        return out

    def in_subtree(self, k: int, root: int) -> bool:
        d = int(self.cdepth[root])
        return int(eng.ancestor_at(self.cparent, self.cdepth, k, d)) == root if self.cdepth[k] >= d else False

    def materialize_depth(self, depth: int) -> list[int]:
        """Create every component down to ``depth`` below the root; returns them in BFS order."""
        order = [0]
        queue = deque([0])
        while queue:
            k = queue.popleft()
            if self.cdepth[k] >= depth:
                continue
            for j in range(self.component_size(k)):
                if j == 0 and k > 0:
                    continue
                c = self.child(k, j)
                order.append(c)
                queue.append(c)
        return order

    def checkpoint(self) -> tuple[int, int]:
        return int(self.meta[0]), int(self.meta[1])

    def rollback(self, mark: tuple[int, int]):
        eng.rollback(self.tree, mark[0], mark[1])

    def walk(self, start: WalkerState, n_ticks: int, rng_state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self.reserve(n_ticks // 2 + 2)
        out_k = np.empty(n_ticks + 1, dtype=np.int64)
        out_j = np.empty(n_ticks + 1, dtype=np.int64)
        eng.qt_walk(self.tree, self.qm, start.comp, start.local, start.tick, n_ticks, rng_state, out_k, out_j)
        return out_k, out_j


def qt_step(tree: LazyQuasiTree, walker: WalkerState, rng_state: np.ndarray) -> WalkerState:
    """One tick: even ticks stay or cross the long-range edge, odd ticks take a small-range step."""
    tree.reserve(1)
    k, j, _ = eng.qt_tick(tree.tree, tree.qm, walker.comp, walker.local, walker.tick, rng_state)
    return WalkerState(int(k), int(j), walker.tick + 1)


def random_tree(spec: MixtureSpec, seed: int, task: int = 0, root_type: int | None = None) -> LazyQuasiTree:
    if root_type is None:
        root_type = int(task_rng(seed, task, 1).integers(2 * spec.n))
    return LazyQuasiTree(spec, root_type, task_seed64(seed, task, 2))


# ---------------------------------------------------------------- escape probabilities


@dataclass
class EscapeEstimate:
    q_hat: float
    ci_low: float
    ci_high: float
    horizon: int
    trials: int
    hits: int


def wilson_interval(hits: int, trials: int, z: float = 1.96) -> tuple[float, float]:
    if trials == 0:
        return 0.0, 1.0
    p = hits / trials
    denom = 1 + z * z / trials
    mid = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, mid - half), min(1.0, mid + half)


def estimate_escape_probability(tree: LazyQuasiTree, k: int, j: int, horizon: int = 1000, trials: int = 1000,
                                seed: int = 0) -> EscapeEstimate:
    """Probability of staying in the subquasi-tree of (k, j) for ``horizon`` steps.

    Non-center vertex: the walker starts at an integer time, must cross into
    the child component at once and never come back up.  Non-root center:
    the walker must never cross up out of its component.  Root: the walker
    starts at a half-integer time and must never enter the component of its
    long-range partner.  For finite horizons the estimate is biased upwards.
    """
    if trials <= 0:
        raise ValueError("trials must be positive")
    ticks = 2 * horizon
    tree.reserve(ticks // 2 + 2)
    rng = _rng_state(seed, k, j, 3)
    if j != 0:
        guard = tree.child(k, j)
        hits = eng.qt_stay(tree.tree, tree.qm, k, j, 0, guard, -1, True, ticks, trials, rng)
    elif k > 0:
        hits = eng.qt_stay(tree.tree, tree.qm, k, 0, 0, k, -1, False, ticks, trials, rng)
    else:
        forbid = tree.child(0, 0)
        hits = eng.qt_stay(tree.tree, tree.qm, 0, 0, 1, -1, forbid, False, ticks, trials, rng)
    lo, hi = wilson_interval(int(hits), trials)
    return EscapeEstimate(hits / trials, lo, hi, horizon, trials, int(hits))


def fit_escape_floor(q_hats) -> float:
    """Largest q with empirical P(q_hat >= q) >= q."""
    q = np.sort(np.asarray(q_hats, dtype=float))[::-1]
    ranks = np.arange(1, q.size + 1) / q.size
    # at the i-th largest value the survival fraction is ranks[i]
    ok = np.minimum(q, ranks)
    return float(ok.max()) if ok.size else 0.0


@dataclass
class EscapeStructure:
    q_hats: np.ndarray
    q0: float
    delta: float
    threshold: float
    low_fraction: float
    bound: float
    sigma: float
    horizon: int
    trials: int

    @property
    def holds(self) -> bool:
        return self.low_fraction <= self.bound + 3 * self.sigma


def escape_structure(spec: MixtureSpec, n_trees: int, horizon: int, trials: int, seed: int = 0,
                     k: int = 1) -> EscapeStructure:
    """Root escape estimates over independent trees and the tail check P(q < q0 delta^(4k)) <= q0^(2^k)."""
    q = np.empty(n_trees)
    for i in range(n_trees):
        tree = random_tree(spec, seed, i)
        q[i] = estimate_escape_probability(tree, 0, 0, horizon, trials, task_seed64(seed, i, 4)).q_hat
    q0 = fit_escape_floor(q)
    delta = float(spec.delta_floor)
    threshold = q0 * delta ** (4 * k)
    bound = q0 ** (2 ** k)
    low = float(np.mean(q < threshold))
    sigma = math.sqrt(max(bound * (1 - bound), 1e-300) / n_trees)
    return EscapeStructure(q, q0, delta, threshold, low, bound, sigma, horizon, trials)


# ---------------------------------------------------------------- regenerations


@dataclass
class RegenerationRecord:
    k: int
    Y: int
    T: float
    L: int
    comp: int = -1
    run: int = 0


@dataclass
class RegenerationRun:
    records: list
    n_ticks: int
    window: int
    tree: LazyQuasiTree | None = None
    comps: np.ndarray | None = None
    depths: np.ndarray | None = None
    empty: bool = False


def run_regenerations(tree: LazyQuasiTree, t_max: float, W: float | None = None, seed: int = 0,
                      run: int = 0, keep_path: bool = False) -> RegenerationRun:
    """Walk ``t_max`` time units from the root and return the regeneration records.

    A crossing into a component qualifies when the component is entered for
    the first time and its subquasi-tree is never left for the rest of the
    run.  The last ``W`` time units (default t_max / 10) are dropped because
    a later exit cannot be ruled out there.
    """
    n_ticks = int(round(2 * t_max))
    window = n_ticks // 10 if W is None else int(round(2 * W))
    out_k, out_j = tree.walk(WalkerState(0, 0, 0), n_ticks, _rng_state(seed, run, 5))
    idx, comps = eng.qt_regenerations(out_k, tree.cparent, tree.cdepth, tree.n_components)
    records = []
    for i, c in zip(idx.tolist(), comps.tolist()):
        if i > n_ticks - window:
            break
        parent_type = tree.vertex_type(int(out_k[i - 1]), int(out_j[i - 1]))
        records.append(RegenerationRecord(len(records) + 1, parent_type, i / 2, int(tree.cdepth[c]), int(c), run))
    depths = tree.cdepth[out_k] if keep_path else None
    return RegenerationRun(records, n_ticks, window, tree if keep_path else None,
                           out_k if keep_path else None, depths, not records)


def records_table(runs) -> str:
    lines = ["k,Y,T,L,run"]
    for r in runs:
        for rec in r.records:
            lines.append(f"{rec.k},{rec.Y},{rec.T:g},{rec.L},{rec.run}")
    return "\n".join(lines) + "\n"


@dataclass
class TailFit:
    c: float
    alpha: float
    r2: float
    points: int


def stretched_exponential_fit(samples, min_count: int = 20) -> TailFit:
    """Fit P(X > m) ~ exp(-c m^alpha) by regressing log(-log survival) on log m."""
    x = np.sort(np.asarray(samples, dtype=float))
    m = np.unique(x)
    surv = 1.0 - np.searchsorted(x, m, side="right") / x.size
    keep = (surv > 0) & (surv * x.size >= min_count) & (surv < 1) & (m > 0)
    m, surv = m[keep], surv[keep]
    if m.size < 3:
        return TailFit(float("nan"), float("nan"), float("nan"), int(m.size))
    fit = stats.linregress(np.log(m), np.log(-np.log(surv)))
    return TailFit(float(math.exp(fit.intercept)), float(fit.slope), float(fit.rvalue ** 2), int(m.size))


def exponential_fit(samples, min_count: int = 20) -> TailFit:
    """Fit P(X > m) ~ exp(-c m) on the integer grid (alpha is fixed to 1)."""
    x = np.sort(np.asarray(samples, dtype=float))
    m = np.unique(x)
    surv = 1.0 - np.searchsorted(x, m, side="right") / x.size
    keep = (surv > 0) & (surv * x.size >= min_count)
    m, surv = m[keep], surv[keep]
    if m.size < 3:
        return TailFit(float("nan"), 1.0, float("nan"), int(m.size))
    fit = stats.linregress(m, np.log(surv))
    return TailFit(float(-fit.slope), 1.0, float(fit.rvalue ** 2), int(m.size))


@dataclass
class RenewalReport:
    mean_increment: float
    count_rate: dict
    variance_ratio: dict
    variance_flatness: float
    T_tail: TailFit
    L_tail: TailFit
    nu_hat: dict
    nu_spread: float
    Q_min_n: float
    Q_max_n: float
    records: int
    extra: dict = field(default_factory=dict)


def _increments(run) -> tuple[np.ndarray, np.ndarray]:
    T = np.array([0.0] + [r.T for r in run.records])
    L = np.array([0] + [r.L for r in run.records])
    return np.diff(T), np.diff(L)


def renewal_statistics(runs, n: int, t_grid=(100, 1000, 10_000), k_grid=(10, 20, 50, 100),
                       min_hits: int = 30) -> RenewalReport:
    """Renewal diagnostics over independent regeneration runs.

    The first increment of each run (from the root) is excluded from the
    increment laws; ``count_rate[t]`` is the mean of N_t / t across runs.
    """
    records = sum(len(r.records) for r in runs)
    if records < 100:
        raise ValueError(f"need at least 100 records, got {records}")
    dT, dL = [], []
    for r in runs:
        a, b = _increments(r)
        dT.extend(a[1:])
        dL.extend(b[1:])
    dT = np.asarray(dT)
    dL = np.asarray(dL)
    mean_inc = float(dT.mean())
    count_rate = {}
    for t in t_grid:
        usable = [r for r in runs if r.n_ticks - r.window >= 2 * t]
        if usable:
            count_rate[t] = float(np.mean([sum(rec.T <= t for rec in r.records) / t for r in usable]))
    var_ratio = {}
    for k in k_grid:
        vals = [r.records[k - 1].T - r.records[0].T for r in runs if len(r.records) >= k]
        if len(vals) >= 10:
            var_ratio[k] = float(np.var(vals, ddof=1) / k)
    flat = max(var_ratio.values()) / min(var_ratio.values()) if len(var_ratio) > 1 else float("nan")
    # regeneration chain: successive Y values, first of each run is the root law
    ys = [r.records[0].Y for r in runs if r.records]
    counts = np.bincount(ys, minlength=2 * n)
    nu_hat = {int(v): float(c / len(ys)) for v, c in enumerate(counts) if c}
    big = counts[counts >= min_hits]
    spread = float(big.max() / big.min()) if big.size else float("nan")
    pairs = np.array([(a.Y, b.Y) for r in runs for a, b in zip(r.records, r.records[1:])], dtype=np.int64)
    q_min = q_max = float("nan")
    if pairs.size:
        from_counts = np.bincount(pairs[:, 0], minlength=2 * n)
        ok = from_counts >= min_hits
        if ok.any():
            # only the row mass matters at desk scale: report the largest single transition share times n
            joint = {}
            for a, b in pairs[ok[pairs[:, 0]]]:
                joint[(a, b)] = joint.get((a, b), 0) + 1
            shares = np.array([c / from_counts[a] for (a, _), c in joint.items()])
            q_min, q_max = float(shares.min() * n), float(shares.max() * n)
    return RenewalReport(mean_inc, count_rate, var_ratio, flat, stretched_exponential_fit(dT), exponential_fit(dL),
                         nu_hat, spread, q_min, q_max, records,
                         {"T_increment_mean": mean_inc, "L_increment_mean": float(dL.mean())})


# ---------------------------------------------------------------- drift and entropy


@dataclass
class DriftEntropyEstimate:
    d_hat: float
    h_prime_hat: float
    h_hat: float
    d_ci: tuple
    h_ci: tuple
    h_prime_ci: tuple
    runs_used: int
    runs_discarded: int
    regenerations: int
    mean_increment: float
    d_slope: float
    params: dict


def _hit_factors(tree: LazyQuasiTree, comps, n_inner: int, extra: int, horizon: int, rng) -> np.ndarray:
    """Per regeneration, the fraction of relaunched walkers whose escape goes through the next one."""
    out = np.full(len(comps) - 1, np.nan)
    ticks = 2 * horizon
    tree.reserve(ticks // 2 + 2)
    for i in range(len(comps) - 1):
        acc, hits, _ = eng.qt_hits(tree.tree, tree.qm, comps[i], 1, comps[i + 1], extra, ticks, n_inner, rng)
        out[i] = hits / acc if acc else np.nan
    return out


def estimate_drift_entropy(spec: MixtureSpec, runs: int, t_max: float, seed: int = 0, n_inner: int = 1000,
                           extra: int = 3, horizon: int = 400, W: float | None = None,
                           n_boot: int = 500) -> DriftEntropyEstimate:
    """Drift and entropy rate from regenerations of the quasi-tree walker.

    d_hat = total long-range depth / total time at the last regeneration of
    each run.  Each factor of the trace probability is estimated by
    relaunching ``n_inner`` walkers from the center of a regeneration
    component conditioned (by rejection) never to cross back, and counting
    those that escape through the next regeneration component.
    """
    if runs < 1:
        raise ValueError("runs must be at least 1")
    L_sum = T_sum = 0.0
    logs, counts, incs = [], [], []
    run_d, run_h, run_hp, run_T = [], [], [], []
    slopes = []
    discarded = 0
    regs = 0
    for r in range(runs):
        tree = random_tree(spec, seed, r)
        res = run_regenerations(tree, t_max, W, seed, r, keep_path=True)
        if len(res.records) < 2:
            discarded += 1
            continue
        depth = res.depths
        half = depth.size // 2
        slopes.append((depth[-1] - depth[half], (depth.size - 1 - half) / 2))
        comps = [rec.comp for rec in res.records]
        factors = _hit_factors(tree, comps, n_inner, extra, horizon, _rng_state(seed, r, 6))
        if np.any(~(factors > 0)):
            discarded += 1
            continue
        k = len(comps) - 1
        first, last = res.records[0], res.records[-1]
        span_T = last.T - first.T
        span_L = last.L - first.L
        neg_log = float(-np.log(factors).sum())
        L_sum += span_L
        T_sum += span_T
        logs.append(neg_log)
        counts.append(k)
        incs.append(span_T)
        run_d.append(span_L)
        regs += k
    if not counts:
        raise ValueError("every run was discarded")
    logs, counts, incs, run_d = map(np.asarray, (logs, counts, incs, run_d))
    d_hat = L_sum / T_sum
    # direct estimate: depth gained over the second half of every run
    d_slope = float(sum(a for a, _ in slopes) / sum(b for _, b in slopes))
    hp = logs.sum() / counts.sum()
    mean_inc = incs.sum() / counts.sum()
    h = logs.sum() / incs.sum()
    rng = task_rng(seed, 7)
    boot_d, boot_h, boot_hp = [], [], []
    m = counts.size
    for _ in range(n_boot):
        pick = rng.integers(0, m, m)
        boot_d.append(run_d[pick].sum() / incs[pick].sum())
        boot_h.append(logs[pick].sum() / incs[pick].sum())
        boot_hp.append(logs[pick].sum() / counts[pick].sum())

    def ci(v):
        return (float(np.quantile(v, 0.025)), float(np.quantile(v, 0.975)))

    params = {"runs": runs, "t_max": t_max, "n_inner": n_inner, "extra": extra, "horizon": horizon,
              "W": W if W is not None else t_max / 10, "seed": seed}
    return DriftEntropyEstimate(float(d_hat), float(hp), float(h), ci(boot_d), ci(boot_h), ci(boot_hp), int(m),
                                discarded, int(regs), float(mean_inc), d_slope, params)


# ---------------------------------------------------------------- coupling


@dataclass
class CouplingResult:
    finite_path: np.ndarray
    tree_path: list
    t_coup: float
    censored: bool
    revealed: int
    explored_states: int
    deviated: bool = False


class _SequentialMatching:
    """Matching revealed one state at a time from shared uniform draws.

    The quasi-tree side samples partners with replacement; the finite side
    keeps the draw when the partner is still free and otherwise redraws
    among free states.  ``mismatch`` records the first disagreement.
    """

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.eta: dict[int, int] = {}
        self.mismatch = False

    def reveal(self, x: int) -> tuple[int, int]:
        """Returns (finite partner, quasi-tree partner)."""
        if x in self.eta:
            return self.eta[x], self.eta[x]
        base = self.n if x < self.n else 0
        drawn = base + int(self.rng.integers(self.n))
        y = drawn
        while y in self.eta:
            self.mismatch = True
            y = base + int(self.rng.integers(self.n))
        self.eta[x] = y
        self.eta[y] = x
        return y, drawn


def coupled_generation(spec: MixtureSpec, x0: int, R: int, L: int, t_max: float, seed: int) -> CouplingResult:
    """Run the finite chain and the quasi-tree walker on environments generated along the way.

    Components of the covering quasi-tree are small-range balls of radius R
    around their centers.  After every move to a new component the union of
    long-range balls of depth L around the walker is revealed; the coupling
    fails at the first time a revealed component shares a state with another
    one or the two matchings disagree.  Until then the finite path is the
    projection of the quasi-tree path.  A walker leaving the small-range ball
    of radius R around its center ends the run, which is then censored.
    """
    n = spec.n
    rng = task_rng(seed, 8)
    match = _SequentialMatching(n, rng)
    balls = spec.forward_balls
    indptr, indices, cum = spec.row_tables
    comp_center = [x0]
    comp_parent = [-1]
    comp_entry = [-1]
    children: dict[tuple[int, int], int] = {}
    comp_states: list[set] = []
    owner: dict[int, int] = {}
    done: set[int] = set()
    failed = False

    def states_of(c):
        center = comp_center[c]
        return {int(s) for s, d in zip(balls.ball(center), balls.dist[balls.ptr[center]:balls.ptr[center + 1]])
                if d < R}

    def add_component(c):
        nonlocal failed
        sts = states_of(c)
        comp_states.append(sts)
        for s in sts:
            if s in owner and owner[s] != c:
                failed = True
            owner.setdefault(s, c)

    def child_of(c, v):
        nonlocal failed
        key = (c, v)
        if key not in children:
            y, drawn = match.reveal(v)
            if y != drawn:
                failed = True
            comp_center.append(y)
            comp_parent.append(c)
            comp_entry.append(v)
            children[key] = len(comp_center) - 1
            add_component(len(comp_center) - 1)
        return children[key]

    def neighbours(c):
        out = []
        if comp_parent[c] >= 0:
            out.append(comp_parent[c])
        for v in sorted(comp_states[c]):
            if c > 0 and v == comp_center[c]:
                continue
            out.append(child_of(c, v))
        return out

    def expand(c):
        seen = {c}
        frontier = [c]
        for _ in range(L):
            nxt = []
            for a in frontier:
                if a in done:
                    nb = [b for b in ([comp_parent[a]] if comp_parent[a] >= 0 else []) +
                          [children[(a, v)] for v in comp_states[a] if (a, v) in children]]
                else:
                    nb = neighbours(a)
                    done.add(a)
                if failed:
                    return
                for b in nb:
                    if b not in seen:
                        seen.add(b)
                        nxt.append(b)
            frontier = nxt

    add_component(0)
    n_ticks = int(round(2 * t_max))
    x = x0
    comp = 0
    fin = [x0]
    qt = [(0, x0)]
    t_coup = None
    deviated = False
    expand(0)
    if failed:
        t_coup = 0.0
    for i in range(n_ticks):
        if t_coup is not None:
            break
        if i % 2 == 0:
            y, _ = match.reveal(x)
            if rng.random() >= float(spec.p.p(x, y)):
                if comp > 0 and x == comp_center[comp]:
                    comp = comp_parent[comp]
                else:
                    comp = child_of(comp, x)
                x = y
                expand(comp)
        else:
            u = rng.random()
            x = int(indices[indptr[x] + np.searchsorted(cum[indptr[x]:indptr[x + 1]], u, side="right")])
            if x not in comp_states[comp]:
                deviated = True
        fin.append(x)
        qt.append((comp, x))
        if failed:
            t_coup = (i + 1) / 2
        if deviated:
            break
    censored = t_coup is None
    return CouplingResult(np.array(fin), qt, t_max if censored else t_coup, censored, len(match.eta) // 2,
                          len(owner), deviated)


@dataclass
class CouplingAudit:
    failure_fraction: float
    bound: float
    runs: int
    t: float
    R: int
    L: int
    path_only_failure: float
    path_only_bound: float

    @property
    def holds(self) -> bool:
        return self.failure_fraction <= 2 * self.bound


def coupling_audit(spec: MixtureSpec, t: float, R: int, L: int, runs: int, seed: int = 0) -> CouplingAudit:
    """Failure fraction of the coupling up to time t against E Bin(m, m Delta^R / n) with m = (t+1) Delta^L.

    Also reports the same quantities with no long-range neighbourhood (L = 0),
    where the bound is not vacuous at desk scale.
    """
    Delta = spec.Delta
    N = 2 * spec.n
    fails = fails0 = 0
    rng = task_rng(seed, 9)
    starts = rng.integers(0, N, runs)
    for r in range(runs):
        res = coupled_generation(spec, int(starts[r]), R, L, t, task_seed64(seed, r))
        fails += (not res.censored) and res.t_coup <= t
        res0 = coupled_generation(spec, int(starts[r]), R, 0, t, task_seed64(seed, r))
        fails0 += (not res0.censored) and res0.t_coup <= t
    m = (t + 1) * Delta ** L
    m0 = (t + 1)
    return CouplingAudit(fails / runs, m * m * Delta ** R / N, runs, t, R, L, fails0 / runs, m0 * m0 * Delta ** R / N)
