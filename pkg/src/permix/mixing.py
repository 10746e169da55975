"""Exact distribution evolution, total variation, stationary laws and cutoff scans."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from permix import _engine as eng
from permix.core import BudgetError, Environment, MixtureSpec, build_lifted_kernel, project_kernel, sample_environment
from permix.rng import task_rng


class NotIrreducible(ValueError):
    """The chain has more than one closed communicating class."""


def tv_distance(mu, nu) -> float:
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if mu.shape != nu.shape:
        raise ValueError(f"dimension mismatch: {mu.shape} vs {nu.shape}")
    return 0.5 * float(np.abs(mu - nu).sum())


def closed_classes(K: sp.spmatrix) -> list[np.ndarray]:
    """Strongly connected components with no edge leaving them."""
    K = sp.csr_matrix(K)
    count, labels = connected_components(K, directed=True, connection="strong")
    rows, cols = K.nonzero()
    leaking = np.zeros(count, dtype=bool)
    leaking[labels[rows][labels[rows] != labels[cols]]] = True
    return [np.flatnonzero(labels == c) for c in range(count) if not leaking[c]]


def stationary_distribution(K, tol: float = 1e-12, max_iter: int = 200_000, fallback: bool = True) -> np.ndarray:
    """Invariant law by power iteration on the lazy kernel (I + K) / 2.

    Slowly mixing chains may stall the iteration; with ``fallback`` the law
    is then obtained from a sparse LU solve of pi (K - I) = 0, sum pi = 1.
    """
    K = sp.csr_matrix(K)
    if len(closed_classes(K)) > 1:
        raise NotIrreducible("more than one closed class")
    m = K.shape[0]
    KT = K.T.tocsr()
    pi = np.full(m, 1.0 / m)
    for it in range(max_iter):
        step = KT @ pi
        if np.abs(step - pi).sum() <= tol:
            return step / step.sum()
        pi = 0.5 * (pi + step)
        if it % 64 == 0:
            pi /= pi.sum()
    if not fallback:
        raise BudgetError(f"power iteration did not reach residual {tol} in {max_iter} steps")
    return stationary_direct(K)


def stationary_direct(K) -> np.ndarray:
    """Invariant law of an irreducible chain by one sparse LU solve."""
    K = sp.csr_matrix(K)
    m = K.shape[0]
    A = (K.T - sp.identity(m)).tolil()
    A[0, :] = np.ones(m)
    b = np.zeros(m)
    b[0] = 1.0
    pi = spla.splu(A.tocsc()).solve(b)
    pi = np.clip(pi, 0, None)
    return pi / pi.sum()


@dataclass
class MixingProfile:
    start: int
    tv_curve: np.ndarray
    tmix: dict
    censored: dict = field(default_factory=dict)

    def as_rows(self):
        return [(t, float(v)) for t, v in enumerate(self.tv_curve)]


def tv_curves(K, starts: Sequence[int], pi: np.ndarray, t_max: int, stop_below: float = 0.0) -> np.ndarray:
    """TV(K^t(x, .), pi) for each start x and t = 0..t_max (rows = starts).

    Evolution stops early once every curve is below ``stop_below``; the
    remaining entries are filled with NaN.
    """
    KT = sp.csr_matrix(K).T.tocsr()
    starts = np.asarray(starts, dtype=np.int64)
    dist = np.zeros((KT.shape[0], starts.size))
    dist[starts, np.arange(starts.size)] = 1.0
    out = np.full((starts.size, t_max + 1), np.nan)
    for t in range(t_max + 1):
        out[:, t] = 0.5 * np.abs(dist - pi[:, None]).sum(axis=0)
        if stop_below > 0 and np.all(out[:, t] < stop_below):
            break
        dist = KT @ dist
    return out


def mixing_times(K, starts: Sequence[int], pi: np.ndarray, eps: float = 0.25, t_max: int = 1_000_000) -> np.ndarray:
    """t_mix(x, eps) for each start by compiled exact evolution; -1 marks a start censored at t_max."""
    KT = sp.csr_matrix(K).T.tocsr()
    return eng.tv_first_below(KT.indptr.astype(np.int64), KT.indices.astype(np.int64), KT.data.astype(float),
                              np.asarray(starts, dtype=np.int64), np.asarray(pi, dtype=float), float(eps), int(t_max))


def first_below(curve: np.ndarray, eps: float) -> int | None:
    hit = np.flatnonzero(curve < eps)
    return int(hit[0]) if hit.size else None


def mixing_profile(K, x: int, eps_list: Iterable[float] = (0.25,), t_max: int = 1000,
                   pi: np.ndarray | None = None) -> MixingProfile:
    if pi is None:
        pi = stationary_distribution(K)
    eps_list = list(eps_list)
    curve = tv_curves(K, [x], pi, t_max, stop_below=min(eps_list))[0]
    curve = curve[~np.isnan(curve)]
    tmix = {}
    censored = {}
    for eps in eps_list:
        t = first_below(curve, eps)
        censored[eps] = t is None
        tmix[eps] = t_max + 1 if t is None else t
    return MixingProfile(x, curve, tmix, censored)


@dataclass
class CutoffRecord:
    n: int
    seed: int
    start: int
    t_eps: int
    t_comp: int

    @property
    def window(self) -> int:
        return self.t_eps - self.t_comp


@dataclass
class CutoffScanResult:
    eps: float
    records: list
    skipped: dict
    h_hat: float
    intercept: float

    def ns(self) -> list[int]:
        return sorted({r.n for r in self.records})

    def relative_window(self) -> dict:
        """Mean of (t_mix(eps) - t_mix(1-eps)) / t_mix(eps) per n."""
        out = {}
        for n in self.ns():
            rs = [r for r in self.records if r.n == n]
            out[n] = float(np.mean([r.window / r.t_eps for r in rs]))
        return out

    def mean_tmix(self) -> dict:
        return {n: float(np.mean([r.t_eps for r in self.records if r.n == n])) for n in self.ns()}

    def window_over_sqrt_log(self) -> dict:
        return {n: float(np.mean([r.window for r in self.records if r.n == n]) / np.sqrt(np.log(n)))
                for n in self.ns()}


def chain_kernel(spec: MixtureSpec, env: Environment, chain: str = "lifted") -> sp.csr_matrix:
    lift = build_lifted_kernel(spec, env)
    if chain == "lifted":
        return lift.matrix
    if chain == "projected":
        return project_kernel(lift, env).matrix
    raise ValueError(f"unknown chain {chain!r}")


def cutoff_scan(family: Callable[[int], MixtureSpec], n_grid: Sequence[int], eps: float = 0.25,
                seeds_per_n: int = 10, starts_per_seed: int = 10, t_max: int = 5000,
                chain: str = "lifted", seed: int = 0) -> CutoffScanResult:
    """t_mix(x, eps) and t_mix(x, 1 - eps) from uniformly drawn starts over sampled environments."""
    lo, hi = sorted((eps, 1 - eps))
    records = []
    skipped = {}
    for n in n_grid:
        spec = family(n)
        skipped[n] = 0
        for s in range(seeds_per_n):
            env_seed = seed * 1_000_003 + n * 1009 + s
            env = sample_environment(n, env_seed)
            K = chain_kernel(spec, env, chain)
            try:
                pi = stationary_distribution(K)
            except NotIrreducible:
                skipped[n] += 1
                continue
            rng = task_rng(env_seed, 1)
            starts = rng.integers(0, K.shape[0], size=starts_per_seed)
            curves = tv_curves(K, starts, pi, t_max, stop_below=lo)
            for x, curve in zip(starts, curves):
                t_lo = first_below(curve, lo)
                t_hi = first_below(curve, hi)
                if t_lo is None:
                    raise BudgetError(f"t_max={t_max} too small at n={n}")
                records.append(CutoffRecord(n, env_seed, int(x), t_lo, t_hi))
    logs = np.log([r.n for r in records])
    ts = np.array([r.t_eps for r in records], dtype=float)
    if len(set(logs)) > 1:
        slope, intercept = np.polyfit(logs, ts, 1)
    else:
        slope, intercept = ts.mean() / logs[0], 0.0
    return CutoffScanResult(eps, records, skipped, float(1.0 / slope), float(intercept))


def l2_flatness(pi, b: float, n: int) -> tuple[float, float, float]:
    """Split pi at (log n)^b / n; return (mass below, squared l2 norm below, mass above)."""
    pi = np.asarray(pi, dtype=float)
    small = pi <= np.log(n) ** b / n
    return float(pi[small].sum()), float((pi[small] ** 2).sum()), float(pi[~small].sum())
