"""Compiled walkers for the finite chain and the lazily generated quasi-tree.

Random numbers come from a splitmix64 stream held in a one-element uint64
array, so every walker is reproducible from a 64-bit seed.  Quasi-tree
children are drawn from a hash of the parent label, which makes the tree a
function of the root key alone, independent of the order of exploration.

Quasi-tree layout: a component ``k`` is the forward reachable set of its
center type ``ctype[k]``; vertex ``(k, j)`` has type ``ball_states[ball_ptr[
ctype[k]] + j]`` and local index 0 is the center.  The partner of ``(k, 0)``
is the parent vertex ``(cparent[k], cplocal[k])`` unless ``k`` is the root;
every other vertex leads to a child component ``cchild[k, j]`` (-1 until
materialized).
"""

from __future__ import annotations

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
INV53 = 1.0 / 9007199254740992.0

# outcome codes shared with the Python side
REACHED = 0
DEVIATED = 1
RETURNED = 2
TIMEOUT = 3


@njit(cache=True, inline="always")
def fmix(z):
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def uniform(state):
    state[0] += GOLDEN
    return (fmix(state[0]) >> np.uint64(11)) * INV53


@njit(cache=True, inline="always")
def sample_row(indptr, indices, cum, v, u):
    hi = indptr[v + 1]
    for i in range(indptr[v], hi - 1):
        if u < cum[i]:
            return indices[i]
    return indices[hi - 1]


@njit(cache=True, inline="always")
def ball_distance(bptr, bstates, bdist, center, x):
    for i in range(bptr[center], bptr[center + 1]):
        if bstates[i] == x:
            return bdist[i]
    return 1 << 30


# ---------------------------------------------------------------- finite chain


@njit(cache=True)
def fin_walks(fm, starts, tick0, n_ticks, rng, out):
    """Fill ``out[w, i]`` with the state of walker w after i ticks."""
    indptr, indices, cum, eta, jump = fm[0], fm[1], fm[2], fm[3], fm[4]
    for w in range(starts.size):
        x = starts[w]
        out[w, 0] = x
        for i in range(n_ticks):
            if (tick0 + i) % 2 == 0:
                if uniform(rng) < jump[x]:
                    x = eta[x]
            else:
                x = sample_row(indptr, indices, cum, x, uniform(rng))
            out[w, i + 1] = x


@njit(cache=True)
def fin_first_edges(fm, x0, tick0, R, L, forbid, n_walkers, max_ticks, rng, out_edge, out_code):
    """Run walkers until their loop-erased stack reaches depth L.

    Records the tail of the bottom stack edge (the first loop-erased edge) on
    success.  A walker stops early when it deviates (small-range distance to
    the current center >= R), visits ``forbid`` or runs out of ticks.
    """
    indptr, indices, cum, eta, jump = fm[0], fm[1], fm[2], fm[3], fm[4]
    bptr, bstates, bdist = fm[5], fm[6], fm[7]
    stack = np.empty(L + 1, dtype=np.int64)
    for w in range(n_walkers):
        x = x0
        depth = 0
        center = x0
        code = TIMEOUT
        for i in range(max_ticks):
            if (tick0 + i) % 2 == 0:
                if uniform(rng) < jump[x]:
                    y = eta[x]
                    if depth > 0 and eta[stack[depth - 1]] == x:
                        depth -= 1
                        center = x0 if depth == 0 else eta[stack[depth - 1]]
                    else:
                        stack[depth] = x
                        depth += 1
                        center = y
                    x = y
            else:
                x = sample_row(indptr, indices, cum, x, uniform(rng))
            if x == forbid:
                code = RETURNED
                break
            if ball_distance(bptr, bstates, bdist, center, x) >= R:
                code = DEVIATED
                break
            if depth == L:
                code = REACHED
                break
        out_code[w] = code
        out_edge[w] = stack[0] if code == REACHED else -1


@njit(cache=True)
def crossing_table(states, n_side):
    """Indices i such that the move states[i-1] -> states[i] used a long-range edge."""
    out = np.empty(states.size, dtype=np.int64)
    m = 0
    for i in range(1, states.size):
        if (states[i] >= n_side) != (states[i - 1] >= n_side):
            out[m] = i
            m += 1
    return out[:m]


@njit(cache=True)
def classify_crossings(states, eta, n_side, L, W):
    """Regeneration status of every long-range crossing of a finite path.

    Returns (index, code) arrays with codes: 0 repeated edge, 1 qualifies
    (long-range distance L reached before returning to the first endpoint),
    2 returned first, 3 unresolved within the lookahead W, 4 path ended first.
    """
    cross = crossing_table(states, n_side)
    m = cross.size
    depth = np.empty(states.size, dtype=np.int64)
    stack = np.empty(m + 1, dtype=np.int64)
    d = 0
    depth[0] = 0
    for i in range(1, states.size):
        a = states[i - 1]
        if (states[i] >= n_side) != (a >= n_side):
            if d > 0 and eta[stack[d - 1]] == a:
                d -= 1
            else:
                stack[d] = a
                d += 1
        depth[i] = d
    codes = np.empty(m, dtype=np.int64)
    seen = np.empty(m, dtype=np.int64)
    for c in range(m):
        i = cross[c]
        a = states[i - 1]
        key = min(a, eta[a])
        repeated = False
        for s in range(c):
            if seen[s] == key:
                repeated = True
        seen[c] = key
        if repeated:
            codes[c] = 0
            continue
        target = depth[i] - 1 + L
        code = 4
        for k in range(i, states.size):
            if k - i > W:
                code = 3
                break
            if states[k] == a:
                code = 2
                break
            if depth[k] >= target:
                code = 1
                break
            if depth[k] < depth[i]:
                code = 2
                break
        codes[c] = code
    return cross, codes


@njit(cache=True)
def deviation_index(states, eta, n_side, bptr, bstates, bdist, R):
    """First index where the small-range distance from the current center reaches R, or -1."""
    stack = np.empty(states.size + 1, dtype=np.int64)
    d = 0
    center = states[0]
    for i in range(1, states.size):
        a = states[i - 1]
        x = states[i]
        if (x >= n_side) != (a >= n_side):
            if d > 0 and eta[stack[d - 1]] == a:
                d -= 1
                center = states[0] if d == 0 else eta[stack[d - 1]]
            else:
                stack[d] = a
                d += 1
                center = x
        if ball_distance(bptr, bstates, bdist, center, x) >= R:
            return i
    return -1


@njit(cache=True)
def fin_regeneration_runs(fm, starts, L, n_ticks, rng, out_states, out_ok):
    """Walk from each start at tick 1 and flag the runs with depth L before visiting eta(start)."""
    indptr, indices, cum, eta, jump = fm[0], fm[1], fm[2], fm[3], fm[4]
    n_side = eta.size // 2
    last_tail = np.empty(n_ticks + 1, dtype=np.int64)
    for w in range(starts.size):
        u = starts[w]
        x = u
        forbid = eta[u]
        out_states[w, 0] = x
        d = 0
        ok = False
        bad = False
        for i in range(n_ticks):
            if (1 + i) % 2 == 0:
                if uniform(rng) < jump[x]:
                    y = eta[x]
                    if d > 0 and eta[last_tail[d - 1]] == x:
                        d -= 1
                    else:
                        last_tail[d] = x
                        d += 1
                    x = y
            else:
                x = sample_row(indptr, indices, cum, x, uniform(rng))
            out_states[w, i + 1] = x
            if not ok and not bad:
                if x == forbid:
                    bad = True
                elif d >= L:
                    ok = True
        out_ok[w] = ok and not bad
    return n_side


# ---------------------------------------------------------------- quasi-tree


@njit(cache=True, inline="always")
def child_key(key, j):
    return fmix(key ^ (np.uint64(j + 1) * GOLDEN))


@njit(cache=True, inline="always")
def drawn_type(key, v, n):
    z = np.int64(fmix(key + GOLDEN) % np.uint64(n))
    return z + n if v < n else z


@njit(cache=True, inline="always")
def p_value(qm, x, y):
    n, cls1, cls2, ptab = qm[0], qm[6], qm[7], qm[8]
    if x < n:
        return ptab[cls1[x], cls2[y - n]]
    return 1.0 - ptab[cls1[y], cls2[x - n]]


@njit(cache=True, inline="always")
def vertex_type(tree, qm, k, j):
    return qm[5][qm[4][tree[0][k]] + j]


@njit(cache=True)
def partner_type(tree, qm, k, j):
    ctype, cparent, cplocal, ckey, cchild = tree[0], tree[1], tree[2], tree[4], tree[5]
    if j == 0 and cparent[k] >= 0:
        return vertex_type(tree, qm, cparent[k], cplocal[k])
    c = cchild[k, j]
    if c >= 0:
        return ctype[c]
    return drawn_type(child_key(ckey[k], j), vertex_type(tree, qm, k, j), qm[0])


@njit(cache=True)
def materialize(tree, qm, k, j):
    ctype, cparent, cplocal, cdepth, ckey, cchild, meta, log = tree
    c = cchild[k, j]
    if c >= 0:
        return c
    c = meta[0]
    key = child_key(ckey[k], j)
    ctype[c] = drawn_type(key, vertex_type(tree, qm, k, j), qm[0])
    cparent[c] = k
    cplocal[c] = j
    cdepth[c] = cdepth[k] + 1
    ckey[c] = key
    for i in range(cchild.shape[1]):
        cchild[c, i] = -1
    cchild[k, j] = c
    log[meta[1]] = k * cchild.shape[1] + j
    meta[0] = c + 1
    meta[1] += 1
    return c


@njit(cache=True)
def rollback(tree, n_comp, n_log):
    cchild, meta, log = tree[5], tree[6], tree[7]
    width = cchild.shape[1]
    for i in range(n_log, meta[1]):
        cchild[log[i] // width, log[i] % width] = -1
    meta[0] = n_comp
    meta[1] = n_log


@njit(cache=True)
def qt_tick(tree, qm, k, j, tick, rng):
    """One tick of the quasi-tree walker; returns (k, j, move) with move -1 up, 1 down, 0 none."""
    if tick % 2 == 0:
        v = vertex_type(tree, qm, k, j)
        w = partner_type(tree, qm, k, j)
        if uniform(rng) < 1.0 - p_value(qm, v, w):
            if j == 0 and tree[1][k] >= 0:
                return tree[1][k], tree[2][k], -1
            return materialize(tree, qm, k, j), 0, 1
        return k, j, 0
    indptr, indices, cum, bptr, bstates = qm[1], qm[2], qm[3], qm[4], qm[5]
    v = vertex_type(tree, qm, k, j)
    w = sample_row(indptr, indices, cum, v, uniform(rng))
    lo = bptr[tree[0][k]]
    for i in range(lo, bptr[tree[0][k] + 1]):
        if bstates[i] == w:
            return k, i - lo, 0
    return k, -1, 0


@njit(cache=True)
def qt_walk(tree, qm, k, j, tick0, n_ticks, rng, out_k, out_j):
    out_k[0] = k
    out_j[0] = j
    for i in range(n_ticks):
        k, j, _ = qt_tick(tree, qm, k, j, tick0 + i, rng)
        out_k[i + 1] = k
        out_j[i + 1] = j


@njit(cache=True)
def qt_regenerations(out_k, cparent, cdepth, n_comp):
    """Crossings into a fresh component whose subtree is never left afterwards.

    Returns (tick index, component) pairs in time order.
    """
    visited = np.zeros(n_comp, dtype=np.bool_)
    visited[out_k[0]] = True
    st_i = np.empty(out_k.size, dtype=np.int64)
    st_c = np.empty(out_k.size, dtype=np.int64)
    top = 0
    for i in range(1, out_k.size):
        a = out_k[i - 1]
        b = out_k[i]
        if a == b:
            continue
        if cparent[b] == a:
            if not visited[b]:
                visited[b] = True
                st_i[top] = i
                st_c[top] = b
                top += 1
        else:
            d = cdepth[a]
            while top > 0 and cdepth[st_c[top - 1]] >= d:
                top -= 1
    return st_i[:top].copy(), st_c[:top].copy()


@njit(cache=True)
def qt_stay(tree, qm, k, j, tick0, guard, forbid, must_enter, H, trials, rng):
    """Number of trials that within H ticks never cross up out of component ``guard``
    and never enter component ``forbid`` (either may be -1).

    With ``must_enter`` the first tick has to move the walker into ``guard``.
    Components created by a trial are discarded afterwards.
    """
    meta = tree[6]
    n_comp = meta[0]
    n_log = meta[1]
    hits = 0
    for _ in range(trials):
        kk, jj = k, j
        ok = True
        for i in range(H):
            nk, nj, mv = qt_tick(tree, qm, kk, jj, tick0 + i, rng)
            if i == 0 and must_enter and nk != guard:
                ok = False
                break
            if (mv == -1 and kk == guard) or nk == forbid:
                ok = False
                break
            kk, jj = nk, nj
        if ok:
            hits += 1
        rollback(tree, n_comp, n_log)
    return hits


@njit(cache=True)
def ancestor_at(cparent, cdepth, c, depth):
    while cdepth[c] > depth:
        c = cparent[c]
    return c


@njit(cache=True)
def qt_hits(tree, qm, k, tick0, target, extra, H, n_walkers, rng):
    """Relaunch walkers from the center of component k.

    Walkers crossing up out of k are rejected; the others are followed until
    their depth reaches depth(target) + extra and counted as hits when they
    sit below ``target``.  Returns (accepted, hits, undecided).
    """
    cparent, cdepth, meta = tree[1], tree[3], tree[6]
    n_comp = meta[0]
    n_log = meta[1]
    goal = cdepth[target] + extra
    accepted = 0
    hits = 0
    undecided = 0
    for _ in range(n_walkers):
        kk, jj = k, 0
        state = 2
        for i in range(H):
            nk, nj, mv = qt_tick(tree, qm, kk, jj, tick0 + i, rng)
            if mv == -1 and kk == k:
                state = 0
                break
            kk, jj = nk, nj
            if cdepth[kk] >= goal:
                state = 1
                break
        if state == 1:
            accepted += 1
            if ancestor_at(cparent, cdepth, kk, cdepth[target]) == target:
                hits += 1
        elif state == 2:
            undecided += 1
        rollback(tree, n_comp, n_log)
    return accepted, hits, undecided


# ---------------------------------------------------------------- exact evolution


@njit(cache=True)
def tv_first_below(indptr, indices, data, starts, pi, eps, t_max):
    """First t with TV(K^t(x, .), pi) < eps for each start x, or -1 past t_max.

    ``indptr, indices, data`` hold the transpose of K in CSR form, so one
    step of a distribution is a row-wise gather.
    """
    m = pi.size
    out = np.full(starts.size, -1, dtype=np.int64)
    cur = np.zeros(m)
    nxt = np.zeros(m)
    for s in range(starts.size):
        cur[:] = 0.0
        cur[starts[s]] = 1.0
        for t in range(t_max + 1):
            tv = 0.0
            for i in range(m):
                tv += abs(cur[i] - pi[i])
            if 0.5 * tv < eps:
                out[s] = t
                break
            for i in range(m):
                acc = 0.0
                for a in range(indptr[i], indptr[i + 1]):
                    acc += data[a] * cur[indices[a]]
                nxt[i] = acc
            cur, nxt = nxt, cur
    return out
