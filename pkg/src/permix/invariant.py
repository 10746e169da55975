"""Invariant and quasi-stationary measures of P, and the invariant field of the quasi-tree walker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import stats
from scipy.sparse.csgraph import connected_components

from permix.core import MixtureSpec
from permix.quasitree import LazyQuasiTree
from permix.rng import task_rng


@dataclass
class ClassMeasure:
    """Communicating classes of P with one measure per class.

    Recurrent classes carry their invariant probability (eigenvalue 1);
    transient classes carry the Perron left eigenvector of the restricted
    block with its eigenvalue.  Vectors are normalized to probability.
    """

    classes: list
    recurrent: list
    eigenvalues: list
    measures: list
    labels: np.ndarray

    def combined(self) -> np.ndarray:
        """Per-class probability measures laid side by side on the full state space."""
        out = np.zeros(self.labels.size)
        for states, mu in zip(self.classes, self.measures):
            out[states] = mu
        return out

    def residuals(self, P) -> list[float]:
        P = sp.csr_matrix(P)
        out = []
        for states, mu, lam in zip(self.classes, self.measures, self.eigenvalues):
            block = P[states][:, states].toarray()
            out.append(float(np.abs(mu @ block - lam * mu).max()))
        return out


def _perron_left(block: np.ndarray) -> tuple[float, np.ndarray]:
    vals, vecs = np.linalg.eig(block.T)
    i = int(np.argmax(vals.real))
    v = np.abs(vecs[:, i].real)
    v /= v.sum()
    return float(vals[i].real), v


def class_measures(P) -> ClassMeasure:
    """Strongly connected classes of P with invariant or quasi-stationary measures."""
    P = sp.csr_matrix(P)
    count, labels = connected_components(P, directed=True, connection="strong")
    rows, cols = P.nonzero()
    leaving = np.zeros(count, dtype=bool)
    cross = labels[rows] != labels[cols]
    leaving[labels[rows][cross]] = True
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(count + 1))
    classes, recurrent, eigs, measures = [], [], [], []
    for c in range(count):
        states = order[bounds[c]:bounds[c + 1]]
        block = P[states][:, states].toarray()
        if leaving[c]:
            lam, mu = _perron_left(block)
        else:
            # the invariant law of a closed class solves mu (B - I) = 0, sum mu = 1
            m = states.size
            A = np.vstack([(block - np.eye(m)).T, np.ones(m)])
            b = np.zeros(m + 1)
            b[-1] = 1.0
            mu = np.linalg.lstsq(A, b, rcond=None)[0]
            mu = np.clip(mu, 0, None)
            mu /= mu.sum()
            lam = 1.0
        classes.append(states)
        recurrent.append(not leaving[c])
        eigs.append(lam)
        measures.append(mu)
    return ClassMeasure(classes, recurrent, eigs, measures, labels)


def invariant_weights(spec: MixtureSpec) -> np.ndarray:
    """pi_P on the full state space, each class normalized to probability."""
    return class_measures(spec.P).combined()


def center_weight_a(x: int, partner: int, pi_P, spec: MixtureSpec) -> float:
    """a_x = pi(eta x) q(eta x, x) / (pi(x) q(x, eta x)) for a center of type x matched to ``partner``."""
    num = pi_P[partner] * float(spec.p.q(partner, x))
    den = pi_P[x] * float(spec.p.q(x, partner))
    if pi_P[x] == 0 or pi_P[partner] == 0:
        raise ValueError("zero weight at a matched endpoint; use a quasi-stationary measure")
    if den == 0:
        raise ValueError("zero crossing probability at the center")
    return float(num / den)


@dataclass
class Truncation:
    """Components of a quasi-tree down to a given depth with the invariant field on them."""

    tree: LazyQuasiTree
    depth: int
    comps: list
    Z: dict
    Z_alt: dict
    interior: list
    boundary: list
    nu: dict = field(default_factory=dict)

    def vertices(self):
        for k in self.comps:
            for j in range(self.tree.component_size(k)):
                yield k, j


def _step_weight(tree: LazyQuasiTree, spec: MixtureSpec, k: int, j: int):
    """Stay probability at vertex (k, j) given its realized partner."""
    v = tree.vertex_type(k, j)
    w = tree.partner_type(k, j)
    return float(spec.p.p(v, w)), v, w


def build_truncation(tree: LazyQuasiTree, depth: int, pi_P) -> Truncation:
    """Materialize components down to ``depth`` and compute Z on their centers."""
    spec = tree.spec
    comps = tree.materialize_depth(depth)
    Z = {0: 1.0}
    Z_alt = {0: 1.0}
    for c in comps[1:]:
        parent, local = int(tree.cparent[c]), int(tree.cplocal[c])
        center = tree.vertex_type(c, 0)
        outside = tree.vertex_type(parent, local)
        Z[c] = Z[parent] * center_weight_a(center, outside, pi_P, spec)
    for c in comps[1:]:
        chain = [a for a in reversed(tree.ancestors(c)) if a != 0]
        prod = 1.0
        for a, b in zip(chain, chain[1:]):
            xa = tree.vertex_type(a, 0)
            eta_b = tree.vertex_type(b, 0)
            into = tree.vertex_type(int(tree.cparent[b]), int(tree.cplocal[b]))
            eta_a = tree.vertex_type(int(tree.cparent[a]), int(tree.cplocal[a]))
            prod *= (pi_P[into] * float(spec.p.q(into, eta_b))) / (pi_P[xa] * float(spec.p.q(xa, eta_a)))
        Z_alt[c] = prod
    interior = [k for k in comps if tree.cdepth[k] < depth]
    boundary = [k for k in comps if tree.cdepth[k] >= depth]
    trunc = Truncation(tree, depth, comps, Z, Z_alt, interior, boundary)
    trunc.nu = {(k, j): Z[k] * pi_P[tree.vertex_type(k, j)] for k, j in trunc.vertices()}
    return trunc


def nu_measure(tree: LazyQuasiTree, depth: int, pi_P) -> Truncation:
    """nu(x) = Z(x) pi_P(x) on a truncation (unnormalized)."""
    return build_truncation(tree, depth, pi_P)


def z_alternative_gap(trunc: Truncation, pi_P) -> float:
    """Largest relative gap in Z(x) = [first factor / last factor] Z'(x) over non-root centers."""
    tree, spec = trunc.tree, trunc.tree.spec
    worst = 0.0
    for c in trunc.comps[1:]:
        chain = [a for a in reversed(tree.ancestors(c)) if a != 0]
        first, last = chain[0], chain[-1]
        x1 = tree.vertex_type(first, 0)
        eta_x1 = tree.vertex_type(int(tree.cparent[first]), int(tree.cplocal[first]))
        xk = tree.vertex_type(last, 0)
        eta_xk = tree.vertex_type(int(tree.cparent[last]), int(tree.cplocal[last]))
        factor = (pi_P[eta_x1] * float(spec.p.q(eta_x1, x1))) / (pi_P[xk] * float(spec.p.q(xk, eta_xk)))
        gap = abs(factor * trunc.Z_alt[c] - trunc.Z[c]) / trunc.Z[c]
        worst = max(worst, gap)
    return worst


@dataclass
class ResidualReport:
    max_residual: float
    max_relative: float
    interior_vertices: int
    excluded_vertices: int


def stationarity_residual(trunc: Truncation) -> ResidualReport:
    """max over interior y of |sum_x nu(x) K(x, y) - nu(y)| where K is one full step of the walker.

    A vertex is interior when its component and all child components are in
    the truncation, so every in-neighbour carries a value of nu.
    """
    tree, spec = trunc.tree, trunc.tree.spec
    P = spec.P
    indptr, indices, data = P.indptr, P.indices, P.data
    inflow: dict = {}

    def push(k, v_local, mass):
        # P-step from local vertex v_local inside component k
        v = tree.vertex_type(k, v_local)
        states = tree.component_states(k)
        pos = {int(s): i for i, s in enumerate(states)}
        for a in range(indptr[v], indptr[v + 1]):
            key = (k, pos[int(indices[a])])
            inflow[key] = inflow.get(key, 0.0) + mass * data[a]

    for (k, j), mass in trunc.nu.items():
        stay, _, _ = _step_weight(tree, spec, k, j)
        push(k, j, mass * stay)
        if j == 0 and tree.cparent[k] >= 0:
            push(int(tree.cparent[k]), int(tree.cplocal[k]), mass * (1 - stay))
        else:
            c = int(tree.cchild[k, j])
            if c >= 0:
                push(c, 0, mass * (1 - stay))
    worst = worst_rel = 0.0
    count = 0
    for k in trunc.interior:
        for j in range(tree.component_size(k)):
            nu = trunc.nu[(k, j)]
            r = abs(inflow.get((k, j), 0.0) - nu)
            worst = max(worst, r)
            worst_rel = max(worst_rel, r / nu if nu else r)
            count += 1
    return ResidualReport(worst, worst_rel, count, len(trunc.nu) - count)


@dataclass
class BackboneReport:
    labels: int
    backbone: int
    b_min: float
    bound: float
    log_b: np.ndarray
    product_gap: float

    @property
    def fraction(self) -> float:
        return self.backbone / self.labels if self.labels else 1.0

    @property
    def bounded(self) -> bool:
        return self.b_min >= self.bound * (1 - 1e-12)


def label_weight(spec: MixtureSpec, u: int, v: int, eta_u: int, eta_v: int, pi_P) -> float:
    """b_(u,v) = pi(v) q(v, eta v) / (pi(u) q(u, eta u))."""
    return (pi_P[v] * float(spec.p.q(v, eta_v))) / (pi_P[u] * float(spec.p.q(u, eta_u)))


def backbone_diagnostic(trunc: Truncation, l: int, pi_P) -> BackboneReport:
    """Classify skeleton edge labels (u, v): backbone iff d(u, v) <= 2 or d(v, u) <= 2.

    Every component k with center type u contributes the labels (u, v) for
    the other vertices v of its component; backbone weights are checked
    against delta^(2l + 1).
    """
    tree, spec = trunc.tree, trunc.tree.spec
    balls = spec.forward_balls
    delta = float(spec.delta_floor)
    total = backbone = 0
    b_min = np.inf
    logs = []
    gap = 0.0
    for k in trunc.comps:
        u = tree.vertex_type(k, 0)
        eta_u = tree.partner_type(k, 0)
        for j in range(1, tree.component_size(k)):
            if tree.cchild[k, j] < 0:
                continue
            v = tree.vertex_type(k, j)
            eta_v = tree.partner_type(k, j)
            b = label_weight(spec, u, v, eta_u, eta_v, pi_P)
            back = label_weight(spec, v, u, eta_v, eta_u, pi_P)
            gap = max(gap, abs(b * back - 1))
            logs.append(np.log(b))
            total += 1
            if balls.distance(u, v) <= 2 or balls.distance(v, u) <= 2:
                backbone += 1
                b_min = min(b_min, b)
    return BackboneReport(total, backbone, float(b_min), delta ** (2 * l + 1), np.asarray(logs), gap)


def label_symmetry_test(spec: MixtureSpec, pi_P, samples: int, seed: int = 0) -> float:
    """Two-sided sign-test p-value for log b over uniformly assigned labels."""
    rng = task_rng(seed, 11)
    cm = class_measures(spec.P)
    classes = [c for c in cm.classes if c.size >= 2]
    sizes = np.array([c.size for c in classes], dtype=float)
    n = spec.n
    pos = neg = 0
    for _ in range(samples):
        cls = classes[rng.choice(len(classes), p=sizes / sizes.sum())]
        u, v = rng.choice(cls, 2, replace=False)
        other = (lambda s: int(rng.integers(n)) + (n if s < n else 0))
        b = label_weight(spec, int(u), int(v), other(u), other(v), pi_P)
        if b > 1:
            pos += 1
        elif b < 1:
            neg += 1
    if pos + neg == 0:
        return 1.0
    return float(stats.binomtest(pos, pos + neg, 0.5).pvalue)
