"""Ready-made model specs: the six-state toy and the demo family."""

from __future__ import annotations

from fractions import Fraction as F

from permix.core import MixingTable, MixtureSpec, block_matrix


def tiny6() -> MixtureSpec:
    """Two triangles on the first side, three flip pairs on the second; p = 1/2."""
    half = F(1, 2)
    triangle = [[0, half, half], [half, 0, half], [half, half, 0]]
    flip = [[half, half], [half, half]]
    P1 = block_matrix([triangle, triangle])
    P2 = block_matrix([flip, flip, flip])
    return MixtureSpec(6, P1, P2, MixingTable.constant(6, half), half, 3, "tiny6")


# per-position (forward, backward, stay) rates of irreversible cycles with a
# non-uniform invariant law
_CYCLE4 = ((F(1, 2), F(3, 10), F(1, 5)), (F(3, 5), F(1, 5), F(1, 5)),
           (F(2, 5), F(2, 5), F(1, 5)), (F(1, 2), F(1, 5), F(3, 10)))
_CYCLE3 = ((F(1, 2), F(3, 10), F(1, 5)), (F(3, 5), F(1, 5), F(1, 5)), (F(3, 10), F(1, 2), F(1, 5)))
_PLAIN = (F(1, 2), F(3, 10), F(1, 5))
# p(x, y) by (position class of x, position class of y); class 4 / 3 marks a
# remainder block
_MIX = (
    (F(1, 2), F(3, 5), F(1, 2), F(1, 2)),
    (F(2, 5), F(1, 2), F(3, 5), F(1, 2)),
    (F(3, 5), F(2, 5), F(1, 2), F(1, 2)),
    (F(1, 2), F(1, 2), F(2, 5), F(1, 2)),
    (F(1, 2), F(1, 2), F(1, 2), F(1, 2)),
)


def _partition(n: int, size: int) -> list[int]:
    """Block sizes covering n with blocks of ``size``; the last absorbs the remainder."""
    count = max(n // size, 1)
    sizes = [size] * count
    sizes[-1] += n - size * count
    return sizes


def rate_cycle(rates) -> list[list[F]]:
    size = len(rates)
    rows = [[F(0)] * size for _ in range(size)]
    for i, (fwd, back, stay) in enumerate(rates):
        rows[i][(i + 1) % size] += fwd
        rows[i][(i - 1) % size] += back
        rows[i][i] += stay
    return rows


def _side(n: int, rates) -> tuple[list, list[int]]:
    size = len(rates)
    blocks, classes = [], []
    for b in _partition(n, size):
        if b == size:
            blocks.append(rate_cycle(rates))
            classes += list(range(size))
        else:
            blocks.append(rate_cycle([_PLAIN] * b))
            classes += [size] * b
    return blocks, classes


def demo_spec(n: int) -> MixtureSpec:
    """Demo family: irreversible 4-cycles on the first side, 3-cycles on the second.

    Needs n >= 4.  When the block size does not divide n, the last block of
    that side is a longer cycle with position-independent rates.  The mixing
    probability depends on the positions of the two matched states inside
    their cycles.
    """
    if n < 4:
        raise ValueError("the demo family needs n >= 4")
    blocks1, classes1 = _side(n, _CYCLE4)
    blocks2, classes2 = _side(n, _CYCLE3)
    p = MixingTable(tuple(classes1), tuple(classes2), _MIX)
    return MixtureSpec(n, block_matrix(blocks1), block_matrix(blocks2), p, F(1, 5), 3, f"demo-{n}")


def named_spec(name: str) -> MixtureSpec:
    """Resolve ``tiny6``, ``demo-<n>`` or ``counterexample-<n>-<delta>``."""
    if name == "tiny6":
        return tiny6()
    if name.startswith("demo-"):
        return demo_spec(int(name.split("-", 1)[1]))
    if name.startswith("counterexample-"):
        from permix.counterexample import build_counterexample

        _, n, delta = name.split("-", 2)
        return build_counterexample(int(n), F(delta))
    raise ValueError(f"unknown spec name {name!r}")
