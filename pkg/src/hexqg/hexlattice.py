"""Exact geometry of the honeycomb lattice and its parallelogram domains.

Points are integer pairs ``(X, Y)`` standing for ``x = X/2`` and
``y = Y*sqrt(3)/2``.  Every lattice vertex, hexagon centre and the line
functional ``x + sqrt(3) y`` close over this representation, so vertex
identity and half-plane tests never touch floating point.

Lattice conventions: ``omega = exp(i pi/3)``, translations
``v1 = 1 + omega`` and ``v2 = sqrt(3) i``, sublattice offsets
``omega**5`` (sublattice 1) and ``1`` (sublattice 2).  The Wigner-Seitz cell
is the hexagon with corners ``omega**j`` centred at the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

from .errors import InvalidArgument

Key = tuple  # (X, Y) integer pair
EdgeId = tuple  # (Key, Key) sorted

# omega**j for j = 0..5
UNIT = ((2, 0), (1, 1), (-1, 1), (-2, 0), (-1, -1), (1, -1))
STEPS_SUB2 = (UNIT[0], UNIT[2], UNIT[4])
STEPS_SUB1 = (UNIT[3], UNIT[5], UNIT[1])
LINE_STEP = (3, -1)  # 1 + omega**5
V1 = (3, 1)
V2 = (0, 2)

ORIGINAL = "original"
ROTATED = "rotated"

UPPER = "upper"  # consecutive strip edges meet on the line itself
LOWER = "lower"  # they meet at the vertex just below the line


def add(a, b):
    return (a[0] + b[0], a[1] + b[1])


def sub(a, b):
    return (a[0] - b[0], a[1] - b[1])


def rotate(key, turns):
    """Multiply by omega**turns (rotation about the origin, a hexagon centre)."""
    x, y = key
    for _ in range(turns % 6):
        x, y = (x - 3 * y) // 2, (x + y) // 2
    return (x, y)


def lattice_vector(n1, n2):
    return (3 * n1, n1 + 2 * n2)


def lattice_coeffs(key):
    x, y = key
    if x % 3:
        raise InvalidArgument(f"{key} is not a lattice translation")
    n1 = x // 3
    if (y - n1) % 2:
        raise InvalidArgument(f"{key} is not a lattice translation")
    return n1, (y - n1) // 2


def sublattice(key):
    r = key[0] % 3
    if r == 0 or (key[0] - key[1]) % 2:
        raise InvalidArgument(f"{key} is not a lattice vertex")
    return 1 if r == 1 else 2


def is_vertex(key):
    return key[0] % 3 != 0 and (key[0] - key[1]) % 2 == 0


def level(key):
    """Value of x + sqrt(3) y, always an integer on the lattice."""
    return (key[0] + 3 * key[1]) // 2


def position(key):
    return (key[0] / 2.0, key[1] * math.sqrt(3.0) / 2.0)


def neighbors(key):
    steps = STEPS_SUB1 if sublattice(key) == 1 else STEPS_SUB2
    return tuple(add(key, s) for s in steps)


def edge_id(a, b):
    if sub(a, b) not in UNIT:
        raise InvalidArgument(f"{a} and {b} are not nearest neighbours")
    return (a, b) if a < b else (b, a)


def edge_direction(e):
    """Orientation class 0, 1 or 2 of an edge (parallel to 1, omega**2, omega**4)."""
    d = sub(e[1], e[0])
    j = UNIT.index(d)
    return {0: 0, 3: 0, 2: 1, 5: 1, 4: 2, 1: 2}[j]


@dataclass(frozen=True)
class LatticeVertex:
    sublattice: int
    n1: int
    n2: int

    @property
    def key(self):
        off = UNIT[5] if self.sublattice == 1 else UNIT[0]
        return add(off, lattice_vector(self.n1, self.n2))

    @property
    def position(self):
        return position(self.key)

    @classmethod
    def from_key(cls, key):
        s = sublattice(key)
        off = UNIT[5] if s == 1 else UNIT[0]
        n1, n2 = lattice_coeffs(sub(key, off))
        return cls(s, n1, n2)


@dataclass(frozen=True)
class PendantVertex:
    anchor: Key
    direction: Key

    @property
    def key(self):
        return add(self.anchor, self.direction)


@dataclass(frozen=True)
class LineSpec:
    k: int
    family: str
    points: tuple  # alpha_{k,0}, alpha_{k,1}, ... in the caller's local keys
    below: tuple  # vertex under each consecutive pair of points
    entry: Key
    exit: Key
    exit_side: str
    level: int


@dataclass(frozen=True)
class StripSpec:
    k: int
    edges: tuple  # ordered zigzag from the entry point to the exit point
    adjacency_labels: tuple  # one per consecutive pair, UPPER or LOWER
    shared: tuple  # shared vertex of each consecutive pair


class _Geometry:
    """Local combinatorics of the canonical parallelogram of size N."""

    def __init__(self, N):
        self.N = N
        inside = set()
        for n1 in range(N + 1):
            for n2 in range(N + 1):
                c = lattice_vector(n1, n2)
                for u in UNIT:
                    inside.add(add(c, u))
        self.interior = tuple(sorted(inside))
        self.interior_set = frozenset(inside)
        anchors = {}
        for v in self.interior:
            for w in neighbors(v):
                if w not in inside:
                    if w in anchors:
                        raise AssertionError("pendant with two interior neighbours")
                    anchors[w] = v
        self.anchor = anchors
        self.sides = self._classify(set(anchors))
        self.boundary = tuple(k for s in "TBRL" for k in self.sides[s])
        self.boundary_set = frozenset(self.boundary)
        edges = set()
        for v in self.interior:
            for w in neighbors(v):
                edges.add(edge_id(v, w))
        self.edges = tuple(sorted(edges))
        self.pendant_edges = frozenset(edge_id(b, a) for b, a in anchors.items())
        self.levels = (min(level(v) for v in self.interior), max(level(v) for v in self.interior))

    def _classify(self, found):
        N = self.N
        top = [(-2 + 3 * k, 2 * N + 2 + k) for k in range(N + 1)]
        bottom = [(2 + 3 * k, -2 + k) for k in range(N + 1)]
        # k = 0 is included on the right side: the corner pendant 2 + N(1+omega)
        # exists in the graph and the side lists must exhaust the boundary
        right = [(4 + 3 * N, N + 2 * k) for k in range(N + 1)] + [(3 * N + 2, 3 * N + 2)]
        left = [(-2, -2)] + [(-4, 2 * k) for k in range(N + 1)]
        sides = {"T": tuple(top), "B": tuple(bottom), "R": tuple(right), "L": tuple(left)}
        listed = [p for s in sides.values() for p in s]
        if len(set(listed)) != len(listed) or set(listed) != found:
            raise AssertionError("side listing does not match the boundary")
        return sides


@lru_cache(maxsize=None)
def _geometry(N):
    return _Geometry(N)


@dataclass(frozen=True)
class HexDomain:
    """Parallelogram of (N+1)**2 hexagons, placed by a rotation and a translation.

    All combinatorics are expressed in local keys of the canonical
    parallelogram; ``to_global`` maps a local key to the lattice.
    """

    N: int
    shift: tuple = (0, 0)  # lattice translation coefficients (n1, n2)
    turns: int = 0  # rotation by turns * pi/3 about the origin

    def __post_init__(self):
        if not isinstance(self.N, int) or self.N < 0:
            raise InvalidArgument(f"N must be a nonnegative integer, got {self.N!r}")
        object.__setattr__(self, "shift", tuple(int(s) for s in self.shift))
        object.__setattr__(self, "turns", int(self.turns) % 6)

    @property
    def geometry(self):
        return _geometry(self.N)

    @property
    def interior(self):
        return self.geometry.interior

    @property
    def boundary(self):
        return self.geometry.boundary

    @property
    def sides(self):
        return self.geometry.sides

    @property
    def edges(self):
        return self.geometry.edges

    @property
    def anchor(self):
        return self.geometry.anchor

    def side_of(self, key):
        for s in "TBRL":
            if key in self.sides[s]:
                return s
        raise InvalidArgument(f"{key} is not a boundary vertex")

    def is_interior(self, key):
        return key in self.geometry.interior_set

    def is_boundary(self, key):
        return key in self.geometry.boundary_set

    def pendants(self):
        return tuple(PendantVertex(self.anchor[b], sub(b, self.anchor[b])) for b in self.boundary)

    def degree(self, key):
        if self.is_boundary(key):
            return 1
        return 3

    @property
    def translation(self):
        return lattice_vector(*self.shift)

    def to_global(self, key):
        return add(rotate(key, self.turns), self.translation)

    def to_local(self, key):
        return rotate(sub(key, self.translation), -self.turns)

    def global_edge(self, e):
        return edge_id(self.to_global(e[0]), self.to_global(e[1]))

    def local_edge(self, g):
        return edge_id(self.to_local(g[0]), self.to_local(g[1]))

    def global_edges(self):
        return tuple(self.global_edge(e) for e in self.edges)

    def is_pendant_edge(self, e):
        return e in self.geometry.pendant_edges

    def spec(self):
        return {"N": self.N, "shift": list(self.shift), "turns": self.turns}


def build_parallelogram(N, shift=(0, 0), turns=0):
    return HexDomain(N, tuple(shift), turns)


def classify_boundary(domain):
    s = domain.sides
    return s["T"], s["B"], s["R"], s["L"]


def rotate_pi(domain):
    """Congruent domain seen after a half turn, plus the local vertex correspondence.

    The parallelogram is centrally symmetric, so the rotated domain covers
    the same lattice vertices; only the labels (and the side roles) change.
    """
    N = domain.N
    centre2 = (3 * N, 3 * N)
    moved = add(domain.translation, rotate(centre2, domain.turns))
    rotated = HexDomain(N, lattice_coeffs(moved), domain.turns + 3)

    def flip(key):
        return sub(centre2, key)

    corr = {v: flip(v) for v in domain.interior + domain.boundary}
    return rotated, corr


def line_level(N, k):
    return 3 * N + 2 + 3 * k


def _line_local(domain, k):
    N = domain.N
    if not 0 <= k <= N:
        raise InvalidArgument(f"line index {k} outside 0..{N}")
    start = domain.sides["T"][k]
    pts = [start]
    p = add(start, LINE_STEP)
    while domain.is_interior(p):
        pts.append(p)
        p = add(p, LINE_STEP)
    if not domain.is_boundary(p):
        raise AssertionError("line leaves the domain through a non-boundary point")
    pts.append(p)
    below = tuple(add(q, UNIT[5]) for q in pts[:-1])
    return pts, below, domain.side_of(p)


def diagonal_line(domain, k, family=ORIGINAL):
    """Points of the diagonal line through the k-th top pendant.

    For the rotated family the line is drawn on ``rotate_pi(domain)`` and the
    points are reported in the local keys of ``domain``.
    """
    if family == ORIGINAL:
        pts, below, side = _line_local(domain, k)
        lv = line_level(domain.N, k)
        return LineSpec(k, family, tuple(pts), below, pts[0], pts[-1], side, lv)
    if family == ROTATED:
        rot, corr = rotate_pi(domain)
        back = {v: u for u, v in corr.items()}
        pts, below, side = _line_local(rot, k)
        opposite = {"T": "B", "B": "T", "R": "L", "L": "R"}[side]
        pts = [back[p] for p in pts]
        below = tuple(back[b] for b in below)
        lv = 6 * domain.N - line_level(domain.N, k)
        return LineSpec(k, family, tuple(pts), below, pts[0], pts[-1], opposite, lv)
    raise InvalidArgument(f"unknown line family {family!r}")


def strip_edges(domain, k, family=ORIGINAL):
    """Zigzag of edges hanging just below the k-th line.

    Consecutive edges alternate between meeting at a vertex below the line
    (LOWER) and meeting on the line itself (UPPER).  The two end edges are
    the pendant edges of the entry and exit points.
    """
    line = diagonal_line(domain, k, family)
    edges, labels, shared = [], [], []
    for i, a in enumerate(line.below):
        if i:
            labels.append(UPPER)
            shared.append(line.points[i])
        edges.append(edge_id(line.points[i], a))
        labels.append(LOWER)
        shared.append(a)
        edges.append(edge_id(a, line.points[i + 1]))
    return StripSpec(k, tuple(edges), tuple(labels), tuple(shared))


def zigzag_path(domain, e, e2, k=None, family=ORIGINAL):
    """Chain of consecutive adjacent pairs leading from edge e to edge e2.

    Each link is ``(edge, next_edge, label, shared_vertex)``.
    """
    strips = [strip_edges(domain, k, family)] if k is not None else [
        strip_edges(domain, j, family) for j in range(domain.N + 1)]
    for st in strips:
        if e in st.edges and e2 in st.edges:
            i, j = st.edges.index(e), st.edges.index(e2)
            step = 1 if j >= i else -1
            links = []
            for p in range(i, j, step):
                q = p + step
                lo = min(p, q)
                links.append((st.edges[p], st.edges[q], st.adjacency_labels[lo], st.shared[lo]))
            return links
    raise InvalidArgument("edges do not lie in a common strip")


def normal_edges(domain):
    """Edges parallel to the normal of the diagonal lines (direction omega)."""
    return tuple(e for e in domain.edges if edge_direction(e) == 2)


def cell_edges(cells):
    """Edges of the hexagons centred at lattice vectors v(n1, n2) for the given cells."""
    out = set()
    for n1, n2 in cells:
        c = lattice_vector(n1, n2)
        for j in range(6):
            out.add(edge_id(add(c, UNIT[j]), add(c, UNIT[(j + 1) % 6])))
    return tuple(sorted(out))


def box_cells(n1_range, n2_range):
    """Cells of an inclusive coefficient box ((lo1, hi1), (lo2, hi2))."""
    (a1, b1), (a2, b2) = n1_range, n2_range
    if a1 > b1 or a2 > b2:
        raise InvalidArgument("empty support box")
    return tuple((i, j) for i in range(a1, b1 + 1) for j in range(a2, b2 + 1))


def check_support_box(domain, cells):
    """Support cells must avoid the outer ring of cells of an unrotated domain."""
    if domain.turns != 0:
        raise InvalidArgument("support boxes are stated for unrotated domains")
    s1, s2 = domain.shift
    for n1, n2 in cells:
        m1, m2 = n1 - s1, n2 - s2
        if not (1 <= m1 <= domain.N - 1 and 1 <= m2 <= domain.N - 1):
            raise InvalidArgument(
                f"support cell {(n1, n2)} touches the boundary strip of the N={domain.N} domain",
                cell=(n1, n2))
    return True
