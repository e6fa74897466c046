"""Reconstruction of compactly supported edge potentials from interior D-N maps.

Pipeline for one diagonal line of one parallelogram at one energy:

1. partial-data solve: Dirichlet data 1 at the entry pendant, 0 on the
   remaining boundary off the exit side, zero Neumann data on the left side;
   the exit-side values are the unknowns.
2. Cauchy descent: with every edge above the line known, the vertex
   equations above the line plus the anchor values read off the D-N map fix
   the solution on and above the line (it vanishes below).
3. relations along the line: at each vertex just below the line
   ``u(p_l)/s(e1) + u(p_l+1)/s(e2) = 0`` gives the ratio of two edge values;
   at each interior line point the vertex equation gives the sum of
   ``a/s`` over its two lower edges.

Lines are processed in six rotated copies of the parallelogram (frames), each
placed so that the unknown support sits in the region its lines sweep.  An
edge becomes known once one relation ties it to a known partner; its
Dirichlet spectrum is harvested from the relation as a function of energy and
inverted with the band-limited Gauss-Newton fit.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from . import hexlattice as hl
from . import vertex_system as vs
from .errors import (AnchorMissing, CoverageError, DescentUnderdetermined, Inconsistency,
                     InvalidArgument, NumericFailure, RatioSingular, UniquenessViolation)
from .sturm1d import Potential, borg_reconstruct, free_transfer, transfer

log = logging.getLogger(__name__)

UNDERFLOW = 1e-12
RATIO = "ratio"
WEYL = "weyl"


# ----------------------------------------------------------------------------
# oracles


class DNOracle:
    """Source of vertex-model interior D-N maps for any placed parallelogram."""

    def __call__(self, domain, lam):
        raise NotImplementedError

    def batch(self, domain, lams):
        """D-N matrices on a grid; entries are None where the map is unavailable."""
        out = []
        for lam in lams:
            try:
                out.append(self(domain, lam))
            except NumericFailure:
                out.append(None)
        return out


class LiveOracle(DNOracle):
    """Forward solver on the true potentials, queried on demand."""

    def __init__(self, potmap=None, background=None, cond_limit=vs.COND_LIMIT):
        self.potmap = dict(potmap or {})
        self.background = background
        self.cond_limit = cond_limit
        self.calls = 0

    def __call__(self, domain, lam):
        self.calls += 1
        return vs.dn_map(domain, self.potmap, lam, vs.VERTEX, self.background, self.cond_limit)

    def batch(self, domain, lams):
        lams = np.asarray(lams, dtype=float)
        s, a, _, _ = vs.edge_table(domain, lams, self.potmap, self.background)
        out = []
        for i, lam in enumerate(lams):
            self.calls += 1
            try:
                system = vs.assemble_from(domain, lam, s[:, i], a[:, i])
                mat, cond = vs.vertex_dn_from(system, self.cond_limit)
                out.append(vs.DNMatrix(float(lam), vs.VERTEX, domain.boundary, mat, domain.spec(), cond))
            except NumericFailure:
                out.append(None)
        return out


def _domain_key(spec):
    return (int(spec["N"]), tuple(int(x) for x in spec["shift"]), int(spec["turns"]) % 6)


class DatasetOracle(DNOracle):
    """Replays stored D-N records; only exact energy matches are served."""

    def __init__(self, records, pendant=None):
        self.table = {}
        for rec in records:
            dn = rec if isinstance(rec, vs.DNMatrix) else vs.DNMatrix.from_record(rec)
            if dn.model == vs.EDGE:
                dn = vs.convert_dn(dn, pendant=pendant)
            self.table[(_domain_key(dn.domain), float(dn.lam))] = dn
        self.missing = []

    def energies(self, domain):
        key = _domain_key(domain.spec())
        return sorted(lam for d, lam in self.table if d == key)

    def __call__(self, domain, lam):
        key = (_domain_key(domain.spec()), float(lam))
        hit = self.table.get(key)
        if hit is None:
            self.missing.append((domain.spec(), float(lam)))
            raise CoverageError("no D-N record for the requested energy",
                                domain=domain.spec(), lam=float(lam))
        return hit

    def batch(self, domain, lams):
        return [self.table.get((_domain_key(domain.spec()), float(l))) for l in lams]


# ----------------------------------------------------------------------------
# per-line combinatorics (local keys, shared by every placement)


@dataclass(frozen=True)
class _LinePlan:
    k: int
    line: hl.LineSpec
    unknown_cols: tuple  # interior indices of vertices on or above the line
    eq_rows: tuple  # interior indices whose vertex equation is used
    anchor_rows: tuple  # (boundary index, column) pairs
    point_cols: tuple  # column of each interior line point
    up: tuple  # per interior line point: ("i", col) or ("b", boundary index)
    lower_pairs: tuple  # (edge index e1, edge index e2) per vertex below the line
    weyl: tuple  # (edge z, edge z', normal edge) per interior line point
    above: tuple  # non-pendant edge indices with both ends on or above the line
    side_S: tuple
    side_L: tuple
    fixed: tuple
    entry: int
    exit: int
    below_boundary: tuple


@lru_cache(maxsize=None)
def line_plan(N, k):
    dom = hl.HexDomain(N)
    lay = vs.layout(N)
    line = hl.diagonal_line(dom, k)
    lv = line.level
    eidx = {e: j for j, e in enumerate(lay.edges)}
    ucols = tuple(i for i, v in enumerate(lay.interior) if hl.level(v) >= lv)
    colpos = {i: c for c, i in enumerate(ucols)}
    rows = tuple(i for i, v in enumerate(lay.interior) if hl.level(v) > lv)
    anchors = tuple((b, colpos[lay.anchor_idx[b]]) for b in range(len(lay.boundary))
                    if lay.anchor_idx[b] in colpos)
    pts = line.points
    point_cols = tuple(colpos[lay.iidx[p]] for p in pts[1:-1])
    up = []
    weyl = []
    for i, p in enumerate(pts[1:-1], start=1):
        u = hl.add(p, hl.UNIT[1])
        up.append(("i", colpos[lay.iidx[u]]) if u in lay.iidx else ("b", lay.bidx[u]))
        weyl.append((eidx[hl.edge_id(line.below[i - 1], p)], eidx[hl.edge_id(p, line.below[i])],
                     eidx[hl.edge_id(p, u)]))
    lower = tuple((eidx[hl.edge_id(pts[i], a)], eidx[hl.edge_id(a, pts[i + 1])])
                  for i, a in enumerate(line.below))
    above = tuple(j for j, e in enumerate(lay.edges)
                  if min(hl.level(e[0]), hl.level(e[1])) >= lv and not dom.is_pendant_edge(e))
    sides = dom.sides
    side_S = tuple(lay.bidx[b] for b in sides[line.exit_side])
    side_L = tuple(lay.bidx[b] for b in sides["L"])
    fixed = tuple(i for i in range(len(lay.boundary)) if i not in set(side_S))
    below_b = tuple(i for i, b in enumerate(lay.boundary) if hl.level(b) < lv)
    return _LinePlan(k, line, ucols, rows, anchors, point_cols, tuple(up), lower, tuple(weyl),
                     above, side_S, side_L, fixed, lay.bidx[pts[0]], lay.bidx[pts[-1]], below_b)


# ----------------------------------------------------------------------------
# single-line pipeline


@dataclass
class LineTrace:
    line: hl.LineSpec
    lam: float
    values: np.ndarray  # u at alpha_{k,0}, ..., alpha_{k,m}
    ratios: np.ndarray  # f_{k,l} = u(alpha_l)/u(alpha_{l-1}), l = 1..m
    weyl_sums: np.ndarray  # a/s summed over the two lower edges of each interior point
    residual: float = 0.0
    partial_residual: float = 0.0
    up_values: np.ndarray | None = None  # u at the upper neighbour of each interior point
    normal_sa: tuple | None = None  # (s, a) of the edge to that neighbour


def solve_partial_data(dn, exit_side, f2, g=None, domain=None, rtol=1e-8):
    """Complete Dirichlet data from data off the exit side and Neumann data on L.

    ``dn`` is a vertex-model DNMatrix (or matrix) in T, B, R, L order;
    ``f2`` is a full-length boundary vector whose exit-side entries are ignored.
    """
    mat = np.asarray(getattr(dn, "matrix", dn), dtype=float)
    N = domain.N if domain is not None else _infer_N(mat.shape[0])
    lay = vs.layout(N)
    sides = hl._geometry(N).sides
    S = [lay.bidx[b] for b in sides[exit_side]]
    L = [lay.bidx[b] for b in sides["L"]]
    fixed = [i for i in range(mat.shape[0]) if i not in set(S)]
    f = _partial_solve(mat, np.asarray(f2, dtype=float), S, L, fixed,
                       None if g is None else np.asarray(g, dtype=float), rtol)[0]
    return f


def _infer_N(nb):
    if (nb - 6) % 4:
        raise InvalidArgument(f"boundary size {nb} does not match a parallelogram")
    return (nb - 6) // 4


def _partial_solve(mat, f2, S, L, fixed, g, rtol):
    f = np.array(f2, dtype=float)
    f[S] = 0.0
    rhs = -(mat[np.ix_(L, fixed)] @ f[fixed])
    if g is not None:
        rhs = rhs + g
    block = mat[np.ix_(L, S)]
    sv = np.linalg.svd(block, compute_uv=False)
    if sv.size == 0 or sv[-1] <= 1e-12 * sv[0]:
        raise UniquenessViolation("partial-data block is rank deficient",
                                  singular_values=sv.tolist())
    x, *_ = np.linalg.lstsq(block, rhs, rcond=None)
    resid = float(np.linalg.norm(block @ x - rhs))
    scale = max(1.0, float(np.linalg.norm(rhs)), float(np.linalg.norm(block, 2) * np.linalg.norm(x)))
    if resid > rtol * scale:
        raise Inconsistency("partial-data residual above gate", residual=resid)
    f[S] = x
    return f, resid / scale


def special_solution_data(oracle, domain, k, lam, dn=None):
    """Cauchy data (f, Lambda f) of the special solution attached to line k."""
    plan = line_plan(domain.N, k)
    if dn is None:
        dn = oracle(domain, lam)
    mat = np.asarray(dn.matrix)
    f2 = np.zeros(mat.shape[0])
    f2[plan.entry] = 1.0
    f, _ = _partial_solve(mat, f2, list(plan.side_S), list(plan.side_L), list(plan.fixed), None, 1e-8)
    f[plan.entry] = 1.0
    return f, mat @ f


def cauchy_descend(domain, potmap, lam, cauchy, k, background=None, edge_data=None, rtol=1e-7):
    """Values of the special solution on and above line k.

    Returns a dict local interior key -> value.  Only edges above the line
    enter; ``edge_data`` may supply (s, a) arrays in local edge order instead
    of a potential map.
    """
    if edge_data is None:
        s, a, _, _ = vs.edge_table(domain, [lam], potmap, background)
        edge_data = (s[:, 0], a[:, 0])
    u, _ = _descend(domain.N, k, edge_data[0], edge_data[1], cauchy[0], cauchy[1], lam, rtol)
    lay = vs.layout(domain.N)
    plan = line_plan(domain.N, k)
    return {lay.interior[i]: float(u[c]) for c, i in enumerate(plan.unknown_cols)}


def _descend(N, k, s, a, f, lf, lam, rtol):
    plan = line_plan(N, k)
    lay = vs.layout(N)
    ucols = list(plan.unknown_cols)
    rows = list(plan.eq_rows)
    # placeholder values for edges below the line never reach the used rows
    s_use = np.where(np.isfinite(s), s, 1.0)
    a_use = np.where(np.isfinite(a), a, 0.0)
    system = vs.assemble_from(hl.HexDomain(N), lam, s_use, a_use)
    top = system.A_II[np.ix_(rows, ucols)]
    rhs_top = -(system.A_IB[rows] @ f)
    nA = len(plan.anchor_rows)
    bot = np.zeros((nA, len(ucols)))
    rhs_bot = np.zeros(nA)
    for r, (b, c) in enumerate(plan.anchor_rows):
        bot[r, c] = 1.0
        rhs_bot[r] = -lf[b]
    M = np.vstack([top, bot])
    rhs = np.concatenate([rhs_top, rhs_bot])
    scale = np.max(np.abs(M), axis=1)
    scale[scale == 0] = 1.0
    M = M / scale[:, None]
    rhs = rhs / scale
    u, _, rank, sv = np.linalg.lstsq(M, rhs, rcond=None)
    if rank < len(ucols) or sv[-1] <= 1e-13 * sv[0]:
        raise DescentUnderdetermined("descent system lacks full column rank", k=k, lam=float(lam))
    resid = float(np.linalg.norm(M @ u - rhs))
    ref = max(1.0, float(np.linalg.norm(rhs)), float(np.linalg.norm(u)))
    if resid > rtol * ref:
        raise Inconsistency("descent residual above gate", k=k, lam=float(lam), residual=resid)
    return u, resid / ref


def line_trace(domain, k, lam, dn, s, a, rtol=1e-7, underflow=UNDERFLOW):
    """Special solution along line k with its ratios and lower-edge sums."""
    plan = line_plan(domain.N, k)
    mat = np.asarray(dn.matrix if hasattr(dn, "matrix") else dn)
    f2 = np.zeros(mat.shape[0])
    f2[plan.entry] = 1.0
    f, pres = _partial_solve(mat, f2, list(plan.side_S), list(plan.side_L), list(plan.fixed), None, 1e-8)
    f[plan.entry] = 1.0
    lf = mat @ f
    u, dres = _descend(domain.N, k, s, a, f, lf, lam, rtol)
    vals = np.concatenate([[1.0], u[list(plan.point_cols)], [f[plan.exit]]])
    ups = np.array([u[up[1]] if up[0] == "i" else f[up[1]] for up in plan.up])
    normal = np.array([n for _, _, n in plan.weyl], dtype=int)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = vals[1:] / vals[:-1]
        sums = ups / (s[normal] * vals[1:-1]) - a[normal] / s[normal]
    trace = LineTrace(plan.line, float(lam), vals, ratios, sums, dres, pres)
    trace.up_values = ups
    trace.normal_sa = (s[normal].copy(), a[normal].copy())
    return trace


def extract_strip_ratios(trace, underflow=UNDERFLOW):
    """Ratios f_{k,l} = u(alpha_l)/u(alpha_{l-1}) of consecutive line values."""
    vals = np.asarray(trace.values)
    small = np.nonzero(np.abs(vals[:-1]) < underflow)[0]
    if small.size:
        raise RatioSingular("line value too small for a ratio", index=int(small[0]))
    return vals[1:] / vals[:-1]


def chain_absolute_s(edges, link_ratios, anchors, tol=1e-7):
    """Absolute edge values along a chain of linked edges.

    ``edges`` is the ordered chain; ``link_ratios[i]`` is s(edges[i+1])/s(edges[i])
    (None where unknown); ``anchors`` maps chain positions to known values.
    Returns one value per edge; cycles through several anchors are checked.
    """
    n = len(edges)
    if not anchors:
        raise AnchorMissing("no known edge value in the chain")
    out = [None] * n
    for pos, val in anchors.items():
        out[pos] = val
    for start in sorted(anchors):
        for direction in (1, -1):
            i = start
            while 0 <= i + direction < n:
                j = i + direction
                r = link_ratios[min(i, j)]
                if r is None or out[i] is None:
                    break
                val = out[i] * r if direction == 1 else out[i] / r
                if out[j] is not None:
                    ref = max(abs(out[j]), abs(val), 1e-300)
                    if abs(out[j] - val) > tol * ref:
                        raise Inconsistency("chain values disagree", position=j,
                                            values=(float(out[j]), float(val)))
                    break
                out[j] = val
                i = j
    return out


def lower_link_ratio(trace, index):
    """s(e2)/s(e1) for the pair under line points index, index+1."""
    return -float(trace.ratios[index])


# ----------------------------------------------------------------------------
# spectrum harvesting


def harvest_spectrum(sampler, grid, count, kind=RATIO, xtol=1e-10, refine=True, singular=()):
    """First ``count`` Dirichlet eigenvalues from a sampled edge function.

    ``kind`` RATIO samples s_e itself; WEYL samples s_e/a_e, which is increasing
    between poles, so only negative-to-positive crossings are zeros.
    Points where the sampler fails are skipped.  Zeros within reach of an
    energy in ``singular`` (background edge eigenvalues, where the pipeline
    loses accuracy) are located by a polynomial fit that stays clear of it.
    """
    grid = np.asarray(grid, dtype=float)
    vals = np.full(grid.size, np.nan)
    for i, lam in enumerate(grid):
        try:
            vals[i] = sampler(lam)
        except NumericFailure as exc:
            log.debug("skipping lambda %.6g: %s", lam, exc)
    ok = np.isfinite(vals)
    g, v = grid[ok], vals[ok]
    return _zeros_from_samples(sampler, g, v, count, kind, xtol, refine, tuple(singular))


GUARD = 0.1  # closest approach to a background edge eigenvalue
GUARD_SPAN = 1.9
INTERP_WIDTH = 8
GUARD_REACH = 0.5


def _near(singular, lo, hi, reach=GUARD_REACH):
    for c in singular:
        if lo - reach <= c <= hi + reach:
            return c
    return None


def fit_root_across(sampler, centre, lo, hi, guard=GUARD, span=GUARD_SPAN, points=7, degree=9):
    """Root near a singular energy from a polynomial fit to samples kept away from it."""
    offs = np.linspace(guard, span, points)
    xs = np.concatenate([-offs[::-1], offs])
    ys = np.array([bridged(sampler, centre + x) for x in xs])
    scale = np.max(np.abs(ys))
    coef = np.polynomial.polynomial.polyfit(xs, ys / scale, degree)
    fit = np.polynomial.polynomial.polyval(xs, coef) * scale
    resid = float(np.max(np.abs(fit - ys))) / scale
    roots = np.polynomial.polynomial.polyroots(coef)
    roots = roots[np.abs(roots.imag) < 1e-9].real + centre
    inside = roots[(roots >= lo - 1e-9) & (roots <= hi + 1e-9)]
    if inside.size != 1 or resid > 1e-6:
        raise NumericFailure("polynomial bridge failed", centre=float(centre), residual=resid,
                             candidates=inside.tolist())
    return float(inside[0])


def _zeros_from_samples(sampler, g, v, count, kind, xtol, refine, singular=()):
    roots = []
    for i in range(len(g) - 1):
        if len(roots) >= count:
            break
        y0, y1 = v[i], v[i + 1]
        if y0 == 0.0:
            roots.append(float(g[i]))
            continue
        if kind == WEYL:
            crossing = y0 < 0.0 < y1
        else:
            crossing = (y0 < 0.0) != (y1 < 0.0) and y1 != 0.0
        if not crossing:
            continue
        c = _near(singular, g[i], g[i + 1]) if refine else None
        if c is not None:
            roots.append(fit_root_across(sampler, c, g[i], g[i + 1]))
        elif refine:
            roots.append(_refine(sampler, g[i], g[i + 1], y0, y1, xtol))
        else:
            roots.append(_interp_root(g, v, i, kind, singular))
    if len(roots) < count:
        raise NumericFailure("not enough sign changes to bracket the spectrum",
                             found=len(roots), wanted=count,
                             trace={"lambda": g.tolist(), "value": v.tolist()})
    return np.array(roots[:count])


def _interp_root(g, v, i, kind=RATIO, singular=(), width=INTERP_WIDTH):
    """Root inside [g[i], g[i+1]] from a local polynomial through grid samples.

    The stencil grows outwards while the samples stay on one smooth branch:
    it stops at sign flips (a pole or another zero for the monotone Weyl
    observable), at samples too close to a singular energy, and at width.
    """
    def usable(j):
        return all(abs(g[j] - c) > GUARD for c in singular)

    idx = [j for j in (i, i + 1) if usable(j)]
    left, right = i - 1, i + 2
    while len(idx) < width:
        grown = False
        if left >= 0 and usable(left) and _same_branch(v, left, left + 1, kind):
            idx.insert(0, left)
            left -= 1
            grown = True
        elif left >= 0 and not usable(left):
            left -= 1
            grown = True
        if len(idx) < width and right < len(g) and usable(right) and _same_branch(v, right - 1, right, kind):
            idx.append(right)
            right += 1
            grown = True
        elif right < len(g) and not usable(right) and len(idx) < width:
            right += 1
            grown = True
        if not grown:
            break
    x, y = g[idx] - g[i], v[idx]
    if len(idx) >= 2:
        h = g[i + 1] - g[i]
        coef = np.polynomial.polynomial.polyfit(x / h, y, len(idx) - 1)
        roots = np.polynomial.polynomial.polyroots(coef) * h
        roots = roots[np.abs(roots.imag) < 1e-9].real + g[i]
        inside = roots[(roots >= g[i]) & (roots <= g[i + 1])]
        if inside.size == 1:
            return float(inside[0])
    return float(g[i] - v[i] * (g[i + 1] - g[i]) / (v[i + 1] - v[i]))


def _same_branch(v, j, jn, kind):
    """Neighbouring samples j < jn lie on one pole-free stretch."""
    if kind == WEYL:
        return v[jn] > v[j]
    return True


def bridged(sampler, x):
    """Sampler value at x, interpolated from symmetric neighbours if x itself fails.

    The edge functions are analytic in lambda, so a central four-point
    interpolation across an isolated singular energy is accurate to O(h**4).
    """
    try:
        return sampler(x)
    except NumericFailure as exc:
        last = exc
    for rel in (1e-7, 1e-6, 1e-5, 1e-4):
        h = rel * max(1.0, abs(x))
        try:
            ys = [sampler(x + j * h) for j in (-2, -1, 1, 2)]
        except NumericFailure as exc:
            last = exc
            continue
        return (-ys[0] + 4.0 * ys[1] + 4.0 * ys[2] - ys[3]) / 6.0
    raise NumericFailure("sampler failed near a root", lam=float(x), cause=repr(last),
                         cause_details=getattr(last, "details", {}))


def _refine(sampler, lo, hi, flo, fhi, xtol):
    def f(x):
        if x == lo:
            return flo
        if x == hi:
            return fhi
        return bridged(sampler, x)

    return float(brentq(f, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=200))


# ----------------------------------------------------------------------------
# reconstruction


@dataclass
class InverseConfig:
    N: int
    cells: tuple
    shift: tuple = (0, 0)
    modes: int = 3
    eig_count: int | None = None
    lam_max: float | None = None
    per_gap: int = 40
    grid_offset: float = 0.5
    background: Potential | None = None
    xtol: float = 1e-10
    misfit_tol: float = 1e-4
    detect_tol: float = 1e-5
    refine: bool = True
    window: int = 12
    grid: tuple | None = None

    @property
    def count(self):
        return self.eig_count if self.eig_count is not None else 2 * self.modes + 2

    @property
    def spectrum_max(self):
        if self.lam_max is not None:
            return float(self.lam_max)
        return (2 * self.modes + 3) ** 2 * math.pi ** 2 * 1.1


@dataclass
class EdgeResult:
    edge: tuple
    potential: Potential
    eigenvalues: list
    misfit: float
    relation: str
    frame: int
    line: int
    partner: tuple
    samples: list = field(default_factory=list)


@dataclass
class ReconstructionResult:
    potentials: dict
    edges: dict
    grid: list
    frames: list
    diagnostics: dict
    unresolved: list

    def modes(self, edge, order):
        return self.potentials[edge].padded(order)


def _inner_edges(N):
    dom = hl.HexDomain(N)
    return frozenset(e for e in dom.edges if not dom.is_pendant_edge(e))


@lru_cache(maxsize=None)
def _swept_edges(N):
    dom = hl.HexDomain(N)
    out = set()
    for k in range(N + 1):
        out.update(e for e in hl.strip_edges(dom, k).edges if not dom.is_pendant_edge(e))
    return frozenset(out)


def _fits(domain, support):
    inner, swept = _inner_edges(domain.N), _swept_edges(domain.N)
    for g in support:
        e = domain.local_edge(g)
        if e not in inner:
            return False
        if hl.edge_direction(e) != 2 and e not in swept:
            return False
    return True


def place_frames(primary, support, window=12):
    """Six congruent parallelograms, one per rotation, each sweeping the support."""
    frames = []
    rotated, _ = hl.rotate_pi(primary)
    centre = np.mean([hl.position(v) for e in support for v in e], axis=0) if support else np.zeros(2)
    for t in range(6):
        preferred = {0: primary, 3: rotated}.get(t)
        if preferred is not None and _fits(preferred, support):
            frames.append(preferred)
            continue
        cands = []
        for n1 in range(-window, window + 1):
            for n2 in range(-window, window + 1):
                d = hl.HexDomain(primary.N, (n1, n2), t)
                if _fits(d, support):
                    mid = np.mean([hl.position(d.to_global(v)) for v in d.interior], axis=0)
                    cands.append((float(np.sum((mid - centre) ** 2)), (n1, n2), d))
        frames.append(min(cands, key=lambda c: (c[0], c[1]))[2] if cands else None)
    return frames


class _Engine:
    def __init__(self, oracle, config):
        self.oracle = oracle
        self.cfg = config
        self.bg = config.background
        N = config.N
        self.primary = hl.HexDomain(N, tuple(config.shift), 0)
        cells = tuple(tuple(c) for c in config.cells)
        hl.check_support_box(self.primary, cells)
        self.support = hl.cell_edges(cells)
        self.frames = place_frames(self.primary, self.support, config.window)
        self.underflow = UNDERFLOW
        self.known = {}  # global edge -> Potential for recovered support edges
        self.unknown = set(self.support)
        self.results = {}
        self.traces = {}  # (frame, k) -> {lam index: LineTrace}
        self.dn_cache = {}
        self.diag = {"skipped": [], "consistency": [], "rounds": 0,
                     "descent_residual": 0.0, "partial_residual": 0.0, "oracle_queries": 0}
        if config.grid is not None:
            self.grid = np.asarray(config.grid, dtype=float)
        else:
            pots = [] if self.bg is None else [self.bg]
            self.grid = vs.lambda_grid(self.spectrum_top(), config.per_gap, 0.0,
                                       config.grid_offset, pots, self.bg)

    @property
    def singular(self):
        if not hasattr(self, "_singular"):
            self._singular = vs.edge_spectrum(self.bg, self.spectrum_top() + 10.0)
        return self._singular

    def spectrum_top(self):
        return self.cfg.spectrum_max

    # edge data in frame-local order; unknown edges are NaN
    def frame_edge_data(self, t, lams):
        d = self.frames[t]
        lams = np.atleast_1d(np.asarray(lams, dtype=float))
        n = len(d.edges)
        s = np.full((n, lams.size), np.nan)
        a = np.full((n, lams.size), np.nan)
        groups = {}
        for j, e in enumerate(d.edges):
            g = d.global_edge(e)
            if g in self.unknown:
                continue
            q = self.known.get(g, self.bg)
            key = None if q is None or q.is_zero() else q.modes
            groups.setdefault(key, (q, []))[1].append(j)
        for key, (q, idx) in groups.items():
            data = free_transfer(lams) if key is None else transfer(q, lams)
            s[idx] = np.broadcast_to(data.s, lams.shape)
            a[idx] = np.broadcast_to(data.a, lams.shape)
        return s, a

    def dn(self, t, lam):
        key = (t, float(lam))
        hit = self.dn_cache.get(key)
        if hit is None:
            self.diag["oracle_queries"] += 1
            hit = self.oracle(self.frames[t], lam)
            if len(self.dn_cache) < 200000:
                self.dn_cache[key] = hit
        return hit

    def processable(self, t, k):
        d = self.frames[t]
        if d is None:
            return False
        plan = line_plan(d.N, k)
        return all(d.global_edge(d.edges[j]) not in self.unknown for j in plan.above)

    def grid_traces(self, t, k):
        key = (t, k)
        if key in self.traces:
            return self.traces[key]
        d = self.frames[t]
        dns = self.oracle.batch(d, self.grid)
        self.diag["oracle_queries"] += len(self.grid)
        s, a = self.frame_edge_data(t, self.grid)
        out = {}
        for i, lam in enumerate(self.grid):
            if dns[i] is None:
                self.diag["skipped"].append((t, k, float(lam), "oracle"))
                continue
            self.dn_cache.setdefault((t, float(lam)), dns[i])
            try:
                tr = line_trace(d, k, lam, dns[i], s[:, i], a[:, i])
            except NumericFailure as exc:
                self.diag["skipped"].append((t, k, float(lam), type(exc).__name__))
                continue
            self.diag["descent_residual"] = max(self.diag["descent_residual"], tr.residual)
            self.diag["partial_residual"] = max(self.diag["partial_residual"], tr.partial_residual)
            out[i] = tr
        self.traces[key] = out
        self._consistency(t, k, out, s, a)
        return out

    def _consistency(self, t, k, traces, s, a):
        """Measured ratios of fully known pairs against their predicted values."""
        d = self.frames[t]
        plan = line_plan(d.N, k)
        worst = 0.0
        for i, tr in traces.items():
            for l, (e1, e2) in enumerate(plan.lower_pairs):
                if np.isfinite(s[e1, i]) and np.isfinite(s[e2, i]):
                    pred = -s[e2, i] / s[e1, i]
                    worst = max(worst, abs(tr.ratios[l] - pred) / max(1.0, abs(pred)))
        self.diag["consistency"].append({"frame": t, "line": k, "max_defect": worst})

    def trace_at(self, t, k, lam):
        d = self.frames[t]
        s, a = self.frame_edge_data(t, [lam])
        return line_trace(d, k, lam, self.dn(t, lam), s[:, 0], a[:, 0])

    # relations offered by a processable line, as (edge, relation) candidates
    def relations(self, t, k):
        d = self.frames[t]
        plan = line_plan(d.N, k)
        g = lambda j: d.global_edge(d.edges[j])
        out = []
        for l, (e1, e2) in enumerate(plan.lower_pairs):
            out.append((RATIO, g(e1), g(e2), l))
        for l, (z, z2, _) in enumerate(plan.weyl):
            out.append((WEYL, g(z), g(z2), l))
        return out

    def sampler(self, t, k, kind, index, target, partner, partner_fn=None):
        """Observable whose zeros are the Dirichlet eigenvalues of ``target``."""
        plan = line_plan(self.frames[t].N, k)
        if kind == RATIO:
            e1, e2 = plan.lower_pairs[index]
            d = self.frames[t]
            target_is_e2 = d.global_edge(d.edges[e2]) == target

            def value(lam, trace=None):
                tr = trace or self.trace_at(t, k, lam)
                sp = partner_fn(lam) if partner_fn else self._s(partner, lam)
                v0, v1 = tr.values[index], tr.values[index + 1]
                # u(p_l)/s(e1) + u(p_l+1)/s(e2) = 0
                if target_is_e2:
                    if abs(v0) < self.underflow:
                        raise RatioSingular("line value too small", index=index, lam=float(lam))
                    return -sp * v1 / v0
                if abs(v1) < self.underflow:
                    raise RatioSingular("line value too small", index=index + 1, lam=float(lam))
                return -sp * v0 / v1
            return value

        def value(lam, trace=None):
            tr = trace or self.trace_at(t, k, lam)
            sp, ap = self._sa(partner, lam)
            sn, an = tr.normal_sa[0][index], tr.normal_sa[1][index]
            u = tr.values[index + 1]
            den = tr.up_values[index] - sn * u * (an / sn + ap / sp)
            if abs(den) < self.underflow:
                raise RatioSingular("sum relation degenerate", index=index, lam=float(lam))
            return sn * u / den
        return value

    def _sa(self, edge, lam):
        q = self.known.get(edge, self.bg)
        d = free_transfer(lam) if q is None or q.is_zero() else transfer(q, lam)
        return float(d.s), float(d.a)

    def _s(self, edge, lam):
        return self._sa(edge, lam)[0]

    def run(self):
        t0 = time.perf_counter()
        while self.unknown:
            self.diag["rounds"] += 1
            plan = self._schedule()
            if not plan:
                break
            for target, how in plan:
                self._determine(target, how)
        unresolved = sorted(self.unknown)
        potentials = {}
        for e in self.support:
            if e in self.known:
                potentials[e] = self.known[e]
        self.diag["elapsed_s"] = time.perf_counter() - t0
        return ReconstructionResult(potentials, self.results, self.grid.tolist(),
                                    [None if f is None else f.spec() for f in self.frames],
                                    self.diag, unresolved)

    def _schedule(self):
        """Pick one relation for every edge reachable from a known partner this round."""
        chosen = {}
        for t in range(6):
            if self.frames[t] is None:
                continue
            for k in range(self.cfg.N + 1):
                if not self.processable(t, k):
                    continue
                for kind, e1, e2, index in self.relations(t, k):
                    for target, partner in ((e1, e2), (e2, e1)):
                        if target in self.unknown and partner not in self.unknown:
                            rank = (0 if kind == RATIO else 1, t, k, index)
                            if target not in chosen or rank < chosen[target][0]:
                                chosen[target] = (rank, (t, k, kind, index, partner))
        return [(e, chosen[e][1]) for e in sorted(chosen, key=lambda e: chosen[e][0])]

    def _determine(self, target, how):
        t, k, kind, index, partner = how
        traces = self.grid_traces(t, k)
        fn = self.sampler(t, k, kind, index, target, partner)
        lam_idx = sorted(traces)
        g = self.grid[lam_idx]
        vals = np.empty(len(lam_idx))
        for j, i in enumerate(lam_idx):
            vals[j] = fn(self.grid[i], traces[i])
        ok = np.isfinite(vals)
        sampler = (lambda lam: fn(lam)) if self.cfg.refine else None
        try:
            eigs = _zeros_from_samples(sampler, g[ok], vals[ok], self.cfg.count, kind,
                                       self.cfg.xtol, self.cfg.refine, self.singular)
        except NumericFailure as exc:
            exc.details.update(edge=target, frame=t, line=k, stage="harvest")
            raise
        try:
            res = borg_reconstruct(eigs, self.cfg.modes, mismatch_tol=self.cfg.misfit_tol)
        except NumericFailure as exc:
            exc.details.update(edge=target, frame=t, line=k, stage="borg")
            raise
        self.known[target] = res.potential
        self.unknown.discard(target)
        self.results[target] = EdgeResult(target, res.potential, eigs.tolist(), res.misfit,
                                          kind, t, k, partner,
                                          list(zip(g[ok].tolist(), vals[ok].tolist())))
        # traces computed with this edge unknown stay valid: it lies below their lines
        log.info("edge %s recovered via %s in frame %d line %d", target, kind, t, k)


def reconstruct(oracle, config):
    """Recover every support edge potential; raises on any stage failure."""
    engine = _Engine(oracle, config)
    if any(f is None for f in engine.frames):
        missing = [t for t, f in enumerate(engine.frames) if f is None]
        log.warning("no placement for rotations %s", missing)
    result = engine.run()
    if result.unresolved:
        raise DescentUnderdetermined("some support edges are not reachable by any relation",
                                     unresolved=[list(map(list, e)) for e in result.unresolved],
                                     partial=result)
    return result


def frames_for(config):
    """Frame domains a reconstruction would query, for dataset generation."""
    primary = hl.HexDomain(config.N, tuple(config.shift), 0)
    cells = tuple(tuple(c) for c in config.cells)
    hl.check_support_box(primary, cells)
    return place_frames(primary, hl.cell_edges(cells), config.window)
