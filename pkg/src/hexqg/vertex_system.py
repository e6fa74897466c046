"""Reduced vertex operator on a parallelogram and its Dirichlet-to-Neumann maps.

The vertex equation at an interior vertex v reads

    (1/deg v) * sum_{w ~ v} (a_vw * u(v) - u(w)) / s_vw = 0

where (s_vw, a_vw) = (phi(1), phi'(1)) for the edge joining v and w.  The
vertex-model D-N map sends Dirichlet data f to ``-u(anchor)`` at each pendant;
the edge-model map sends f to du/dz at the pendant (z = 0 there).  The two are
computed by separate linear systems so that their affine relation is a real
check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import hexlattice as hl
from .errors import (ConversionDegenerate, EdgeSpectrumHit, InteriorSpectrumHit,
                     InvalidArgument)
from .sturm1d import Potential, background_solutions, dirichlet_spectrum, free_transfer, transfer

EXCEPTIONAL_COS = (0.0, 1.0 / 3.0, -1.0 / 3.0, 0.5, -0.5, 1.0, -1.0)
TOL_T = 1e-6
TOL_EDGE = 1e-6
COND_LIMIT = 1e12
SINGULAR_S = 1e-12
VERTEX = "vertex"
EDGE = "edge"


@dataclass(frozen=True)
class EdgeCharacteristic:
    edge: tuple
    lam: float
    s: float
    a: float
    c_prime: float = float("nan")


@dataclass
class AssembledSystem:
    lam: float
    domain: hl.HexDomain
    A_II: np.ndarray
    A_IB: np.ndarray
    deg: np.ndarray

    def weighted(self):
        return self.deg[:, None] * self.A_II


@dataclass
class DNMatrix:
    lam: float
    model: str
    boundary_order: tuple
    matrix: np.ndarray
    domain: dict = field(default_factory=dict)
    cond: float = float("nan")

    def to_record(self):
        return {
            "lambda": float(self.lam),
            "model": self.model,
            "domain": self.domain,
            "boundary_order": [list(k) for k in self.boundary_order],
            "matrix": [float(x) for x in np.asarray(self.matrix).ravel()],
        }

    @classmethod
    def from_record(cls, rec):
        order = tuple(tuple(k) for k in rec["boundary_order"])
        n = len(order)
        mat = np.asarray(rec["matrix"], dtype=float).reshape(n, n)
        return cls(float(rec["lambda"]), rec["model"], order, mat, rec.get("domain", {}))


@dataclass(frozen=True)
class Verdict:
    ok: bool
    reason: str = "admissible"

    def __bool__(self):
        return self.ok


class _Index:
    """Integer layout of one parallelogram: interior, boundary and edge tables."""

    def __init__(self, N):
        geo = hl._geometry(N)
        self.interior = geo.interior
        self.boundary = geo.boundary
        self.iidx = {v: i for i, v in enumerate(self.interior)}
        self.bidx = {b: i for i, b in enumerate(self.boundary)}
        self.edges = geo.edges
        inner, pend = [], []
        for j, (u, v) in enumerate(self.edges):
            if u in self.iidx and v in self.iidx:
                inner.append((j, self.iidx[u], self.iidx[v]))
            else:
                b, w = (u, v) if u in self.bidx else (v, u)
                pend.append((j, self.iidx[w], self.bidx[b]))
        self.inner = np.array(inner, dtype=int).reshape(-1, 3)
        self.pend = np.array(pend, dtype=int).reshape(-1, 3)
        self.anchor_idx = np.array([self.iidx[geo.anchor[b]] for b in self.boundary])
        # pendant edge index per boundary vertex, in boundary order
        order = np.empty(len(self.boundary), dtype=int)
        order[self.pend[:, 2]] = self.pend[:, 0]
        self.pendant_of = order


@lru_cache(maxsize=None)
def layout(N):
    return _Index(N)


def _potential_of(domain, e, potmap, background):
    g = domain.global_edge(e)
    if potmap and g in potmap:
        return potmap[g]
    return background


def edge_table(domain, lams, potmap=None, background=None):
    """(s, a, c, c') arrays of shape (n_edges, n_lambda) for all domain edges."""
    lams = np.atleast_1d(np.asarray(lams, dtype=float))
    groups = {}
    for j, e in enumerate(domain.edges):
        q = _potential_of(domain, e, potmap, background)
        key = None if q is None or q.is_zero() else q.modes
        groups.setdefault(key, (q, []))[1].append(j)
    n = len(domain.edges)
    out = [np.empty((n, lams.size)) for _ in range(4)]
    for key, (q, idx) in groups.items():
        data = free_transfer(lams) if key is None else transfer(q, lams)
        for arr, val in zip(out, (data.s, data.a, data.c, data.c_prime)):
            arr[idx] = np.broadcast_to(val, lams.shape)
    return tuple(out)


def edge_characteristics(potmap, edge, lam, background=None):
    """Endpoint data of one edge, given by its global id."""
    lam = float(lam)
    if not math.isfinite(lam):
        raise InvalidArgument("lambda must be finite")
    q = (potmap or {}).get(tuple(edge), background)
    if q is None or q.is_zero():
        d = free_transfer(lam)
    elif potmap and tuple(edge) in potmap:
        d = transfer(q, lam)
    else:
        d = background_solutions(q, lam)
    s = float(d.s)
    if abs(s) < SINGULAR_S:
        raise EdgeSpectrumHit(f"edge {edge} is at a Dirichlet eigenvalue", edge=edge, lam=lam)
    return EdgeCharacteristic(tuple(edge), lam, s, float(d.a), float(d.c_prime))


def assemble_from(domain, lam, s, a):
    """Blocks of the vertex operator from per-edge (s, a) in domain edge order."""
    lay = layout(domain.N)
    bad = np.nonzero(np.abs(s) < SINGULAR_S)[0]
    if bad.size:
        e = domain.global_edge(domain.edges[bad[0]])
        raise EdgeSpectrumHit(f"edge {e} is at a Dirichlet eigenvalue", edge=e, lam=float(lam))
    ni, nb = len(lay.interior), len(lay.boundary)
    inv = 1.0 / (3.0 * s)
    diag = a * inv
    A = np.zeros((ni, ni))
    j, u, v = lay.inner.T
    np.add.at(A, (u, v), -inv[j])
    np.add.at(A, (v, u), -inv[j])
    np.add.at(A, (u, u), diag[j])
    np.add.at(A, (v, v), diag[j])
    B = np.zeros((ni, nb))
    j, w, b = lay.pend.T
    np.add.at(A, (w, w), diag[j])
    B[w, b] = -inv[j]
    return AssembledSystem(float(lam), domain, A, B, np.full(ni, 3.0))


def assemble(domain, potmap, lam, background=None):
    s, a, _, _ = edge_table(domain, [lam], potmap, background)
    return assemble_from(domain, lam, s[:, 0], a[:, 0])


def condition_estimate(A, inverse=None):
    """1-norm condition number after row equilibration."""
    scale = np.max(np.abs(A), axis=1)
    scale[scale == 0] = 1.0
    As = A / scale[:, None]
    if inverse is None:
        try:
            inverse = np.linalg.inv(A)
        except np.linalg.LinAlgError:
            return math.inf
    inv_s = inverse * scale[None, :]
    c = np.linalg.norm(As, 1) * np.linalg.norm(inv_s, 1)
    return float(c) if np.isfinite(c) else math.inf


def _inverse_checked(system, limit=COND_LIMIT):
    try:
        inv = np.linalg.inv(system.A_II)
    except np.linalg.LinAlgError:
        raise InteriorSpectrumHit("interior operator is singular", lam=system.lam) from None
    cond = condition_estimate(system.A_II, inv)
    if not cond < limit:
        raise InteriorSpectrumHit("interior operator is ill-conditioned", lam=system.lam, cond=cond)
    return inv, cond


def solve_interior_dirichlet(domain, potmap, lam, f, background=None):
    """Interior values of the solution with boundary values f (boundary order)."""
    f = np.asarray(f, dtype=float)
    system = assemble(domain, potmap, lam, background)
    if f.shape != (system.A_IB.shape[1],):
        raise InvalidArgument("boundary data has the wrong length")
    _inverse_checked(system)
    u = np.linalg.solve(system.A_II, -system.A_IB @ f)
    resid = np.linalg.norm(system.A_II @ u + system.A_IB @ f)
    scale = np.linalg.norm(system.A_II, np.inf) * (np.linalg.norm(f) + np.linalg.norm(u))
    if resid > 1e-10 * max(scale, 1e-300):
        raise InteriorSpectrumHit("interior solve residual too large", lam=float(lam), residual=float(resid))
    return u


def vertex_dn_from(system, limit=COND_LIMIT):
    lay = layout(system.domain.N)
    inv, cond = _inverse_checked(system, limit)
    # -u(anchor) with u = -A^{-1} B f
    mat = (inv @ system.A_IB)[lay.anchor_idx]
    return mat, cond


def _edge_model(domain, lam, s, a, c, cp):
    """du/dz at each pendant from the edge-unknown formulation.

    Unknowns: interior vertex values and the start derivative B_e of every
    edge; each edge carries u = u(start) theta + B_e phi.
    """
    lay = layout(domain.N)
    ni, nb, ne = len(lay.interior), len(lay.boundary), len(lay.edges)
    n = ni + ne
    M = np.zeros((n, n))
    R = np.zeros((n, nb))
    row = 0
    # continuity at the far end of every edge
    for j, u, v in lay.inner:
        M[row, v] += 1.0
        M[row, u] -= c[j]
        M[row, ni + j] -= s[j]
        row += 1
    for j, w, b in lay.pend:
        # oriented from the pendant b (z = 0) to its anchor w
        M[row, w] += 1.0
        M[row, ni + j] -= s[j]
        R[row, b] += c[j]
        row += 1
    # Kirchhoff: outgoing derivatives sum to zero at interior vertices
    K = row
    for j, u, v in lay.inner:
        M[K + u, ni + j] += 1.0
        M[K + v, ni + j] -= a[j]
        M[K + v, u] -= cp[j]
    for j, w, b in lay.pend:
        M[K + w, ni + j] -= a[j]
        R[K + w, b] += cp[j]
    sol = np.linalg.solve(M, R)
    return sol[ni + lay.pendant_of]


def dn_map(domain, potmap, lam, model=VERTEX, background=None, limit=COND_LIMIT):
    """Dense interior D-N map with boundary order T, B, R, L."""
    lam = float(lam)
    s, a, c, cp = (x[:, 0] for x in edge_table(domain, [lam], potmap, background))
    system = assemble_from(domain, lam, s, a)
    vmat, cond = vertex_dn_from(system, limit)
    if model == VERTEX:
        mat = vmat
    elif model == EDGE:
        mat = _edge_model(domain, lam, s, a, c, cp)
    else:
        raise InvalidArgument(f"unknown model {model!r}")
    return DNMatrix(lam, model, domain.boundary, mat, domain.spec(), cond)


def convert_dn(dn, lam=None, pendant=None):
    """Affine change between the vertex and edge models.

    ``pendant`` optionally gives the boundary-edge potential; the default is
    a free boundary edge, for which the relation is
    vertex = -cos(k) - (sin(k)/k) * edge.
    """
    lam = dn.lam if lam is None else float(lam)
    if pendant is None or pendant.is_zero():
        d = free_transfer(lam)
        if lam > 0 and abs(math.sin(math.sqrt(lam))) < 1e-10:
            raise ConversionDegenerate("sin(sqrt(lambda)) vanishes", lam=lam)
    else:
        d = transfer(pendant, lam)
    s, cs = float(d.s), float(d.c)
    if abs(s) < SINGULAR_S:
        raise ConversionDegenerate("boundary edge is at a Dirichlet eigenvalue", lam=lam)
    eye = np.eye(dn.matrix.shape[0])
    if dn.model == EDGE:
        mat = -cs * eye - s * dn.matrix
        model = VERTEX
    elif dn.model == VERTEX:
        mat = -(dn.matrix + cs * eye) / s
        model = EDGE
    else:
        raise InvalidArgument(f"unknown model {dn.model!r}")
    return DNMatrix(lam, model, dn.boundary_order, mat, dict(dn.domain), dn.cond)


def reciprocity_defect(dn):
    """Symmetry defect of D * Lambda; boundary vertices have degree one."""
    m = np.asarray(dn.matrix)
    return float(np.max(np.abs(m - m.T)))


@lru_cache(maxsize=4096)
def _spectrum_upto(modes, lam_max):
    q = Potential(modes)
    qmin = float(np.min(q(np.linspace(0, 1, 257))))
    count = max(1, int(math.sqrt(max(lam_max - qmin, 0.0)) / math.pi) + 2)
    return tuple(dirichlet_spectrum(q, count))


def edge_spectrum(q, lam_max):
    """Dirichlet eigenvalues of q up to at least lam_max."""
    if q is None or q.is_zero():
        n = int(math.sqrt(max(lam_max, 0.0)) / math.pi) + 2
        return tuple((k * math.pi) ** 2 for k in range(1, n + 1))
    return _spectrum_upto(q.modes, float(math.ceil(lam_max)))


def cos_sqrt(lam):
    if lam >= 0:
        return math.cos(math.sqrt(lam))
    return math.cosh(math.sqrt(-lam))


def exceptional_distance(lam):
    c = cos_sqrt(lam)
    return min(abs(c - t) for t in EXCEPTIONAL_COS)


def _active_potentials(potmap=None, domain=None, background=None):
    pots = {None if background is None or background.is_zero() else background.modes: background}
    if potmap:
        keep = set(domain.global_edges()) if domain is not None else None
        for e, q in potmap.items():
            if keep is None or e in keep:
                pots[None if q.is_zero() else q.modes] = q
    return list(pots.values())


def admissible(lam, potmap=None, domain=None, background=None, tol_T=TOL_T, tol_edge=TOL_EDGE):
    """Verdict on whether lambda avoids every exceptional energy."""
    try:
        lam = float(lam)
    except (TypeError, ValueError):
        return Verdict(False, "lambda is not real")
    if not math.isfinite(lam):
        return Verdict(False, "lambda is not finite")
    c = cos_sqrt(lam)
    for t in EXCEPTIONAL_COS:
        if abs(c - t) <= tol_T:
            return Verdict(False, f"cos(sqrt(lambda)) = {t:+.6g}")
    for q in _active_potentials(potmap, domain, background):
        for mu in edge_spectrum(q, lam + 1.0):
            if abs(lam - mu) <= tol_edge:
                return Verdict(False, f"edge Dirichlet eigenvalue {mu:.10g}")
    if domain is not None:
        try:
            system = assemble(domain, potmap, lam, background)
            _inverse_checked(system)
        except (InteriorSpectrumHit, EdgeSpectrumHit) as exc:
            return Verdict(False, str(exc))
    return Verdict(True)


def lambda_grid(lam_max, per_gap=40, lam_min=0.0, offset=0.5, potentials=(), background=None,
                tol_T=TOL_T, tol_edge=TOL_EDGE):
    """Energies in (lam_min, lam_max] with ``per_gap`` points between consecutive (n pi)^2.

    ``offset`` in (0, 1) places points inside each sub-interval; two grids with
    different offsets are disjoint.  Points too close to an exceptional energy
    are nudged until they pass ``admissible`` with the given margins.
    """
    if lam_max <= lam_min:
        raise InvalidArgument("empty lambda range")
    if not 0.0 < offset < 1.0:
        raise InvalidArgument("offset must lie in (0, 1)")
    pts = []
    n = 0
    while (n * math.pi) ** 2 < lam_max:
        lo, hi = (n * math.pi) ** 2, ((n + 1) * math.pi) ** 2
        step = (hi - lo) / per_gap
        for j in range(per_gap):
            x = lo + (j + offset) * step
            if lam_min < x <= lam_max:
                pts.append((x, step))
        n += 1
    potmap = {("grid", i): q for i, q in enumerate(potentials)}
    margin = 10.0 * max(tol_T, tol_edge)
    out = []
    for x, step in pts:
        y = x
        for attempt in range(1, 200):
            if admissible(y, potmap, None, background, tol_T * 10, tol_edge * 10):
                break
            y = x + (attempt * margin if attempt % 2 else -attempt * margin) * max(1.0, step)
        else:
            continue
        out.append(y)
    return np.array(sorted(set(out)))


def free_lattice_operator(domain, lam):
    """(sqrt(lam)/sin(sqrt(lam))) * (-Delta0 + cos(sqrt(lam))) on interior vertices."""
    lay = layout(domain.N)
    ni = len(lay.interior)
    D0 = np.zeros((ni, ni))
    for v in lay.interior:
        for w in hl.neighbors(v):
            if w in lay.iidx:
                D0[lay.iidx[v], lay.iidx[w]] += 1.0 / 3.0
    k = math.sqrt(lam)
    return (k / math.sin(k)) * (-D0 + math.cos(k) * np.eye(ni))


def dispersion_eigenvalues(x):
    """Eigenvalues of the free-lattice symbol at a torus point, ascending."""
    x1, x2 = (float(t) for t in x)
    h = (1.0 + np.exp(1j * x1) + np.exp(1j * x2)) / 3.0
    H = np.array([[0.0, h], [np.conj(h), 0.0]])
    lo, hi = np.linalg.eigvalsh(H)
    return float(lo), float(hi)
