import json
import math
import pathlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hexqg import hexlattice as hl
from hexqg import vertex_system as vs
from hexqg.errors import (ConversionDegenerate, EdgeSpectrumHit, InteriorSpectrumHit,
                          InvalidArgument)
from hexqg.sturm1d import Potential

from oracles import decay_envelope, free_dn_dense

DATA = pathlib.Path(__file__).parent / "data"
PI2 = math.pi ** 2
D2 = hl.HexDomain(2)


def random_potmap(domain, rng, count=4, amp=0.5):
    inner = [domain.global_edge(e) for e in domain.edges if not domain.is_pendant_edge(e)]
    pick = rng.choice(len(inner), size=count, replace=False)
    return {inner[i]: Potential(tuple(rng.uniform(-amp, amp, 3))) for i in pick}


def interior_eigen_energies(N):
    """Energies where the free interior operator is singular: cos(k) is an eigenvalue of Delta0."""
    lay = vs.layout(N)
    ni = len(lay.interior)
    D0 = np.zeros((ni, ni))
    for v in lay.interior:
        for w in hl.neighbors(v):
            if w in lay.iidx:
                D0[lay.iidx[v], lay.iidx[w]] = 1.0 / 3.0
    mu = np.linalg.eigvalsh(D0)
    return [math.acos(m) ** 2 for m in mu if abs(m) < 1 - 1e-9]


def test_edge_characteristics_examples():
    e = D2.global_edges()[0]
    ch = vs.edge_characteristics({}, e, PI2 / 4)
    assert ch.s == pytest.approx(2 / math.pi, abs=1e-12)
    with pytest.raises(EdgeSpectrumHit):
        vs.edge_characteristics({}, e, PI2)
    with pytest.raises(EdgeSpectrumHit) as info:
        vs.edge_characteristics({e: Potential.constant(2.0)}, e, PI2 + 2.0)
    assert info.value.details["edge"] == e


def test_assembled_entries_closed_form():
    lam = (math.pi / 3) ** 2
    sysm = vs.assemble(D2, {}, lam)
    off = sysm.A_II[~np.eye(len(sysm.A_II), dtype=bool)]
    off = off[off != 0]
    assert np.allclose(np.abs(off), 0.403067, atol=1e-6)
    assert np.allclose(np.abs(off), (1 / 3) / (3 * math.sqrt(3) / (2 * math.pi)), atol=1e-12)
    assert np.allclose(np.diag(sysm.A_II), math.pi / (3 * math.sqrt(3)), atol=1e-12)
    assert math.pi / (3 * math.sqrt(3)) == pytest.approx(0.604600, abs=1e-6)


def test_weighted_symmetry_random_potmap():
    rng = np.random.default_rng(3)
    for N in (1, 2, 3):
        dom = hl.HexDomain(N)
        sysm = vs.assemble(dom, random_potmap(dom, rng, count=min(4, N + 2)), 2.0)
        W = sysm.deg[:, None] * sysm.A_II
        assert np.max(np.abs(W - W.T)) < 1e-12


def test_zero_data_zero_solution():
    u = vs.solve_interior_dirichlet(D2, {}, 2.0, np.zeros(len(D2.boundary)))
    assert np.all(u == 0.0)


def test_free_dn_matches_dense_golden():
    golden = json.loads((DATA / "free_dn_N2_lambda2.json").read_text())
    keys = [tuple(k) for k in golden["boundary"]]
    ref = np.array(golden["matrix"])
    order = [keys.index(tuple(b)) for b in D2.boundary]
    dn = vs.dn_map(D2, {}, 2.0)
    np.testing.assert_allclose(dn.matrix, ref[np.ix_(order, order)], atol=1e-10)
    # the golden file came from oracles.free_dn_dense; keep the oracle honest too
    bk, live = free_dn_dense(2, 2.0)
    assert bk == keys and np.max(np.abs(live - ref)) < 1e-12


def test_interior_solution_matches_dense_oracle():
    rng = np.random.default_rng(0)
    for lam in (2.0, 13.7, 55.1):
        f = rng.normal(size=len(D2.boundary))
        u = vs.solve_interior_dirichlet(D2, {}, lam, f)
        bk, M = free_dn_dense(2, lam)
        order = [bk.index(tuple(b)) for b in D2.boundary]
        lay = vs.layout(2)
        np.testing.assert_allclose(-u[lay.anchor_idx], M[np.ix_(order, order)] @ f, atol=1e-10)


def test_interior_spectrum_hit():
    # energies where the free interior operator is singular, from the adjacency spectrum
    hits = interior_eigen_energies(2)
    assert hits
    for lam in hits[:3]:
        with pytest.raises(InteriorSpectrumHit):
            vs.solve_interior_dirichlet(D2, {}, lam, np.ones(len(D2.boundary)))
    # a condition scan locates the same energy
    lam0 = hits[0]
    grid = lam0 + np.linspace(-0.05, 0.05, 101)
    conds = []
    for lam in grid:
        try:
            conds.append(vs.condition_estimate(vs.assemble(D2, {}, lam).A_II))
        except EdgeSpectrumHit:
            conds.append(math.inf)
    assert abs(grid[int(np.argmax(conds))] - lam0) < 1e-3


def test_conversion_identity_free_and_perturbed():
    e = D2.global_edge(next(e for e in D2.edges if not D2.is_pendant_edge(e)))
    for potmap in ({}, {e: Potential((0.2, 0.4, -0.3))}):
        for lam in (2.0, 7.7, 31.0):
            v = vs.dn_map(D2, potmap, lam, vs.VERTEX)
            ed = vs.dn_map(D2, potmap, lam, vs.EDGE)
            k = math.sqrt(lam)
            pred = -math.cos(k) * np.eye(len(D2.boundary)) - (math.sin(k) / k) * ed.matrix
            assert np.max(np.abs(v.matrix - pred)) < 1e-10


def test_reciprocity_at_two():
    assert vs.reciprocity_defect(vs.dn_map(D2, {}, 2.0)) < 1e-10


def test_decay_from_one_top_vertex():
    # evanescent energy: |cos(sqrt(lambda))| > 1, so the response must decay
    lam = -4.0
    f = np.zeros(len(D2.boundary))
    src = D2.sides["T"][0]
    f[D2.boundary.index(src)] = 1.0
    u = vs.solve_interior_dirichlet(D2, {}, lam, f)
    lay = vs.layout(2)
    dist = {src: 0}
    frontier = [src]
    while frontier:
        nxt = []
        for v in frontier:
            for w in hl.neighbors(v):
                if w in lay.iidx and w not in dist:
                    dist[w] = dist[v] + 1
                    nxt.append(w)
        frontier = nxt
    shells = {}
    for v, d in dist.items():
        if v in lay.iidx:
            shells[d] = max(shells.get(d, 0.0), abs(u[lay.iidx[v]]))
    env = [shells[d] for d in sorted(shells)]
    assert all(b < a for a, b in zip(env, env[1:]))
    # frozen from oracles.decay_envelope (independent dense solve)
    golden = [0.09003144184, 0.008106189, 0.0007357290337, 0.0001309049403,
              1.188188301e-05, 1.606893091e-06, 1.462066253e-07, 2.580498522e-08]
    np.testing.assert_allclose(env, golden, rtol=1e-8)
    np.testing.assert_allclose(decay_envelope(2, lam, src), golden, rtol=1e-8)


def test_convert_dn_examples():
    lam = 2.0
    zero = vs.DNMatrix(lam, vs.EDGE, D2.boundary, np.zeros((14, 14)), D2.spec())
    got = vs.convert_dn(zero)
    np.testing.assert_allclose(got.matrix, -math.cos(math.sqrt(lam)) * np.eye(14), atol=1e-15)
    with pytest.raises(ConversionDegenerate):
        vs.convert_dn(vs.DNMatrix(PI2, vs.EDGE, D2.boundary, np.zeros((14, 14)), D2.spec()))
    ed = vs.dn_map(D2, {}, 7.7, vs.EDGE)
    back = vs.convert_dn(vs.convert_dn(ed))
    assert back.model == vs.EDGE
    assert np.max(np.abs(back.matrix - ed.matrix)) < 1e-12


def test_unknown_model_rejected():
    with pytest.raises(InvalidArgument):
        vs.dn_map(D2, {}, 2.0, "scattering")


def test_admissibility_examples():
    v = vs.admissible((math.pi / 2) ** 2)
    assert not v and "+0" in v.reason
    v = vs.admissible(PI2)
    assert not v and "-1" in v.reason
    assert vs.admissible(2.0, {}, D2)
    assert math.cos(math.sqrt(2.0)) == pytest.approx(0.1559, abs=1e-4)


def test_dispersion_examples():
    assert vs.dispersion_eigenvalues((0.0, 0.0)) == pytest.approx((-1.0, 1.0), abs=1e-15)
    assert vs.dispersion_eigenvalues((math.pi, math.pi)) == pytest.approx((-1 / 3, 1 / 3), abs=1e-15)
    dirac = (2 * math.pi / 3, 4 * math.pi / 3)
    assert vs.dispersion_eigenvalues(dirac) == pytest.approx((0.0, 0.0), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(x1=st.floats(0, 2 * math.pi, exclude_max=True), x2=st.floats(0, 2 * math.pi, exclude_max=True))
def test_dispersion_range(x1, x2):
    lo, hi = vs.dispersion_eigenvalues((x1, x2))
    assert 0.0 <= hi <= 1.0 + 1e-15
    assert lo == pytest.approx(-hi, abs=1e-15)


def test_free_lattice_reduction():
    count = 0
    for lam in np.linspace(0.7, 120.0, 40):
        if not vs.admissible(lam, {}, D2):
            continue
        A = vs.assemble(D2, {}, lam).A_II
        assert np.max(np.abs(A - vs.free_lattice_operator(D2, lam))) < 1e-12
        count += 1
    assert count >= 10


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(0.3, 150.0))
def test_reciprocity_and_conversion_random(seed, lam):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, 4))
    dom = hl.HexDomain(N)
    potmap = random_potmap(dom, rng, count=min(3, N + 1))
    if not vs.admissible(lam, potmap, dom) or abs(math.sin(math.sqrt(lam))) < 1e-3:
        return
    v = vs.dn_map(dom, potmap, lam, vs.VERTEX)
    e = vs.dn_map(dom, potmap, lam, vs.EDGE)
    scale = max(1.0, np.max(np.abs(v.matrix)))
    assert vs.reciprocity_defect(v) < 1e-10 * scale
    assert np.max(np.abs(vs.convert_dn(e).matrix - v.matrix)) < 1e-10 * scale


def test_domain_enlargement_consistency():
    # the same potential seen from a larger domain: the small domain's solution
    # extended by the large domain's solve agrees on the shared vertices
    small = hl.HexDomain(2, (1, 1))
    big = hl.HexDomain(4)
    e = small.global_edge(next(e for e in small.edges if not small.is_pendant_edge(e)))
    potmap = {e: Potential((0.1, 0.3))}
    lam = 5.3
    rng = np.random.default_rng(1)
    fb = rng.normal(size=len(big.boundary))
    ub = vs.solve_interior_dirichlet(big, potmap, lam, fb)
    glob = {big.to_global(v): ub[i] for i, v in enumerate(vs.layout(4).interior)}
    fs = np.array([glob[small.to_global(b)] for b in small.boundary])
    us = vs.solve_interior_dirichlet(small, potmap, lam, fs)
    for i, v in enumerate(vs.layout(2).interior):
        assert us[i] == pytest.approx(glob[small.to_global(v)], abs=1e-10)


def test_dataset_record_roundtrip():
    dn = vs.dn_map(D2, {}, 2.0)
    rec = json.loads(json.dumps(dn.to_record()))
    back = vs.DNMatrix.from_record(rec)
    assert np.array_equal(back.matrix, dn.matrix)
    assert back.boundary_order == tuple(tuple(b) for b in dn.boundary_order)


def test_grid_respects_margins():
    pots = [Potential((0.0, 0.3)), Potential((1.0, -0.2, 0.1))]
    grid = vs.lambda_grid(600.0, potentials=pots)
    assert np.all(np.diff(grid) > 0)
    spectra = [vs.edge_spectrum(q, 700.0) for q in pots] + [vs.edge_spectrum(None, 700.0)]
    for lam in grid:
        assert vs.exceptional_distance(lam) >= 1e-6
        assert all(abs(lam - mu) >= 1e-6 for sp in spectra for mu in sp)
