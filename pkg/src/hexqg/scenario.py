"""Scenario files, forward D-N datasets and inverse reports.

A scenario is a JSON object::

    {
      "domain": {"N": 3, "shift": [0, 0]},
      "potentials": [{"edge": [[4, 4], [5, 5]], "modes": [0, 0.3]}],
      "random_potentials": {"count": 2, "modes": 3, "amplitude": 0.5},
      "background": [0, 0.2],
      "lambda_policy": {"grid": "1:50:20", "per_gap": 40, "offset": 0.5,
                        "lam_max": null, "tol_T": 1e-6, "tol_edge": 1e-6},
      "inverse": {"support_box": {"n1": [1, 2], "n2": [1, 2]}, "modes": 3},
      "seed": 0
    }

Edge keys are doubled lattice coordinates (X, Y) with x = X/2, y = Y*sqrt(3)/2.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import hexlattice as hl
from . import inverse_engine as ie
from . import vertex_system as vs
from .errors import CoverageError, HexqgError, NumericFailure, ValidationError
from .sturm1d import Potential, dirichlet_spectrum, transfer

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

_TOP = {"domain", "potentials", "random_potentials", "background", "lambda_policy",
        "inverse", "seed", "name"}
_DOMAIN = {"N", "shift"}
_POT = {"edge", "modes"}
_RANDOM = {"count", "modes", "amplitude", "constant"}
_POLICY = {"grid", "per_gap", "offset", "lam_max", "tol_T", "tol_edge"}
_INVERSE = {"support_box", "modes", "eig_count", "misfit_tol", "xtol", "detect_tol", "window"}
_BOX = {"n1", "n2"}


@dataclass
class Scenario:
    N: int
    shift: tuple
    potentials: dict
    background: Potential | None
    policy: dict
    inverse: dict | None
    seed: int
    raw: dict = field(repr=False, default_factory=dict)
    name: str = ""

    @property
    def domain(self):
        return hl.HexDomain(self.N, self.shift, 0)

    @property
    def hash(self):
        return scenario_hash(self.raw)

    @property
    def cells(self):
        if not self.inverse:
            return ()
        box = self.inverse["support_box"]
        return hl.box_cells(tuple(box["n1"]), tuple(box["n2"]))

    def inverse_config(self, **overrides):
        if not self.inverse:
            raise ValidationError("scenario has no inverse block", field="inverse")
        inv = self.inverse
        kw = dict(N=self.N, cells=self.cells, shift=self.shift, modes=inv.get("modes", 3),
                  eig_count=inv.get("eig_count"), lam_max=self.policy.get("lam_max"),
                  per_gap=self.policy.get("per_gap", 40), grid_offset=self.policy.get("offset", 0.5),
                  background=self.background, xtol=inv.get("xtol", 1e-10),
                  misfit_tol=inv.get("misfit_tol", 1e-4), detect_tol=inv.get("detect_tol", 1e-5),
                  window=inv.get("window", 12))
        kw.update(overrides)
        return ie.InverseConfig(**kw)

    def true_potential(self, edge):
        q = self.potentials.get(edge)
        if q is not None:
            return q
        return self.background


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def scenario_hash(raw):
    return hashlib.sha256(canonical_json(raw).encode()).hexdigest()[:16]


def _fail(msg, path):
    raise ValidationError(f"{path}: {msg}", field=path)


def _check_keys(obj, allowed, path):
    if not isinstance(obj, dict):
        _fail("expected an object", path)
    extra = sorted(set(obj) - allowed)
    if extra:
        _fail(f"unknown field(s) {extra}", path)


def _modes(value, path):
    if not isinstance(value, list) or not value:
        _fail("modes must be a non-empty list of numbers", path)
    try:
        return Potential(tuple(float(x) for x in value))
    except (TypeError, ValueError) as exc:
        _fail(f"bad modes ({exc})", path)


def _edge(value, path):
    try:
        (x1, y1), (x2, y2) = value
        a, b = (int(x1), int(y1)), (int(x2), int(y2))
        if [list(a), list(b)] != [[x1, y1], [x2, y2]]:
            raise ValueError
        return hl.edge_id(a, b)
    except (TypeError, ValueError, HexqgError):
        _fail("edge must be a pair of neighbouring lattice keys [[X, Y], [X, Y]]", path)


def parse_scenario(raw, source="<scenario>"):
    """Validate a scenario dict; unknown fields are rejected."""
    raw = copy.deepcopy(raw)
    _check_keys(raw, _TOP, source)
    if "domain" not in raw:
        _fail("missing field 'domain'", source)
    dom = raw["domain"]
    _check_keys(dom, _DOMAIN, f"{source}.domain")
    N = dom.get("N")
    if not isinstance(N, int) or isinstance(N, bool) or N < 0:
        _fail("N must be a nonnegative integer", f"{source}.domain.N")
    shift = dom.get("shift", [0, 0])
    if (not isinstance(shift, list) or len(shift) != 2
            or not all(isinstance(s, int) and not isinstance(s, bool) for s in shift)):
        _fail("shift must be two integers", f"{source}.domain.shift")
    domain = hl.HexDomain(N, tuple(shift))
    edges = set(domain.global_edges())
    pendants = {domain.global_edge(e) for e in domain.edges if domain.is_pendant_edge(e)}

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        _fail("seed must be an integer", f"{source}.seed")

    background = None
    if raw.get("background") is not None:
        background = _modes(raw["background"], f"{source}.background")

    policy = dict(raw.get("lambda_policy") or {})
    _check_keys(policy, _POLICY, f"{source}.lambda_policy")
    if "grid" in policy and policy["grid"] is not None:
        parse_grid_spec(policy["grid"], f"{source}.lambda_policy.grid")
    for key in ("per_gap",):
        if key in policy and (not isinstance(policy[key], int) or policy[key] < 2):
            _fail("must be an integer >= 2", f"{source}.lambda_policy.{key}")
    for key in ("offset", "lam_max", "tol_T", "tol_edge"):
        if policy.get(key) is not None and not isinstance(policy[key], (int, float)):
            _fail("must be a number", f"{source}.lambda_policy.{key}")
    if "offset" in policy and not 0 < policy["offset"] < 1:
        _fail("offset must lie in (0, 1)", f"{source}.lambda_policy.offset")

    inverse = raw.get("inverse")
    cells = ()
    if inverse is not None:
        _check_keys(inverse, _INVERSE, f"{source}.inverse")
        box = inverse.get("support_box")
        if box is None:
            _fail("missing field 'support_box'", f"{source}.inverse")
        _check_keys(box, _BOX, f"{source}.inverse.support_box")
        try:
            cells = hl.box_cells(tuple(box["n1"]), tuple(box["n2"]))
            hl.check_support_box(domain, cells)
        except (KeyError, TypeError, ValueError) as exc:
            _fail(str(exc), f"{source}.inverse.support_box")
        m = inverse.get("modes", 3)
        if not isinstance(m, int) or m < 0:
            _fail("modes must be a nonnegative integer", f"{source}.inverse.modes")

    potentials = {}
    for i, item in enumerate(raw.get("potentials") or []):
        path = f"{source}.potentials[{i}]"
        _check_keys(item, _POT, path)
        e = _edge(item.get("edge"), f"{path}.edge")
        if e not in edges:
            _fail(f"edge {list(map(list, e))} is not an edge of the domain", f"{path}.edge")
        if e in pendants:
            _fail("potentials must lie strictly inside the domain (pendant edge)", f"{path}.edge")
        q = _modes(item.get("modes"), f"{path}.modes")
        potentials[e] = q if background is None else q + background

    rnd = raw.get("random_potentials")
    if rnd is not None:
        path = f"{source}.random_potentials"
        _check_keys(rnd, _RANDOM, path)
        if not cells:
            _fail("random potentials need an inverse support box", path)
        support = [e for e in hl.cell_edges(cells) if e not in potentials]
        count = rnd.get("count", 1)
        if not isinstance(count, int) or not 0 <= count <= len(support):
            _fail(f"count must be in 0..{len(support)}", f"{path}.count")
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(support), size=count, replace=False)
        order = int(rnd.get("modes", 3))
        amp = float(rnd.get("amplitude", 0.5))
        for j in sorted(int(p) for p in picks):
            coeffs = [0.0] + [float(c) for c in rng.uniform(-amp, amp, order)]
            if rnd.get("constant"):
                coeffs[0] = float(rng.uniform(-amp, amp))
            q = Potential(tuple(coeffs))
            potentials[support[j]] = q if background is None else q + background

    if cells:
        inside = set(hl.cell_edges(cells))
        for e in potentials:
            if e not in inside:
                _fail(f"potential on {list(map(list, e))} lies outside the support box",
                      f"{source}.potentials")
    return Scenario(N, tuple(shift), potentials, background, policy, inverse, seed, raw,
                    raw.get("name", ""))


def load_scenario(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read ({exc.strerror})", field=str(path)) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}", field=str(path)) from None
    return parse_scenario(raw, str(path))


def parse_grid_spec(spec, path="grid"):
    """'a:b:n' -> n evenly spaced energies from a to b inclusive."""
    try:
        a, b, n = spec.split(":")
        a, b, n = float(a), float(b), int(n)
        if n < 1 or not (math.isfinite(a) and math.isfinite(b)) or (n > 1 and b < a):
            raise ValueError
    except (AttributeError, ValueError):
        _fail("grid must look like 'a:b:n' with a <= b and n >= 1", path)
    return np.linspace(a, b, n) if n > 1 else np.array([a])


# ----------------------------------------------------------------------------
# forward datasets


def forward_grid(sc):
    """Energies for the forward run plus a list of (lambda, reason) skips."""
    pol = sc.policy
    tol_T = pol.get("tol_T", vs.TOL_T)
    tol_edge = pol.get("tol_edge", vs.TOL_EDGE)
    if pol.get("grid"):
        raw = parse_grid_spec(pol["grid"])
        keep, skipped = [], []
        for lam in raw:
            v = vs.admissible(lam, sc.potentials, sc.domain, sc.background, tol_T, tol_edge)
            if v:
                keep.append(float(lam))
            else:
                log.info("skipping lambda %.10g: %s", lam, v.reason)
                skipped.append((float(lam), v.reason))
        return np.array(keep), skipped
    if sc.inverse:
        lam_max = sc.inverse_config().spectrum_max
    else:
        lam_max = pol.get("lam_max") or 100.0
    pots = list(sc.potentials.values()) + ([sc.background] if sc.background else [])
    grid = vs.lambda_grid(lam_max, pol.get("per_gap", 40), 0.0, pol.get("offset", 0.5),
                          [q for q in pots if q is not None], sc.background, tol_T, tol_edge)
    return grid, []


def dataset_domains(sc):
    doms = [sc.domain]
    if sc.inverse:
        for f in ie.frames_for(sc.inverse_config()):
            if f is not None and f not in doms:
                doms.append(f)
    return doms


def run_forward(sc, path=None, threads=1, model=vs.VERTEX):
    """Write (or return) the JSON-lines dataset for a scenario."""
    grid, skipped = forward_grid(sc)
    domains = dataset_domains(sc)
    jobs = [(d, lam) for d in domains for lam in grid]

    def one(job):
        d, lam = job
        try:
            return vs.dn_map(d, sc.potentials, lam, model, sc.background)
        except NumericFailure as exc:
            return exc

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    records = []
    for (d, lam), res in zip(jobs, results):
        if isinstance(res, Exception):
            log.info("skipping lambda %.10g on %s: %s", lam, d.spec(), res)
            skipped.append((float(lam), str(res)))
            continue
        records.append(res)
    if not records:
        raise NumericFailure("every energy in the grid was inadmissible", skipped=skipped)
    header = {
        "type": "header",
        "format": FORMAT_VERSION,
        "scenario_hash": sc.hash,
        "scenario": sc.raw,
        "model": model,
        "boundary_order": [list(k) for k in sc.domain.boundary],
        "domains": [d.spec() for d in domains],
        "skipped": [[lam, reason] for lam, reason in skipped],
    }
    lines = [canonical_json(header)]
    for dn in records:
        rec = dn.to_record()
        rec.pop("boundary_order")
        rec["type"] = "record"
        lines.append(canonical_json(rec))
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def load_dataset(path):
    """Header and DNMatrix records of a dataset, with its invariants checked."""
    header, records = None, []
    with open(path) as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{no}: {exc.msg}", field=str(path)) from None
            if obj.get("type") == "header":
                if header is not None:
                    raise ValidationError(f"{path}:{no}: second header", field=str(path))
                header = obj
                continue
            if header is None:
                raise ValidationError(f"{path}:{no}: record before header", field=str(path))
            obj["boundary_order"] = header["boundary_order"]
            records.append(vs.DNMatrix.from_record(obj))
    if header is None:
        raise ValidationError(f"{path}: missing header", field=str(path))
    if scenario_hash(header["scenario"]) != header["scenario_hash"]:
        raise ValidationError(f"{path}: scenario hash does not match the embedded scenario",
                              field="scenario_hash")
    last = {}
    for dn in records:
        key = ie._domain_key(dn.domain)
        if key in last and not dn.lam > last[key]:
            raise ValidationError(f"{path}: energies are not strictly increasing", field="lambda")
        last[key] = dn.lam
    return header, records


# ----------------------------------------------------------------------------
# inverse runs and reports


@dataclass
class Report:
    data: dict

    def to_json(self):
        return json.dumps(self.data, indent=1, sort_keys=True) + "\n"


def run_inverse(sc, dataset=None, threads=1, **overrides):
    """Reconstruct the support potentials from a dataset or from a live oracle."""
    if dataset is not None:
        header, records = dataset
        if header["scenario_hash"] != sc.hash:
            raise ValidationError("dataset was generated from a different scenario",
                                  field="scenario_hash")
        oracle = ie.DatasetOracle(records, pendant=sc.background)
        cfg = sc.inverse_config(**overrides)
        frames = ie.frames_for(cfg)
        have = {tuple(oracle.energies(f)) for f in frames if f is not None}
        grid = sorted(set().union(*have)) if have else []
        missing = []
        for f in frames:
            if f is None:
                continue
            got = set(oracle.energies(f))
            missing.extend((f.spec(), lam) for lam in grid if lam not in got)
            if not got:
                missing.append((f.spec(), None))
        if missing or not grid:
            raise CoverageError("dataset does not cover the energies the inversion needs",
                                missing=[[m[0], m[1]] for m in missing[:50]], count=len(missing))
        cfg = sc.inverse_config(grid=tuple(grid), refine=False, **overrides)
        mode = "dataset"
    else:
        oracle = ie.LiveOracle(sc.potentials, sc.background)
        cfg = sc.inverse_config(**overrides)
        mode = "live"
    result = ie.reconstruct(oracle, cfg)
    return Report(build_report(sc, cfg, result, mode))


def build_report(sc, cfg, result, mode):
    order = cfg.modes
    bg = sc.background.padded(order) if sc.background else np.zeros(order + 1)
    edges = []
    detected = False
    worst = 0.0
    for e in sorted(result.potentials):
        rec = result.edges[e]
        rmodes = rec.potential.padded(order)
        truth = sc.true_potential(e)
        tmodes = truth.padded(order) if truth is not None else np.zeros(order + 1)
        dev = float(np.max(np.abs(rmodes - bg)))
        detected |= dev > cfg.detect_tol
        err = float(np.max(np.abs(rmodes - tmodes)))
        if truth is not None and truth.order > order:
            err = max(err, float(np.max(np.abs(truth.modes[order + 1:]))))
        worst = max(worst, err)
        edges.append({
            "edge": [list(e[0]), list(e[1])],
            "perturbed": e in sc.potentials,
            "true_modes": [float(x) for x in tmodes],
            "recovered_modes": [float(x) for x in rmodes],
            "max_mode_error": err,
            "eigenvalues": [float(x) for x in rec.eigenvalues],
            "misfit": float(rec.misfit),
            "relation": rec.relation,
            "frame": rec.frame,
            "line": rec.line,
            "partner": [list(rec.partner[0]), list(rec.partner[1])],
            "samples": [[float(l), float(v)] for l, v in rec.samples],
        })
    diag = result.diagnostics
    return {
        "format": FORMAT_VERSION,
        "scenario_hash": sc.hash,
        "scenario": sc.raw,
        "mode": mode,
        "config": {"N": cfg.N, "cells": [list(c) for c in cfg.cells], "modes": cfg.modes,
                   "eig_count": cfg.count, "lam_max": cfg.spectrum_max, "per_gap": cfg.per_gap},
        "frames": result.frames,
        "grid": [float(x) for x in result.grid],
        "edges": edges,
        "max_mode_error": worst,
        "perturbation_detected": bool(detected),
        "flags": [] if detected else ["no in-support perturbation detected"],
        "diagnostics": {
            "rounds": diag["rounds"],
            "descent_residual": float(diag["descent_residual"]),
            "partial_residual": float(diag["partial_residual"]),
            "consistency": [{"frame": c["frame"], "line": c["line"], "max_defect": float(c["max_defect"])}
                            for c in diag["consistency"]],
            "skipped": len(diag["skipped"]),
        },
    }


def emit_report(report, outdir, formats=("json", "csv", "svg")):
    """Write report.json (always), CSV tables and SVG figures into outdir."""
    data = report.data if isinstance(report, Report) else report
    os.makedirs(outdir, exist_ok=True)
    written = []
    path = os.path.join(outdir, "report.json")
    with open(path, "w") as fh:
        fh.write(json.dumps(data, indent=1, sort_keys=True) + "\n")
    written.append(path)
    if "csv" in formats:
        written += _write_csv(data, outdir)
    if "svg" in formats:
        from .plotting import report_figures
        written += report_figures(data, outdir)
    return written


def _write_csv(data, outdir):
    grid = data["grid"]
    h = data["scenario_hash"]
    samples = os.path.join(outdir, "samples.csv")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario_hash", "edge", "relation", "lambda", "pipeline_value", "recovered_s"])
    for rec in data["edges"]:
        got = {l: v for l, v in rec["samples"]}
        q = Potential(tuple(rec["recovered_modes"]))
        s_rec = transfer(q, np.asarray(grid)).s
        name = _edge_name(rec["edge"])
        for lam, sr in zip(grid, np.atleast_1d(s_rec)):
            v = got.get(lam)
            w.writerow([h, name, rec["relation"], repr(float(lam)),
                        "" if v is None else repr(float(v)), repr(float(sr))])
    with open(samples, "w") as fh:
        fh.write(buf.getvalue())
    spectra = os.path.join(outdir, "spectra.csv")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario_hash", "edge", "n", "harvested", "true"])
    for rec in data["edges"]:
        truth = dirichlet_spectrum(Potential(tuple(rec["true_modes"])), len(rec["eigenvalues"]))
        for n, (lam, tl) in enumerate(zip(rec["eigenvalues"], truth), start=1):
            w.writerow([h, _edge_name(rec["edge"]), n, repr(float(lam)), repr(float(tl))])
    with open(spectra, "w") as fh:
        fh.write(buf.getvalue())
    return [samples, spectra]


def _edge_name(e):
    (a, b), (c, d) = e
    return f"{a},{b}-{c},{d}"


def load_report(path):
    if os.path.isdir(path):
        path = os.path.join(path, "report.json")
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read ({exc.strerror})", field=str(path)) from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}: {exc.msg}", field=str(path)) from None


def check_scenario(sc):
    """Geometry and admissibility summary for the lint command."""
    d = sc.domain
    sides = {s: len(v) for s, v in d.sides.items()}
    out = {
        "scenario_hash": sc.hash,
        "domain": d.spec(),
        "interior_vertices": len(d.interior),
        "boundary_vertices": len(d.boundary),
        "sides": sides,
        "edges": len(d.edges),
        "perturbed_edges": len(sc.potentials),
    }
    grid, skipped = forward_grid(sc)
    out["grid_points"] = int(len(grid))
    out["skipped"] = [[lam, reason] for lam, reason in skipped]
    if sc.inverse:
        frames = ie.frames_for(sc.inverse_config())
        out["support_edges"] = len(hl.cell_edges(sc.cells))
        out["frames"] = [None if f is None else f.spec() for f in frames]
        if any(f is None for f in frames):
            raise ValidationError("support box cannot be placed in every rotated frame",
                                  field="inverse.support_box")
    return out
