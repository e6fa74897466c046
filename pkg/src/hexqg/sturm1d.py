"""Schrodinger equation -phi'' + q phi = lambda phi on the unit interval.

Potentials are truncated cosine series ``q(z) = sum_m a_m cos(2 pi m z)``,
which makes them symmetric about z = 1/2 by construction.  The transfer
matrix over [0, 1] is built with a fourth-order Magnus integrator whose step
exponentials are evaluated in closed form, vectorised over lambda.  For a
constant potential a single step is exact.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, ModelMismatch, NonConvergence, NumericFailure

_GAUSS = (0.5 - math.sqrt(3.0) / 6.0, 0.5 + math.sqrt(3.0) / 6.0)
_SQRT3_12 = math.sqrt(3.0) / 12.0


@dataclass(frozen=True)
class Potential:
    """Symmetric real edge potential given by its cosine coefficients."""

    modes: tuple = (0.0,)
    label: str | None = None

    def __post_init__(self):
        m = tuple(float(c) for c in self.modes) or (0.0,)
        if not all(math.isfinite(c) for c in m):
            raise InvalidArgument("potential coefficients must be finite")
        object.__setattr__(self, "modes", m)

    @classmethod
    def zero(cls):
        return cls((0.0,))

    @classmethod
    def constant(cls, c):
        return cls((float(c),))

    @property
    def order(self):
        return len(self.modes) - 1

    @property
    def mean(self):
        return self.modes[0]

    def is_constant(self):
        return all(c == 0.0 for c in self.modes[1:])

    def is_zero(self):
        return all(c == 0.0 for c in self.modes)

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        out = np.full(z.shape, self.modes[0])
        for m, c in enumerate(self.modes[1:], start=1):
            if c:
                out = out + c * np.cos(2.0 * np.pi * m * z)
        return out

    def samples(self, n=201):
        z = np.linspace(0.0, 1.0, n)
        return z, self(z)

    def padded(self, order):
        m = list(self.modes) + [0.0] * max(0, order + 1 - len(self.modes))
        return np.array(m[: order + 1])

    def to_json(self):
        return {"modes": [float(c) for c in self.modes]}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(obj["modes"]))

    def __add__(self, other):
        n = max(self.order, other.order)
        return Potential(tuple(self.padded(n) + other.padded(n)))


@dataclass(frozen=True)
class TransferData:
    """Endpoint data of the two normalised solutions at z = 1.

    ``s = phi(1)``, ``a = phi'(1)`` for phi(0) = 0, phi'(0) = 1, and
    ``c = theta(1)``, ``c_prime = theta'(1)`` for theta(0) = 1, theta'(0) = 0.
    """

    lam: object
    s: object
    a: object
    c: object
    c_prime: object

    @property
    def determinant(self):
        return self.c * self.a - self.s * self.c_prime


def _sinc_sqrt(x):
    """sinh(sqrt(x))/sqrt(x) for real x of any sign, stable near zero."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-3
    xs = x[small]
    out[small] = 1.0 + xs / 6.0 * (1.0 + xs / 20.0 * (1.0 + xs / 42.0))
    big = ~small
    xb = x[big]
    pos = xb > 0
    r = np.sqrt(np.abs(xb))
    val = np.empty_like(xb)
    val[pos] = np.sinh(r[pos]) / r[pos]
    val[~pos] = np.sin(r[~pos]) / r[~pos]
    out[big] = val
    return out


def _cos_sqrt(x):
    """cosh(sqrt(x)) for real x of any sign."""
    x = np.asarray(x, dtype=float)
    r = np.sqrt(np.abs(x))
    return np.where(x >= 0, np.cosh(r), np.cos(r))


def free_transfer(lam):
    """Closed form for q = 0: s = sin(k)/k, a = c = cos(k), c' = -k sin(k)."""
    lam = np.asarray(lam, dtype=float)
    s = _sinc_sqrt(-lam)
    c = _cos_sqrt(-lam)
    return TransferData(lam, s, c, c.copy(), -lam * s)


def _step_matrices(q, lam, n):
    """Exponentials of the Magnus step generators, shape (n, *lam.shape)."""
    h = 1.0 / n
    z = np.arange(n) * h
    w1 = q(z + _GAUSS[0] * h)
    w2 = q(z + _GAUSS[1] * h)
    shape = (n,) + (1,) * lam.ndim
    d = (_SQRT3_12 * h * h * (w1 - w2)).reshape(shape)
    lower = h * ((0.5 * (w1 + w2)).reshape(shape) - lam)
    mu2 = d * d + h * lower
    ch = _cos_sqrt(mu2)
    sh = _sinc_sqrt(mu2)
    return ch + sh * d, sh * h, sh * lower, ch - sh * d


def _magnus_steps(q, lam, n):
    """Ordered product of the step exponentials by pairwise reduction."""
    lam = np.asarray(lam, dtype=float)
    m11, m12, m21, m22 = _step_matrices(q, lam, n)
    while m11.shape[0] > 1:
        if m11.shape[0] % 2:
            pad = [np.ones((1,) + lam.shape), np.zeros((1,) + lam.shape),
                   np.zeros((1,) + lam.shape), np.ones((1,) + lam.shape)]
            m11, m12, m21, m22 = (np.concatenate([m, p]) for m, p in zip((m11, m12, m21, m22), pad))
        # later step acts on the left
        a11, a12, a21, a22 = m11[0::2], m12[0::2], m21[0::2], m22[0::2]
        b11, b12, b21, b22 = m11[1::2], m12[1::2], m21[1::2], m22[1::2]
        m11, m12, m21, m22 = (b11 * a11 + b12 * a21, b11 * a12 + b12 * a22,
                              b21 * a11 + b22 * a21, b21 * a12 + b22 * a22)
    return m11[0], m12[0], m21[0], m22[0]


def _check_lambda(lam):
    lam = np.asarray(lam, dtype=float)
    if not np.all(np.isfinite(lam)):
        raise InvalidArgument("lambda must be finite")
    return lam


def _initial_steps(q, lam):
    kmax = math.sqrt(max(0.0, float(np.max(np.abs(lam))))) + 1.0
    band = 2.0 * math.pi * max(1, q.order)
    return max(8, int(4 * (kmax + band)))


_STEPS = {}
_STEPS_LIMIT = 4096


def transfer(q, lam, tol=1e-12, max_steps=1 << 15):
    """Transfer data for potential q at one or many energies.

    Steps are doubled until the step-halving estimate of the Magnus error is
    below ``tol`` for every lambda.
    """
    lam = _check_lambda(lam)
    if q.is_constant():
        shifted = free_transfer(lam - q.mean)
        return TransferData(lam, shifted.s, shifted.a, shifted.c, shifted.c_prime)
    kmax = float(np.max(np.abs(lam))) if lam.size else 0.0
    known = _STEPS.get((q.modes, tol))
    if known is not None and known[0] >= kmax:
        m11, m12, m21, m22 = _magnus_steps(q, lam, known[1])
        return TransferData(lam, m12, m22, m11, m21)
    n = _initial_steps(q, lam)
    coarse = _magnus_steps(q, lam, n)
    while True:
        fine = _magnus_steps(q, lam, 2 * n)
        err = max(float(np.max(np.abs(f - c))) for f, c in zip(fine, coarse)) / 15.0
        scale = max(1.0, max(float(np.max(np.abs(f))) for f in fine))
        if err <= tol * scale:
            m11, m12, m21, m22 = fine
            if known is None or known[0] < kmax:
                if len(_STEPS) > _STEPS_LIMIT:
                    _STEPS.clear()
                _STEPS[(q.modes, tol)] = (max(kmax, 1.0), 2 * n)
            return TransferData(lam, m12, m22, m11, m21)
        n *= 2
        if n > max_steps:
            raise NonConvergence("transfer integration did not reach tolerance", error=err)
        coarse = fine


def integrate_ivp(q, lam, tol=1e-12):
    return transfer(q, lam, tol)


def s_value(q, lam, tol=1e-12):
    return transfer(q, lam, tol).s


class BackgroundCache:
    """Per (potential, lambda) memo for background edge data.

    Reads are lock free; insertion takes a lock so concurrent writers never
    interleave.
    """

    def __init__(self):
        self._store = {}
        self._lock = threading.Lock()

    def get(self, q, lam):
        key = (q.modes, float(lam))
        hit = self._store.get(key)
        if hit is not None:
            return hit
        data = transfer(q, float(lam))
        out = (float(data.s), float(data.a), float(data.c), float(data.c_prime))
        with self._lock:
            self._store.setdefault(key, out)
        return self._store[key]

    def __len__(self):
        return len(self._store)


_BACKGROUND = BackgroundCache()


def background_solutions(q0, lam, cache=None):
    cache = _BACKGROUND if cache is None else cache
    s, a, c, cp = cache.get(q0, lam)
    return TransferData(float(lam), s, a, c, cp)


def _refine_roots(func, lo, hi, flo, fhi, xtol=1e-12, max_iter=200):
    """Vectorised Illinois false position on sign-change brackets."""
    lo, hi, flo, fhi = (np.array(v, dtype=float) for v in (lo, hi, flo, fhi))
    side = np.zeros(lo.shape, dtype=int)
    for _ in range(max_iter):
        width = hi - lo
        active = width > xtol * np.maximum(1.0, np.abs(lo))
        if not np.any(active):
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            x = (lo * fhi - hi * flo) / (fhi - flo)
        bad = ~np.isfinite(x) | (x <= lo) | (x >= hi)
        x = np.where(bad, 0.5 * (lo + hi), x)
        fx = np.asarray(func(x), dtype=float)
        left = np.sign(fx) == np.sign(flo)
        # the bracket end that did not move gets its value halved (Illinois)
        hi_new = np.where(left, hi, x)
        lo_new = np.where(left, x, lo)
        fhi_new = np.where(left, np.where(side == 1, 0.5 * fhi, fhi), fx)
        flo_new = np.where(left, fx, np.where(side == -1, 0.5 * flo, flo))
        side = np.where(left, 1, -1)
        zero = fx == 0.0
        lo = np.where(active, np.where(zero, x, lo_new), lo)
        hi = np.where(active, np.where(zero, x, hi_new), hi)
        flo = np.where(active, np.where(zero, 0.0, flo_new), flo)
        fhi = np.where(active, np.where(zero, 0.0, fhi_new), fhi)
    return 0.5 * (lo + hi)


def eigen_grid(count, lo_shift=0.0, hi_shift=0.0, per_gap=40):
    """Sample points covering (below pi**2, ((count+1) pi)**2) with per_gap points per gap."""
    pts = [np.linspace(min(-1.0, lo_shift - 1.0), math.pi ** 2 + lo_shift, per_gap, endpoint=False)]
    for n in range(1, count + 1):
        a = (n * math.pi) ** 2 + lo_shift
        b = ((n + 1) * math.pi) ** 2 + hi_shift
        pts.append(np.linspace(a, b, per_gap, endpoint=False))
    pts.append(np.array([((count + 1) * math.pi) ** 2 + hi_shift]))
    return np.unique(np.concatenate(pts))


def dirichlet_spectrum(q, count, tol=1e-10):
    """First ``count`` Dirichlet eigenvalues, bracketed on an asymptotic grid."""
    if count < 1:
        raise InvalidArgument("count must be at least 1")
    qz = q(np.linspace(0.0, 1.0, 257))
    qmin, qmax = float(qz.min()), float(qz.max())
    grid = eigen_grid(count + 1, qmin, qmax)
    vals = s_value(q, grid)
    sign = np.signbit(vals)
    idx = np.nonzero(sign[:-1] != sign[1:])[0]
    if len(idx) < count:
        raise NumericFailure("could not bracket the requested eigenvalues",
                             found=int(len(idx)), wanted=count)
    idx = idx[:count]
    roots = _refine_roots(lambda x: s_value(q, x), grid[idx], grid[idx + 1],
                          vals[idx], vals[idx + 1], xtol=tol * 1e-2)
    return np.asarray(roots)


def _simpson(y, h):
    return h / 3.0 * (y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum())


def eigenfunction_samples(q, lam, n=2048):
    """phi(z, lam) with phi(0) = 0, phi'(0) = 1 on n+1 uniform nodes."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    e11, e12, e21, e22 = _step_matrices(q, lam, n)
    phi = np.zeros((n + 1, lam.size))
    cur = np.zeros(lam.size)
    dphi = np.ones(lam.size)
    for j in range(n):
        cur, dphi = e11[j] * cur + e12[j] * dphi, e21[j] * cur + e22[j] * dphi
        phi[j + 1] = cur
    return np.linspace(0.0, 1.0, n + 1), phi


def normalized_eigenfunction(q, lam, n=2048, tol=1e-7):
    """Samples of the L2-normalised Dirichlet eigenfunction and its norm before scaling."""
    resid = abs(float(s_value(q, lam)))
    if resid > tol:
        raise InvalidArgument(f"{lam} is not a Dirichlet eigenvalue (|s| = {resid:.3g})")
    z, phi = eigenfunction_samples(q, lam, n)
    phi = phi[:, 0]
    norm = math.sqrt(_simpson(phi * phi, 1.0 / n))
    return z, phi / norm, norm


def spectral_jacobian(q, eigs, order, n=2048):
    """d lambda_n / d a_m = integral of phi_n**2 cos(2 pi m z) for normalised phi_n."""
    z, phi = eigenfunction_samples(q, eigs, n)
    h = 1.0 / n
    w = np.full(n + 1, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    w *= h / 3.0
    sq = phi * phi
    norms = w @ sq
    sq = sq / norms
    cos = np.cos(2.0 * np.pi * np.outer(np.arange(order + 1), z))
    return (cos * w) @ sq  # shape (order+1, len(eigs))


def _eigs_near(q, guess, count):
    """Eigenvalues 1..count of q refined from brackets around ``guess``."""
    lam = np.asarray(guess, dtype=float)
    gaps = np.diff(np.concatenate([[0.0], (np.arange(1, count + 1) * math.pi) ** 2]))
    half = np.minimum(0.45 * gaps, 50.0)
    lo, hi = lam - half, lam + half
    flo, fhi = s_value(q, lo), s_value(q, hi)
    bad = np.sign(flo) == np.sign(fhi)
    if np.any(bad):
        return dirichlet_spectrum(q, count)
    return _refine_roots(lambda x: s_value(q, x), lo, hi, flo, fhi, xtol=1e-13)


@dataclass
class BorgResult:
    potential: Potential
    misfit: float
    iterations: int
    history: list = field(default_factory=list)


def borg_reconstruct(eigs, modes, tol=1e-9, max_iter=40, mismatch_tol=1e-6, initial=None):
    """Fit cosine coefficients a_0..a_modes to a Dirichlet spectrum by Gauss-Newton."""
    eigs = np.asarray(eigs, dtype=float)
    count = eigs.size
    if count < modes + 1:
        raise InvalidArgument(f"need at least {modes + 1} eigenvalues, got {count}")
    n = np.arange(1, count + 1)
    base = (n * math.pi) ** 2
    if initial is None:
        a = np.zeros(modes + 1)
        a[0] = float(np.mean(eigs - base))
        for m in range(1, min(modes, count) + 1):
            a[m] = -2.0 * (eigs[m - 1] - base[m - 1] - a[0])
    else:
        a = np.asarray(initial, dtype=float).copy()
    history = []
    current = None
    for it in range(1, max_iter + 1):
        q = Potential(tuple(a))
        guess = current if current is not None else base + a[0]
        try:
            current = _eigs_near(q, guess, count)
        except NumericFailure:
            current = dirichlet_spectrum(q, count)
        resid = eigs - current
        misfit = float(np.sqrt(np.mean(resid ** 2)))
        history.append(misfit)
        J = spectral_jacobian(q, current, modes).T
        step, *_ = np.linalg.lstsq(J, resid, rcond=None)
        a = a + step
        if float(np.max(np.abs(step))) < tol:
            q = Potential(tuple(a))
            final = _eigs_near(q, current + J @ step, count)
            misfit = float(np.sqrt(np.mean((eigs - final) ** 2)))
            history.append(misfit)
            if misfit > mismatch_tol * max(1.0, float(np.max(np.abs(eigs))) * 1e-3):
                raise ModelMismatch("spectrum is not matched by the band-limited model",
                                    misfit=misfit, modes=list(a))
            return BorgResult(q, misfit, it, history)
    raise NonConvergence("Gauss-Newton did not converge", misfit=history[-1], modes=list(a))
