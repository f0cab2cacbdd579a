"""Renewal kernel G = sum P^n on X x R, the limit operator Pi_0 and the
Fourier representation of G.

Points of X x R are triples (x, a, t) with x a unit vector, a in A and t
real; (x, t) corresponds to e^t x in R^d. The kernel acts by
P f(x, a, t) = sum_g w_g f(g x / |g x|, g a, t + sigma(g, x)).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.special import comb, ndtr

from . import mc
from .errors import (
    CutoffError,
    GridError,
    NonTransientError,
    PreconditionError,
    QuadratureError,
    ToleranceError,
)
from .matrix_core import random_unit_vectors
from .transfer_operator import (
    ETA,
    OperatorFamily,
    SpectralData,
    StateGrid,
    UOperator,
    build_operator_from_family,
    holder_norm,
)
from .walk_engine import GeneratorMeasure, LyapunovEstimate, lyapunov_estimate

log = logging.getLogger(__name__)

Evaluator = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def psi(t):
    """psi(t) = (2 pi)^(-1/2) int_t^inf exp(-u^2/2) du."""
    return ndtr(-np.asarray(t, dtype=float))


# ---------------------------------------------------------------------------
# the moduli omega, omega_0


def _unpack(u):
    x, a, t = u
    x = np.asarray(x, dtype=float)
    return x / np.linalg.norm(x, axis=-1, keepdims=True), np.asarray(a), np.asarray(t, dtype=float)


def _chordal(x, y):
    return np.linalg.norm(x - y, axis=-1)


def omega(u, v):
    """exp(-(|t|+|t'|)/2) sqrt(d(x,x')^2 + (e^((t-t')/2) - e^((t'-t)/2))^2),
    or 1 across A-fibers. d is the chordal distance on the sphere."""
    x, a, t = _unpack(u)
    y, b, s = _unpack(v)
    val = np.exp(-(np.abs(t) + np.abs(s)) / 2) * np.sqrt(_chordal(x, y) ** 2 + (2 * np.sinh((t - s) / 2)) ** 2)
    return np.where(a == b, val, 1.0)


def omega0(u, v):
    x, a, t = _unpack(u)
    y, b, s = _unpack(v)
    val = np.sqrt((t - s) ** 2 + _chordal(x, y) ** 2) / ((1 + np.abs(t)) * (1 + np.abs(s)))
    return np.where(a == b, val, 1.0)


def omega_pullback(u, v):
    """|e^t x - e^t' x'| / ((1 + e^t)(1 + e^t')), the modulus on R^d pulled
    back by (x, t) -> e^t x. Equals omega times
    e^((t+|t|)/2) e^((t'+|t'|)/2) / ((1+e^t)(1+e^t')), a factor in [1/4, 1]."""
    x, a, t = _unpack(u)
    y, b, s = _unpack(v)
    et, es = np.exp(t), np.exp(s)
    val = np.linalg.norm(et[..., None] * x - es[..., None] * y, axis=-1) / ((1 + et) * (1 + es))
    return np.where(a == b, val, 1.0)


def omega_pullback_factored(u, v):
    x, a, t = _unpack(u)
    y, b, s = _unpack(v)
    w = np.exp(t / 2) / (1 + np.exp(t)) * np.exp(s / 2) / (1 + np.exp(s))
    val = w * np.sqrt(_chordal(x, y) ** 2 + (2 * np.sinh((t - s) / 2)) ** 2)
    return np.where(a == b, val, 1.0)


# ---------------------------------------------------------------------------
# function types


@dataclass(frozen=True, eq=False)
class OmegaFunction:
    evaluator: Evaluator
    gamma: float
    omega_norm: float | None = None
    p_minus: np.ndarray | None = None
    p_plus: np.ndarray | None = None
    size_A: int = 1
    dim: int = 2
    t_support: tuple[float, float] | None = None

    def __call__(self, x, a, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        a = np.broadcast_to(np.asarray(a), (n,))
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        return np.asarray(self.evaluator(x, a, t), dtype=float)

    def boundary_values(self, samples: int = 64, T: float = 80.0) -> tuple[np.ndarray, np.ndarray]:
        if self.p_minus is not None and self.p_plus is not None:
            return np.asarray(self.p_minus, float), np.asarray(self.p_plus, float)
        x = _sphere_samples(self.dim, samples)
        pm, pp = [], []
        for a in range(self.size_A):
            pm.append(float(np.mean(self(x, a, -T))))
            pp.append(float(np.mean(self(x, a, T))))
        return np.asarray(pm), np.asarray(pp)

    def norm(self, pairs: int = 4000, seed: int = 0) -> float:
        return self.omega_norm if self.omega_norm is not None else estimate_omega_norm(self, pairs, seed)


@dataclass(frozen=True, eq=False)
class RegularFunction:
    """f in E^(gamma, k). ``derivatives[m-1]`` evaluates the m-th t-derivative.
    ``fourier(x, a, xi)`` optionally gives int exp(-i xi u) f(x, a, u) du."""

    evaluator: Evaluator
    derivatives: tuple = ()
    gamma: float = 0.25
    k: int = 0
    norm_gamma_k: float | None = None
    fourier: Callable | None = None
    size_A: int = 1
    dim: int = 2
    t_support: tuple[float, float] | None = None

    def __call__(self, x, a, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        a = np.broadcast_to(np.asarray(a), (n,))
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        return np.asarray(self.evaluator(x, a, t))

    def derivative(self, m: int) -> Evaluator:
        if m == 0:
            return self.evaluator
        return self.derivatives[m - 1]


def _sphere_samples(d: int, count: int, seed: int = 7) -> np.ndarray:
    if d == 2:
        th = np.linspace(0, 2 * math.pi, count, endpoint=False)
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    return random_unit_vectors(mc.block_rng(seed, "sphere-samples", 0), count, d)


def estimate_omega_norm(f: OmegaFunction, pairs: int = 4000, seed: int = 0, t_range: float = 12.0) -> float:
    """Sampled sup |f(u) - f(v)| / omega(u, v)^gamma (a lower bound)."""
    rng = mc.block_rng(seed, "omega-norm", 0)
    d = f.dim
    x = random_unit_vectors(rng, pairs, d)
    a = rng.integers(0, f.size_A, pairs)
    t = rng.uniform(-t_range, t_range, pairs)
    scale = np.exp(rng.uniform(-8, 0, pairs))
    y = x + scale[:, None] * rng.standard_normal((pairs, d))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    s = t + scale * rng.standard_normal(pairs)
    # also pairs far apart in t, which probe the boundary behaviour
    far = rng.random(pairs) < 0.3
    s = np.where(far, rng.uniform(-3 * t_range, 3 * t_range, pairs), s)
    w = omega((x, a, t), (y, a, s))
    diff = np.abs(f(x, a, t) - f(y, a, s))
    ok = w > 0
    return float(np.max(diff[ok] / w[ok] ** f.gamma))


def e_gamma_norm(
    fn: Evaluator,
    gamma: float,
    dim: int = 2,
    size_A: int = 1,
    t_grid: np.ndarray | None = None,
    n_points: int = 32,
) -> float:
    """Sampled |f|_(gamma, E) = sup e^(gamma|t|)|f| + sup e^(gamma|t|) |f(x,t) - f(x',t)| / d(x,x')^gamma."""
    t = np.linspace(-30, 30, 1201) if t_grid is None else np.asarray(t_grid, float)
    x = _sphere_samples(dim, n_points)
    w = np.exp(gamma * np.abs(t))
    sup = 0.0
    hol = 0.0
    d = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    iu = np.triu_indices(n_points, 1)
    dg = d[iu] ** gamma
    for a in range(size_A):
        vals = np.stack([np.asarray(fn(np.repeat(xi[None], len(t), 0), np.full(len(t), a), t)) for xi in x])
        sup = max(sup, float(np.max(np.abs(vals) * w)))
        diff = np.abs(vals[iu[0]] - vals[iu[1]]) * w
        hol = max(hol, float(np.max(diff / dg[:, None])))
    return sup + hol


# ---------------------------------------------------------------------------
# transience and drift


_LYAP_CACHE: dict = {}


def shared_lyapunov(rho: GeneratorMeasure, seed: int = 0, n: int = 1000, n_walks: int = 1000) -> LyapunovEstimate:
    """One Lyapunov estimate per measure, shared across operations."""
    key = (id(rho), seed, n, n_walks)
    hit = _LYAP_CACHE.get(key)
    if hit is None or hit[0] is not rho:
        hit = (rho, lyapunov_estimate(rho, n, n_walks, seed))
        _LYAP_CACHE[key] = hit
    return hit[1]


def check_transient(est: LyapunovEstimate) -> None:
    if not est.lambda_rho > 3 * est.std_error or est.lambda_rho <= 0:
        raise NonTransientError(
            f"Lyapunov estimate {est.lambda_rho:.3e} (std error {est.std_error:.1e}) is not above 3 sigma"
        )


@dataclass(eq=False)
class DriftProfile:
    """v_n = P(s)^n 1 on a grid: v_n(x) = E_x exp(-s S_n)."""

    s: float
    grid: StateGrid
    values: np.ndarray  # (n_max + 1, size)

    def at(self, x: np.ndarray, a: int) -> np.ndarray:
        return np.array([self.grid.interpolate(v, x[None, :], a)[0] for v in self.values])

    def tail(self, x: np.ndarray, a: int) -> np.ndarray:
        """tail[N] bounds sum_{n > N} E_x exp(-s S_n)."""
        v = self.at(x, a)
        n_max = len(v) - 1
        lo = max(1, int(0.8 * n_max))
        ratio = float(np.max(v[lo + 1 :] / v[lo:-1]))
        if not ratio < 1:
            raise NonTransientError(f"drift profile does not decay (ratio {ratio:.4f})")
        far = v[-1] * ratio / (1 - ratio)
        rev = np.cumsum(v[::-1])[::-1]  # rev[N] = sum_{n >= N}
        out = np.empty(n_max + 1)
        out[:-1] = rev[1:] + far
        out[-1] = far
        return out


_DRIFT_CACHE: dict = {}


def drift_profile(rho: GeneratorMeasure, s: float, grid: StateGrid | None = None, n_max: int = 400) -> DriftProfile:
    if grid is None:
        grid = StateGrid.circle(512, rho.size_A) if rho.dim == 2 else StateGrid.sphere2(3, rho.size_A)
    key = (id(rho), s, grid.size, n_max)
    hit = _DRIFT_CACHE.get(key)
    if hit is not None and hit[0] is rho:
        return hit[1]
    P = build_operator_from_family(OperatorFamily(rho, grid), complex(s), closed=True)
    vals = np.empty((n_max + 1, grid.size))
    v = np.ones(grid.size)
    for n in range(n_max + 1):
        vals[n] = v
        v = (P.matrix @ v).real
    prof = DriftProfile(s, grid, vals)
    _DRIFT_CACHE[key] = (rho, prof)
    return prof


# ---------------------------------------------------------------------------
# Monte Carlo Green function


@dataclass(frozen=True)
class RenewalEstimate:
    value: float
    mc_std_error: float
    truncation_bound: float
    n_terms: int
    all_terms_zero: bool = False


def _green_block(rng, rho: GeneratorMeasure, f, x, a, ts, n_terms, size):
    d = rho.dim
    mats = rho.matrices
    perms = rho.perm_array
    cum = np.cumsum(rho.weight_array)
    y = np.repeat(np.asarray(x, float)[None, :], size, 0)
    aa = np.full(size, int(a))
    S = np.zeros(size)
    acc = np.zeros((len(ts), size))
    nonzero = False
    for n in range(n_terms + 1):
        for i, t in enumerate(ts):
            v = f(y, aa, t + S)
            if not nonzero and np.any(v != 0):
                nonzero = True
            acc[i] += v
        if n == n_terms:
            break
        k = np.minimum(np.searchsorted(cum, rng.random(size), side="right"), len(cum) - 1)
        gy = np.einsum("nij,nj->ni", mats[k], y)
        ng = np.linalg.norm(gy, axis=1)
        S += np.log(ng)
        y = gy / ng[:, None]
        aa = perms[k, aa]
    del d
    return acc, nonzero


def _f_norm(f) -> float:
    return f.norm() if isinstance(f, OmegaFunction) else float(f.norm_gamma_k or 1.0)


def truncation_terms(
    rho: GeneratorMeasure, f, x, a, t_min: float, tolerance: float, safety: float = 2.0, drift: DriftProfile | None = None
) -> tuple[int, float]:
    """Smallest N with safety * |f|_omega e^(-s t) sum_{n>N} E_x e^(-s S_n) <= tolerance.

    Uses |f(x, u)| <= |f|_omega exp(-gamma max(u, 0)) (which holds when
    p^+(f) = 0) and s = min(gamma, eta). Returns N and the unscaled tail
    sum_{n>N} E_x e^(-s S_n)."""
    s = min(f.gamma, ETA)
    prof = drift or drift_profile(rho, s)
    tail = prof.tail(np.asarray(x, float), int(a))
    scale = safety * _f_norm(f) * math.exp(-s * t_min)
    if scale == 0:
        return 0, 0.0
    ok = np.nonzero(scale * tail <= tolerance)[0]
    if ok.size:
        return int(ok[0]), float(tail[ok[0]])
    # beyond the profile: extrapolate with the asymptotic ratio
    n_max = len(tail) - 1
    r = tail[-1] / tail[-2] if tail[-2] > 0 else 0.0
    if not r < 1:
        raise NonTransientError("drift tail does not decay")
    extra = math.ceil(math.log(tolerance / (scale * tail[-1])) / math.log(r))
    return n_max + extra, float(tail[-1] * r**extra)


def green_mc_multi(
    rho: GeneratorMeasure,
    f,
    x,
    a: int,
    t_values: Sequence[float],
    seed: int = 0,
    tolerance: float = 1e-4,
    n_walks: int = 2**14,
    workers: int = 1,
    lyapunov: LyapunovEstimate | None = None,
    safety: float = 2.0,
) -> list[RenewalEstimate]:
    """green_mc at several t with common random numbers (one set of walks)."""
    check_transient(lyapunov or shared_lyapunov(rho))
    x = np.asarray(x, float)
    x = x / np.linalg.norm(x)
    ts = np.asarray(t_values, float)
    n_terms, tail = truncation_terms(rho, f, x, a, float(ts.min()), tolerance, safety)
    s = min(f.gamma, ETA)
    bounds = safety * _f_norm(f) * np.exp(-s * ts) * tail
    parts = mc.run_blocks(
        lambda rng, b, size: _green_block(rng, rho, f, x, a, ts, n_terms, size), n_walks, seed, "green", workers
    )
    acc = np.concatenate([p[0] for p in parts], axis=1)
    nonzero = any(p[1] for p in parts)
    out = []
    for i in range(len(ts)):
        v = acc[i]
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        out.append(RenewalEstimate(float(v.mean()), se, float(bounds[i]), int(n_terms), not nonzero))
    return out


def green_mc(
    rho: GeneratorMeasure,
    f,
    x,
    a: int,
    t: float,
    seed: int = 0,
    tolerance: float = 1e-4,
    n_walks: int = 2**14,
    workers: int = 1,
    lyapunov: LyapunovEstimate | None = None,
) -> RenewalEstimate:
    """Monte Carlo estimate of sum_{n <= N} P^n f(x, a, t) with N chosen from
    the drift so that the neglected tail is below ``tolerance``."""
    return green_mc_multi(rho, f, x, a, [t], seed, tolerance, n_walks, workers, lyapunov)[0]


def apply_kernel(rho: GeneratorMeasure, f: Evaluator) -> Evaluator:
    """The evaluator of P f on X x R."""
    mats, w, perms = rho.matrices, rho.weight_array, rho.perm_array

    def pf(x, a, t):
        x = np.atleast_2d(x)
        out = np.zeros(x.shape[0])
        for k in range(len(w)):
            gy = x @ mats[k].T
            ng = np.linalg.norm(gy, axis=1)
            out += w[k] * f(gy / ng[:, None], perms[k, a], t + np.log(ng))
        return out

    return pf


# ---------------------------------------------------------------------------
# Pi_0


def _class_integrands(spectral: SpectralData, grid: StateGrid, f) -> list[Callable[[float], float]]:
    pts, aidx = grid.points, grid.a_index
    out = []
    for nu in spectral.stationary:
        sel = nu > 0
        y, b, w = pts[sel], aidx[sel], nu[sel]
        out.append(lambda u, y=y, b=b, w=w: float(w @ f(y, b, np.full(len(w), u))))
    return out


def pi0_components(
    spectral: SpectralData,
    grid: StateGrid,
    f,
    x,
    a: int,
    t: float,
    tolerance: float = 1e-8,
) -> np.ndarray:
    """p_i(x, a) int_t^inf int f(y, u) d nu_i(y) du for every minimal class i."""
    x = np.asarray(x, float)
    x = x / np.linalg.norm(x)
    lo, hi = t, math.inf
    sup = getattr(f, "t_support", None)
    if sup is not None:
        lo, hi = max(t, sup[0]), sup[1]
    out = []
    for p, h in zip(spectral.invariant, _class_integrands(spectral, grid, f)):
        px = float(grid.interpolate(p, x[None, :], a)[0])
        if abs(px) < 1e-300 or lo >= hi:
            out.append(0.0)
            continue
        val, err = integrate.quad(h, lo, hi, epsabs=tolerance / 10, epsrel=1e-12, limit=400)
        if not err <= tolerance:
            raise QuadratureError(f"quadrature error {err:.2e} above tolerance {tolerance:.1e}")
        out.append(px * val)
    return np.asarray(out)


def pi0_apply(spectral: SpectralData, grid: StateGrid, f, x, a: int, t: float, tolerance: float = 1e-8) -> float:
    """Pi_0 f(x, a, t) = int_t^inf N_0 f(x, a, u) du."""
    return float(np.sum(pi0_components(spectral, grid, f, x, a, t, tolerance)))


def pi0_over_sigma(
    spectral: SpectralData, grid: StateGrid, f, x, a: int, t: float, sigma_rho: float | None = None, tolerance: float = 1e-8
) -> float:
    comps = pi0_components(spectral, grid, f, x, a, t, tolerance)
    sig = spectral.sigma if sigma_rho is None else np.full(len(comps), sigma_rho)
    return float(np.sum(comps / sig))


# ---------------------------------------------------------------------------
# Fourier representation


@dataclass(frozen=True)
class FourierGreen:
    value: np.ndarray
    pi0_term: np.ndarray
    integral: np.ndarray
    quadrature_bound: np.ndarray
    tail_bound: float
    step: float
    cutoff: float
    xi: np.ndarray
    integrand_norm: np.ndarray


def fourier_transform_grid(f: RegularFunction, grid: StateGrid, xi: float, u_step: float = 0.005) -> np.ndarray:
    if f.fourier is not None:
        return np.asarray(f.fourier(grid.points, grid.a_index, xi), dtype=complex)
    lo, hi = f.t_support if f.t_support is not None else (-40.0, 40.0)
    u = np.arange(lo, hi + u_step / 2, u_step)
    w = np.full(len(u), u_step)
    w[0] = w[-1] = u_step / 2
    vals = np.stack([f(grid.points, grid.a_index, np.full(grid.size, uu)) for uu in u], axis=1)
    return vals @ (w * np.exp(-1j * xi * u))


def fourier_green(
    U: UOperator,
    spectral: SpectralData,
    f: RegularFunction,
    points: Sequence[tuple],
    xi_cutoff: float = 10.0,
    quadrature_step: float = 0.05,
    tolerance: float = 1e-6,
    C_hat: float | None = None,
    L_hat: float | None = None,
    envelope: Callable[[np.ndarray], np.ndarray] | None = None,
) -> FourierGreen:
    """sum P^n f = Pi_0 f / sigma + (1/2 pi) int exp(i xi t) U(-i xi) f^(x, xi) d xi
    at points (x, a, t).

    The xi-integral uses the trapezoid rule on [-cutoff, cutoff] with the
    symmetry W(-xi) = conj W(xi) of real f. ``quadrature_bound`` is the
    difference between steps h and 2h plus the tail bound; the tail beyond the
    cutoff is bounded with C (1 + xi)^(L+1) |f^(xi)|_gamma, using ``envelope``
    (a bound on |f^(., xi)|_gamma) when given."""
    grid = U.family.grid
    pts = [(np.asarray(x, float) / np.linalg.norm(x), int(a), float(t)) for x, a, t in points]
    tmax = max(1.0, max(abs(p[2]) for p in pts))
    h = min(quadrature_step, math.pi / (8 * tmax))
    K = int(math.ceil(xi_cutoff / h))
    if K % 2:
        K += 1
    h = xi_cutoff / K
    xi = h * np.arange(K + 1)
    W = np.empty((K + 1, len(pts)), dtype=complex)
    norms = np.empty(K + 1)
    for k, s in enumerate(xi):
        fh = fourier_transform_grid(f, grid, s)
        g = U.at_zero(fh) if s == 0 else U.apply(-1j * s, fh)
        norms[k] = float(np.max(np.abs(g)))
        for j, (x, a, t) in enumerate(pts):
            W[k, j] = np.exp(1j * s * t) * grid.interpolate(g, x[None, :], a)[0]

    def trap(vals, step):
        return step * (vals[0] / 2 + vals[1:-1].sum(axis=0) + vals[-1] / 2)

    q1 = trap(W, h)
    q2 = trap(W[::2], 2 * h)
    integral = q1.real / math.pi
    richardson = np.abs(q1.real - q2.real) / math.pi

    tail = _fourier_tail(f, grid, xi_cutoff, C_hat, L_hat, envelope)
    if tail > tolerance:
        raise CutoffError(f"tail bound {tail:.2e} beyond xi = {xi_cutoff} exceeds tolerance {tolerance:.1e}")
    pi0 = np.array(
        [pi0_over_sigma(spectral, grid, f, x, a, t, U.sigma_rho) for x, a, t in pts]
    )
    return FourierGreen(pi0 + integral, pi0, integral, richardson + tail, tail, h, xi_cutoff, xi, norms)


def _fourier_tail(f, grid, cutoff, C_hat, L_hat, envelope) -> float:
    if C_hat is None or L_hat is None:
        return 0.0 if envelope is None else math.nan
    if envelope is None:
        if f.fourier is None:
            return math.nan

        def envelope(s):
            return np.array([holder_norm(f.fourier(grid.points, grid.a_index, v), grid) for v in np.atleast_1d(s)])

    xs = cutoff + np.concatenate([np.linspace(0, 20, 401)[:-1], 20 + np.geomspace(1e-3, 1e4, 200)])
    vals = C_hat * (1 + xs) ** (L_hat + 1) * envelope(xs)
    # factor 2 for negative frequencies, 1/(2 pi) normalization
    return float(2 * integrate.trapezoid(vals, xs) / (2 * math.pi))


# ---------------------------------------------------------------------------
# boundary decomposition


def boundary_decompose(f: OmegaFunction) -> tuple[Evaluator, np.ndarray, np.ndarray]:
    """phi = f - p^-(a) psi(t) - p^+(a) (1 - psi(t))."""
    pm, pp = f.boundary_values()

    def phi(x, a, t):
        a = np.asarray(a)
        ps = psi(t)
        return f.evaluator(x, a, t) - pm[a] * ps - pp[a] * (1 - ps)

    return phi, pm, pp


def boundary_check(f: OmegaFunction, t_grid: np.ndarray | None = None, n_points: int = 16) -> dict:
    """Measured |f - p^-| e^(gamma|t|) on t <= 0, |f - p^+| e^(gamma|t|) on t >= 0
    (both should be <= 2 |f|_omega) and |phi|_(gamma,0) / |f|_omega."""
    t = np.linspace(-30, 30, 601) if t_grid is None else t_grid
    x = _sphere_samples(f.dim, n_points)
    pm, pp = f.boundary_values()
    worst = 0.0
    for a in range(f.size_A):
        for xi in x:
            v = f(np.repeat(xi[None], len(t), 0), a, t)
            ref = np.where(t <= 0, pm[a], pp[a])
            worst = max(worst, float(np.max(np.abs(v - ref) * np.exp(f.gamma * np.abs(t)))))
    phi, _, _ = boundary_decompose(f)
    nrm = f.norm()
    ratio = e_gamma_norm(phi, f.gamma, f.dim, f.size_A, t, n_points) / nrm if nrm > 0 else 0.0
    return {"decay_constant": worst / nrm if nrm > 0 else 0.0, "phi_ratio": ratio, "omega_norm": nrm}


# ---------------------------------------------------------------------------
# phi_k regularization


def phi_k(t, k: int):
    t = np.asarray(t, dtype=float)
    return np.where(t >= 0, np.abs(t) ** k * np.exp(-np.maximum(t, 0)), 0.0)


def phi_derivative_coefficients(k: int, m: int) -> list[tuple[float, int]]:
    """phi_{k+1}^(m)(u) = sum_l c_l u^(k+1-l) e^(-u) on u > 0, as (c_l, power)."""
    return [
        (float(comb(m, l, exact=True) * (-1) ** (m - l) * math.factorial(k + 1) / math.factorial(k + 1 - l)), k + 1 - l)
        for l in range(m + 1)
    ]


def regularization_constant(k: int, gamma: float) -> float:
    """max_m sum_l C(m,l) (k+1)! / (1-gamma)^(k+2-l): a proven bound for
    |phi_{k+1} * f|_(gamma,k) / |f|_(gamma,0)."""
    return max(
        sum(comb(m, l, exact=True) * math.factorial(k + 1) / (1 - gamma) ** (k + 2 - l) for l in range(m + 1))
        for m in range(k + 1)
    )


@dataclass(frozen=True, eq=False)
class Convolved:
    """phi_{k+1} * f and its derivatives, sampled on ``t``."""

    t: np.ndarray
    values: np.ndarray  # (k + 1, len(t)); row m is the m-th derivative
    k: int
    gamma: float

    def norm_gamma_k(self) -> float:
        w = np.exp(self.gamma * np.abs(self.t))
        return float(np.max(np.abs(self.values) * w))


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)
_GL_MAX_WIDTH = 2.0


def _piecewise_moments(f, knots: np.ndarray, t: np.ndarray, max_power: int, u_max: float) -> np.ndarray:
    """int_0^u_max u^p e^(-u) f(t - u) du for p <= max_power, f smooth between
    knots and zero outside [knots[0], knots[-1]]."""
    out = np.zeros((max_power + 1, t.size))
    # split long smooth pieces so that 24 nodes stay accurate on each
    pieces = [np.linspace(lo, hi, max(1, math.ceil((hi - lo) / _GL_MAX_WIDTH)) + 1) for lo, hi in zip(knots[:-1], knots[1:])]
    knots = np.unique(np.concatenate(pieces)) if pieces else knots
    for lo, hi in zip(knots[:-1], knots[1:]):
        # t - u in [lo, hi]  <=>  u in [t - hi, t - lo]
        a = np.clip(t - hi, 0.0, u_max)
        b = np.clip(t - lo, 0.0, u_max)
        ok = b > a
        if not np.any(ok):
            continue
        half = 0.5 * (b[ok] - a[ok])
        u = a[ok, None] + half[:, None] * (_GL_NODES[None, :] + 1.0)
        fu = f((t[ok, None] - u).ravel()).reshape(u.shape) * np.exp(-u) * _GL_WEIGHTS[None, :] * half[:, None]
        up = np.ones_like(u)
        for p in range(max_power + 1):
            out[p, ok] += np.sum(up * fu, axis=1)
            up = up * u
    return out


def convolve_phi_k(
    f: Callable[[np.ndarray], np.ndarray],
    k: int,
    t: np.ndarray,
    gamma: float = 0.25,
    u_max: float | None = None,
    check_decay: bool = True,
    knots: Sequence[float] | None = None,
) -> Convolved:
    """(phi_{k+1} * f)^(m)(t) = sum_l c_l int_0^inf u^(k+1-l) e^(-u) f(t - u) du, m <= k.

    With ``knots`` (every point where f is not smooth, f vanishing outside
    their hull) the moments use Gauss-Legendre on each smooth piece."""
    t = np.asarray(t, dtype=float)
    if check_decay:
        probe = np.array([-60.0, -40.0, 40.0, 60.0])
        inner = np.linspace(-20, 20, 81)
        outer = np.max(np.abs(f(probe)) * np.exp(gamma * np.abs(probe)))
        ref = np.max(np.abs(f(inner)) * np.exp(gamma * np.abs(inner)))
        if outer > 10 * max(ref, 1e-300) and outer > 1e-12:
            raise GridError("function does not decay like exp(-gamma |t|)")
    u_max = u_max if u_max is not None else k + 1 + 50.0
    powers = range(0, k + 2)
    if knots is not None:
        moments = _piecewise_moments(f, np.asarray(knots, float), t, k + 1, u_max)
    else:

        def integrand(u):
            fu = f(t - u) * math.exp(-u)
            return np.stack([u**p * fu for p in powers])

        moments, _ = integrate.quad_vec(integrand, 0.0, u_max, epsabs=1e-13, epsrel=1e-11, limit=400)
    vals = np.zeros((k + 1, len(t)))
    for m in range(k + 1):
        for c, p in phi_derivative_coefficients(k, m):
            vals[m] += c * moments[p]
    return Convolved(t, vals, k, gamma)


def gamma_zero_norm(f: Callable[[np.ndarray], np.ndarray], t: np.ndarray, gamma: float) -> float:
    return float(np.max(np.abs(f(t)) * np.exp(gamma * np.abs(t))))


def random_piecewise(rng: np.random.Generator, support: float = 6.0, max_knots: int = 8):
    """Random continuous piecewise linear f with compact support in
    [-support, support], and its modulus of continuity min(Lip d, 2 |f|_inf).
    The knots are attached as ``f.knots``."""
    n = int(rng.integers(2, max_knots + 1))
    knots = np.concatenate([[-support], np.sort(rng.uniform(-support, support, n)), [support]])
    vals = np.concatenate([[0.0], rng.standard_normal(n), [0.0]])
    slopes = np.abs(np.diff(vals) / np.maximum(np.diff(knots), 1e-12))
    lip, sup = float(slopes.max()), float(np.abs(vals).max())

    def f(t):
        return np.interp(np.asarray(t, float), knots, vals, left=0.0, right=0.0)

    def omega_f(delta):
        return np.minimum(lip * np.asarray(delta, float), 2 * sup)

    f.knots = knots
    return f, omega_f


# ---------------------------------------------------------------------------
# Frennemo-type tauberian bound


def tauberian_terms(
    t_grid: np.ndarray,
    f_samples: np.ndarray,
    conv_samples: np.ndarray,
    omega_f: Callable[[np.ndarray], np.ndarray],
    k: int,
    V_grid: Sequence[float],
) -> np.ndarray:
    """inf over V of omega_f(1/V) + |f|_inf / V + (1+V)^k sup_s e^(-|t-s|) |phi_k * f(s)|,
    evaluated at every point of t_grid (constant C = 1)."""
    t = np.asarray(t_grid, float)
    sup_f = float(np.max(np.abs(f_samples)))
    c = np.abs(np.asarray(conv_samples, float))
    sup_term = np.max(np.exp(-np.abs(t[:, None] - t[None, :])) * c[None, :], axis=1)
    V = np.asarray(V_grid, float)
    cand = omega_f(1.0 / V)[:, None] + sup_f / V[:, None] + (1 + V[:, None]) ** k * sup_term[None, :]
    return np.min(cand, axis=0)


def tauberian_bound(
    t_grid: np.ndarray,
    f_samples: np.ndarray,
    conv_samples: np.ndarray,
    omega_f: Callable[[np.ndarray], np.ndarray],
    k: int,
    V_grid: Sequence[float],
    C: float,
) -> np.ndarray:
    return C * tauberian_terms(t_grid, f_samples, conv_samples, omega_f, k, V_grid)


def phi_k_convolution_samples(f: Callable, k: int, t: np.ndarray) -> np.ndarray:
    """phi_k * f on t (note phi_k, not phi_{k+1})."""
    if k < 1:
        raise ValueError("k >= 1")
    return convolve_phi_k(f, k - 1, t, check_decay=False, knots=getattr(f, "knots", None)).values[0]


def calibrate_tauberian_constant(
    functions: Sequence[tuple[Callable, Callable]], k: int, t: np.ndarray, V_grid: Sequence[float]
) -> float:
    """Smallest C with |f| <= C * terms on a training set of (f, omega_f)."""
    best = 0.0
    for f, om in functions:
        fs = f(t)
        conv = phi_k_convolution_samples(f, k, t)
        terms = tauberian_terms(t, fs, conv, om, k, V_grid)
        ok = terms > 0
        if np.any(ok):
            best = max(best, float(np.max(np.abs(fs[ok]) / terms[ok])))
    return best


# ---------------------------------------------------------------------------
# rate fits


@dataclass(frozen=True)
class RateFit:
    alpha_hat: float
    C_hat: float
    r_squared: float
    radii: np.ndarray
    residuals: np.ndarray
    mc_errors: np.ndarray
    n_terms: np.ndarray
    monotone: bool
    fit_residuals: np.ndarray


def fit_rate(radii: np.ndarray, residuals: np.ndarray) -> tuple[float, float, float, np.ndarray]:
    """Least squares of ln R = ln C - alpha ln(1 + |ln s|)."""
    X = np.log1p(np.abs(np.log(radii)))
    Y = np.log(residuals)
    slope, icpt = np.polyfit(X, Y, 1)
    pred = slope * X + icpt
    ss_res = float(np.sum((Y - pred) ** 2))
    ss_tot = float(np.sum((Y - Y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(-slope), float(math.exp(icpt)), r2, Y - pred


def smoothed_monotone(radii: np.ndarray, residuals: np.ndarray, errors: np.ndarray, window: int = 3) -> bool:
    """Residuals ordered by decreasing radius, averaged over ``window``
    neighbours, never increase by more than twice the averaged MC error."""
    order = np.argsort(-np.asarray(radii))
    r, e = np.asarray(residuals)[order], np.asarray(errors)[order]
    if len(r) >= window:
        k = np.ones(window) / window
        r, e = np.convolve(r, k, "valid"), np.convolve(e, k, "valid")
    return bool(np.all(r[1:] <= r[:-1] + 2 * (e[1:] + e[:-1])))


def rate_fit(
    rho: GeneratorMeasure,
    f_rd: Callable[[np.ndarray], np.ndarray],
    x_direction,
    radii: Sequence[float],
    spectral: SpectralData,
    grid: StateGrid,
    gamma: float = 0.25,
    sigma_rho: float | None = None,
    seed: int = 0,
    n_walks: int = 2**15,
    tolerance: float = 1e-5,
    workers: int = 1,
    omega_norm: float | None = None,
    t_support: tuple[float, float] | None = None,
    noise_factor: float = 3.0,
    pi0_tolerance: float = 1e-6,
) -> RateFit:
    """Residuals R(s) = |G f(s x) - Pi_0 f(s x) / sigma| for a function f on
    R^d with f(0) = 0, and the fit ln R vs ln(1 + |ln s|).

    ``sigma_rho`` defaults to the shared Lyapunov estimate."""
    est = shared_lyapunov(rho, seed)
    check_transient(est)
    sig = est.lambda_rho if sigma_rho is None else sigma_rho
    x = np.asarray(x_direction, float)
    x = x / np.linalg.norm(x)
    zero = float(np.asarray(f_rd(np.zeros((1, rho.dim))))[0])
    if zero != 0.0:
        log.warning("f(0) = %r; subtracting it", zero)
    base = f_rd

    def F(y, a, t):
        return np.asarray(base(np.exp(np.asarray(t))[:, None] * y)) - zero

    fo = OmegaFunction(F, gamma, omega_norm, np.zeros(rho.size_A), np.zeros(rho.size_A), rho.size_A, rho.dim, t_support)
    if fo.omega_norm is None:
        fo = OmegaFunction(F, gamma, estimate_omega_norm(fo), fo.p_minus, fo.p_plus, rho.size_A, rho.dim, t_support)
    rs = np.asarray(radii, float)
    ts = np.log(rs)
    ests = green_mc_multi(rho, fo, x, 0, ts, seed, tolerance, n_walks, workers, est)
    res, errs = [], []
    for e, t in zip(ests, ts):
        res.append(abs(e.value - pi0_apply(spectral, grid, fo, x, 0, float(t), pi0_tolerance) / sig))
        errs.append(e.mc_std_error + e.truncation_bound)
    res = np.asarray(res)
    errs = np.asarray(errs)
    if np.all(res == 0):
        return RateFit(math.nan, 0.0, 1.0, rs, res, errs, np.array([e.n_terms for e in ests]), True, np.zeros(len(rs)))
    if np.any(res <= noise_factor * errs):
        bad = rs[res <= noise_factor * errs]
        raise ToleranceError(f"MC error exceeds the residual scale at radii {bad.tolist()}")
    alpha, C, r2, fr = fit_rate(rs, res)
    monotone = smoothed_monotone(rs, res, errs)
    return RateFit(alpha, C, r2, rs, res, errs, np.array([e.n_terms for e in ests]), monotone, fr)


# ---------------------------------------------------------------------------
# boundary renewal


def chain_poisson(Q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """sum_n Q^n p for zero-sum p and a doubly stochastic irreducible aperiodic Q."""
    n = len(p)
    return np.linalg.solve(np.eye(n) - Q + np.ones((n, n)) / n, p)


def boundary_renewal(
    U: UOperator,
    p: Sequence[float],
    x,
    a: int,
    t: float,
    xi_cutoff: float = 10.0,
    step: float = 0.02,
) -> float:
    """(G - Pi_0/sigma) f(x, a, t) for f = p(a) psi(t), through
    N_1 f(x, t) - (1/2 pi) int exp(i xi t) V(-i xi) p exp(-xi^2/2) d xi with
    N_1 = U(0) and U(z) = N_1 + z V(z)."""
    p = np.asarray(p, dtype=float)
    if abs(p.sum()) > 1e-12 * max(1.0, np.abs(p).sum()):
        raise PreconditionError("p must sum to zero over A")
    grid = U.family.grid
    if grid.size_A < 2:
        raise PreconditionError("boundary renewal needs a nontrivial A")
    pg = p[grid.a_index].astype(complex)
    x = np.asarray(x, float)
    x = x / np.linalg.norm(x)
    n1 = U.at_zero(pg)
    n1x = float(grid.interpolate(n1, x[None, :], a)[0].real)
    h = min(step, math.pi / (8 * max(1.0, abs(t))))
    K = int(math.ceil(xi_cutoff / h))
    h = xi_cutoff / K
    xi = h * np.arange(K + 1)
    vals = np.empty(K + 1, dtype=complex)
    for k, s in enumerate(xi):
        if s == 0:
            v = U.derivative_at_zero(pg)
        else:
            z = -1j * s
            v = (U.apply(z, pg) - n1) / z
        vals[k] = np.exp(1j * s * t) * grid.interpolate(v, x[None, :], a)[0] * math.exp(-s * s / 2)
    integral = h * (vals[0] / 2 + vals[1:-1].sum() + vals[-1] / 2)
    return n1x * float(psi(t)) - float(integral.real) / math.pi
