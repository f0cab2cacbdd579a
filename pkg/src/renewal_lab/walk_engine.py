"""Seeded Monte Carlo over products of iid matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product as iproduct
from typing import Sequence

import numpy as np

from . import mc
from .errors import EigenError, PreconditionError, ResolutionError
from .matrix_core import (
    GroupElement,
    ProjectivePoint,
    canonical_sign,
    cartan_decompose,
    dual_pairing,
    proj_distance_vec,
    rotation,
)
from .proximality import certify_proximal

EPSILON_GRID = tuple(2.0**-k for k in range(2, 16))


# ---------------------------------------------------------------------------
# measures


@dataclass(frozen=True)
class GeneratorMeasure:
    """A finitely supported probability measure on SL_d(R), with an optional
    action on A = {0, ..., |A|-1} given by one permutation per atom."""

    atoms: tuple[GroupElement, ...]
    weights: tuple[float, ...]
    perms: tuple[tuple[int, ...], ...] | None = None
    name: str = ""
    claims: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.atoms or len(self.atoms) != len(self.weights):
            raise PreconditionError("need one positive weight per atom")
        w = np.asarray(self.weights, dtype=float)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise PreconditionError(f"weights must be positive and sum to 1 (sum={w.sum()!r})")
        dims = {g.dim for g in self.atoms}
        if len(dims) != 1:
            raise PreconditionError("atoms of different dimensions")
        if self.perms is not None:
            if len(self.perms) != len(self.atoms):
                raise PreconditionError("one permutation per atom is required")
            n = len(self.perms[0])
            for p in self.perms:
                if len(p) != n or sorted(p) != list(range(n)):
                    raise PreconditionError(f"{p!r} is not a permutation of A")
            if n > 1:
                check_chain_on_A(self.transition_on_A)

    @property
    def dim(self) -> int:
        return self.atoms[0].dim

    @property
    def size_A(self) -> int:
        return 1 if self.perms is None else len(self.perms[0])

    @cached_property
    def matrices(self) -> np.ndarray:
        return np.stack([g.entries for g in self.atoms])

    @cached_property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @cached_property
    def perm_array(self) -> np.ndarray:
        if self.perms is None:
            return np.zeros((len(self.atoms), 1), dtype=int)
        return np.asarray(self.perms, dtype=int)

    @cached_property
    def transition_on_A(self) -> np.ndarray:
        n = self.size_A
        q = np.zeros((n, n))
        for w, p in zip(self.weights, self.perm_array):
            q[np.arange(n), p] += w
        return q


def check_chain_on_A(q: np.ndarray) -> None:
    """Irreducible (reachability) and aperiodic (primitive) or raise."""
    n = q.shape[0]
    adj = (q > 0).astype(int)
    reach = np.eye(n, dtype=int)
    for _ in range(n):
        reach = ((reach + reach @ adj) > 0).astype(int)
    if not reach.all():
        raise PreconditionError("chain on A is not irreducible")
    # primitive iff adj^k > 0 for k = (n-1)^2 + 1 (Wielandt)
    k = (n - 1) ** 2 + 1
    m = np.eye(n, dtype=int)
    for _ in range(k):
        m = ((m @ adj) > 0).astype(int)
    if not m.all():
        raise PreconditionError("chain on A is periodic")


def measure(mats: Sequence, weights: Sequence[float] | None = None, perms=None, name: str = "") -> GeneratorMeasure:
    atoms = tuple(m if isinstance(m, GroupElement) else GroupElement(m) for m in mats)
    if weights is None:
        weights = [1.0 / len(atoms)] * len(atoms)
    perms_t = None if perms is None else tuple(tuple(int(i) for i in p) for p in perms)
    return GeneratorMeasure(atoms, tuple(float(w) for w in weights), perms_t, name)


CONE_A = np.array([[2.0, 1.0], [1.0, 1.0]])
CONE_B = np.array([[1.0, 1.0], [1.0, 2.0]])


def named_measure(name: str) -> GeneratorMeasure:
    """Built-in measures used by the acceptance suite."""
    if name == "cone2":
        return measure([CONE_A, CONE_B], [0.5, 0.5], name=name)
    if name == "hyperbolic-rotate":
        # -B swaps the positive cone with its opposite, so no cone survives
        return measure([CONE_A, -CONE_B], [0.5, 0.5], name=name)
    if name == "diag-lattice":
        return measure([np.diag([2.0, 0.5])], [1.0], name=name)
    if name == "rotation":
        return measure([rotation(1.0)], [1.0], name=name)
    raise KeyError(f"unknown measure {name!r}")


BUILTIN_MEASURES = ("cone2", "hyperbolic-rotate", "diag-lattice", "rotation")


def lazy_measure(rho: GeneratorMeasure) -> GeneratorMeasure:
    d = rho.dim
    eye = GroupElement.identity(d)
    ident_perm = tuple(range(rho.size_A))
    atoms = [eye]
    weights = [0.5]
    perms = [ident_perm]
    for g, w, p in zip(rho.atoms, rho.weights, rho.perm_array):
        if np.array_equal(g.entries, eye.entries) and tuple(p) == ident_perm:
            weights[0] += 0.5 * w
            continue
        atoms.append(g)
        weights.append(0.5 * w)
        perms.append(tuple(int(i) for i in p))
    return GeneratorMeasure(
        tuple(atoms),
        tuple(weights),
        None if rho.perms is None else tuple(perms),
        f"lazy({rho.name})" if rho.name else "lazy",
        rho.claims,
    )


def support_words(rho: GeneratorMeasure, n: int, decimals: int = 9) -> set:
    """Distinct products of length n (rounded keys)."""
    out = set()
    for word in iproduct(range(len(rho.atoms)), repeat=n):
        m = np.eye(rho.dim)
        for i in word:
            m = rho.matrices[i] @ m
        out.add(tuple(np.round(m, decimals).ravel().tolist()))
    return out


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class WalkSample:
    product: GroupElement
    log_norm: float
    proj_point: ProjectivePoint
    a_point: int
    length: int


def _sample_indices(rng: np.random.Generator, rho: GeneratorMeasure, shape) -> np.ndarray:
    k = len(rho.atoms)
    if k == 1:
        return np.zeros(shape, dtype=int)
    return rng.choice(k, size=shape, p=rho.weight_array)


def _products_block(rng, rho: GeneratorMeasure, n: int, size: int, a0: int = 0):
    idx = _sample_indices(rng, rho, (n, size))
    d = rho.dim
    prods = np.broadcast_to(np.eye(d), (size, d, d)).copy()
    a = np.full(size, a0, dtype=int)
    mats = rho.matrices
    perms = rho.perm_array
    for step in range(n):
        prods = mats[idx[step]] @ prods
        a = perms[idx[step], a]
    return prods, a, idx


def sample_products(
    rho: GeneratorMeasure,
    n: int,
    count: int,
    seed: int,
    x0=None,
    a0: int = 0,
    workers: int = 1,
) -> list[WalkSample]:
    if n < 1 or count < 1:
        raise PreconditionError("n and count must be positive")
    x0 = np.eye(rho.dim)[0] if x0 is None else np.asarray(x0, dtype=float)

    def block(rng, b, size):
        prods, a, _ = _products_block(rng, rho, n, size, a0)
        return prods, a

    parts = mc.run_blocks(block, count, seed, "sample_products", workers)
    out = []
    for prods, a in parts:
        for m, ai in zip(prods, a):
            g = GroupElement(m)
            out.append(WalkSample(g, math.log(g.norm), ProjectivePoint(m @ x0), int(ai), n))
    return out


def walk_indices(rho: GeneratorMeasure, n: int, count: int, seed: int, tag: str, workers: int = 1) -> np.ndarray:
    """Atom indices, shape (count, n), drawn blockwise."""
    parts = mc.run_blocks(lambda rng, b, s: _sample_indices(rng, rho, (s, n)), count, seed, tag, workers)
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# Lyapunov exponent


@dataclass(frozen=True)
class LyapunovEstimate:
    lambda_rho: float
    std_error: float
    n_steps: int
    n_walks: int
    birkhoff_lambda: float = math.nan
    birkhoff_std_error: float = math.nan

    @property
    def combined_std_error(self) -> float:
        return math.hypot(self.std_error, self.birkhoff_std_error)


def _norm_growth_block(rng, rho: GeneratorMeasure, n: int, size: int, x0, burn_in: int) -> np.ndarray:
    mats = rho.matrices
    if x0 is None:
        # start from (approximately) the stationary measure: then every step
        # has E sigma = lambda exactly and the estimator has no start bias
        x = mc_unit_vectors(rng, size, rho.dim)
        for _ in range(burn_in):
            idx = _sample_indices(rng, rho, size)
            x = np.einsum("kij,kj->ki", mats[idx], x)
            x /= np.linalg.norm(x, axis=1)[:, None]
    else:
        x = np.broadcast_to(x0, (size, rho.dim)).copy()
    acc = np.zeros(size)
    for step in range(n):
        idx = _sample_indices(rng, rho, size)
        x = np.einsum("kij,kj->ki", mats[idx], x)
        nx = np.linalg.norm(x, axis=1)
        acc += np.log(nx)
        x /= nx[:, None]
    return acc / n


def _expected_sigma(rho: GeneratorMeasure, x: np.ndarray) -> np.ndarray:
    """s(x) = sum_a w_a ln|a x| for unit rows x."""
    out = np.zeros(x.shape[0])
    for m, w in zip(rho.matrices, rho.weight_array):
        out += w * np.log(np.linalg.norm(x @ m.T, axis=1))
    return out


def _birkhoff_block(rng, rho: GeneratorMeasure, steps: int, size: int, burn_in: int) -> np.ndarray:
    x = mc_unit_vectors(rng, size, rho.dim)
    mats = rho.matrices
    acc = np.zeros(size)
    for step in range(burn_in + steps):
        if step >= burn_in:
            acc += _expected_sigma(rho, x)
        idx = _sample_indices(rng, rho, size)
        x = np.einsum("kij,kj->ki", mats[idx], x)
        x /= np.linalg.norm(x, axis=1)[:, None]
    return acc / steps


def mc_unit_vectors(rng, size: int, d: int) -> np.ndarray:
    v = rng.standard_normal((size, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def lyapunov_estimate(
    rho: GeneratorMeasure,
    n: int,
    n_walks: int,
    seed: int,
    workers: int = 1,
    burn_in: int = 100,
    x0=None,
) -> LyapunovEstimate:
    """Two independent estimators of the top Lyapunov exponent.

    The first averages (1/n) ln|g_n ... g_1 x0| over walks, with x0 drawn
    from the chain after ``burn_in`` steps unless given. The second is a
    Birkhoff average of s(X_k) = E ln|g X_k| along independent stationary
    chains (conditional expectation over the next step, which lowers the
    variance); its error comes from the spread of per-chain averages."""
    if x0 is not None:
        x0 = np.asarray(x0, float) / np.linalg.norm(x0)
    per_walk = np.concatenate(
        mc.run_blocks(
            lambda rng, b, s: _norm_growth_block(rng, rho, n, s, x0, burn_in), n_walks, seed, "lyapunov/norm", workers
        )
    )
    chains = np.concatenate(
        mc.run_blocks(
            lambda rng, b, s: _birkhoff_block(rng, rho, n, s, burn_in), n_walks, seed, "lyapunov/birkhoff", workers
        )
    )
    se1 = float(per_walk.std(ddof=1) / math.sqrt(n_walks)) if n_walks > 1 else math.nan
    se2 = float(chains.std(ddof=1) / math.sqrt(n_walks)) if n_walks > 1 else math.nan
    return LyapunovEstimate(float(per_walk.mean()), se1, n, n_walks, float(chains.mean()), se2)


def lyapunov_spectrum(rho: GeneratorMeasure, n: int, n_walks: int, seed: int, workers: int = 1) -> np.ndarray:
    """All Lyapunov exponents by repeated QR along walks."""
    d = rho.dim

    def block(rng, b, size):
        q = np.broadcast_to(np.eye(d), (size, d, d)).copy()
        acc = np.zeros((size, d))
        for _ in range(n):
            idx = _sample_indices(rng, rho, size)
            q, r = np.linalg.qr(rho.matrices[idx] @ q)
            acc += np.log(np.abs(np.diagonal(r, axis1=1, axis2=2)))
        return acc / n

    vals = np.concatenate(mc.run_blocks(block, n_walks, seed, "lyapunov/qr", workers), axis=0)
    return np.sort(vals.mean(axis=0))[::-1]


# ---------------------------------------------------------------------------
# stationary measure


def projective_cells(x: np.ndarray, resolution: float) -> np.ndarray:
    """Cell index of each unit row of x (canonical sign applied)."""
    x = canonical_sign(x)
    d = x.shape[1]
    if d == 2:
        theta = np.mod(np.arctan2(x[:, 1], x[:, 0]), math.pi)
        nb = int(math.ceil(math.pi / resolution))
        return np.minimum((theta / resolution).astype(int), nb - 1)
    if d == 3:
        polar = np.arccos(np.clip(x[:, 2], -1.0, 1.0))
        azim = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * math.pi)
        n_az = int(math.ceil(2 * math.pi / resolution))
        return (polar / resolution).astype(int) * n_az + np.minimum((azim / resolution).astype(int), n_az - 1)
    raise ResolutionError("binning implemented for d = 2, 3 only")


@dataclass(frozen=True)
class EmpiricalMeasure:
    bins: dict
    resolution: float
    sample_count: int
    dim: int
    points: np.ndarray = field(repr=False, compare=False)
    a_points: np.ndarray = field(repr=False, compare=False)

    def ball_mass(self, center: np.ndarray, radius: float) -> float:
        dist = proj_distance_vec(self.points, np.asarray(center, float)[None, :])
        return float(np.mean(dist <= radius))

    def coarse(self, n_bins: int) -> np.ndarray:
        """Masses on n_bins equal angular cells (d = 2) times A."""
        return coarse_histogram(self.points, self.a_points, n_bins, max(int(self.a_points.max(initial=0)) + 1, 1))


def coarse_histogram(points: np.ndarray, a_points: np.ndarray, n_bins: int, size_A: int, weights=None) -> np.ndarray:
    cells = projective_cells(points, math.pi / n_bins)
    flat = cells * size_A + a_points
    h = np.bincount(flat, weights=weights, minlength=n_bins * size_A).astype(float)
    return h / h.sum()


def _chain_block(rng, rho: GeneratorMeasure, burn_in: int, steps: int, chains: int, start):
    d = rho.dim
    if start is None:
        x = mc_unit_vectors(rng, chains, d)
    else:
        x = np.broadcast_to(np.asarray(start, float) / np.linalg.norm(start), (chains, d)).copy()
    a = rng.integers(0, rho.size_A, size=chains) if rho.size_A > 1 else np.zeros(chains, dtype=int)
    pts = np.empty((steps, chains, d))
    aps = np.empty((steps, chains), dtype=int)
    for step in range(burn_in + steps):
        if step >= burn_in:
            pts[step - burn_in] = x
            aps[step - burn_in] = a
        idx = _sample_indices(rng, rho, chains)
        x = np.einsum("kij,kj->ki", rho.matrices[idx], x)
        x /= np.linalg.norm(x, axis=1)[:, None]
        a = rho.perm_array[idx, a]
    return pts.reshape(-1, d), aps.reshape(-1)


CHAINS_PER_BLOCK = 64
STEPS_PER_CHAIN = 64


def stationary_measure_estimate(
    rho: GeneratorMeasure,
    burn_in: int = 1000,
    samples: int = 2**16,
    resolution: float = 2.0**-10,
    seed: int = 0,
    start=None,
    workers: int = 1,
) -> EmpiricalMeasure:
    """Occupation measure of parallel projective chains after burn-in.

    Each block runs 64 chains for 64 recorded steps."""
    per_block = CHAINS_PER_BLOCK * STEPS_PER_CHAIN
    n_blocks = max(1, math.ceil(samples / per_block))
    parts = mc.run_blocks(
        lambda rng, b, s: _chain_block(rng, rho, burn_in, STEPS_PER_CHAIN, CHAINS_PER_BLOCK, start),
        n_blocks,
        seed,
        "stationary",
        workers,
        block=1,
    )
    pts = np.concatenate([p for p, _ in parts])[:samples]
    aps = np.concatenate([a for _, a in parts])[:samples]
    pts = canonical_sign(pts)
    cells = projective_cells(pts, resolution)
    keys, counts = np.unique(np.stack([cells, aps], axis=1), axis=0, return_counts=True)
    total = counts.sum()
    bins = {(int(k[0]), int(k[1])): c / total for k, c in zip(keys, counts)}
    pts.setflags(write=False)
    return EmpiricalMeasure(bins, resolution, int(pts.shape[0]), rho.dim, pts, aps)


def pushforward_tv(rho: GeneratorMeasure, nu: EmpiricalMeasure, n_bins: int = 16) -> float:
    """Total variation between nu and rho * nu on coarse cells."""
    h0 = nu.coarse(n_bins)
    size_A = rho.size_A
    hs = np.zeros_like(h0)
    for m, w, p in zip(rho.matrices, rho.weight_array, rho.perm_array):
        y = nu.points @ m.T
        y /= np.linalg.norm(y, axis=1)[:, None]
        hs += w * coarse_histogram(y, p[nu.a_points], n_bins, size_A)
    h0 = coarse_histogram(nu.points, nu.a_points, n_bins, size_A)
    return 0.5 * float(np.abs(hs - h0).sum())


# ---------------------------------------------------------------------------
# proximality of samples


def auto_certify(g: GroupElement):
    """Certificate at the largest epsilon of the 2^-k grid that meets the
    preconditions, or None."""
    c = cartan_decompose(g)
    if c.degenerate:
        return None
    for eps in EPSILON_GRID:
        if c.kappa_gap <= eps**3:
            if dual_pairing(c.x_M, c.y_m) >= 2 * eps:
                try:
                    return certify_proximal(g, eps)
                except (PreconditionError, EigenError):
                    return None
    return None


def _products_of_words(rho: GeneratorMeasure, idx: np.ndarray) -> np.ndarray:
    count, n = idx.shape
    d = rho.dim
    prods = np.broadcast_to(np.eye(d), (count, d, d)).copy()
    for step in range(n):
        prods = rho.matrices[idx[:, step]] @ prods
    return prods


# ---------------------------------------------------------------------------
# probes


@dataclass(frozen=True)
class RegularityResult:
    pass_fraction: float
    Delta_estimate: float
    proximal_count: int
    count: int
    radius: float


def regularity_probe(
    rho: GeneratorMeasure,
    nu: EmpiricalMeasure,
    n: int,
    M: float,
    count: int,
    seed: int,
    Delta: float | None = None,
    t: float = 0.1,
    workers: int = 1,
) -> RegularityResult:
    """Fraction of certified-proximal length-n products whose attracting
    line carries nu-mass at least exp(-Delta M n) in its exp(-M n) ball."""
    radius = math.exp(-M * n)
    if nu.resolution > radius:
        raise ResolutionError(f"measure resolution {nu.resolution} cannot resolve radius {radius}")
    idx = walk_indices(rho, n, count, seed, "regularity", workers)
    prods = _products_of_words(rho, idx)
    needed = []
    for m in prods:
        cert = auto_certify(GroupElement(m))
        if cert is None:
            continue
        mass = nu.ball_mass(cert.v_plus.rep, radius)
        needed.append(math.inf if mass <= 0 else max(0.0, -math.log(mass) / (M * n)))
    needed_arr = np.sort(np.asarray(needed))
    k = needed_arr.size
    if k == 0:
        return RegularityResult(0.0, math.inf, 0, count, radius)
    level = 1.0 - math.exp(-t * n)
    j = min(k - 1, max(0, math.ceil(level * k) - 1))
    delta_hat = float(needed_arr[j])
    use = delta_hat if Delta is None else Delta
    frac = float(np.mean(needed_arr <= use + 1e-15))
    return RegularityResult(frac, delta_hat, k, count, radius)


@dataclass(frozen=True)
class GenericityStats:
    frequencies: dict
    std_errors: dict
    n: int
    count: int


GENERICITY_EVENTS = (
    "singular_values",
    "delta_x_ym",
    "d_gx_xM",
    "delta_xM_y",
    "delta_gx_y",
    "delta_xM_ym",
)


def genericity_stats(
    rho: GeneratorMeasure,
    n: int,
    epsilon: float,
    count: int,
    seed: int,
    x=None,
    y=None,
    lyapunov=None,
    workers: int = 1,
) -> GenericityStats:
    """Empirical frequencies of the six generic events for length-n products.

    ``lyapunov`` is the Lyapunov spectrum; estimated by QR when omitted."""
    d = rho.dim
    rng = mc.block_rng(seed, "genericity/xy", 0)
    x = mc_unit_vectors(rng, 1, d)[0] if x is None else np.asarray(x, float) / np.linalg.norm(x)
    y = mc_unit_vectors(rng, 1, d)[0] if y is None else np.asarray(y, float) / np.linalg.norm(y)
    lam = lyapunov_spectrum(rho, 200, 256, seed) if lyapunov is None else np.asarray(lyapunov, float)
    idx = walk_indices(rho, n, count, seed, "genericity", workers)
    prods = _products_of_words(rho, idx)
    u, s, vt = np.linalg.svd(prods)
    logk = np.log(s)
    logk[:, -1] = -logk[:, :-1].sum(axis=1)
    xM = u[:, :, 0]
    ym = vt[:, 0, :]
    gx = np.einsum("kij,j->ki", prods, x)
    gx /= np.linalg.norm(gx, axis=1)[:, None]
    thr = 2.0 * math.exp(-epsilon * n)
    ev = {
        "singular_values": np.all(np.abs(logk / n - lam[None, :]) <= epsilon, axis=1),
        "delta_x_ym": np.abs(ym @ x) >= thr,
        "d_gx_xM": proj_distance_vec(gx, xM) <= math.exp(-(lam[0] - lam[1] - epsilon) * n),
        "delta_xM_y": np.abs(xM @ y) >= thr,
        "delta_gx_y": np.abs(gx @ y) >= thr,
        "delta_xM_ym": np.abs(np.einsum("ki,ki->k", xM, ym)) >= thr,
    }
    freq = {k: float(v.mean()) for k, v in ev.items()}
    se = {k: math.sqrt(max(p * (1 - p), 0.0) / count) for k, p in freq.items()}
    return GenericityStats(freq, se, n, count)


@dataclass(frozen=True)
class DiophantineScan:
    b_values: np.ndarray
    D: np.ndarray
    n_values: np.ndarray
    proximal_fraction: np.ndarray
    alpha_hat: float
    min_scaled: float


def diophantine_scan(
    rho: GeneratorMeasure,
    beta: float,
    p: int,
    b_values: Sequence[float],
    count: int,
    seed: int,
    alpha: float = 4.0,
    workers: int = 1,
) -> DiophantineScan:
    """D(b) = E |exp(i b lambda1(g)) - 1|^2 over g ~ rho^(p n(beta, b)),
    non-proximal samples contributing 0."""
    b_arr = np.asarray(b_values, dtype=float)
    if np.any(np.abs(b_arr) < 2):
        raise PreconditionError("|b| must be at least 2")
    n_arr = np.floor(beta * np.log(np.abs(b_arr))).astype(int)
    if np.any(n_arr < 1):
        raise PreconditionError(f"n(beta, b) = 0 for b = {b_arr[n_arr < 1].tolist()}")
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    D = np.empty(b_arr.size)
    frac = np.empty(b_arr.size)
    for i, (b, n) in enumerate(zip(b_arr, n_arr)):
        length = int(p * n)
        if length not in cache:
            idx = walk_indices(rho, length, count, seed, f"diophantine/{length}", workers)
            lam = np.full(count, np.nan)
            for j, m in enumerate(_products_of_words(rho, idx)):
                cert = auto_certify(GroupElement(m))
                if cert is not None:
                    lam[j] = cert.lambda1
            cache[length] = lam
        lam = cache[length]
        ok = np.isfinite(lam)
        vals = np.zeros(count)
        vals[ok] = np.abs(np.exp(1j * b * lam[ok]) - 1.0) ** 2
        D[i] = vals.mean()
        frac[i] = ok.mean()
    pos = D > 0
    if pos.sum() >= 2:
        slope = np.polyfit(np.log(np.abs(b_arr[pos])), np.log(D[pos]), 1)[0]
        alpha_hat = float(max(0.0, -slope))
    else:
        alpha_hat = math.nan
    min_scaled = float(np.min(np.abs(b_arr) ** alpha * D))
    return DiophantineScan(b_arr, D, n_arr, frac, alpha_hat, min_scaled)


@dataclass(frozen=True)
class ConvolutionRegularity:
    t3_estimate: float
    pass_fraction: float
    exact: bool
    count: int


def word_distribution(rho: GeneratorMeasure, n: int) -> tuple[np.ndarray, np.ndarray]:
    """All products of length n with their probabilities."""
    k = len(rho.atoms)
    words = np.array(list(iproduct(range(k), repeat=n)), dtype=int).reshape(-1, n)
    probs = np.prod(rho.weight_array[words], axis=1)
    return _products_of_words(rho, words), probs


def _ball_masses(centers: np.ndarray, support: np.ndarray, probs: np.ndarray, r: float) -> np.ndarray:
    out = np.empty(len(centers))
    for i, c in enumerate(centers):
        dist = np.linalg.norm(support - c[None], ord=2, axis=(1, 2))
        out[i] = probs[dist <= r].sum()
    return out


def convolution_regularity_probe(
    rho: GeneratorMeasure,
    n: int,
    t2: float,
    count: int,
    seed: int,
    t1: float = 0.1,
    t3: float | None = None,
    max_words: int = 2**14,
    workers: int = 1,
) -> ConvolutionRegularity:
    """Mass of rho^(*n) in operator-norm balls of radius exp(-t2 n) around
    sampled g ~ rho^(*n). Ball masses are exact (word enumeration) when
    |atoms|^n <= max_words, otherwise estimated from an independent sample."""
    r = math.exp(-t2 * n)
    k = len(rho.atoms)
    idx = walk_indices(rho, n, count, seed, "convolution/centers", workers)
    centers = _products_of_words(rho, idx)
    exact = k**n <= max_words
    if exact:
        support, probs = word_distribution(rho, n)
    else:
        ref = walk_indices(rho, n, count, seed, "convolution/reference", workers)
        support = _products_of_words(rho, ref)
        probs = np.full(count, 1.0 / count)
    mass = _ball_masses(centers, support, probs, r)
    need = np.where(mass > 0, -np.log(np.maximum(mass, 1e-300)) / n, np.inf)
    need = np.maximum(need, 0.0)
    level = 1.0 - math.exp(-t1 * n)
    srt = np.sort(need)
    j = min(count - 1, max(0, math.ceil(level * count) - 1))
    t3_hat = float(srt[j])
    use = t3_hat if t3 is None else t3
    frac = float(np.mean(need <= use + 1e-12))
    return ConvolutionRegularity(t3_hat, frac, exact, count)


def exact_pass_probability(rho: GeneratorMeasure, n: int, t2: float, t3: float) -> float:
    """Oracle: rho^(*n)(g : rho^(*n)(B(g, exp(-t2 n))) >= exp(-t3 n))."""
    support, probs = word_distribution(rho, n)
    mass = _ball_masses(support, support, probs, math.exp(-t2 * n))
    return float(probs[mass >= math.exp(-t3 * n) * (1 - 1e-12)].sum())
