"""Discretized transfer operators P(z) on a sphere grid times A.

P(z) f(x, a) = sum_g w_g exp(-z sigma(g, x)) f(g x / |g x|, g a), with f
interpolated piecewise linearly between grid points. The sphere carries
the chordal metric |x - y|.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, cKDTree

from . import mc
from .errors import (
    DegenerateSpectrumError,
    EmptyRegularSetError,
    GridError,
    OutOfDomainError,
    SingularError,
)
from .walk_engine import EmpiricalMeasure, GeneratorMeasure, coarse_histogram

DROP = 1e-14
ETA = 0.2
DEFAULT_GAMMA = 0.25


# ---------------------------------------------------------------------------
# grids


def _icosahedron() -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    p = (1 + math.sqrt(5)) / 2
    v = np.array(
        [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
         [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
         [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]],
        dtype=float,
    )
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def icosphere(level: int) -> np.ndarray:
    v, faces = _icosahedron()
    verts = [tuple(x) for x in v]
    index = {x: i for i, x in enumerate(verts)}

    def mid(i, j):
        m = (np.array(verts[i]) + np.array(verts[j])) / 2
        m = tuple(m / np.linalg.norm(m))
        key = tuple(np.round(m, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(m)
        return index[key]

    for _ in range(level):
        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts)


@dataclass(frozen=True, eq=False)
class StateGrid:
    """Points of S^(d-1) times A. Index of (point j, a) is a * n_sphere + j."""

    sphere: np.ndarray
    size_A: int = 1

    def __post_init__(self):
        pts = np.asarray(self.sphere, dtype=float)
        pts.setflags(write=False)
        object.__setattr__(self, "sphere", pts)
        anti = self.antipode_sphere
        if np.any(anti < 0) or np.any(anti == np.arange(len(pts))):
            raise GridError("grid is not antipodally closed")

    @classmethod
    def circle(cls, n: int, size_A: int = 1) -> "StateGrid":
        if n % 2 or n < 4:
            raise GridError("circle grids need an even number of points >= 4")
        th = 2 * math.pi * np.arange(n) / n
        return cls(np.stack([np.cos(th), np.sin(th)], axis=1), size_A)

    @classmethod
    def sphere2(cls, level: int, size_A: int = 1) -> "StateGrid":
        return cls(icosphere(level), size_A)

    @property
    def dim(self) -> int:
        return self.sphere.shape[1]

    @property
    def n_sphere(self) -> int:
        return self.sphere.shape[0]

    @property
    def size(self) -> int:
        return self.n_sphere * self.size_A

    @cached_property
    def points(self) -> np.ndarray:
        return np.tile(self.sphere, (self.size_A, 1))

    @cached_property
    def a_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.size_A), self.n_sphere)

    @cached_property
    def antipode_sphere(self) -> np.ndarray:
        if self.dim == 2:
            n = self.n_sphere
            return (np.arange(n) + n // 2) % n
        dist, idx = self._tree.query(-self.sphere)
        idx = np.asarray(idx)
        idx[dist > 1e-9] = -1
        return idx

    @cached_property
    def antipode(self) -> np.ndarray:
        """The involution theta on full grid indices."""
        n = self.n_sphere
        return (self.a_index * n + np.tile(self.antipode_sphere, self.size_A)).astype(int)

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.sphere)

    @cached_property
    def _triangles(self):
        hull = ConvexHull(self.sphere)
        tri = hull.simplices
        inv = np.linalg.inv(np.transpose(self.sphere[tri], (0, 2, 1)))
        incident: list[list[int]] = [[] for _ in range(self.n_sphere)]
        for k, t in enumerate(tri):
            for v in t:
                incident[v].append(k)
        width = max(len(x) for x in incident)
        inc = np.full((self.n_sphere, width), -1, dtype=int)
        for v, lst in enumerate(incident):
            inc[v, : len(lst)] = lst
        return tri, inv, inc

    @cached_property
    def cell_radius(self) -> float:
        """Largest chordal distance from a point of the sphere to the grid."""
        if self.dim == 2:
            return 2 * math.sin(math.pi / (2 * self.n_sphere))
        tri, _, _ = self._triangles
        p = self.sphere[tri]
        c = p.sum(axis=1)
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        return float(np.max(np.linalg.norm(p - c[:, None, :], axis=2)))

    @cached_property
    def distances(self) -> np.ndarray:
        """Chordal distance matrix on the sphere part."""
        x = self.sphere
        g = np.clip(x @ x.T, -1.0, 1.0)
        return np.sqrt(np.maximum(2.0 - 2.0 * g, 0.0))

    @cached_property
    def quotient_distances(self) -> np.ndarray:
        """Distance between H-orbits {x, -x}: min(|x - y|, |x + y|)."""
        x = self.sphere
        g = np.abs(np.clip(x @ x.T, -1.0, 1.0))
        return np.sqrt(np.maximum(2.0 - 2.0 * g, 0.0))

    def interpolation(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Columns and weights (each of shape (m, k)) interpolating unit rows y."""
        y = np.asarray(y, dtype=float)
        if self.dim == 2:
            n = self.n_sphere
            u = np.mod(np.arctan2(y[:, 1], y[:, 0]), 2 * math.pi) * n / (2 * math.pi)
            j0 = np.floor(u).astype(int)
            frac = u - j0
            # snap exact hits so that the identity is reproduced exactly
            near = np.abs(frac) < 1e-11
            frac = np.where(near, 0.0, frac)
            up = np.abs(1.0 - frac) < 1e-11
            j0 = np.where(up, j0 + 1, j0)
            frac = np.where(up, 0.0, frac)
            cols = np.stack([j0 % n, (j0 + 1) % n], axis=1)
            w = np.stack([1.0 - frac, frac], axis=1)
            return cols, w
        return self._interp_sphere(y)

    def _interp_sphere(self, y: np.ndarray):
        tri, inv, inc = self._triangles
        _, near = self._tree.query(y)
        cand = inc[near]
        m = y.shape[0]
        best = np.full(m, -1)
        lam_best = np.zeros((m, 3))
        score = np.full(m, -np.inf)
        for c in range(cand.shape[1]):
            k = cand[:, c]
            ok = k >= 0
            lam = np.einsum("mij,mj->mi", inv[np.where(ok, k, 0)], y)
            mn = lam.min(axis=1)
            better = ok & (mn > score)
            best = np.where(better, k, best)
            score = np.where(better, mn, score)
            lam_best = np.where(better[:, None], lam, lam_best)
        bad = score < -1e-9
        for i in np.nonzero(bad)[0]:
            lam = inv @ y[i]
            mn = lam.min(axis=1)
            k = int(np.argmax(mn))
            if mn[k] < -1e-9:
                raise GridError(f"point {y[i]} cannot be interpolated")
            best[i], lam_best[i] = k, lam[k]
        lam_best = np.maximum(lam_best, 0.0)
        lam_best /= lam_best.sum(axis=1, keepdims=True)
        return tri[best], lam_best

    def interpolate(self, values: np.ndarray, y: np.ndarray, a: np.ndarray | int = 0) -> np.ndarray:
        """Evaluate a grid function at unit vectors y in fibers a."""
        cols, w = self.interpolation(np.atleast_2d(y))
        a = np.broadcast_to(np.asarray(a), (cols.shape[0],))
        v = np.asarray(values)
        return np.sum(v[a[:, None] * self.n_sphere + cols] * w, axis=1)

    def function(self, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
        """Sample fn(points, a) on the grid."""
        return np.asarray(fn(self.points, self.a_index))


@dataclass(frozen=True, eq=False)
class GridFunction:
    values: np.ndarray
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        v = np.asarray(self.values)
        if not np.all(np.isfinite(v)):
            raise GridError("grid function has non-finite values")
        object.__setattr__(self, "values", v)


def _vals(f) -> np.ndarray:
    return f.values if isinstance(f, GridFunction) else np.asarray(f)


# ---------------------------------------------------------------------------
# norms


def holder_seminorm(f, grid: StateGrid, gamma: float = DEFAULT_GAMMA, quotient: bool = False) -> float:
    """Largest Hoelder quotient over pairs of grid points in the same A-fiber.

    With ``quotient`` the distance between H-orbits is used, which is the
    relevant seminorm for even functions."""
    v = _vals(f)
    inv2 = _inv_dgamma_sq(grid, gamma, quotient)
    n = grid.n_sphere
    best = 0.0
    for a in range(grid.size_A):
        fv = v[a * n : (a + 1) * n]
        dr = fv.real[:, None] - fv.real[None, :]
        sq = dr * dr
        if np.iscomplexobj(fv):
            di = fv.imag[:, None] - fv.imag[None, :]
            sq += di * di
        sq *= inv2
        best = max(best, float(sq.max()))
    return math.sqrt(best)


_DG_CACHE: dict = {}


def _inv_dgamma_sq(grid: StateGrid, gamma: float, quotient: bool) -> np.ndarray:
    """1 / d(x, y)^(2 gamma), zero on the diagonal (and antipodes for the quotient)."""
    key = (id(grid), gamma, quotient)
    hit = _DG_CACHE.get(key)
    if hit is not None and hit[0] is grid:
        return hit[1]
    d = grid.quotient_distances if quotient else grid.distances
    with np.errstate(divide="ignore"):
        inv = np.where(d > 1e-12, d ** (-2.0 * gamma), 0.0)
    if len(_DG_CACHE) > 8:
        _DG_CACHE.clear()
    _DG_CACHE[key] = (grid, inv)
    return inv


def sup_norm(f) -> float:
    return float(np.max(np.abs(_vals(f))))


def holder_norm(f, grid: StateGrid, gamma: float = DEFAULT_GAMMA) -> float:
    return sup_norm(f) + holder_seminorm(f, grid, gamma)


def t_norm(f, t: float, C2: float, grid: StateGrid, gamma: float = DEFAULT_GAMMA) -> float:
    if abs(t) < 2 or C2 < 1:
        raise OutOfDomainError("the (t)-norm needs |t| >= 2 and C2 >= 1")
    return max(sup_norm(f), holder_seminorm(f, grid, gamma) / (2 * C2 * abs(t)))


# ---------------------------------------------------------------------------
# operators


@dataclass
class _AtomData:
    weight: float
    sigma: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray


class OperatorFamily:
    """z -> P(z) for a fixed measure and grid. Geometry is computed once."""

    def __init__(self, rho: GeneratorMeasure, grid: StateGrid, workers: int = 1):
        if grid.dim != rho.dim:
            raise GridError("grid and measure dimensions differ")
        if grid.size_A != rho.size_A:
            raise GridError("grid and measure disagree on |A|")
        self.rho = rho
        self.grid = grid
        n = grid.n_sphere
        x = grid.sphere
        perm = rho.perm_array
        self.atoms: list[_AtomData] = []

        def one(k):
            m = rho.matrices[k]
            y = x @ m.T
            ny = np.linalg.norm(y, axis=1)
            cols, w = grid.interpolation(y / ny[:, None])
            w = np.where(w < DROP, 0.0, w)
            w /= w.sum(axis=1, keepdims=True)
            rows_all, cols_all, vals_all = [], [], []
            for a in range(grid.size_A):
                rows_all.append(np.repeat(a * n + np.arange(n), cols.shape[1]))
                cols_all.append((perm[k, a] * n + cols).ravel())
                vals_all.append(w.ravel())
            r = np.concatenate(rows_all)
            c = np.concatenate(cols_all)
            v = np.concatenate(vals_all)
            keep = v > 0
            return _AtomData(float(rho.weight_array[k]), np.log(ny), r[keep], c[keep], v[keep])

        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(workers) as pool:
                self.atoms = list(pool.map(one, range(len(rho.atoms))))
        else:
            self.atoms = [one(k) for k in range(len(rho.atoms))]

    @cached_property
    def sigma_grid(self) -> np.ndarray:
        """sigma(g, x) per atom on all grid indices, shape (atoms, size)."""
        return np.stack([np.tile(a.sigma, self.grid.size_A) for a in self.atoms])

    @cached_property
    def expected_sigma(self) -> np.ndarray:
        """s(x) = sum_g w_g sigma(g, x) on the grid."""
        return np.sum([a.weight * np.tile(a.sigma, self.grid.size_A) for a in self.atoms], axis=0)

    def __call__(self, z: complex) -> "DiscretizedOperator":
        return build_operator_from_family(self, z)


@dataclass(eq=False)
class DiscretizedOperator:
    matrix: sp.csr_matrix
    z: complex
    rho: GeneratorMeasure
    grid: StateGrid
    family: OperatorFamily = field(repr=False)

    @cached_property
    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    @cached_property
    def _lu(self):
        n = self.grid.size
        a = np.eye(n, dtype=self.dense.dtype) - self.dense
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return sla.lu_factor(a, check_finite=False)

    def apply(self, f) -> np.ndarray:
        return self.matrix @ _vals(f)

    def power_apply(self, f, n: int) -> np.ndarray:
        v = _vals(f)
        for _ in range(n):
            v = self.matrix @ v
        return v


def build_operator_from_family(fam: OperatorFamily, z: complex, closed: bool = False) -> DiscretizedOperator:
    # the drift check runs on the closed interval [0, eta]
    re = abs(complex(z).real)
    if re > ETA or (re == ETA and not closed):
        raise OutOfDomainError(f"|Re z| = {abs(complex(z).real)} must be below eta = {ETA}")
    z = complex(z)
    size = fam.grid.size
    n = fam.grid.n_sphere
    rows, cols, vals = [], [], []
    real = z == 0
    for a in fam.atoms:
        phase = a.weight * np.exp(-z * np.tile(a.sigma, fam.grid.size_A))
        if real:
            phase = phase.real
        rows.append(a.rows)
        cols.append(a.cols)
        vals.append(a.vals * phase[a.rows])
    m = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    )
    m.sum_duplicates()
    del n
    return DiscretizedOperator(m, z, fam.rho, fam.grid, fam)


def build_operator(rho: GeneratorMeasure, z: complex, grid: StateGrid) -> DiscretizedOperator:
    return OperatorFamily(rho, grid)(z)


# ---------------------------------------------------------------------------
# spectral data at z = 0


@dataclass(eq=False)
class SpectralData:
    leading_eigenvalue: complex
    gap: float
    r: int
    stationary: list[np.ndarray]
    invariant: list[np.ndarray]
    classes: list[np.ndarray]
    sigma: np.ndarray
    quotient_gap: float
    second_eigenvalue: complex

    @cached_property
    def N0(self) -> np.ndarray:
        return sum(np.outer(p, nu) for p, nu in zip(self.invariant, self.stationary))

    def apply_N0(self, f: np.ndarray) -> np.ndarray:
        out = np.zeros(len(self.invariant[0]), dtype=np.result_type(f, float))
        for p, nu in zip(self.invariant, self.stationary):
            out = out + p * (nu @ f)
        return out

    def apply_N0_over_sigma(self, f: np.ndarray, sigma_rho: float | None = None) -> np.ndarray:
        out = np.zeros(len(self.invariant[0]), dtype=np.result_type(f, float))
        for p, nu, s in zip(self.invariant, self.stationary, self.sigma):
            out = out + p * (nu @ f) / (s if sigma_rho is None else sigma_rho)
        return out


def _closed_classes(m: sp.csr_matrix) -> list[np.ndarray]:
    adj = (abs(m) > 0).astype(np.int8)
    ncomp, labels = connected_components(adj, directed=True, connection="strong")
    # a class is closed if no edge leaves it
    coo = adj.tocoo()
    leaving = np.zeros(ncomp, dtype=bool)
    cross = labels[coo.row] != labels[coo.col]
    leaving[np.unique(labels[coo.row[cross]])] = True
    return [np.nonzero(labels == c)[0] for c in range(ncomp) if not leaving[c]]


def _stationary_on(m: sp.csr_matrix, cls: np.ndarray) -> np.ndarray:
    sub = m[cls][:, cls].toarray().real
    k = len(cls)
    if k == 1:
        return np.ones(1)
    a = sub.T - np.eye(k)
    a[-1, :] = 1.0
    b = np.zeros(k)
    b[-1] = 1.0
    nu = np.linalg.solve(a, b)
    nu = np.maximum(nu, 0.0)
    return nu / nu.sum()


def quotient_matrix(P: DiscretizedOperator) -> sp.csr_matrix:
    """P acting on H-invariant (even) functions, on orbit representatives."""
    grid = P.grid
    anti = grid.antipode
    reps = np.nonzero(np.arange(grid.size) < anti)[0]
    pos = np.empty(grid.size, dtype=int)
    pos[reps] = np.arange(len(reps))
    pos[anti[reps]] = np.arange(len(reps))
    m = P.matrix.tocoo()
    keep = np.isin(m.row, reps)
    q = sp.csr_matrix((m.data[keep], (pos[m.row[keep]], pos[m.col[keep]])), shape=(len(reps), len(reps)))
    q.sum_duplicates()
    return q


def _second_modulus(m: sp.csr_matrix, N0: tuple[list, list] | None, dense_limit: int = 1200) -> tuple[float, complex]:
    """Largest eigenvalue modulus of m - N0."""
    n = m.shape[0]
    ps, nus = N0 if N0 is not None else ([], [])
    if n <= dense_limit:
        a = m.toarray().astype(complex)
        for p, nu in zip(ps, nus):
            a -= np.outer(p, nu)
        ev = np.linalg.eigvals(a)
        k = int(np.argmax(np.abs(ev)))
        return float(abs(ev[k])), complex(ev[k])

    def mv(v):
        out = m @ v
        for p, nu in zip(ps, nus):
            out = out - p * (nu @ v)
        return out

    op = spla.LinearOperator((n, n), matvec=mv, dtype=complex)
    v0 = np.ones(n, dtype=complex) / math.sqrt(n) + 1e-3 * np.cos(np.arange(n))
    ev = spla.eigs(op, k=4, which="LM", return_eigenvectors=False, v0=v0, maxiter=20000, tol=1e-10)
    k = int(np.argmax(np.abs(ev)))
    return float(abs(ev[k])), complex(ev[k])


def spectral_data(P: DiscretizedOperator, allow_degenerate: bool = False, max_classes: int = 2) -> SpectralData:
    """Invariant functions p_i, stationary measures nu_i and the gap of P(0).

    ``gap`` is 1 minus the spectral radius of P - N0 on the full grid and
    ``quotient_gap`` the same on even functions. Raises
    DegenerateSpectrumError when more than ``max_classes`` minimal closed
    sets appear or the gap is below 1e-6, unless ``allow_degenerate``."""
    if P.z != 0:
        raise OutOfDomainError("spectral data is computed at z = 0")
    m = P.matrix.tocsr()
    m.data = m.data.real
    m = m.astype(float)
    classes = _closed_classes(m)
    r = len(classes)
    if r > max_classes and not allow_degenerate:
        raise DegenerateSpectrumError(f"{r} minimal closed sets: eigenvalue 1 is not simple on the quotient")
    n = m.shape[0]
    in_closed = np.zeros(n, dtype=bool)
    for c in classes:
        in_closed[c] = True
    trans = np.nonzero(~in_closed)[0]
    stationary, invariant = [], []
    if len(trans):
        a = (sp.identity(len(trans), format="csc") - m[trans][:, trans]).tocsc()
        lu = spla.splu(a)
    for c in classes:
        nu = np.zeros(n)
        nu[c] = _stationary_on(m, c)
        p = np.zeros(n)
        p[c] = 1.0
        if len(trans):
            rhs = np.asarray(m[trans][:, c].sum(axis=1)).ravel()
            p[trans] = lu.solve(rhs)
        stationary.append(nu)
        invariant.append(p)
    s = P.family.expected_sigma
    sig = np.array([nu @ s for nu in stationary])
    if r > 16:
        second, ev2 = 1.0, 1.0 + 0j
        qgap = 0.0
    else:
        second, ev2 = _second_modulus(m, (invariant, stationary))
        q = quotient_matrix(P).astype(float)
        q.data = q.data.real
        # on even functions the invariant part is spanned by the H-orbits of classes
        qgap = 1.0 - _quotient_second(P, q, invariant, stationary)
    gap = 1.0 - second
    if (gap < 1e-6) and not allow_degenerate:
        raise DegenerateSpectrumError(f"spectral gap {gap!r} below 1e-6")
    return SpectralData(1.0 + 0j, gap, r, stationary, invariant, classes, sig, qgap, ev2)


def _quotient_second(P, q, invariant, stationary) -> float:
    grid = P.grid
    anti = grid.antipode
    reps = np.nonzero(np.arange(grid.size) < anti)[0]
    pos = np.empty(grid.size, dtype=int)
    pos[reps] = np.arange(len(reps))
    pos[anti[reps]] = np.arange(len(reps))
    # even parts of the projector: sum over H-orbits
    ps, nus = [], []
    seen = np.zeros(len(invariant), dtype=bool)
    for i, nu in enumerate(stationary):
        if seen[i]:
            continue
        seen[i] = True
        p = invariant[i].copy()
        mu = nu.copy()
        for j in range(len(stationary)):
            if not seen[j] and np.allclose(stationary[j][anti], nu, atol=1e-9):
                seen[j] = True
                p = p + invariant[j]
                break
        pq = p[reps]
        nq = np.bincount(pos, weights=mu, minlength=len(reps))
        if len(stationary) > 1 and not np.allclose(p, p[anti]):
            # class not paired with its antipode: keep unpaired projector
            pass
        ps.append(pq)
        nus.append(nq / nq.sum())
    second, _ = _second_modulus(q, (ps, nus))
    return second


def projective_histogram(grid: StateGrid, nu: np.ndarray, n_bins: int) -> np.ndarray:
    """Push a grid measure to P(R^2) x A and bin it (d = 2)."""
    return coarse_histogram(grid.points, grid.a_index, n_bins, grid.size_A, weights=nu)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# resolvent


def _smallest_singular_value(a: np.ndarray) -> float:
    if a.shape[0] <= 1200:
        return float(sla.svdvals(a)[-1])
    # cheap estimate through a few inverse iterations
    lu = sla.lu_factor(a, check_finite=False)
    v = np.ones(a.shape[0], dtype=a.dtype)
    for _ in range(4):
        w = sla.lu_solve(lu, v)
        w = sla.lu_solve(lu, w, trans=2)
        nv = np.linalg.norm(w)
        if not np.isfinite(nv) or nv == 0:
            return 0.0
        v = w / nv
    return float(1.0 / math.sqrt(nv))


def resolvent_apply(P: DiscretizedOperator, f) -> np.ndarray:
    """g with (I - P) g = f."""
    fv = np.asarray(_vals(f), dtype=complex if np.iscomplexobj(P.dense) or np.iscomplexobj(_vals(f)) else float)
    nf = float(np.max(np.abs(fv))) if fv.size else 0.0
    if nf == 0:
        return np.zeros_like(fv)
    g = sla.lu_solve(P._lu, fv, check_finite=False)
    ok = np.all(np.isfinite(g))
    if ok:
        res = float(np.max(np.abs(g - P.matrix @ g - fv)))
        ng = float(np.max(np.abs(g)))
        ok = res <= 1e-8 * nf and ng <= 1e12 * nf
    if not ok:
        a = np.eye(P.grid.size) - P.dense
        smin = _smallest_singular_value(a)
        z = P.z
        raise SingularError(
            f"I - P(z) is numerically singular at z={z!r} (smallest singular value {smin:.3e})",
            smallest_singular_value=smin,
            t=z.imag,
        )
    return g


def resolvent_residual(P: DiscretizedOperator, f, g) -> float:
    fv = _vals(f)
    return float(np.max(np.abs(g - P.matrix @ g - fv)) / max(np.max(np.abs(fv)), 1e-300))


def smooth_probes(grid: StateGrid, count: int, seed: int, modes: int = 6) -> np.ndarray:
    """Random trigonometric (d = 2) or low-degree polynomial (d = 3) probes,
    complex valued, shape (count, size)."""
    rng = mc.block_rng(seed, "probes", 0)
    x = grid.points
    out = np.empty((count, grid.size), dtype=complex)
    for i in range(count):
        if grid.dim == 2:
            th = np.arctan2(x[:, 1], x[:, 0])
            k = np.arange(modes + 1)
            c = (rng.standard_normal(modes + 1) + 1j * rng.standard_normal(modes + 1)) / (1 + k) ** 2
            d = (rng.standard_normal(modes + 1) + 1j * rng.standard_normal(modes + 1)) / (1 + k) ** 2
            v = np.cos(np.outer(th, k)) @ c + np.sin(np.outer(th, k)) @ d
        else:
            c = rng.standard_normal((grid.dim, 3))
            v = np.sum(np.cos(x @ c), axis=1) + 1j * np.sum(np.sin(x @ c[:, ::-1]), axis=1)
        if grid.size_A > 1:
            v = v * (1.0 + 0.5 * rng.standard_normal(grid.size_A))[grid.a_index]
        out[i] = v
    return out


def rough_probes(grid: StateGrid, count: int, seed: int) -> np.ndarray:
    """Probes whose Hoelder seminorm dwarfs their sup norm: grid noise and
    high frequency modes. Used to expose the contracting term of
    Doeblin-Fortet type inequalities."""
    rng = mc.block_rng(seed, "rough-probes", 0)
    out = np.empty((count, grid.size), dtype=complex)
    x = grid.points
    for i in range(count):
        if i % 2 == 0:
            out[i] = rng.uniform(-1, 1, grid.size) + 1j * rng.uniform(-1, 1, grid.size)
        else:
            k = rng.integers(grid.n_sphere // 16, grid.n_sphere // 4)
            u = x @ random_direction(rng, grid.dim)
            out[i] = np.exp(1j * k * np.pi * u)
    return out


def random_direction(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class ResolventScan:
    t_values: np.ndarray
    norms: np.ndarray
    residuals: np.ndarray
    C_hat: float
    L_hat: float
    fit_residuals: np.ndarray
    grid_size: int
    gamma: float
    probes: int
    seed: int


def resolvent_norm_estimate(
    P: DiscretizedOperator, probes: np.ndarray, gamma: float, power_steps: int = 2
) -> tuple[float, float]:
    """max over probes (and a few power iterates) of |R f|_H / |f|_H with
    |f|_H = |f|_inf + m_gamma(f). Returns (estimate, worst residual)."""
    grid = P.grid
    best = 0.0
    worst_res = 0.0
    for f in probes:
        v = f
        for _ in range(power_steps + 1):
            g = resolvent_apply(P, v)
            worst_res = max(worst_res, resolvent_residual(P, v, g))
            ratio = holder_norm(g, grid, gamma) / holder_norm(v, grid, gamma)
            best = max(best, ratio)
            v = g / np.max(np.abs(g))
    return best, worst_res


def resolvent_scan(
    rho: GeneratorMeasure,
    grid: StateGrid,
    gamma: float,
    t_values: Sequence[float],
    n_probes: int = 20,
    seed: int = 0,
    power_steps: int = 2,
    family: OperatorFamily | None = None,
) -> ResolventScan:
    if n_probes < 20:
        raise ValueError("the scan uses at least 20 probes")
    fam = family or OperatorFamily(rho, grid)
    probes = smooth_probes(grid, n_probes, seed)
    norms, res = [], []
    for t in t_values:
        P = fam(1j * t)
        try:
            nrm, r = resolvent_norm_estimate(P, probes, gamma, power_steps)
        except SingularError as exc:
            exc.t = float(t)
            raise
        norms.append(nrm)
        res.append(r)
    tv = np.asarray(t_values, dtype=float)
    norms_a = np.asarray(norms)
    if len(tv) >= 2:
        L, logC = np.polyfit(np.log(np.abs(tv)), np.log(norms_a), 1)
        fit_res = np.log(norms_a) - (L * np.log(np.abs(tv)) + logC)
    else:
        L, logC, fit_res = math.nan, math.log(norms_a[0]), np.zeros(1)
    return ResolventScan(tv, norms_a, np.asarray(res), float(math.exp(logC)), float(L), fit_res, grid.size, gamma, n_probes, seed)


def singular_sweep(fam: OperatorFamily, t_values: Sequence[float]) -> np.ndarray:
    """Smallest singular value of I - P(it) along t (dense; small grids)."""
    out = []
    n = fam.grid.size
    for t in t_values:
        a = np.eye(n) - fam(1j * t).dense
        out.append(float(sla.svdvals(a)[-1]))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# U(z)


class UOperator:
    """U(z) = (I - P(z))^(-1) - N0 / (sigma z), sigma per minimal class.

    By default the class-wise sigma_j = nu_j(s) with s(x) = sum w sigma(g, x)
    computed on the grid, which is the exact residue of the discretized
    resolvent at z = 0."""

    def __init__(
        self,
        family: OperatorFamily,
        spectral: SpectralData,
        sigma_rho: float | None = None,
        C: float | None = None,
        L: float | None = None,
        eta: float = ETA,
    ):
        self.family = family
        self.spectral = spectral
        self.sigma_rho = sigma_rho
        self.C, self.L, self.eta = C, L, eta
        self._cache: dict = {}

    def in_domain(self, z: complex) -> bool:
        z = complex(z)
        if not z.real < self.eta:
            return False
        if self.C is not None and self.L is not None:
            return z.real > -1.0 / (self.C * (1 + abs(z.imag)) ** (self.L + 1))
        return z.real > -self.eta

    def operator(self, z: complex) -> DiscretizedOperator:
        key = complex(z)
        if key not in self._cache:
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = self.family(key)
        return self._cache[key]

    def apply(self, z: complex, f) -> np.ndarray:
        z = complex(z)
        if z == 0:
            return self.at_zero(f)
        if not self.in_domain(z):
            raise OutOfDomainError(f"z={z!r} is outside the domain of U")
        fv = np.asarray(_vals(f), dtype=complex)
        g = resolvent_apply(self.operator(z), fv)
        return g - self.spectral.apply_N0_over_sigma(fv, self.sigma_rho) / z

    def at_zero(self, f, delta: float = 1e-4) -> np.ndarray:
        """U(0) f as the symmetric limit along the imaginary axis."""
        return 0.5 * (self.apply(1j * delta, f) + self.apply(-1j * delta, f))

    def derivative_at_zero(self, f, delta: float = 1e-3) -> np.ndarray:
        """U'(0) f by a centered difference along the imaginary axis."""
        return (self.apply(1j * delta, f) - self.apply(-1j * delta, f)) / (2j * delta)


def U_operator(family: OperatorFamily, z: complex, spectral: SpectralData, sigma_rho: float | None = None):
    """The map f -> U(z) f."""
    u = UOperator(family, spectral, sigma_rho)
    return lambda f: u.apply(z, f)


# ---------------------------------------------------------------------------
# parity


def isotypic_split(f, grid: StateGrid) -> tuple[np.ndarray, np.ndarray]:
    v = _vals(f)
    w = v[grid.antipode]
    return (v + w) / 2, (v - w) / 2


def parity_defect(P: DiscretizedOperator, f) -> float:
    """|odd part of P f_even|_inf + |even part of P f_odd|_inf."""
    even, odd = isotypic_split(f, P.grid)
    pe = P.apply(even)
    po = P.apply(odd)
    return float(np.max(np.abs(isotypic_split(pe, P.grid)[1])) + np.max(np.abs(isotypic_split(po, P.grid)[0])))


# ---------------------------------------------------------------------------
# Dolgopyat probe


@dataclass(frozen=True)
class DolgopyatResult:
    found: bool
    x0: int | None
    n: int | None
    threshold: float
    n_max: int
    defects: np.ndarray | None
    max_modulus: np.ndarray


def regular_grid_points(grid: StateGrid, nu: EmpiricalMeasure, r: float, Delta: float) -> np.ndarray:
    """Grid indices x with nu(B(x, r)) >= r^Delta (projective ball, every fiber)."""
    from .matrix_core import proj_distance_vec

    out = []
    thr = r**Delta
    for j, x in enumerate(grid.sphere):
        dist = proj_distance_vec(nu.points, x[None, :])
        for a in range(grid.size_A):
            sel = nu.a_points == a
            mass = np.mean((dist <= r) & sel) if sel.any() else 0.0
            if mass >= thr:
                out.append(a * grid.n_sphere + j)
    return np.asarray(sorted(out), dtype=int)


def dolgopyat_probe(
    P_lazy: DiscretizedOperator,
    f,
    t: float,
    alpha1: float,
    beta: float,
    regular_points: Sequence[int],
    P_lazy_zero: DiscretizedOperator | None = None,
) -> DolgopyatResult:
    pts = np.asarray(regular_points, dtype=int)
    if pts.size == 0:
        raise EmptyRegularSetError("no regular points supplied")
    n_max = int(math.floor(beta * math.log(abs(t))))
    thr = 1.0 - abs(t) ** (-alpha1)
    v = np.asarray(_vals(f), dtype=complex)
    mods = []
    cur = v
    for n in range(n_max + 1):
        mod = np.abs(cur)
        mods.append(float(mod.max()))
        hit = np.nonzero(mod[pts] <= thr)[0]
        if hit.size:
            return DolgopyatResult(True, int(pts[hit[0]]), n, thr, n_max, None, np.asarray(mods))
        if n < n_max:
            cur = P_lazy.apply(cur)
    P0 = P_lazy_zero or P_lazy.family(0)
    abs2 = P0.power_apply(np.abs(v) ** 2, n_max)
    defect = abs2 - 2 * np.real(np.conj(v) * cur) + np.abs(v) ** 2
    return DolgopyatResult(False, None, None, thr, n_max, np.maximum(defect[pts], 0.0), np.asarray(mods))


# ---------------------------------------------------------------------------
# drift, contraction, Doeblin-Fortet


@dataclass(frozen=True)
class DriftTable:
    rows: list  # (s, n, sup, value at e1)
    rates: dict  # s -> fitted t_hat (decay rate per unit s)
    C_hat: dict


def drift_check(
    rho: GeneratorMeasure, grid: StateGrid, s_values: Sequence[float], n_values: Sequence[int], family=None
) -> DriftTable:
    fam = family or OperatorFamily(rho, grid)
    e1 = int(np.argmax(grid.points[:, 0]))
    rows = []
    rates, consts = {}, {}
    nmax = int(max(n_values))
    for s in s_values:
        if not 0 <= s <= ETA:
            raise OutOfDomainError("s must lie in [0, eta]")
        P = build_operator_from_family(fam, complex(s), closed=True)
        v = np.ones(grid.size)
        sups = {}
        for n in range(1, nmax + 1):
            v = (P.matrix @ v).real
            if n in n_values:
                sups[n] = float(np.max(v))
                rows.append((float(s), n, sups[n], float(v[e1])))
        ns = np.array(sorted(sups))
        ys = np.log([sups[k] for k in ns])
        if s > 0 and len(ns) >= 2:
            slope, icpt = np.polyfit(ns, ys, 1)
            rates[float(s)] = float(-slope / s)
            consts[float(s)] = float(max(np.exp(ys + (-slope) * ns)))
        else:
            rates[float(s)] = math.nan
            consts[float(s)] = 1.0
    return DriftTable(rows, rates, consts)


def contraction_coefficients(
    rho: GeneratorMeasure, n_values: Sequence[int], gamma: float, n_pairs: int = 400, seed: int = 0
) -> dict:
    """u_n = sup over sampled pairs of E d(gx, gy)^gamma / d(x, y)^gamma on
    the quotient (projective distance), exact over words of length n."""
    from .matrix_core import proj_distance_vec
    from .walk_engine import word_distribution

    rng = mc.block_rng(seed, "contraction", 0)
    d = rho.dim
    x = rng.standard_normal((n_pairs, d))
    y = x + rng.standard_normal((n_pairs, d)) * np.exp(rng.uniform(-8, 0, (n_pairs, 1)))
    base = proj_distance_vec(x, y) ** gamma
    out = {}
    for n in n_values:
        mats, probs = word_distribution(rho, n)
        acc = np.zeros(n_pairs)
        for m, p in zip(mats, probs):
            acc += p * proj_distance_vec(x @ m.T, y @ m.T) ** gamma
        out[int(n)] = float(np.max(acc / base))
    return out


@dataclass(frozen=True)
class DoeblinFortetFit:
    C_hat: float
    delta_hat: float
    ratios: int


def doeblin_fortet_fit(
    family: OperatorFamily,
    t_values: Sequence[float],
    n_values: Sequence[int],
    probes: np.ndarray,
    gamma: float = DEFAULT_GAMMA,
    deltas: Sequence[float] = tuple(np.linspace(0.0, 3.0, 121)),
) -> DoeblinFortetFit:
    """Fit m(P(it)^n f) <= C (exp(-delta n) m(f) + (1 + |t|) |f|_inf).

    For each delta the smallest valid C is computed; delta_hat is the
    largest delta whose C is within a factor 2 of C(0)."""
    grid = family.grid
    data = []
    nmax = max(n_values)
    for t in t_values:
        P = family(1j * t)
        for f in probes:
            m0, s0 = holder_seminorm(f, grid, gamma), sup_norm(f)
            v = f
            for n in range(1, nmax + 1):
                v = P.apply(v)
                if n in n_values:
                    data.append((n, t, holder_seminorm(v, grid, gamma), m0, s0))
    arr = np.asarray(data, dtype=float)
    n, t, mn, m0, s0 = arr.T

    def C_of(delta):
        return float(np.max(mn / (np.exp(-delta * n) * m0 + (1 + np.abs(t)) * s0)))

    c0 = C_of(0.0)
    best = 0.0
    for dl in deltas:
        if C_of(dl) <= 2 * c0:
            best = dl
    return DoeblinFortetFit(max(C_of(best), 1.0), float(best), len(data))
