"""Matrix primitives on SL_d(R).

Group elements, Cartan data (through the SVD), projective and dual
projective points, wedge norms and the norm cocycle
``sigma(g, x) = ln(|g x| / |x|)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations

import numpy as np

from .errors import DecompositionError, DimensionError, PreconditionError

DET_TOL = 1e-8
DET_RENORMALIZE = 1e-4
DEGENERATE_GAP = 1e-12
FP_TOL = 1e-12


def _det_noise_floor(a: np.ndarray) -> float:
    # LU round-off on det grows with the product of row norms; for
    # matrices like diag(8192, 1/8192) composed with rotations this
    # dominates any fixed relative tolerance.
    d = a.shape[0]
    rows = np.linalg.norm(a, axis=1)
    return 8.0 * math.factorial(d) * np.finfo(float).eps * float(np.prod(rows))


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` (or each row of a 2-d array) so that its first
    coordinate of largest absolute value is positive."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        i = int(np.argmax(np.abs(v)))
        return -v if v[i] < 0 else v.copy()
    idx = np.argmax(np.abs(v), axis=1)
    s = np.sign(v[np.arange(v.shape[0]), idx])
    s[s == 0] = 1.0
    return v * s[:, None]


class GroupElement:
    """An element of SL_d(R) held as an immutable array.

    Inputs whose determinant is within 1e-4 of one are rescaled by
    ``det**(-1/d)``. Anything further away is rejected.
    """

    __slots__ = ("entries", "dim", "__dict__")

    def __init__(self, entries, det_tol: float = DET_TOL):
        a = np.array(entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 2:
            raise DimensionError(f"expected a square matrix of size >= 2, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise PreconditionError("matrix has non-finite entries")
        d = a.shape[0]
        det = float(np.linalg.det(a))
        floor = _det_noise_floor(a)
        drift = abs(det - 1.0)
        if drift > det_tol + floor:
            if det <= 0 or drift > DET_RENORMALIZE + floor:
                raise PreconditionError(f"determinant {det!r} is not 1 (tolerance {DET_RENORMALIZE})")
            a = a / det ** (1.0 / d)
        a.setflags(write=False)
        self.entries = a
        self.dim = d

    @classmethod
    def identity(cls, d: int) -> "GroupElement":
        return cls(np.eye(d))

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        return GroupElement(self.entries @ other.entries)

    def __pow__(self, p: int) -> "GroupElement":
        return GroupElement(np.linalg.matrix_power(self.entries, p))

    def __repr__(self) -> str:
        return f"GroupElement({self.entries.tolist()!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, GroupElement) and np.array_equal(self.entries, other.entries)

    def __hash__(self) -> int:
        return hash(self.entries.tobytes())

    @cached_property
    def svd(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        try:
            u, s, vt = np.linalg.svd(self.entries)
        except np.linalg.LinAlgError as exc:
            raise DecompositionError(str(exc)) from exc
        if not np.all(np.isfinite(s)) or s[-1] <= 0:
            raise DecompositionError("singular-value routine returned invalid values")
        return u, s, vt

    @cached_property
    def norm(self) -> float:
        return float(self.svd[1][0])

    @cached_property
    def inverse(self) -> "GroupElement":
        return GroupElement(np.linalg.inv(self.entries))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.entries @ x


@dataclass(frozen=True)
class ProjectivePoint:
    rep: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.rep, dtype=float).reshape(-1)
        n = np.linalg.norm(v)
        if v.size < 2 or not np.isfinite(n) or n == 0:
            raise DimensionError("a projective point needs a nonzero vector of length >= 2")
        v = canonical_sign(v / n)
        v.setflags(write=False)
        object.__setattr__(self, "rep", v)

    @property
    def dim(self) -> int:
        return self.rep.size

    def __eq__(self, other) -> bool:
        return isinstance(other, ProjectivePoint) and np.array_equal(self.rep, other.rep)

    def __hash__(self) -> int:
        return hash(self.rep.tobytes())


@dataclass(frozen=True)
class DualProjectivePoint:
    """A line of linear forms. ``rep`` is a unit covector."""

    rep: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.rep, dtype=float).reshape(-1)
        n = np.linalg.norm(v)
        if v.size < 2 or not np.isfinite(n) or n == 0:
            raise DimensionError("a dual projective point needs a nonzero covector of length >= 2")
        v = canonical_sign(v / n)
        v.setflags(write=False)
        object.__setattr__(self, "rep", v)

    @property
    def dim(self) -> int:
        return self.rep.size

    def __eq__(self, other) -> bool:
        return isinstance(other, DualProjectivePoint) and np.array_equal(self.rep, other.rep)

    def __hash__(self) -> int:
        return hash(self.rep.tobytes())


@dataclass(frozen=True)
class CartanDecomposition:
    kappa: np.ndarray
    x_M: ProjectivePoint
    y_m: DualProjectivePoint
    kappa_gap: float
    degenerate: bool = field(default=False)


def cartan_decompose(g: GroupElement) -> CartanDecomposition:
    u, s, vt = g.svd
    kappa = s.copy()
    # the smallest singular value is recovered from det = 1, which is far
    # more accurate than the SVD when the spread is large
    kappa[-1] = 1.0 / float(np.prod(kappa[:-1]))
    kappa.setflags(write=False)
    gap = float(kappa[1] / kappa[0])
    degenerate = gap > 1.0 - DEGENERATE_GAP
    return CartanDecomposition(
        kappa=kappa,
        x_M=ProjectivePoint(u[:, 0]),
        y_m=DualProjectivePoint(vt[0]),
        kappa_gap=min(gap, 1.0),
        degenerate=degenerate,
    )


def _check_dims(a, b) -> None:
    if a.dim != b.dim:
        raise DimensionError(f"dimension mismatch: {a.dim} vs {b.dim}")


def wedge_vector_norm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """|x ^ y| in the basis e_i ^ e_j (i < j), vectorized over leading axes."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = x.shape[-1]
    acc = np.zeros(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]))
    for i in range(d):
        for j in range(i + 1, d):
            acc = acc + (x[..., i] * y[..., j] - x[..., j] * y[..., i]) ** 2
    return np.sqrt(acc)


def proj_distance_vec(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Projective distance for arrays of (not necessarily unit) vectors."""
    nx = np.linalg.norm(x, axis=-1)
    ny = np.linalg.norm(y, axis=-1)
    return np.minimum(wedge_vector_norm(x, y) / (nx * ny), 1.0)


def proj_distance(X: ProjectivePoint, Y: ProjectivePoint) -> float:
    _check_dims(X, Y)
    return float(proj_distance_vec(X.rep, Y.rep))


def dual_pairing(X: ProjectivePoint, Y: DualProjectivePoint) -> float:
    _check_dims(X, Y)
    return float(min(abs(float(Y.rep @ X.rep)), 1.0))


def sigma(g: GroupElement, X: ProjectivePoint) -> float:
    if g.dim != X.dim:
        raise DimensionError(f"dimension mismatch: {g.dim} vs {X.dim}")
    return float(np.log(np.linalg.norm(g.entries @ X.rep)))


def sigma_vec(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """ln|m x| - ln|x| for a matrix ``m`` and rows of ``x``."""
    gx = x @ np.asarray(m).T
    return np.log(np.linalg.norm(gx, axis=-1)) - np.log(np.linalg.norm(x, axis=-1))


def act(g: GroupElement, X: ProjectivePoint) -> ProjectivePoint:
    return ProjectivePoint(g.entries @ X.rep)


def compound_matrix(a: np.ndarray, i: int) -> np.ndarray:
    """Matrix of all i x i minors, rows and columns in lexicographic order."""
    d = a.shape[0]
    idx = list(combinations(range(d), i))
    out = np.empty((len(idx), len(idx)))
    for r, rows in enumerate(idx):
        sub = a[list(rows)]
        for c, cols in enumerate(idx):
            out[r, c] = np.linalg.det(sub[:, list(cols)])
    return out


def wedge_norm(g: GroupElement, i: int) -> float:
    d = g.dim
    if not 1 <= i <= d:
        raise DimensionError(f"wedge index {i} outside 1..{d}")
    if i == d:
        return 1.0
    if d <= 4:
        return float(np.linalg.norm(compound_matrix(g.entries, i), 2))
    return float(np.prod(g.svd[1][:i]))


def random_unit_vectors(rng: np.random.Generator, count: int, d: int) -> np.ndarray:
    v = rng.standard_normal((count, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
