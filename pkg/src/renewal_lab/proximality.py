"""Certified quantitative proximality.

Every operation checks the preconditions of the corresponding inequality,
computes the eigen-data of the matrices independently of their Cartan
data, and then verifies the inequality against it.  A failed bound raises
:class:`BoundViolation`; nothing is assumed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .errors import BoundViolation, EigenError, PreconditionError
from .matrix_core import (
    CartanDecomposition,
    DualProjectivePoint,
    GroupElement,
    ProjectivePoint,
    cartan_decompose,
    dual_pairing,
    proj_distance,
    random_orthogonal,
    random_unit_vectors,
    sigma,
)

log = logging.getLogger(__name__)

REL_SLACK = 1e-7
ABS_SLACK = 1e-12
EIGEN_TOL = 1e-12


@dataclass(frozen=True)
class LemmaConstants:
    """The existential constants c1, c2, c3 made explicit."""

    c1: float = 1.0 / 64.0
    c2: float = 2.0**10
    c3: float = 2.0**10


DEFAULT_CONSTANTS = LemmaConstants()


def _fp_floor(g: GroupElement) -> float:
    # absolute rounding noise of one matrix-vector product with g
    return 64.0 * np.finfo(float).eps * g.norm


def _verify(name: str, lhs: float, bound: float, floor: float = 0.0, checks: dict | None = None) -> None:
    ok = lhs <= bound * (1.0 + REL_SLACK) + ABS_SLACK + floor
    if checks is not None:
        checks[name] = (float(lhs), float(bound))
    if not ok:
        raise BoundViolation(f"{name}: {lhs!r} exceeds certified bound {bound!r}")


def _verify_lower(name: str, lhs: float, bound: float, floor: float = 0.0, checks: dict | None = None) -> None:
    ok = lhs >= bound * (1.0 - REL_SLACK) - ABS_SLACK - floor
    if checks is not None:
        checks[name] = (float(lhs), float(bound))
    if not ok:
        raise BoundViolation(f"{name}: {lhs!r} is below certified lower bound {bound!r}")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise PreconditionError(message)


def _check_epsilon(epsilon: float, upper: float = 0.25) -> None:
    _require(0.0 < epsilon <= upper, f"epsilon={epsilon!r} not in (0, {upper!r}]")


# ---------------------------------------------------------------------------
# eigen-oracle


def char_poly_roots(a: np.ndarray) -> np.ndarray:
    """Eigenvalues of ``a`` from its characteristic polynomial (d <= 3),
    using det = 1. Falls back to a dense eigensolver for d > 3."""
    d = a.shape[0]
    tr = float(np.trace(a))
    if d == 2:
        disc = tr * tr - 4.0
        if disc >= 0:
            # stable form of the largest root, the other from the product
            r1 = 0.5 * (tr + math.copysign(math.sqrt(disc), tr if tr != 0 else 1.0))
            return np.array([r1, 1.0 / r1], dtype=complex)
        s = math.sqrt(-disc)
        return np.array([complex(tr / 2, s / 2), complex(tr / 2, -s / 2)])
    if d == 3:
        c2 = (
            a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
            + a[0, 0] * a[2, 2] - a[0, 2] * a[2, 0]
            + a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1]
        )
        return np.roots([1.0, -tr, c2, -1.0]).astype(complex)
    return np.linalg.eigvals(a).astype(complex)


def _top_vector(a: np.ndarray, lam: float, start: np.ndarray) -> np.ndarray:
    v = start / np.linalg.norm(start)
    for _ in range(500):
        w = a @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        w = w / nw
        if w @ v < 0:
            w = -w
        if np.linalg.norm(w - v) < EIGEN_TOL:
            return w
        v = w
    # slow convergence: inverse iteration at the known eigenvalue
    d = a.shape[0]
    shift = lam * (1.0 + 1e-12)
    for _ in range(5):
        try:
            w = np.linalg.solve(a - shift * np.eye(d), v)
        except np.linalg.LinAlgError:
            shift *= 1.0 + 1e-9
            continue
        v = w / np.linalg.norm(w)
    return v


@dataclass(frozen=True)
class EigenData:
    lambda1: float
    sign1: int
    v_plus: ProjectivePoint
    v_less: DualProjectivePoint
    second_modulus: float


def top_eigen(g: GroupElement, cartan: CartanDecomposition | None = None) -> EigenData:
    """Top eigenvalue, eigenline and invariant hyperplane of ``g``.

    The eigenvalue comes from the characteristic polynomial, the vectors
    from power iteration on g and its transpose. Raises EigenError unless
    the top eigenvalue is real and simple in modulus."""
    a = g.entries
    roots = char_poly_roots(a)
    order = np.argsort(-np.abs(roots))
    roots = roots[order]
    top = roots[0]
    scale = abs(top)
    if abs(top.imag) > 1e-9 * scale:
        raise EigenError("top eigenvalue is not real")
    second = abs(roots[1])
    if not scale > second * (1.0 + 1e-9):
        raise EigenError("top eigenvalue is not simple in modulus")
    lam = float(top.real)
    cartan = cartan or cartan_decompose(g)
    v = _top_vector(a, lam, cartan.x_M.rep)
    phi = _top_vector(a.T, lam, cartan.y_m.rep)
    # cross-check eigenvalue against the Rayleigh-type quotient
    rq = float(phi @ (a @ v)) / float(phi @ v)
    if not math.isfinite(rq) or abs(rq - lam) > 1e-8 * scale:
        raise EigenError(f"eigenvector iteration disagrees with characteristic root ({rq} vs {lam})")
    return EigenData(
        lambda1=math.log(scale),
        sign1=1 if lam > 0 else -1,
        v_plus=ProjectivePoint(v),
        v_less=DualProjectivePoint(phi),
        second_modulus=float(second),
    )


def restricted_norm(g: GroupElement, phi: DualProjectivePoint) -> float:
    """Operator norm of g restricted to the kernel of phi."""
    _, _, vt = np.linalg.svd(phi.rep.reshape(1, -1))
    basis = vt[1:].T
    return float(np.linalg.norm(g.entries @ basis, 2))


def dual_distance(a: DualProjectivePoint, b: DualProjectivePoint) -> float:
    return proj_distance(ProjectivePoint(a.rep), ProjectivePoint(b.rep))


def pairing_vec(x: np.ndarray, phi: DualProjectivePoint) -> float:
    return float(min(abs(phi.rep @ x) / np.linalg.norm(x), 1.0))


# ---------------------------------------------------------------------------
# certified operations


@dataclass(frozen=True)
class ProximalCertificate:
    lambda1: float
    sign1: int
    v_plus: ProjectivePoint
    v_less: DualProjectivePoint
    epsilon: float
    bound_vplus_xM: float
    bound_vless_ym: float
    bound_restricted_norm: float
    checks: dict = field(default_factory=dict, compare=False)


def certify_proximal(g: GroupElement, epsilon: float) -> ProximalCertificate:
    _check_epsilon(epsilon)
    c = cartan_decompose(g)
    _require(not c.degenerate, "degenerate Cartan data (kappa_1 = kappa_2)")
    _require(c.kappa_gap <= epsilon**3, f"kappa_12={c.kappa_gap!r} > epsilon^3={epsilon**3!r}")
    delta = dual_pairing(c.x_M, c.y_m)
    _require(delta >= 2 * epsilon, f"delta(X^M, Y^m)={delta!r} < 2 epsilon")
    eig = top_eigen(g, c)
    checks: dict = {}
    b1 = c.kappa_gap / epsilon
    b3 = 2.0 * c.kappa[1] / epsilon
    floor = _fp_floor(g)
    _verify("d(V+, X^M)", proj_distance(eig.v_plus, c.x_M), b1, checks=checks)
    _verify("d(V<, Y^m)", dual_distance(eig.v_less, c.y_m), b1, checks=checks)
    _verify("|g on V<|", restricted_norm(g, eig.v_less), b3, floor=floor, checks=checks)
    # The bound exp(lambda1) >= kappa_1 delta(X^M, Y^m) is false as stated
    # (2x2 counterexample: exp(lambda1) - kappa_1 cos t = (cos t - 1/cos t)/kappa_1).
    # What holds is exp(lambda1) >= kappa_1 delta(V+, Y^m), and from the
    # first bound that is >= kappa_1 delta(X^M, Y^m) - 2 kappa_2 / epsilon.
    e1 = math.exp(eig.lambda1)
    _verify_lower("exp(lambda1) vs delta(V+, Y^m)", e1, c.kappa[0] * dual_pairing(eig.v_plus, c.y_m), checks=checks)
    _verify_lower("exp(lambda1)", e1, c.kappa[0] * delta - 2.0 * c.kappa[1] / epsilon, checks=checks)
    checks["exp(lambda1) stated form"] = (e1, float(c.kappa[0] * delta))
    return ProximalCertificate(
        lambda1=eig.lambda1,
        sign1=eig.sign1,
        v_plus=eig.v_plus,
        v_less=eig.v_less,
        epsilon=epsilon,
        bound_vplus_xM=b1,
        bound_vless_ym=b1,
        bound_restricted_norm=b3,
        checks=checks,
    )


@dataclass(frozen=True)
class ProductBounds:
    kappa1_lower: float
    kappa_gap_upper: float
    d_xM_upper: float
    d_ym_upper: float
    kappa1_lower_sharp: float
    measured: dict


def product_bounds(gs: Sequence[GroupElement], epsilon: float) -> ProductBounds:
    """Bounds for the product g_p ... g_1, where ``gs = [g_1, ..., g_p]``."""
    _check_epsilon(epsilon)
    p = len(gs)
    _require(p >= 2, "need at least two factors")
    cs = [cartan_decompose(g) for g in gs]
    for i, c in enumerate(cs):
        _require(c.kappa_gap <= epsilon**3, f"factor {i + 1}: kappa_12={c.kappa_gap!r} > epsilon^3")
    for i in range(p - 1):
        a, b = cs[i], cs[i + 1]
        _require(
            dual_pairing(b.x_M, a.y_m) >= 2 * epsilon,
            f"delta(X^M_{i + 2}, Y^m_{i + 1}) < 2 epsilon",
        )
        _require(
            dual_pairing(a.x_M, b.y_m) >= 2 * epsilon,
            f"delta(X^M_{i + 1}, Y^m_{i + 2}) < 2 epsilon",
        )
    prod = gs[0]
    for g in gs[1:]:
        prod = g @ prod
    cp = cartan_decompose(prod)
    k1 = float(np.prod([c.kappa[0] for c in cs]))
    lower = epsilon ** (p - 1) * k1
    sharp = 0.5 * p * lower
    gap_upper = float(np.prod([c.kappa_gap for c in cs])) / epsilon ** (2 * (p - 1))
    dx = cs[-1].kappa_gap / epsilon
    dy = cs[0].kappa_gap / epsilon
    measured: dict = {}
    _verify_lower("kappa1(product)", cp.kappa[0], lower, checks=measured)
    _verify("kappa12(product)", cp.kappa_gap, gap_upper, checks=measured)
    _verify("d(X^M_prod, X^M_p)", proj_distance(cp.x_M, cs[-1].x_M), dx, checks=measured)
    _verify("d(Y^m_prod, Y^m_1)", dual_distance(cp.y_m, cs[0].y_m), dy, checks=measured)
    if cp.kappa[0] < sharp * (1 - REL_SLACK):
        log.info("sharper product bound (p/2) eps^(p-1) prod kappa1 fails: %r < %r", cp.kappa[0], sharp)
    measured["kappa1(product) sharp"] = (float(cp.kappa[0]), sharp)
    return ProductBounds(lower, gap_upper, dx, dy, sharp, measured)


@dataclass(frozen=True)
class ContractionBound:
    sigma_defect: float
    pair_contraction: float
    sigma_bound: float
    pair_bound: float


def contraction_bound(g: GroupElement, epsilon: float, X: ProjectivePoint, Y: ProjectivePoint) -> ContractionBound:
    _check_epsilon(epsilon)
    c = cartan_decompose(g)
    _require(not c.degenerate, "degenerate Cartan data")
    _require(c.kappa_gap <= epsilon**4, f"kappa_12={c.kappa_gap!r} > epsilon^4")
    _require(dual_pairing(c.x_M, c.y_m) >= 2 * epsilon, "delta(X^M, Y^m) < 2 epsilon")
    cert = certify_proximal(g, epsilon)
    dx = dual_pairing(X, cert.v_less)
    dy = dual_pairing(Y, cert.v_less)
    _require(dx >= 2 * epsilon, f"delta(X, V<)={dx!r} < 2 epsilon")
    _require(dy >= 2 * epsilon, f"delta(Y, V<)={dy!r} < 2 epsilon")
    dvv = dual_pairing(cert.v_plus, cert.v_less)
    defect = abs(sigma(g, X) - cert.lambda1 - math.log(dx / dvv))
    sb = 2.0 * c.kappa_gap / epsilon**3
    pair = proj_distance_images(g, X, Y)
    pb = c.kappa_gap / (4.0 * epsilon**4)
    _verify("sigma defect", defect, sb)
    _verify("d(gX, gY)", pair, pb)
    return ContractionBound(defect, pair, sb, pb)


def proj_distance_images(g: GroupElement, X: ProjectivePoint, Y: ProjectivePoint) -> float:
    return proj_distance(ProjectivePoint(g.entries @ X.rep), ProjectivePoint(g.entries @ Y.rep))


def _transversal(cg: CartanDecomposition, ch: CartanDecomposition, epsilon: float) -> None:
    _require(dual_pairing(cg.x_M, cg.y_m) >= 2 * epsilon, "delta(X^M_g, Y^m_g) < 2 epsilon")
    _require(dual_pairing(ch.x_M, ch.y_m) >= 2 * epsilon, "delta(X^M_h, Y^m_h) < 2 epsilon")
    _require(dual_pairing(cg.x_M, ch.y_m) >= 2 * epsilon, "delta(X^M_g, Y^m_h) < 2 epsilon")
    _require(dual_pairing(ch.x_M, cg.y_m) >= 2 * epsilon, "delta(X^M_h, Y^m_g) < 2 epsilon")


def _certify_product(gh: GroupElement, epsilon: float) -> ProximalCertificate:
    try:
        return certify_proximal(gh, epsilon)
    except PreconditionError as exc:
        raise EigenError(f"product is not certified proximal: {exc}") from exc


@dataclass(frozen=True)
class SpectralRadiusDefect:
    defect: float
    transversality_term: float
    bound: float


def spectral_radius_defect(
    g: GroupElement, h: GroupElement, epsilon: float, constants: LemmaConstants = DEFAULT_CONSTANTS
) -> SpectralRadiusDefect:
    _check_epsilon(epsilon, min(constants.c1, 0.25))
    cg, ch = cartan_decompose(g), cartan_decompose(h)
    _require(not (cg.degenerate or ch.degenerate), "degenerate Cartan data")
    _require(cg.kappa_gap <= epsilon**4, "kappa_12(g) > epsilon^4")
    _require(ch.kappa_gap <= epsilon**4, "kappa_12(h) > epsilon^4")
    _transversal(cg, ch, epsilon)
    eg, eh = certify_proximal(g, epsilon), certify_proximal(h, epsilon)
    egh = _certify_product(g @ h, 0.75 * epsilon)
    defect = eg.lambda1 + eh.lambda1 - egh.lambda1
    num = dual_pairing(eh.v_plus, eh.v_less) * dual_pairing(eg.v_plus, eg.v_less)
    den = dual_pairing(eg.v_plus, eh.v_less) * dual_pairing(eh.v_plus, eg.v_less)
    term = math.log(num / den)
    bound = constants.c2 * (cg.kappa_gap + ch.kappa_gap) / epsilon**3
    _verify("|defect - transversality term|", abs(defect - term), bound)
    return SpectralRadiusDefect(defect, term, bound)


@dataclass(frozen=True)
class PowerNeighborhoodBounds:
    delta_f: tuple[float, float]
    d_xM: tuple[float, float]
    d_ym: tuple[float, float]
    kappa1: tuple[float, float]
    kappa_gap: tuple[float, float]
    d_vplus: tuple[float, float]
    d_vless: tuple[float, float]


def _distance_to_power(g: GroupElement, p: int, f: GroupElement) -> tuple[float, float]:
    gp = np.linalg.matrix_power(g.entries, p)
    dist = float(np.linalg.norm(gp - f.entries, 2))
    return dist, 1e-12 * float(np.linalg.norm(gp, 2))


def power_neighborhood_bounds(
    g: GroupElement, p: int, epsilon: float, f: GroupElement, constants: LemmaConstants = DEFAULT_CONSTANTS
) -> PowerNeighborhoodBounds:
    _check_epsilon(epsilon, min(constants.c1, 0.25))
    _require(p >= 1, "p must be positive")
    cg = cartan_decompose(g)
    _require(not cg.degenerate, "degenerate Cartan data")
    _require(cg.kappa_gap <= epsilon**3, "kappa_12(g) > epsilon^3")
    _require(dual_pairing(cg.x_M, cg.y_m) >= 2 * epsilon, "delta(X^M_g, Y^m_g) < 2 epsilon")
    radius = epsilon**2 * (cg.kappa_gap / epsilon**2) ** p
    dist, slack = _distance_to_power(g, p, f)
    _require(dist <= radius + slack, f"|g^p - f|={dist!r} exceeds radius {radius!r}")
    cf = cartan_decompose(f)
    eg = top_eigen(g, cg)
    ef = top_eigen(f, cf)
    vb = constants.c2 * cg.kappa_gap**p / epsilon ** (2 * p - 1)
    out = PowerNeighborhoodBounds(
        delta_f=(dual_pairing(cf.x_M, cf.y_m), epsilon),
        d_xM=(proj_distance(cf.x_M, cg.x_M), 2 * cg.kappa_gap / epsilon),
        d_ym=(dual_distance(cf.y_m, cg.y_m), 2 * cg.kappa_gap / epsilon),
        kappa1=(float(cf.kappa[0]), 0.5 * epsilon ** (p - 1) * cg.kappa[0] ** p),
        kappa_gap=(cf.kappa_gap, 16.0 * cg.kappa_gap**p / epsilon ** (2 * (p - 1))),
        d_vplus=(proj_distance(ef.v_plus, eg.v_plus), vb),
        d_vless=(dual_distance(ef.v_less, eg.v_less), vb),
    )
    _verify_lower("delta(X^M_f, Y^m_f)", *out.delta_f)
    _verify("d(X^M_f, X^M_g)", *out.d_xM)
    _verify("d(Y^m_f, Y^m_g)", *out.d_ym)
    _verify_lower("kappa1(f)", *out.kappa1)
    _verify("kappa12(f)", *out.kappa_gap)
    _verify("d(V+_f, V+_g)", *out.d_vplus)
    _verify("d(V<_f, V<_g)", *out.d_vless)
    return out


def projection_onto_hyperplane(cert: ProximalCertificate | EigenData) -> np.ndarray:
    """Matrix of the projection onto ker(phi) parallel to v+."""
    v = cert.v_plus.rep
    phi = cert.v_less.rep
    return np.eye(v.size) - np.outer(v, phi) / float(phi @ v)


@dataclass(frozen=True)
class FghDefect:
    defect: float
    log_cross_ratio: float
    upper: float
    lower: float | None
    second_part: bool
    skipped_reason: str = ""


def fgh_defect(
    f: GroupElement,
    g: GroupElement,
    h: GroupElement,
    epsilon: float,
    p: int,
    constants: LemmaConstants = DEFAULT_CONSTANTS,
) -> FghDefect:
    """Defect lambda1(fgh) - lambda1(f) - lambda1(gh) for f close to g^p.

    The defect is compared with minus the log cross-ratio: applying the
    two-element estimate to the pair (f, gh) gives that sign.
    """
    _check_epsilon(epsilon, min(constants.c1, 0.25))
    _require(p >= 1, "p must be positive")
    cg, ch = cartan_decompose(g), cartan_decompose(h)
    _require(not (cg.degenerate or ch.degenerate), "degenerate Cartan data")
    _require(cg.kappa_gap <= epsilon**5, "kappa_12(g) > epsilon^5")
    _require(ch.kappa_gap <= epsilon**3, "kappa_12(h) > epsilon^3")
    _transversal(cg, ch, epsilon)
    radius = epsilon**2 * (cg.kappa_gap / epsilon) ** p
    dist, slack = _distance_to_power(g, p, f)
    _require(dist <= radius + slack, f"|g^p - f|={dist!r} exceeds radius {radius!r}")

    eg, eh = top_eigen(g, cg), top_eigen(h, ch)
    gh = g @ h
    ef = top_eigen(f)
    egh = top_eigen(gh)
    efgh = top_eigen(f @ gh)
    defect = efgh.lambda1 - ef.lambda1 - egh.lambda1
    gvh = g.entries @ eh.v_plus.rep
    num = dual_pairing(eg.v_plus, eg.v_less) * pairing_vec(gvh, eh.v_less)
    den = dual_pairing(eg.v_plus, eh.v_less) * pairing_vec(gvh, eg.v_less)
    lcr = math.log(num / den)
    upper = constants.c2 * (cg.kappa_gap**p / epsilon ** (2 * p) + ch.kappa_gap / epsilon)
    _verify("|defect + log cross-ratio|", abs(defect + lcr), upper)

    reasons = []
    if proj_distance(ch.x_M, eg.v_plus) == 0.0:
        reasons.append("X^M_h = V+_g")
    pi = projection_onto_hyperplane(eg)
    w = g.entries @ (pi @ ch.x_M.rep)
    if np.linalg.norm(w) == 0 or pairing_vec(w, ch.y_m) < 2 * epsilon:
        reasons.append("delta(g pi_g X^M_h, Y^m_h) < 2 epsilon")
    if proj_distance(cg.x_M, ch.x_M) < 2 * epsilon:
        reasons.append("d(X^M_g, X^M_h) < 2 epsilon")
    if ch.kappa_gap * cg.kappa[0] > 0.5 * epsilon**3:
        reasons.append("kappa_12(h) kappa_1(g) > epsilon^3 / 2")
    if reasons:
        return FghDefect(defect, lcr, upper, None, False, "; ".join(reasons))
    d = g.dim
    lo = epsilon**3 / (constants.c3 * cg.kappa[0] ** d)
    hi = constants.c3 * cg.kappa_gap / epsilon**5
    _verify_lower("|log cross-ratio| lower", abs(lcr), lo)
    _verify("|log cross-ratio| upper", abs(lcr), hi)
    return FghDefect(defect, lcr, upper, lo, True)


# ---------------------------------------------------------------------------
# generators of admissible inputs and constant calibration


def _sample_with_axes(rng, kappa: np.ndarray, min_pairing: float, fixed_x=None, fixed_y=None):
    d = kappa.size
    for _ in range(10_000):
        k = random_orthogonal(rng, d)
        l = random_orthogonal(rng, d)
        if abs(float(l[0] @ k[:, 0])) >= min_pairing:
            return GroupElement(k @ np.diag(kappa) @ l)
    raise RuntimeError("could not sample transversal axes")


def kappa_profile(rng: np.random.Generator, d: int, gap: float) -> np.ndarray:
    """Singular values with kappa_2/kappa_1 = gap and product one."""
    if d == 2:
        k1 = gap**-0.5
        return np.array([k1, k1 * gap])
    # spread the remaining singular values below kappa_2
    rest = np.sort(rng.uniform(0.0, 1.0, d - 2))[::-1]
    # kappa_i = kappa_2 * exp(-s * rest_i) for i >= 3, s >= 0
    s = rng.uniform(0.0, 2.0)
    logs_rel = np.concatenate([[0.0, math.log(gap)], math.log(gap) - s * rest])
    k1 = math.exp(-logs_rel.sum() / d)
    return k1 * np.exp(logs_rel)


def random_admissible(rng: np.random.Generator, d: int, epsilon: float, power: int = 3, spread: float = 1e-3) -> GroupElement:
    """Random g with kappa_12(g) log-uniform in [spread eps^power, eps^power]
    and delta(X^M, Y^m) >= 2 eps."""
    top = epsilon**power
    gap = math.exp(rng.uniform(math.log(spread * top), math.log(top)))
    return _sample_with_axes(rng, kappa_profile(rng, d, gap), 2 * epsilon)


def random_transversal_pair(rng, d: int, epsilon: float, power: int = 4, spread: float = 1e-3):
    for _ in range(10_000):
        g = random_admissible(rng, d, epsilon, power, spread)
        h = random_admissible(rng, d, epsilon, power, spread)
        cg, ch = cartan_decompose(g), cartan_decompose(h)
        if dual_pairing(cg.x_M, ch.y_m) >= 2 * epsilon and dual_pairing(ch.x_M, cg.y_m) >= 2 * epsilon:
            return g, h
    raise RuntimeError("could not sample a transversal pair")


def calibrate_constants(rng: np.random.Generator, d: int, count: int, epsilon: float | None = None) -> dict:
    """Smallest c2 (two-element and fgh estimates) and c3 making every
    sampled instance pass. Returns the ratios actually needed."""
    eps = epsilon if epsilon is not None else DEFAULT_CONSTANTS.c1
    loose = LemmaConstants(c1=eps, c2=math.inf, c3=math.inf)
    c2_pair = 0.0
    c2_fgh = 0.0
    c3 = 0.0
    for _ in range(count):
        g, h = random_transversal_pair(rng, d, eps, 4)
        r = spectral_radius_defect(g, h, eps, loose)
        scale = (cartan_decompose(g).kappa_gap + cartan_decompose(h).kappa_gap) / eps**3
        c2_pair = max(c2_pair, abs(r.defect - r.transversality_term) / scale)
        g5, h3 = random_fgh_inputs(rng, d, eps, second_part=bool(_ % 2))
        f = g5**1
        out = fgh_defect(f, g5, h3, eps, 1, loose)
        cg, ch = cartan_decompose(g5), cartan_decompose(h3)
        scale = cg.kappa_gap / eps**2 + ch.kappa_gap / eps
        c2_fgh = max(c2_fgh, abs(out.defect + out.log_cross_ratio) / scale)
        if out.second_part:
            lo = eps**3 / cg.kappa[0] ** d
            hi = cg.kappa_gap / eps**5
            c3 = max(c3, lo / abs(out.log_cross_ratio), abs(out.log_cross_ratio) / hi)
    return {"c2_pair": c2_pair, "c2_fgh": c2_fgh, "c3": c3, "epsilon": eps, "count": count}


def random_fgh_inputs(rng, d: int, epsilon: float, second_part: bool = False):
    """g with kappa_12 <= eps^5 and h with kappa_12 <= eps^3, transversal.

    With ``second_part`` the gap of h is pushed below eps^3 / (2 kappa_1(g))
    and the extra separation conditions are enforced by rejection."""
    for _ in range(10_000):
        g = random_admissible(rng, d, epsilon, 5, 1e-2)
        cg = cartan_decompose(g)
        if second_part:
            top = 0.5 * epsilon**3 / cg.kappa[0]
            gap = math.exp(rng.uniform(math.log(1e-2 * top), math.log(top)))
            h = _sample_with_axes(rng, kappa_profile(rng, d, gap), 2 * epsilon)
        else:
            h = random_admissible(rng, d, epsilon, 3, 1e-2)
        ch = cartan_decompose(h)
        if dual_pairing(cg.x_M, ch.y_m) < 2 * epsilon or dual_pairing(ch.x_M, cg.y_m) < 2 * epsilon:
            continue
        if second_part:
            if proj_distance(cg.x_M, ch.x_M) < 2 * epsilon:
                continue
            eg = top_eigen(g, cg)
            w = g.entries @ (projection_onto_hyperplane(eg) @ ch.x_M.rep)
            if np.linalg.norm(w) == 0 or pairing_vec(w, ch.y_m) < 2 * epsilon:
                continue
        return g, h
    raise RuntimeError("could not sample fgh inputs")


# ---------------------------------------------------------------------------
# randomized lemma suite

LEMMAS = (
    "certify_proximal",
    "product_bounds",
    "contraction_bound",
    "spectral_radius_defect",
    "power_neighborhood_bounds",
    "fgh_defect",
)


def near_power(rng, g: GroupElement, p: int, radius: float) -> GroupElement:
    """f = g^p exp(X) with X traceless and |g^p - f| <= radius / 2."""
    d = g.dim
    gp = np.linalg.matrix_power(g.entries, p)
    X = rng.standard_normal((d, d))
    X -= np.trace(X) / d * np.eye(d)
    X *= 0.25 * radius / (np.linalg.norm(gp, 2) * np.linalg.norm(X, 2))
    return GroupElement(gp @ expm(X))


def _transversal_point(rng, phi: DualProjectivePoint, epsilon: float) -> ProjectivePoint:
    for _ in range(10_000):
        X = ProjectivePoint(random_unit_vectors(rng, 1, phi.rep.size)[0])
        if dual_pairing(X, phi) >= 2 * epsilon:
            return X
    raise RuntimeError("could not sample a point transversal to V<")


def lemma_instance(name: str, rng: np.random.Generator, d: int, epsilon: float) -> None:
    """Draw one admissible input for ``name`` and run the checked operation."""
    if name == "certify_proximal":
        certify_proximal(random_admissible(rng, d, epsilon, 3), epsilon)
    elif name == "product_bounds":
        g, h = random_transversal_pair(rng, d, epsilon, 3)
        product_bounds([g, h], epsilon)
    elif name == "contraction_bound":
        g = random_admissible(rng, d, epsilon, 4)
        v_less = top_eigen(g).v_less
        contraction_bound(g, epsilon, _transversal_point(rng, v_less, epsilon), _transversal_point(rng, v_less, epsilon))
    elif name == "spectral_radius_defect":
        g, h = random_transversal_pair(rng, d, epsilon, 4)
        spectral_radius_defect(g, h, epsilon)
    elif name == "power_neighborhood_bounds":
        g = random_admissible(rng, d, epsilon, 3)
        p = int(rng.integers(1, 3))
        gap = cartan_decompose(g).kappa_gap
        power_neighborhood_bounds(g, p, epsilon, near_power(rng, g, p, epsilon**2 * (gap / epsilon**2) ** p))
    elif name == "fgh_defect":
        g, h = random_fgh_inputs(rng, d, epsilon, second_part=bool(rng.integers(2)))
        p = int(rng.integers(1, 3))
        gap = cartan_decompose(g).kappa_gap
        fgh_defect(near_power(rng, g, p, epsilon**2 * (gap / epsilon) ** p), g, h, epsilon, p)
    else:
        raise ValueError(f"unknown lemma {name!r}")


@dataclass(frozen=True)
class LemmaSuiteRow:
    lemma: str
    dim: int
    count: int
    violations: int
    rejected: int


def lemma_suite(count: int, seed: int, dims: Sequence[int] = (2, 3), epsilon: float = DEFAULT_CONSTANTS.c1) -> list[LemmaSuiteRow]:
    """Run every checked inequality on ``count`` random admissible inputs
    per lemma and dimension. A violation is a raised BoundViolation; a
    rejection is an input the generator produced but a precondition refused."""
    rows = []
    for d in dims:
        for i, name in enumerate(LEMMAS):
            rng = np.random.default_rng([seed, d, i])
            bad = rej = 0
            for _ in range(count):
                try:
                    lemma_instance(name, rng, d, epsilon)
                except BoundViolation as exc:
                    log.warning("%s d=%d: %s", name, d, exc)
                    bad += 1
                except (PreconditionError, EigenError) as exc:
                    log.debug("%s d=%d rejected: %s", name, d, exc)
                    rej += 1
            rows.append(LemmaSuiteRow(name, d, count, bad, rej))
    return rows
