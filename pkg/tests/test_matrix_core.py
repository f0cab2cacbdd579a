import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from renewal_lab.errors import DimensionError, PreconditionError
from renewal_lab.matrix_core import (
    DualProjectivePoint,
    GroupElement,
    ProjectivePoint,
    act,
    cartan_decompose,
    canonical_sign,
    dual_pairing,
    proj_distance,
    random_orthogonal,
    random_unit_vectors,
    rotation,
    sigma,
    wedge_norm,
)

SQ5 = math.sqrt(5.0)
G = [[2.0, 1.0], [1.0, 1.0]]


def random_sl(rng, d, spread=2.0):
    k = random_orthogonal(rng, d)
    l = random_orthogonal(rng, d)
    logs = rng.uniform(-spread, spread, d)
    logs -= logs.mean()
    return GroupElement(k @ np.diag(np.exp(logs)) @ l)


seeds = st.integers(0, 2**32 - 1)
dims = st.sampled_from([2, 3, 4])


# --- construction ---------------------------------------------------------


def test_rejects_non_square_and_bad_det():
    with pytest.raises(DimensionError):
        GroupElement(np.ones((2, 3)))
    with pytest.raises(PreconditionError):
        GroupElement(np.diag([2.0, 2.0]))
    with pytest.raises(PreconditionError):
        GroupElement(np.diag([-1.0, 1.0]))


def test_small_det_drift_is_renormalized():
    g = GroupElement(np.diag([2.0, 0.5 * (1 + 5e-5)]))
    assert abs(np.linalg.det(g.entries) - 1) < 1e-12


def test_large_norm_element_accepted():
    rng = np.random.default_rng(0)
    k, l = random_orthogonal(rng, 2), random_orthogonal(rng, 2)
    g = GroupElement(k @ np.diag([8192.0, 1 / 8192.0]) @ l)
    assert g.norm == pytest.approx(8192.0, rel=1e-12)


# --- spec examples --------------------------------------------------------


def test_cartan_identity_degenerate():
    c = cartan_decompose(GroupElement.identity(2))
    assert np.allclose(c.kappa, [1, 1])
    assert c.kappa_gap == 1.0
    assert c.degenerate


def test_cartan_diagonal():
    c = cartan_decompose(GroupElement(np.diag([2.0, 0.5])))
    assert np.allclose(c.kappa, [2, 0.5])
    assert c.kappa_gap == pytest.approx(0.25)
    assert np.allclose(c.x_M.rep, [1, 0])
    assert np.allclose(c.y_m.rep, [1, 0])
    assert not c.degenerate


def test_cartan_golden_oracle():
    # oracle: square roots of the eigenvalues of g^T g, g symmetric here
    g = np.array(G)
    ev = np.sqrt(np.sort(np.linalg.eigvalsh(g.T @ g))[::-1])
    c = cartan_decompose(GroupElement(g))
    assert np.allclose(ev, [(3 + SQ5) / 2, (3 - SQ5) / 2], atol=1e-12)
    assert np.allclose(c.kappa, ev, atol=1e-10)


def test_proj_distance_examples():
    e1, e2 = ProjectivePoint([1, 0]), ProjectivePoint([0, 1])
    assert proj_distance(e1, e1) == 0
    assert proj_distance(e1, e2) == 1
    x, y = np.array([1.0, 0.0]), np.array([1.0, 1.0]) / math.sqrt(2)
    direct = abs(x[0] * y[1] - x[1] * y[0])
    assert proj_distance(ProjectivePoint(x), ProjectivePoint(y)) == pytest.approx(direct, abs=1e-15)
    assert direct == pytest.approx(1 / math.sqrt(2))


def test_dual_pairing_examples():
    e1 = ProjectivePoint([1, 0])
    assert dual_pairing(e1, DualProjectivePoint([1, 0])) == 1
    assert dual_pairing(e1, DualProjectivePoint([0, 1])) == 0
    assert dual_pairing(ProjectivePoint([1, 1]), DualProjectivePoint([1, 0])) == pytest.approx(1 / math.sqrt(2))


def test_sigma_examples():
    X = ProjectivePoint([0.3, 0.7])
    assert sigma(GroupElement.identity(2), X) == 0.0
    assert sigma(GroupElement(np.diag([2.0, 0.5])), ProjectivePoint([1, 0])) == pytest.approx(math.log(2))
    assert sigma(GroupElement(G), ProjectivePoint([1, 0])) == pytest.approx(math.log(SQ5))


def test_wedge_norm_examples():
    assert wedge_norm(GroupElement(np.diag([3.0, 1.0, 1 / 3])), 3) == 1.0
    assert wedge_norm(GroupElement(np.diag([3.0, 1.0, 1 / 3])), 2) == pytest.approx(3.0)
    # top singular value from the g^T g oracle; it is (3 + sqrt5)/2 itself
    g = np.array(G)
    oracle = math.sqrt(np.linalg.eigvalsh(g.T @ g).max())
    assert wedge_norm(GroupElement(g), 1) == pytest.approx(oracle, rel=1e-12)
    assert oracle == pytest.approx((3 + SQ5) / 2, rel=1e-12)
    with pytest.raises(DimensionError):
        wedge_norm(GroupElement(g), 3)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        proj_distance(ProjectivePoint([1, 0]), ProjectivePoint([1, 0, 0]))
    with pytest.raises(DimensionError):
        sigma(GroupElement.identity(3), ProjectivePoint([1, 0]))


def test_canonical_sign():
    assert np.array_equal(canonical_sign(np.array([0.2, -0.9])), [-0.2, 0.9])
    assert ProjectivePoint([1, -2]) == ProjectivePoint([-1, 2])


def test_rotation_is_isometry():
    g = GroupElement(rotation(0.7))
    X = ProjectivePoint([0.4, -1.3])
    assert sigma(g, X) == pytest.approx(0.0, abs=1e-15)


# --- invariants -----------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(seeds, dims)
def test_cocycle_identity(seed, d):
    rng = np.random.default_rng(seed)
    g1, g2 = random_sl(rng, d), random_sl(rng, d)
    X = ProjectivePoint(random_unit_vectors(rng, 1, d)[0])
    lhs = sigma(g2 @ g1, X)
    rhs = sigma(g2, act(g1, X)) + sigma(g1, X)
    assert abs(lhs - rhs) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(seeds, dims)
def test_lipschitz_action(seed, d):
    rng = np.random.default_rng(seed)
    g = random_sl(rng, d)
    X, Y = (ProjectivePoint(v) for v in random_unit_vectors(rng, 2, d))
    assert proj_distance(act(g, X), act(g, Y)) <= g.norm ** (2 * d) * proj_distance(X, Y) * (1 + 1e-12) + 1e-15


@settings(max_examples=60, deadline=None)
@given(seeds, dims)
def test_cartan_consistency(seed, d):
    g = random_sl(np.random.default_rng(seed), d, spread=4.0)
    c = cartan_decompose(g)
    assert np.prod(c.kappa) == pytest.approx(1.0, rel=1e-8)
    assert c.kappa[0] == pytest.approx(np.linalg.norm(g.entries, 2), rel=1e-8)
    assert wedge_norm(g, 2) == pytest.approx(c.kappa[0] * c.kappa[1], rel=1e-8)


@settings(max_examples=60, deadline=None)
@given(seeds, dims)
def test_proximality_sandwich(seed, d):
    rng = np.random.default_rng(seed)
    g = random_sl(rng, d, spread=3.0)
    c = cartan_decompose(g)
    x = random_unit_vectors(rng, 1, d)[0]
    X = ProjectivePoint(x)
    delta = dual_pairing(X, c.y_m)
    ratio = np.linalg.norm(g.entries @ x) / g.norm
    assert delta - 1e-9 <= ratio <= delta + c.kappa_gap + 1e-9
    assert proj_distance(act(g, X), c.x_M) * delta <= c.kappa_gap + 1e-9


def test_invariants_at_scale():
    # the quantified form: 10^4 draws, one vectorized pass per invariant
    rng = np.random.default_rng(7)
    worst_cocycle = worst_lip = 0.0
    for _ in range(10_000):
        d = int(rng.integers(2, 4))
        g1, g2 = random_sl(rng, d), random_sl(rng, d)
        X, Y = (ProjectivePoint(v) for v in random_unit_vectors(rng, 2, d))
        worst_cocycle = max(worst_cocycle, abs(sigma(g2 @ g1, X) - sigma(g2, act(g1, X)) - sigma(g1, X)))
        dxy = proj_distance(X, Y)
        if dxy > 0:
            worst_lip = max(worst_lip, proj_distance(act(g1, X), act(g1, Y)) / (g1.norm ** (2 * d) * dxy))
    assert worst_cocycle <= 1e-9
    assert worst_lip <= 1 + 1e-12
