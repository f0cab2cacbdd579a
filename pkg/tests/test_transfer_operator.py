import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from renewal_lab.errors import DegenerateSpectrumError, OutOfDomainError, SingularError
from renewal_lab.transfer_operator import (
    OperatorFamily,
    StateGrid,
    UOperator,
    build_operator,
    contraction_coefficients,
    doeblin_fortet_fit,
    dolgopyat_probe,
    drift_check,
    holder_norm,
    holder_seminorm,
    isotypic_split,
    parity_defect,
    projective_histogram,
    regular_grid_points,
    resolvent_apply,
    resolvent_scan,
    rough_probes,
    smooth_probes,
    spectral_data,
    sup_norm,
    t_norm,
    total_variation,
)
from renewal_lab.walk_engine import (
    lazy_measure,
    lyapunov_estimate,
    measure,
    named_measure,
    stationary_measure_estimate,
)

CONE = named_measure("cone2")
G256 = StateGrid.circle(256)
G512 = StateGrid.circle(512)


@pytest.fixture(scope="module")
def cone_family():
    return OperatorFamily(CONE, G256)


@pytest.fixture(scope="module")
def cone_spectral(cone_family):
    return spectral_data(cone_family(0))


# --- grid -----------------------------------------------------------------


@pytest.mark.parametrize("grid", [StateGrid.circle(64), StateGrid.circle(64, size_A=2), StateGrid.sphere2(2)])
def test_grid_antipode_involution(grid):
    anti = grid.antipode
    idx = np.arange(grid.size)
    assert np.all(anti != idx)
    assert np.array_equal(anti[anti], idx)
    assert np.allclose(grid.points[anti], -grid.points)


def test_grid_coverage():
    for grid in (StateGrid.circle(100), StateGrid.sphere2(2)):
        rng = np.random.default_rng(0)
        y = rng.standard_normal((2000, grid.dim))
        y /= np.linalg.norm(y, axis=1, keepdims=True)
        nearest = np.min(np.linalg.norm(y[:, None, :] - grid.sphere[None], axis=2), axis=1)
        assert nearest.max() <= grid.cell_radius + 1e-12


# --- build ----------------------------------------------------------------


def test_identity_operator():
    rho = measure([np.eye(2)])
    for z in (0, 0.1 + 2j, -0.05j):
        P = build_operator(rho, z, G256)
        assert np.abs(P.dense - np.eye(G256.size)).max() <= 1e-15


def test_stochastic_at_zero():
    P = build_operator(CONE, 0, G256)
    m = P.dense
    assert np.abs(m.sum(axis=1) - 1).max() <= 1e-10
    assert m.min() >= 0


def test_rotation_modulus_one():
    P = build_operator(named_measure("rotation"), 3j, G256)
    assert np.abs(P.dense).sum(axis=1).max() == pytest.approx(1.0, abs=1e-12)


# --- norms ----------------------------------------------------------------


def test_holder_constant_zero():
    assert holder_seminorm(np.full(G256.size, 3.0), G256) == 0.0


def test_holder_spike():
    gamma = 0.25
    f = np.zeros(G256.size)
    f[10] = 1.0
    delta = G256.distances[10, 11]
    assert holder_seminorm(f, G256, gamma) >= delta ** (-gamma) * (1 - 1e-12)


def test_holder_first_coordinate_lipschitz():
    # chordal metric on the sphere; the Lipschitz constant of x -> x_1 is 1
    f = G512.points[:, 0]
    assert holder_seminorm(f, G512, 1.0) == pytest.approx(1.0, abs=2 * G512.cell_radius)


def test_t_norm_constant():
    assert t_norm(np.ones(G256.size), 4.0, 1.5, G256) == 1.0


def test_t_norm_arithmetic():
    f = np.zeros(G256.size)
    f[0] = 1.0
    t, gamma = 2.0, 1.0
    # pick C2 so that m(f) = 4 C2 t with sup 1
    C2 = holder_seminorm(f, G256, gamma) / (4 * t)
    assert C2 >= 1
    assert t_norm(f, t, C2, G256, gamma) == pytest.approx(2.0, rel=1e-14)


def test_t_norm_domain():
    with pytest.raises(OutOfDomainError):
        t_norm(np.ones(G256.size), 1.0, 2.0, G256)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(2, 64), st.floats(1, 10))
def test_t_norm_sandwich(seed, t, C2):
    f = smooth_probes(G256, 1, seed)[0]
    tn = t_norm(f, t, C2, G256)
    hn = holder_norm(f, G256)
    assert sup_norm(f) <= tn + 1e-15
    assert tn <= hn + 1e-12
    assert hn <= 2 * C2 * t * tn * (1 + 1e-12) + tn


# --- spectral data --------------------------------------------------------


def test_identity_degenerate():
    with pytest.raises(DegenerateSpectrumError):
        spectral_data(build_operator(measure([np.eye(2)]), 0, G256))


def test_cone_two_classes(cone_spectral):
    sd = cone_spectral
    assert sd.r == 2
    assert np.abs(sd.invariant[0] + sd.invariant[1] - 1).max() <= 1e-8
    assert sd.gap > 0.05
    for nu in sd.stationary:
        assert nu.sum() == pytest.approx(1.0, abs=1e-12)
        assert nu.min() >= -1e-15


def test_hyperbolic_rotate_single_class():
    sd = spectral_data(build_operator(named_measure("hyperbolic-rotate"), 0, G256))
    assert sd.r == 1
    assert np.allclose(sd.invariant[0], 1.0)


def test_hyperbolic_rotate_no_invariant_cone():
    # orbit oracle: iterating images of the positive cone reaches its complement
    rho = named_measure("hyperbolic-rotate")
    v = np.array([[1.0, 1.0]])
    seen_neg = False
    for m in rho.matrices:
        w = v @ m.T
        seen_neg |= bool(np.any(w[:, 0] * w[:, 1] < 0)) or bool(np.all(w < 0))
    assert seen_neg


def test_stationary_matches_empirical(cone_spectral):
    nu = stationary_measure_estimate(CONE, samples=2**15, seed=0)
    h = projective_histogram(G256, cone_spectral.stationary[0], 16)
    assert total_variation(h, nu.coarse(16)) <= 0.05


# --- resolvent ------------------------------------------------------------


def test_resolvent_zero(cone_family):
    g = resolvent_apply(cone_family(1j), np.zeros(G256.size))
    assert np.all(g == 0)


def test_resolvent_neumann(cone_family):
    P = cone_family(0.1 + 1j)
    f = smooth_probes(G256, 1, 0)[0]
    g = resolvent_apply(P, f)
    acc = np.zeros_like(f)
    v = f.copy()
    for _ in range(600):
        acc += v
        v = P.apply(v)
    assert np.abs(acc - g).max() <= 1e-6


def test_resolvent_singular_at_zero(cone_family):
    with pytest.raises(SingularError):
        resolvent_apply(cone_family(0), np.ones(G256.size))


def test_rotation_scan_singular():
    with pytest.raises(SingularError) as info:
        resolvent_scan(named_measure("rotation"), G256, 0.25, [2.0, 4.0])
    assert info.value.t == 2.0


def test_lattice_scan_singular_at_resonance():
    t = 2 * math.pi / math.log(2)
    with pytest.raises(SingularError) as info:
        resolvent_scan(named_measure("diag-lattice"), G256, 0.25, [t])
    assert info.value.t == pytest.approx(t)


def test_cone_scan_and_refinement():
    ts = [2.0, 8.0, 32.0]
    a = resolvent_scan(CONE, G256, 0.25, ts)
    b = resolvent_scan(CONE, G512, 0.25, ts)
    assert np.all(np.isfinite(a.norms))
    assert np.all(a.residuals <= 1e-8)
    assert math.isfinite(a.L_hat)
    assert np.all(np.abs(b.norms / a.norms - 1) <= 0.25)


# --- U(z) -----------------------------------------------------------------


def test_pole_cancellation(cone_family, cone_spectral):
    U = UOperator(cone_family, cone_spectral)
    for p in cone_spectral.invariant:
        u = [np.abs(U.apply(1j * t, p)).max() for t in (1e-1, 1e-2, 1e-3, 1e-4)]
        r = [np.abs(resolvent_apply(cone_family(1j * t), p)).max() for t in (1e-1, 1e-4)]
        assert max(u) <= 3 * min(u)
        assert r[1] >= 10 * r[0]


def test_U_equals_resolvent_on_kernel_of_N0(cone_family, cone_spectral):
    U = UOperator(cone_family, cone_spectral)
    f = smooth_probes(G256, 1, 4)[0]
    f0 = f - cone_spectral.apply_N0(f)
    assert np.abs(cone_spectral.apply_N0(f0)).max() <= 1e-12
    diff = U.apply(2j, f0) - resolvent_apply(cone_family(2j), f0)
    assert np.abs(diff).max() <= 1e-10


def test_U_bound_from_scan(cone_family, cone_spectral):
    scan = resolvent_scan(CONE, G256, 0.25, [2, 4, 8, 16, 32, 64], family=cone_family)
    U = UOperator(cone_family, cone_spectral)
    worst = max(holder_norm(U.apply(10j, f), G256) / holder_norm(f, G256) for f in smooth_probes(G256, 20, 3))
    assert worst <= scan.C_hat * 11 ** (scan.L_hat + 1)


# --- parity ---------------------------------------------------------------


def test_isotypic_split_cases():
    f = G256.points[:, 0]
    even, odd = isotypic_split(f, G256)
    # antipodal grid coordinates agree up to one ulp
    assert np.abs(even).max() <= 1e-15
    assert np.abs(odd - f).max() <= 1e-15
    e = G256.points[:, 0] ** 2
    assert np.abs(isotypic_split(e, G256)[1]).max() <= 1e-15


def test_parity_equivariance(cone_family):
    f = np.random.default_rng(1).standard_normal(G256.size)
    assert parity_defect(cone_family(2j), f) <= 1e-10


# --- Dolgopyat ------------------------------------------------------------


def test_dolgopyat_cone_found():
    lz = OperatorFamily(lazy_measure(CONE), G256)
    nu = stationary_measure_estimate(CONE, samples=2**14, seed=0)
    pts = regular_grid_points(G256, nu, 0.05, 1.0)
    res = dolgopyat_probe(lz(10j), np.ones(G256.size), 10, 0.5, 2.0, pts)
    assert res.found
    assert res.n is not None and res.n <= res.n_max
    assert np.all(res.max_modulus <= 1 + 1e-12)


def test_dolgopyat_rotation_not_found():
    rot = named_measure("rotation")
    lz = OperatorFamily(lazy_measure(rot), G512)
    nu = stationary_measure_estimate(rot, samples=2**14, seed=0)
    pts = regular_grid_points(G512, nu, 0.05, 2.0)
    res = dolgopyat_probe(lz(10j), np.ones(G512.size), 10, 0.5, 2.0, pts)
    assert not res.found
    assert res.defects.max() == 0.0
    assert np.all(res.max_modulus <= 1 + 1e-12)


# --- drift ----------------------------------------------------------------


def test_drift_s_zero(cone_family):
    table = drift_check(CONE, G256, [0.0], [1, 5, 10], family=cone_family)
    for _, _, sup, e1 in table.rows:
        assert sup == pytest.approx(1.0, abs=1e-10)
        assert e1 == pytest.approx(1.0, abs=1e-10)


def test_drift_diagonal_e1_cell():
    table = drift_check(named_measure("diag-lattice"), G256, [0.1], [10, 20, 40])
    for s, n, _, e1 in table.rows:
        assert e1 == pytest.approx(math.exp(-s * n * math.log(2)), rel=1e-10)


def test_drift_cone_slope(cone_family):
    lam = lyapunov_estimate(CONE, 500, 500, seed=0).birkhoff_lambda
    table = drift_check(CONE, G256, [0.05], [10, 20, 40], family=cone_family)
    assert table.rates[0.05] == pytest.approx(lam, rel=0.3)


# --- invariants -----------------------------------------------------------


@pytest.mark.parametrize("n", [64, 128, 256, 512, 1000])
def test_lazy_operator_identity(n):
    grid = StateGrid.circle(n)
    fam, lz = OperatorFamily(CONE, grid), OperatorFamily(lazy_measure(CONE), grid)
    eye = np.eye(grid.size)
    for z in (0, 0.05, 3j, 0.1 - 7j, -0.02 + 1j):
        lhs = eye - lz(z).dense
        rhs = 0.5 * (eye - fam(z).dense)
        assert np.abs(lhs - rhs).max() <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-64, 64))
def test_modulus_bound(seed, t):
    P = OperatorFamily(CONE, StateGrid.circle(64))(1j * t)
    f = np.random.default_rng(seed).standard_normal(64) + 1j * np.random.default_rng(seed + 1).standard_normal(64)
    base = sup_norm(f)
    v = f
    for _ in range(64):
        v = P.apply(v)
        assert sup_norm(v) <= base * (1 + 1e-12)


def test_doeblin_fortet_and_t_norm_iterates(cone_family):
    train = np.vstack([smooth_probes(G256, 6, 1), rough_probes(G256, 6, 1)])
    test = np.vstack([smooth_probes(G256, 6, 2), rough_probes(G256, 6, 2)])
    fit = doeblin_fortet_fit(cone_family, [2, 8, 32], [1, 2, 4, 8, 16, 32], train)
    assert fit.delta_hat > 0
    C2 = fit.C_hat
    worst = 0.0
    for t in (2.0, 8.0, 32.0, 64.0):
        P = cone_family(1j * t)
        for f in test:
            nf = t_norm(f, t, C2, G256)
            v = f
            for n in range(1, 33):
                v = P.apply(v)
                worst = max(worst, t_norm(v, t, C2, G256) / nf)
                m = holder_seminorm(v, G256)
                bound = C2 * (math.exp(-fit.delta_hat * n) * holder_seminorm(f, G256) + (1 + t) * sup_norm(f))
                assert m <= 2 * bound
    assert worst <= 2 * C2


def test_contraction_coefficients():
    u = contraction_coefficients(CONE, [1, 2, 3, 4, 6], 0.25)
    assert min(u.values()) < 1
    for m in u:
        for n in u:
            if m + n in u:
                assert u[m + n] <= u[m] * u[n] * (1 + 1e-9)
