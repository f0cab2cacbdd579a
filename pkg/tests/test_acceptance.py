"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The CLI experiments run once per session with workers = 1 (seed 0, default
knobs); criterion 13 reruns them with workers = 4 and compares CSV bytes.
Tolerances and time limits are pinned here.
"""

import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from renewal_lab import cli
from renewal_lab import renewal as rn
from renewal_lab.errors import SingularError
from renewal_lab.matrix_core import GroupElement, ProjectivePoint, act, proj_distance, random_unit_vectors, sigma
from renewal_lab.transfer_operator import OperatorFamily, StateGrid, UOperator, resolvent_apply, spectral_data
from renewal_lab.walk_engine import lazy_measure, named_measure

SEED = 0
LN2 = math.log(2)
CONE = named_measure("cone2")
DIAG = named_measure("diag-lattice")
LATTICE_T = [2 * math.pi * k / LN2 for k in (1, 2, 3)]
LATTICE_B = [2 * math.pi * k / LN2 for k in range(1, 12)]  # all of them in [2, 100]

# name -> (subcommand, measure, params)
RUNS = {
    "lyapunov": ("lyapunov", "cone2", {}),
    "stationary-cone2": ("stationary", "cone2", {}),
    "stationary-hyperbolic-rotate": ("stationary", "hyperbolic-rotate", {}),
    "proximal-cert": ("proximal-cert", "cone2", {}),
    "resolvent-1024": ("resolvent-scan", "cone2", {}),
    "resolvent-2048": ("resolvent-scan", "cone2", {"grid_size": 2048}),
    **{
        f"resolvent-lattice-{k}": ("resolvent-scan", "diag-lattice", {"t_values": repr(t), "grid_size": 256})
        for k, t in enumerate(LATTICE_T, 1)
    },
    "fourier-check": ("fourier-check", "cone2", {}),
    "renewal-rate": ("renewal-rate", "cone2", {}),
    "diophantine-cone2": ("diophantine-scan", "cone2", {}),
    "diophantine-lattice": ("diophantine-scan", "diag-lattice", {"b_values": " ".join(repr(b) for b in LATTICE_B)}),
    "tauberian-check": ("tauberian-check", "cone2", {}),
}


def _run_all(root: Path, workers: int) -> dict:
    out = {}
    for name, (sub, meas, params) in RUNS.items():
        d = root / name
        d.mkdir(parents=True)
        body = "".join(f"{k} = {v}\n" for k, v in params.items())
        (d / "config.ini").write_text(f"[experiment]\nname = {name}\nseed = {SEED}\n\n[measure]\nname = {meas}\n\n[params]\n{body}")
        status = cli.run(sub, str(d / "config.ini"), out=str(d), workers=workers)
        meta = json.loads((d / f"{sub}.meta.json").read_text())
        out[name] = {"status": status, "dir": d, "sub": sub, "meta": meta}
    return out


@pytest.fixture(scope="session")
def suite(tmp_path_factory):
    t0 = time.perf_counter()
    runs = _run_all(tmp_path_factory.mktemp("suite-w1"), 1)
    return runs, time.perf_counter() - t0


def _rows(run, summary=False):
    name = f"{run['sub']}.summary.csv" if summary else f"{run['sub']}.csv"
    with open(run["dir"] / name, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _summary(run) -> dict:
    return dict(_rows(run, summary=True)[1])


def _wall(run) -> float:
    return float(run["meta"]["wall_time_s"])


# ---------------------------------------------------------------------------


def test_criterion_01_lemma_suite(suite, report):
    run = suite[0]["proximal-cert"]
    _, rows = _rows(run)
    counts = {(r[0], r[1]): int(r[2]) for r in rows}
    violations = sum(int(r[3]) for r in rows)
    lemmas = {"certify_proximal", "product_bounds", "contraction_bound", "spectral_radius_defect", "power_neighborhood_bounds", "fgh_defect"}
    ok = (
        run["status"] == 0
        and violations == 0
        and {lem for lem, _ in counts} >= lemmas
        and {d for _, d in counts} == {"2", "3"}
        and min(counts.values()) >= 1000
        and _wall(run) <= 120
    )
    report(1, "lemma suite", ok, f"{len(counts)} (lemma, d) cells, min count {min(counts.values())}, violations {violations}, {_wall(run):.1f}s <= 120s")


def test_criterion_02_cocycle_lipschitz(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng([SEED, 2])
    worst_cocycle = worst_lip = 0.0
    for _ in range(10_000):
        d = int(rng.integers(2, 4))
        g1, g2 = (GroupElement(a) for a in _random_sl(rng, d, 2))
        X, Y = (ProjectivePoint(v) for v in random_unit_vectors(rng, 2, d))
        worst_cocycle = max(worst_cocycle, abs(sigma(g2 @ g1, X) - sigma(g2, act(g1, X)) - sigma(g1, X)))
        dxy = proj_distance(X, Y)
        if dxy > 0:
            worst_lip = max(worst_lip, proj_distance(act(g1, X), act(g1, Y)) / (g1.norm ** (2 * d) * dxy))
    wall = time.perf_counter() - t0
    ok = worst_cocycle <= 1e-9 and worst_lip <= 1 and wall <= 10
    report(2, "cocycle + Lipschitz", ok, f"cocycle defect {worst_cocycle:.2e} <= 1e-9, Lipschitz ratio {worst_lip:.4f} <= 1, {wall:.1f}s <= 10s")


def _random_sl(rng, d, count, spread=2.0):
    out = []
    for _ in range(count):
        k, _ = np.linalg.qr(rng.standard_normal((d, d)))
        l, _ = np.linalg.qr(rng.standard_normal((d, d)))
        k[:, 0] *= np.sign(np.linalg.det(k) * np.linalg.det(l))
        logs = rng.uniform(-spread, spread, d)
        out.append(k @ np.diag(np.exp(logs - logs.mean())) @ l)
    return out


def test_criterion_03_lazy_identity(report):
    t0 = time.perf_counter()
    worst = 0.0
    for n in (32, 64, 128, 256, 512):
        grid = StateGrid.circle(n)
        fam, lz = OperatorFamily(CONE, grid), OperatorFamily(lazy_measure(CONE), grid)
        eye = np.eye(grid.size)
        for z in (0, 0.05, 3j, 0.1 - 7j, -0.02 + 1j):
            worst = max(worst, np.abs((eye - lz(z).dense) - 0.5 * (eye - fam(z).dense)).max())
    wall = time.perf_counter() - t0
    ok = worst <= 1e-12 and wall <= 10
    report(3, "lazy-walk operator identity", ok, f"max defect {worst:.2e} <= 1e-12 on 5 grids x 5 z, {wall:.1f}s <= 10s")


def test_criterion_04_lyapunov(suite, report):
    run = suite[0]["lyapunov"]
    s = _summary(run)
    _, rows = _rows(run)
    diff_sigma = float(s["difference_in_sigma"])
    pos = min(float(s["positivity_sigma_norm_growth"]), float(s["positivity_sigma_birkhoff"]))
    sizes = {(int(r[3]), int(r[4])) for r in rows}
    ok = run["status"] == 0 and diff_sigma <= 3 and pos > 5 and sizes == {(1000, 1000)} and _wall(run) <= 60
    report(4, "Lyapunov cross-estimators", ok, f"|difference| = {diff_sigma:.2f} sigma <= 3, positivity {pos:.0f} sigma > 5, {_wall(run):.1f}s <= 60s")


def test_criterion_05_spectral_structure(suite, report):
    cone, rot = suite[0]["stationary-cone2"], suite[0]["stationary-hyperbolic-rotate"]
    sc, sr = _summary(cone), _summary(rot)
    wall = _wall(cone) + _wall(rot)
    ok = (
        cone["status"] == 0
        and rot["status"] == 0
        and int(sc["r"]) == 2
        and float(sc["invariant_sum_defect"]) <= 1e-8
        and float(sc["gap"]) > 0.05
        and int(sr["r"]) == 1
        and float(sc["tv_eigen_vs_empirical"]) <= 0.05
        and float(sr["tv_eigen_vs_empirical"]) <= 0.05
        and wall <= 120
    )
    detail = (
        f"cone2 r={sc['r']}, |p1+p2-1| {float(sc['invariant_sum_defect']):.1e} <= 1e-8, gap {float(sc['gap']):.3f} > 0.05, "
        f"TV {float(sc['tv_eigen_vs_empirical']):.4f}; hyperbolic-rotate r={sr['r']}, TV {float(sr['tv_eigen_vs_empirical']):.4f} <= 0.05; "
        f"{wall:.1f}s <= 120s"
    )
    report(5, "spectral structure", ok, detail)


def test_criterion_06_resolvent_scan(suite, report):
    runs = suite[0]
    coarse, fine = runs["resolvent-1024"], runs["resolvent-2048"]
    _, rc = _rows(coarse)
    _, rf = _rows(fine)
    ts = [float(r[0]) for r in rc]
    residual = max(float(r[2]) for r in rc + rf)
    change = max(abs(float(a[1]) - float(b[1])) / float(a[1]) for a, b in zip(rc, rf))
    L = float(_summary(coarse)["L_hat"])
    lattice = [runs[f"resolvent-lattice-{k}"] for k in (1, 2, 3)]
    singular_ok = all(
        r["status"] == SingularError.exit_code
        and r["meta"]["error_category"] == "singular"
        and abs(r["meta"]["singular_t"] - t) <= 1e-9 * t
        for r, t in zip(lattice, LATTICE_T)
    )
    wall = sum(_wall(r) for r in [coarse, fine, *lattice])
    ok = (
        coarse["status"] == 0
        and fine["status"] == 0
        and ts == [2, 4, 8, 16, 32, 64]
        and residual <= 1e-8
        and math.isfinite(L)
        and change <= 0.25
        and singular_ok
        and wall <= 300
    )
    detail = (
        f"max residual {residual:.1e} <= 1e-8, L_hat {L:.3f} finite, grid 1024->2048 change {change:.1%} <= 25%, "
        f"diag-lattice SingularError at k*2pi/ln2 k=1..3: {singular_ok}, {wall:.1f}s <= 300s"
    )
    report(6, "resolvent scan", ok, detail)


def test_criterion_07_pole_cancellation(report):
    t0 = time.perf_counter()
    fam = OperatorFamily(CONE, StateGrid.circle(1024))
    sd = spectral_data(fam(0))
    U = UOperator(fam, sd)
    spread, growth = 0.0, math.inf
    for p in sd.invariant:
        u = [np.abs(U.apply(1j * t, p)).max() for t in (1e-1, 1e-2, 1e-3, 1e-4)]
        r = [np.abs(resolvent_apply(fam(1j * t), p)).max() for t in (1e-1, 1e-4)]
        spread = max(spread, max(u) / min(u))
        growth = min(growth, r[1] / r[0])
    wall = time.perf_counter() - t0
    ok = spread <= 3 and growth >= 10 and wall <= 60
    report(7, "pole cancellation", ok, f"U(it)p_i spread x{spread:.3f} <= 3, resolvent growth x{growth:.0f} >= 10, {wall:.1f}s <= 60s")


def test_criterion_08_fourier_vs_mc(suite, report):
    run = suite[0]["fourier-check"]
    _, rows = _rows(run)
    worst = max(float(r[8]) / float(r[9]) for r in rows)

    t0 = time.perf_counter()
    grid = StateGrid.circle(256)
    fam = OperatorFamily(DIAG, grid)
    sd = spectral_data(fam(0), allow_degenerate=True, max_classes=8)
    F = rn.RegularFunction(
        lambda y, a, t: np.exp(-np.asarray(t) ** 2 / 2) * np.ones(len(y)),
        fourier=lambda y, a, xi: np.full(len(y), math.sqrt(2 * math.pi) * math.exp(-xi * xi / 2)),
    )
    ts = [-3.0, -1.0, 0.0, 0.7, 2.0]
    fg = rn.fourier_green(UOperator(fam, sd), sd, F, [(np.array([1.0, 0.0]), 0, t) for t in ts], xi_cutoff=8.0)
    # deterministic walk from e1: S_n = n ln 2
    oracle = [sum(math.exp(-((t + n * LN2) ** 2) / 2) for n in range(200)) for t in ts]
    exact = max(abs(v - o) for v, o in zip(fg.value, oracle))
    wall = _wall(run) + time.perf_counter() - t0
    ok = run["status"] == 0 and len(rows) == 5 and worst <= 1 and exact <= 1e-6 and wall <= 300
    report(8, "Fourier = Monte Carlo", ok, f"cone2 worst |diff|/allowed {worst:.3f} <= 1 at 5 points, diag oracle error {exact:.1e} <= 1e-6, {wall:.1f}s <= 300s")


def test_criterion_09_cone_vanishing(report):
    t0 = time.perf_counter()

    def fc(y, a, t):
        return np.maximum(0, np.minimum(y[:, 0], y[:, 1])) * np.exp(-np.asarray(t) ** 2 / 2)

    f = rn.OmegaFunction(fc, 0.25)
    ests = [rn.green_mc(CONE, f, x, 0, t, seed=SEED + j, n_walks=4096) for j, (x, t) in enumerate([([-1.0, -0.7], 0.0), ([-0.2, -1.0], -2.0), ([-1.0, -0.01], 1.0)])]
    wall = time.perf_counter() - t0
    ok = all(e.value == 0.0 and e.all_terms_zero for e in ests) and wall <= 30
    report(9, "cone vanishing", ok, f"values {[e.value for e in ests]}, every term zero: {all(e.all_terms_zero for e in ests)}, {wall:.1f}s <= 30s")


def test_criterion_10_renewal_rate(suite, report):
    run = suite[0]["renewal-rate"]
    s = _summary(run)
    _, rows = _rows(run)
    radii = sorted(float(r[0]) for r in rows)
    alpha, r2 = float(s["alpha_hat"]), float(s["r_squared"])
    monotone = s["monotone"] == "true"
    ok = (
        run["status"] == 0
        and radii == [2.0**-k for k in range(12, 1, -1)]
        and alpha > 0
        and r2 >= 0.8
        and monotone
        and _wall(run) <= 600
    )
    report(10, "renewal rate", ok, f"alpha_hat {alpha:.3f} > 0, r^2 {r2:.3f} >= 0.8, monotone {monotone}, {_wall(run):.1f}s <= 600s")


def test_criterion_11_diophantine(suite, report):
    cone, lat = suite[0]["diophantine-cone2"], suite[0]["diophantine-lattice"]
    _, rc = _rows(cone)
    _, rl = _rows(lat)
    b = [float(r[0]) for r in rc]
    min_scaled = min(float(r[3]) for r in rc)
    min_D = min(float(r[2]) for r in rc)
    lattice_D = max(float(r[2]) for r in rl)
    wall = _wall(cone) + _wall(lat)
    ok = (
        cone["status"] == 0
        and lat["status"] == 0
        and len(b) == 41
        and b[0] == 2
        and b[-1] == 100
        and min_scaled > 0
        and min_D > 0
        and len(rl) == len(LATTICE_B)
        and lattice_D <= 1e-10
        and wall <= 300
    )
    report(11, "Diophantine scan", ok, f"cone2 min |b|^4 D {min_scaled:.3g} > 0, min D {min_D:.3g} > 0 over 41 b; diag-lattice max D at 2pi k/ln2 {lattice_D:.1e} <= 1e-10; {wall:.1f}s <= 300s")


def test_criterion_12_regularization_tauberian(suite, report):
    run = suite[0]["tauberian-check"]
    _, rows = _rows(run)
    by = {(r[0], int(r[1])): (int(r[2]), float(r[3]), float(r[4])) for r in rows}
    reg = [by[("regularization", k)] for k in range(5)]
    tau = [by[("tauberian", k)] for k in range(1, 5)]
    psi = by[("psi-endpoints", 0)]
    ok = (
        run["status"] == 0
        and sum(c for c, _, _ in reg) == 100
        and all(w <= b for _, w, b in reg)
        and all(c == 100 and w <= 1 for c, w, _ in tau)
        and psi[1] <= 1e-10
        and _wall(run) <= 60
    )
    detail = (
        f"worst regularization ratio / C_k {max(w / b for _, w, b in reg):.3f} <= 1 over 100 functions, "
        f"tauberian worst |f|/bound {max(w for _, w, _ in tau):.3f} <= 1, psi endpoint error {psi[1]:.0e}, {_wall(run):.1f}s <= 60s"
    )
    report(12, "regularization and tauberian", ok, detail)


def test_criterion_13_determinism(suite, report, tmp_path):
    first, wall1 = suite
    t0 = time.perf_counter()
    second = _run_all(tmp_path, 4)
    wall2 = time.perf_counter() - t0
    differing = []
    for name, run in first.items():
        other = second[name]
        for suffix in (".csv", ".summary.csv"):
            p1, p2 = run["dir"] / f"{run['sub']}{suffix}", other["dir"] / f"{run['sub']}{suffix}"
            if p1.exists() != p2.exists() or (p1.exists() and p1.read_bytes() != p2.read_bytes()):
                differing.append(p1.name if name == run["sub"] else f"{name}/{p1.name}")
        if run["status"] != other["status"]:
            differing.append(f"{name} status")
    ok = not differing and wall2 <= 2 * wall1
    report(13, "determinism", ok, f"{len(first)} runs, workers 1 vs 4, differing files {differing or 'none'}, rerun {wall2:.0f}s <= 2 x {wall1:.0f}s")
