"""Experiment runner.

    renewal-lab SUBCOMMAND [--config PATH] [--seed N] [--out DIR]
                [--workers N] [--quiet] [--set KEY=VALUE ...]

Each subcommand reads its parameters from the ``[params]`` section of the
config (``--set`` overrides single keys) and writes

    <out>/<subcommand>.csv           main table
    <out>/<subcommand>.summary.csv   statistic,value pairs
    <out>/<subcommand>.meta.json     config echo, seed, input hash, wall time

Defaults reproduce the acceptance suite. Exit status is 0 on success and the
error's ``exit_code`` otherwise; the sidecar then records the error category.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import __version__
from . import config as cfgmod
from . import proximality, renewal, transfer_operator as to, walk_engine as we
from .errors import BoundViolation, ConfigError, RenewalLabError, SingularError

log = logging.getLogger("renewal_lab")


@dataclass
class Result:
    header: list[str]
    rows: list[list]
    summary: dict = field(default_factory=dict)
    error: RenewalLabError | None = None  # raised after the artifacts are written


# ---------------------------------------------------------------------------
# formatting


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if v is None:
        return ""
    return str(v)


def csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ---------------------------------------------------------------------------
# shared helpers


def _grid(cfg, rho) -> to.StateGrid:
    if rho.dim == 2:
        return to.StateGrid.circle(cfg.get_int("grid_size", 1024), rho.size_A)
    if rho.dim == 3:
        if rho.size_A != 1:
            raise ConfigError("d = 3 grids support a single A-point")
        return to.StateGrid.sphere2(cfg.get_int("sphere_level", 4))
    raise ConfigError(f"no transfer-operator grid for d = {rho.dim}")


def _vector(cfg, key, default):
    v = np.array(cfg.get_floats(key, default))
    if np.linalg.norm(v) == 0:
        raise ConfigError(f"{key!r} must be a nonzero vector")
    return v


# ---------------------------------------------------------------------------
# subcommands


def exp_lyapunov(cfg, workers):
    """Knobs: n_steps (1000), n_walks (1000), burn_in (100)."""
    rho = cfg.build_measure()
    est = we.lyapunov_estimate(
        rho, cfg.get_int("n_steps", 1000), cfg.get_int("n_walks", 1000), cfg.seed, workers, cfg.get_int("burn_in", 100)
    )
    rows = [
        ["norm-growth", est.lambda_rho, est.std_error, est.n_steps, est.n_walks],
        ["birkhoff", est.birkhoff_lambda, est.birkhoff_std_error, est.n_steps, est.n_walks],
    ]
    comb = math.hypot(est.std_error, est.birkhoff_std_error)
    diff = abs(est.lambda_rho - est.birkhoff_lambda)
    summary = {
        "difference": diff,
        "combined_std_error": comb,
        "difference_in_sigma": diff / comb if comb > 0 else (0.0 if diff == 0 else math.inf),
        "positivity_sigma_norm_growth": est.lambda_rho / est.std_error if est.std_error > 0 else math.inf,
        "positivity_sigma_birkhoff": est.birkhoff_lambda / est.birkhoff_std_error if est.birkhoff_std_error > 0 else math.inf,
    }
    return Result(["estimator", "lambda", "std_error", "n_steps", "n_walks"], rows, summary)


def exp_stationary(cfg, workers):
    """Knobs: grid_size (1024), n_bins (16), samples (65536), burn_in (1000)."""
    rho = cfg.build_measure()
    grid = _grid(cfg, rho)
    fam = to.OperatorFamily(rho, grid, workers)
    sd = to.spectral_data(fam(0))
    n_bins = cfg.get_int("n_bins", 16)
    nu = we.stationary_measure_estimate(
        rho, cfg.get_int("burn_in", 1000), cfg.get_int("samples", 65536), seed=cfg.seed, workers=workers
    )
    # classes of the sphere chain are antipodal copies; they agree projectively
    eig = sum(to.projective_histogram(grid, m, n_bins) for m in sd.stationary) / len(sd.stationary)
    emp = nu.coarse(n_bins)
    rows = [[i % n_bins, i // n_bins, eig[i], emp[i]] for i in range(len(eig))]
    summary = {
        "r": sd.r,
        "gap": sd.gap,
        "quotient_gap": sd.quotient_gap,
        "invariant_sum_defect": float(np.max(np.abs(sum(sd.invariant) - 1.0))),
        "tv_eigen_vs_empirical": to.total_variation(eig, emp),
        "grid_size": grid.size,
    }
    for j, s in enumerate(sd.sigma):
        summary[f"sigma_class_{j}"] = float(s)
    return Result(["bin", "a", "eigen_mass", "empirical_mass"], rows, summary)


def exp_proximal_cert(cfg, workers):
    """Knobs: count (1000), dims ("2 3"), epsilon (1/64)."""
    rows = proximality.lemma_suite(
        cfg.get_int("count", 1000),
        cfg.seed,
        [int(d) for d in cfg.get_floats("dims", [2, 3])],
        cfg.get_float("epsilon", proximality.DEFAULT_CONSTANTS.c1),
    )
    table = [[r.lemma, r.dim, r.count, r.violations, r.rejected] for r in rows]
    total = sum(r.violations for r in rows)
    err = BoundViolation(f"{total} bound violations") if total else None
    summary = {"violations": total, "rejected": sum(r.rejected for r in rows)}
    return Result(["lemma", "dim", "count", "violations", "rejected"], table, summary, err)


def exp_diophantine_scan(cfg, workers):
    """Knobs: beta (1.5), p (4), b_min (2), b_max (100), n_b (41), count (2000), alpha (4)."""
    rho = cfg.build_measure()
    b = np.linspace(cfg.get_float("b_min", 2.0), cfg.get_float("b_max", 100.0), cfg.get_int("n_b", 41))
    if "b_values" in cfg.params:
        b = np.array(cfg.get_floats("b_values"))
    alpha = cfg.get_float("alpha", 4.0)
    sc = we.diophantine_scan(
        rho, cfg.get_float("beta", 1.5), cfg.get_int("p", 4), b, cfg.get_int("count", 2000), cfg.seed, alpha, workers
    )
    rows = [
        [bi, int(n), D, abs(bi) ** alpha * D, fr]
        for bi, n, D, fr in zip(sc.b_values, sc.n_values, sc.D, sc.proximal_fraction)
    ]
    summary = {"alpha_hat": sc.alpha_hat, "min_scaled": sc.min_scaled, "min_D": float(sc.D.min())}
    return Result(["b", "n", "D", "scaled_D", "proximal_fraction"], rows, summary)


def exp_resolvent_scan(cfg, workers):
    """Knobs: grid_size (1024), gamma (0.25), t_values ("2 4 8 16 32 64"),
    n_probes (20), power_steps (2)."""
    rho = cfg.build_measure()
    grid = _grid(cfg, rho)
    fam = to.OperatorFamily(rho, grid, workers)
    sc = to.resolvent_scan(
        rho,
        grid,
        cfg.get_float("gamma", 0.25),
        cfg.get_floats("t_values", [2, 4, 8, 16, 32, 64]),
        cfg.get_int("n_probes", 20),
        cfg.seed,
        cfg.get_int("power_steps", 2),
        fam,
    )
    rows = [[t, n, r, fr] for t, n, r, fr in zip(sc.t_values, sc.norms, sc.residuals, sc.fit_residuals)]
    return Result(
        ["t", "norm", "residual", "fit_residual"], rows, {"C_hat": sc.C_hat, "L_hat": sc.L_hat, "grid_size": sc.grid_size}
    )


def exp_dolgopyat_probe(cfg, workers):
    """Knobs: grid_size (512), t (10), alpha1 (0.5), beta (2), radius (0.05),
    Delta (2), samples (16384)."""
    rho = cfg.build_measure()
    grid = _grid(cfg, rho)
    lazy = to.OperatorFamily(we.lazy_measure(rho), grid, workers)
    nu = we.stationary_measure_estimate(rho, samples=cfg.get_int("samples", 16384), seed=cfg.seed, workers=workers)
    pts = to.regular_grid_points(grid, nu, cfg.get_float("radius", 0.05), cfg.get_float("Delta", 2.0))
    t = cfg.get_float("t", 10.0)
    res = to.dolgopyat_probe(
        lazy(1j * t), np.ones(grid.size), t, cfg.get_float("alpha1", 0.5), cfg.get_float("beta", 2.0), pts, lazy(0)
    )
    rows = [[n, m] for n, m in enumerate(res.max_modulus)]
    summary = {
        "found": res.found,
        "x0": res.x0,
        "n": res.n,
        "threshold": res.threshold,
        "n_max": res.n_max,
        "regular_points": len(pts),
        "max_defect": None if res.defects is None else float(np.max(res.defects, initial=0.0)),
    }
    return Result(["n", "max_modulus"], rows, summary)


def _bump(center, radius):
    c = np.asarray(center, float)

    def f(v):
        r2 = np.sum((np.asarray(v) - c) ** 2, axis=1) / radius**2
        out = np.zeros(len(r2))
        m = r2 < 1
        out[m] = np.exp(1 - 1 / (1 - r2[m]))
        return out

    return f


def exp_renewal_rate(cfg, workers):
    """Knobs: grid_size (1024), gamma (0.25), k_min (2), k_max (12),
    bump_center ("0.6 0.8"), bump_radius (0.5), direction ("1 0.3"),
    n_walks (32768), tolerance (1e-5), pi0_tolerance (1e-6), noise_factor (3)."""
    rho = cfg.build_measure()
    grid = _grid(cfg, rho)
    fam = to.OperatorFamily(rho, grid, workers)
    sd = to.spectral_data(fam(0))
    center = _vector(cfg, "bump_center", [0.6, 0.8])
    rad = cfg.get_float("bump_radius", 0.5)
    lo, hi = max(np.linalg.norm(center) - rad, 1e-12), np.linalg.norm(center) + rad
    radii = 2.0 ** -np.arange(cfg.get_int("k_min", 2), cfg.get_int("k_max", 12) + 1)
    fit = renewal.rate_fit(
        rho,
        _bump(center, rad),
        _vector(cfg, "direction", [1.0, 0.3]),
        radii,
        sd,
        grid,
        cfg.get_float("gamma", 0.25),
        seed=cfg.seed,
        n_walks=cfg.get_int("n_walks", 2**15),
        tolerance=cfg.get_float("tolerance", 1e-5),
        workers=workers,
        t_support=(math.log(lo), math.log(hi)),
        noise_factor=cfg.get_float("noise_factor", 3.0),
        pi0_tolerance=cfg.get_float("pi0_tolerance", 1e-6),
    )
    rows = [
        [s, r, e, int(n), fr]
        for s, r, e, n, fr in zip(fit.radii, fit.residuals, fit.mc_errors, fit.n_terms, fit.fit_residuals)
    ]
    summary = {"alpha_hat": fit.alpha_hat, "C_hat": fit.C_hat, "r_squared": fit.r_squared, "monotone": fit.monotone}
    return Result(["radius", "residual", "error", "n_terms", "fit_residual"], rows, summary)


FOURIER_POINTS = (
    ((1.0, 0.3), -3.0),
    ((0.2, 1.0), -1.0),
    ((-1.0, 0.5), 0.0),
    ((1.0, 1.0), 1.0),
    ((0.3, -1.0), 2.0),
)


def gaussian_profile(width: float = 1.0):
    """f(x, t) = (1 + x1 x2 / 2) exp(-t^2 / (2 w^2)) and its t-Fourier transform."""

    def h(y):
        return 1 + 0.5 * y[:, 0] * y[:, 1]

    def ev(y, a, t):
        return h(y) * np.exp(-np.asarray(t) ** 2 / (2 * width**2))

    def ft(y, a, xi):
        return h(y) * width * math.sqrt(2 * math.pi) * math.exp(-(width * xi) ** 2 / 2)

    return ev, ft


def exp_fourier_check(cfg, workers):
    """Knobs: grid_size (1024), xi_cutoff (8), quadrature_step (0.05),
    fourier_tolerance (1e-6), n_walks (65536), mc_tolerance (1e-5), width (1).
    The tail bound uses C and L from a resolvent scan at t = 2..64."""
    rho = cfg.build_measure()
    if rho.dim != 2:
        raise ConfigError("fourier-check is set up for d = 2")
    grid = _grid(cfg, rho)
    fam = to.OperatorFamily(rho, grid, workers)
    sd = to.spectral_data(fam(0))
    sc = to.resolvent_scan(rho, grid, 0.25, [2, 4, 8, 16, 32, 64], 20, cfg.seed, 2, fam)
    U = to.UOperator(fam, sd)
    ev, ft = gaussian_profile(cfg.get_float("width", 1.0))
    F = renewal.RegularFunction(ev, fourier=ft)
    pts = [(np.array(x), 0, t) for x, t in FOURIER_POINTS]
    fg = renewal.fourier_green(
        U,
        sd,
        F,
        pts,
        cfg.get_float("xi_cutoff", 8.0),
        cfg.get_float("quadrature_step", 0.05),
        cfg.get_float("fourier_tolerance", 1e-6),
        sc.C_hat,
        sc.L_hat,
    )
    fo = renewal.OmegaFunction(ev, 0.25)
    rows = []
    worst = 0.0
    for j, ((x, a, t), v, qb) in enumerate(zip(pts, fg.value, fg.quadrature_bound)):
        e = renewal.green_mc(
            rho, fo, x, a, t, cfg.seed + j, cfg.get_float("mc_tolerance", 1e-5), cfg.get_int("n_walks", 2**16), workers
        )
        allowed = 3 * (e.mc_std_error + e.truncation_bound + qb)
        worst = max(worst, abs(v - e.value) / allowed)
        rows.append([x[0], x[1], t, v, qb, e.value, e.mc_std_error, e.truncation_bound, abs(v - e.value), allowed])
    header = ["x1", "x2", "t", "fourier", "quadrature_bound", "mc", "mc_std_error", "truncation_bound", "abs_diff", "allowed"]
    summary = {"worst_ratio": worst, "tail_bound": fg.tail_bound, "step": fg.step, "C_hat": sc.C_hat, "L_hat": sc.L_hat}
    return Result(header, rows, summary)


def exp_regularity_probe(cfg, workers):
    """Knobs: n (4), M (0.5), count (2000), samples (65536), t (0.1),
    conv_n (4), t2 (0.05)."""
    rho = cfg.build_measure()
    nu = we.stationary_measure_estimate(rho, samples=cfg.get_int("samples", 65536), seed=cfg.seed, workers=workers)
    n = cfg.get_int("n", 4)
    count = cfg.get_int("count", 2000)
    reg = we.regularity_probe(rho, nu, n, cfg.get_float("M", 0.5), count, cfg.seed, t=cfg.get_float("t", 0.1), workers=workers)
    conv = we.convolution_regularity_probe(rho, cfg.get_int("conv_n", 4), cfg.get_float("t2", 0.05), count, cfg.seed, workers=workers)
    rows = [
        ["stationary-ball", n, reg.pass_fraction, reg.Delta_estimate, reg.count],
        ["convolution-ball", cfg.get_int("conv_n", 4), conv.pass_fraction, conv.t3_estimate, conv.count],
    ]
    summary = {"proximal_count": reg.proximal_count, "radius": reg.radius, "convolution_exact": conv.exact}
    return Result(["probe", "n", "pass_fraction", "estimate", "count"], rows, summary)


def tauberian_experiment(seed: int, n_functions: int = 100, gamma: float = 0.25, n_points: int = 100, safety: float = 2.0):
    """Regularization ratios for k = 0..4 and the tauberian check for k = 1..4.

    Returns rows (check, k, count, worst ratio, bound)."""
    t = np.linspace(-10, 10, 401)
    rows = []
    rng = np.random.default_rng([seed, 1])
    worst = np.zeros(5)
    counts = np.zeros(5, int)
    for _ in range(n_functions):
        f, _ = renewal.random_piecewise(rng)
        k = int(rng.integers(0, 5))
        c = renewal.convolve_phi_k(f, k, t, gamma, knots=f.knots)
        ratio = c.norm_gamma_k() / renewal.gamma_zero_norm(f, t, gamma)
        worst[k] = max(worst[k], ratio)
        counts[k] += 1
    for k in range(5):
        rows.append(["regularization", k, counts[k], worst[k], renewal.regularization_constant(k, gamma)])
    V = np.geomspace(0.1, 100, 40)
    for k in range(1, 5):
        train = [renewal.random_piecewise(np.random.default_rng([seed, 2, k, j])) for j in range(n_functions)]
        C = safety * renewal.calibrate_tauberian_constant(train, k, t, V)
        prng = np.random.default_rng([seed, 3, k])
        worst_k = 0.0
        for j in range(n_functions):
            f, om = renewal.random_piecewise(np.random.default_rng([seed, 4, k, j]))
            idx = np.sort(prng.choice(t.size, n_points, replace=False))
            fs = f(t)
            terms = renewal.tauberian_terms(t, fs, renewal.phi_k_convolution_samples(f, k, t), om, k, V)
            worst_k = max(worst_k, float(np.max(np.abs(fs[idx]) / (C * terms[idx]))))
        rows.append(["tauberian", k, n_functions, worst_k, 1.0])
    psi_def = max(
        abs(float(renewal.psi(-np.inf)) - 1.0),
        abs(float(renewal.psi(np.inf))),
        abs(float(renewal.psi(0.0)) - 0.5),
    )
    rows.append(["psi-endpoints", 0, 3, psi_def, 1e-10])
    return rows


def exp_tauberian_check(cfg, workers):
    """Knobs: n_functions (100), gamma (0.25), n_points (100), safety (2).

    Ratios are measured / bound; every row passes when ratio <= bound."""
    rows = tauberian_experiment(
        cfg.seed,
        cfg.get_int("n_functions", 100),
        cfg.get_float("gamma", 0.25),
        cfg.get_int("n_points", 100),
        cfg.get_float("safety", 2.0),
    )
    ok = all(r[3] <= r[4] for r in rows)
    return Result(["check", "k", "count", "worst", "bound"], rows, {"all_pass": ok})


SUBCOMMANDS: dict[str, Callable] = {
    "lyapunov": exp_lyapunov,
    "stationary": exp_stationary,
    "proximal-cert": exp_proximal_cert,
    "diophantine-scan": exp_diophantine_scan,
    "resolvent-scan": exp_resolvent_scan,
    "dolgopyat-probe": exp_dolgopyat_probe,
    "renewal-rate": exp_renewal_rate,
    "fourier-check": exp_fourier_check,
    "regularity-probe": exp_regularity_probe,
    "tauberian-check": exp_tauberian_check,
}

DEFAULT_MEASURE = "cone2"


# ---------------------------------------------------------------------------
# runner


def _load(subcommand, config_path, seed, overrides):
    if config_path is None:
        if seed is None:
            raise ConfigError("seed is mandatory: pass --seed or a config with [experiment] seed")
        text = f"[experiment]\nname = {subcommand}\nseed = {seed}\n\n[measure]\nname = {DEFAULT_MEASURE}\n"
        cfg = cfgmod.parse(text)
    else:
        cfg = cfgmod.load(config_path)
    if not cfg.measure:
        cfg = cfgmod.ExperimentConfig(cfg.name, cfg.seed, {"name": DEFAULT_MEASURE}, cfg.params, cfg.out, cfg.extra)
    return cfg.with_overrides(seed=seed, params=overrides)


def run(
    subcommand: str,
    config_path: str | None = None,
    overrides: dict | None = None,
    *,
    seed: int | None = None,
    out: str | None = None,
    workers: int = 1,
    quiet: bool = True,
) -> int:
    """Run one experiment and write its artifacts; returns the exit status."""
    started = time.time()
    meta: dict = {"subcommand": subcommand, "version": __version__, "workers": workers}
    out_dir = out or os.environ.get("RENEWAL_LAB_OUT")
    try:
        if subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {subcommand!r}")
        if workers < 1:
            raise ConfigError("--workers must be positive")
        cfg = _load(subcommand, config_path, seed, {k: str(v) for k, v in (overrides or {}).items()})
        out_dir = out_dir or cfg.out or "."
        echo = cfgmod.serialize(cfg)
        meta.update(config=echo, seed=cfg.seed, input_hash=git_blob_hash(f"{subcommand}\n{echo}".encode()))
        res = SUBCOMMANDS[subcommand](cfg, workers)
        os.makedirs(out_dir, exist_ok=True)
        _write(os.path.join(out_dir, f"{subcommand}.csv"), csv_text(res.header, res.rows))
        summary_rows = [[k, v] for k, v in res.summary.items()]
        _write(os.path.join(out_dir, f"{subcommand}.summary.csv"), csv_text(["statistic", "value"], summary_rows))
        meta["summary"] = {k: _jsonable(v) for k, v in res.summary.items()}
        if not quiet:
            sys.stdout.write(csv_text(["statistic", "value"], summary_rows))
        if res.error is not None:
            raise res.error
        status = 0
        meta["status"] = "ok"
    except RenewalLabError as exc:
        status = exc.exit_code
        meta.update(status="error", error_category=exc.category, error=str(exc))
        if isinstance(exc, SingularError):
            meta.update(singular_t=exc.t, smallest_singular_value=exc.smallest_singular_value)
        log.error("%s: %s", exc.category, exc)
        sys.stderr.write(json.dumps({"error_category": exc.category, "exit_code": status}) + "\n")
    meta["exit_code"] = status
    meta["wall_time_s"] = time.time() - started
    if out_dir is not None:
        try:
            os.makedirs(out_dir, exist_ok=True)
            _write(os.path.join(out_dir, f"{subcommand}.meta.json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            log.error("cannot write metadata: %s", exc)
    return status


def _jsonable(v):
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    return v


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _parse_set(items: list[str]) -> dict:
    out = {}
    for it in items:
        if "=" not in it:
            raise ConfigError(f"--set expects KEY=VALUE, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip().lower()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="renewal-lab", description="Random walks on SL_d(R): probes and scans.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name, fn in SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=(fn.__doc__ or "").splitlines()[0], description=fn.__doc__)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--quiet", action="store_true")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _parse_set(args.overrides)
    except ConfigError as exc:
        log.error("%s", exc)
        return exc.exit_code
    return run(
        args.subcommand, args.config, overrides, seed=args.seed, out=args.out, workers=args.workers, quiet=args.quiet
    )


if __name__ == "__main__":
    sys.exit(main())
