"""Command-line surface: run simulations, measure inequality constants,
estimate inf-sup stability, check the Runge-Kutta equivalence, drive
refinement studies, and emit plot scripts next to the CSV artifacts.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 verification assertion failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .assembly import SolverError, run_simulation, save_trajectory
from .config import (ConfigError, RunConfig, apply_overrides, config_digest,
                     emit_config, make_grid, make_mesh, make_problem_config,
                     parse_config, validate)
from .mesh import MeshError, MeshParseError
from .time_dg import radau_equivalence_check, interpolant_stability_report, TimeGrid
from .space import BrokenSpace
from .verify import (CSV_HEADER, apriori_report, energy_balance_defect,
                     estimate_infsup_ascent, estimate_infsup_dense, gn_sweep,
                     gradient_stability_sweep, infsup_refinement_sweep,
                     korn_sweep, linfty_l2_report, parabolic_interpolation_sweep,
                     poincare_sweep, quasi_interp_lp_sweep,
                     quasi_interp_stability_sweep, run_refinement_study,
                     sweep_csv_rows)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERIFY = 4

SWEEPS = ("poincare", "korn", "gn", "gradient", "quasi-interp",
          "quasi-interp-lp", "parabolic", "parabolic-radau", "interpolant")


def _apply_thread_cap():
    cap = os.environ.get("DGFLOW_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _load_config(args) -> RunConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = parse_config(fh.read())
    else:
        cfg = validate(RunConfig())
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, val = item.partition("=")
        overrides[key.strip()] = val.strip()
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def _csv_preamble(cfg: RunConfig) -> list[str]:
    return [f"# dgflow {__version__}",
            f"# config {config_digest(cfg)}",
            f"# seed {cfg.seed}"]


def _write_csv(path: Path, preamble: list[str], header: str, rows: list[str]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("\n".join(preamble) + "\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")
    print(f"wrote {path}")


def cmd_run(cfg: RunConfig) -> int:
    mesh = make_mesh(cfg)
    grid = make_grid(cfg)
    problem = make_problem_config(cfg)
    traj = run_simulation(mesh, grid, problem)
    rep = apriori_report(traj)
    outdir = Path(cfg.directory)
    rows = [f"{k},{v:.17g}" for k, v in rep.quantities().items()]
    rows += [f"initial_l2,{rep.initial_l2:.17g}",
             f"forcing_c0_lpprime,{rep.forcing_c0_lpprime:.17g}",
             f"h,{rep.h:.17g}", f"tau,{rep.tau:.17g}",
             f"energy_balance_defect,{energy_balance_defect(traj):.17g}"]
    _write_csv(outdir / "stability_report.csv", _csv_preamble(cfg),
               "quantity,value", rows)
    with open(outdir / "trajectory.txt", "w") as fh:
        fh.write(save_trajectory(traj))
    print(f"wrote {outdir / 'trajectory.txt'}")
    for j, s in enumerate(traj.slabs):
        print(f"slab {j}: newton {s.newton_iterations} its, "
              f"residual {s.residual_norm:.3e}")
    return EXIT_OK


def _interpolant_sweep(cfg: RunConfig):
    from .verify import ConstantSweep, SweepLevel
    levels = []
    for lv in range(cfg.levels):
        n_slabs = cfg.base_slabs * 2 ** lv
        grid = TimeGrid.uniform(cfg.T, n_slabs)
        mesh = make_mesh(cfg)
        space = BrokenSpace(mesh, cfg.k_u, components=2)
        rep = interpolant_stability_report(space, grid, cfg.k_t, cfg.vp,
                                           n_samples=cfg.samples,
                                           seed=cfg.seed + lv)
        worst = max(rep.ratio_l2_radau, rep.ratio_dg_dt, rep.ratio_dg_radau,
                    rep.ratio_max_l2)
        levels.append(SweepLevel(lv, mesh.max_mesh_size, grid.tau, worst))
    return ConstantSweep("interpolant_stability", cfg.vp, None, None, None,
                         None, tuple(levels), cfg.samples, cfg.seed)


def cmd_verify(cfg: RunConfig, which: str) -> int:
    common = dict(levels=cfg.levels, samples=cfg.samples, seed=cfg.seed,
                  base_n=cfg.base_n)
    if which == "poincare":
        sweep = poincare_sweep(cfg.k_u, cfg.vp, **common)
    elif which == "korn":
        sweep = korn_sweep(cfg.k_u, cfg.vp, **common)
    elif which == "gn":
        sweep = gn_sweep(cfg.k_u, cfg.vp, cfg.vq, cfg.vs, **common)
    elif which == "gradient":
        sweep = gradient_stability_sweep(cfg.k_u, max(cfg.k_u - 1, 0),
                                         cfg.vp, **common)
    elif which == "quasi-interp":
        sweep = quasi_interp_stability_sweep(cfg.k_u, cfg.vp, **common)
    elif which == "quasi-interp-lp":
        sweep = quasi_interp_lp_sweep(cfg.k_u, cfg.vp, **common)
    elif which in ("parabolic", "parabolic-radau"):
        measure = "dt" if which == "parabolic" else "radau"
        sweep = parabolic_interpolation_sweep(
            cfg.k_u, cfg.k_t, cfg.vp, levels=cfg.levels, samples=cfg.samples,
            seed=cfg.seed, base_n=cfg.base_n, base_slabs=cfg.base_slabs,
            measure=measure, final_time=cfg.T)
    elif which == "interpolant":
        sweep = _interpolant_sweep(cfg)
    else:
        raise ConfigError(f"unknown inequality {which!r}; options: {SWEEPS}")
    _write_csv(Path(cfg.directory) / f"{sweep.inequality}.csv",
               _csv_preamble(cfg), CSV_HEADER, sweep_csv_rows(sweep))
    if cfg.max_drift > 0 and sweep.drift() > cfg.max_drift:
        print(f"DRIFT FAIL {sweep.inequality}: {sweep.drift():.3f} "
              f"> {cfg.max_drift}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_infsup(cfg: RunConfig) -> int:
    rows = []
    if cfg.vp == 2.0:
        ests = infsup_refinement_sweep(cfg.k_u, cfg.k_pi, levels=cfg.levels,
                                       base_n=cfg.base_n)
    else:
        from .mesh import build_structured_mesh
        ests = [estimate_infsup_ascent(
            build_structured_mesh(cfg.base_n * 2 ** lv, cfg.base_n * 2 ** lv),
            cfg.k_u, cfg.k_pi, cfg.vp, seed=cfg.seed)
            for lv in range(cfg.levels)]
    for lv, est in enumerate(ests):
        rows.append(f"infsup,{lv},{est.h:.17g},0,{est.p:.17g},,,,,"
                    f"{est.value:.17g},1,{cfg.seed}")
    _write_csv(Path(cfg.directory) / "infsup.csv", _csv_preamble(cfg),
               CSV_HEADER, rows)
    vals = [e.value for e in ests]
    if cfg.max_drift > 0 and max(vals) > cfg.max_drift * min(vals):
        print(f"DRIFT FAIL infsup: {max(vals) / min(vals):.3f}",
              file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_radau_check(cfg: RunConfig, k_t: int) -> int:
    rep = radau_equivalence_check(k_t)
    from .time_dg import radau_iia_linear_step
    print(f"dG({k_t}) / RadauIIA equivalence")
    print(f"  linear step max error: {rep.linear_max_err:.3e}")
    if rep.euler_err is not None:
        print(f"  implicit Euler error:  {rep.euler_err:.3e}")
    if k_t >= 1:
        print(f"  R(-1) = {radau_iia_linear_step(k_t, -1.0):.6f}...")
    print(f"  nonlinear stage gap:   {rep.nonlinear_stage_gap:.3e}")
    print(f"  reference error:       {rep.nonlinear_reference_err:.3e}")
    ok = rep.linear_max_err < 1e-10 and rep.nonlinear_stage_gap < 1e-10 \
        and (rep.euler_err is None or rep.euler_err < 1e-12)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_convergence_study(cfg: RunConfig) -> int:
    problem = make_problem_config(cfg)
    ladder = run_refinement_study(problem, levels=cfg.levels,
                                  base_n=cfg.base_n, base_slabs=cfg.base_slabs,
                                  pattern=cfg.pattern)
    rows = []
    for lv in ladder:
        for name, val in lv.report.quantities().items():
            rows.append(f"{name},{lv.level},{lv.h:.17g},{lv.tau:.17g},"
                        f"{val:.17g}")
    _write_csv(Path(cfg.directory) / "convergence_study.csv",
               _csv_preamble(cfg), "quantity,level,h,tau,value", rows)
    return EXIT_OK


def cmd_plot(cfg: RunConfig) -> int:
    outdir = Path(cfg.directory)
    found = False
    for csv in sorted(outdir.glob("*.csv")):
        found = True
        script = csv.with_suffix(".gnuplot")
        with open(csv) as fh:
            header = None
            for line in fh:
                if not line.startswith("#"):
                    header = line.strip().split(",")
                    break
        ycol = len(header) if header else 2
        if header and "max_ratio" in header:
            ycol = header.index("max_ratio") + 1
        elif header and "value" in header:
            ycol = header.index("value") + 1
        xcol = header.index("h") + 1 if header and "h" in header else 1
        with open(script, "w") as fh:
            fh.write("# generated by dgflow plot; run: gnuplot "
                     f"{script.name}\n")
            fh.write("set datafile separator ','\n")
            fh.write("set datafile commentschars '#'\n")
            fh.write("set logscale x\nset key left\n")
            fh.write(f"set title '{csv.stem}'\n")
            fh.write(f"set output '{csv.stem}.png'\nset term pngcairo\n")
            fh.write(f"plot '{csv.name}' using {xcol}:{ycol} "
                     f"skip 4 with linespoints title '{csv.stem}'\n")
        print(f"wrote {script}")
    if not found:
        print(f"no CSV files in {outdir}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dgflow",
        description="Space-time DG solver for implicitly constituted "
                    "incompressible flow with a stability measurement harness")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    common(sub.add_parser("run", help="solve and write the stability report"))
    pv = sub.add_parser("verify", help="measure an inequality constant sweep")
    pv.add_argument("inequality", choices=SWEEPS)
    common(pv)
    common(sub.add_parser("infsup", help="estimate the inf-sup constant"))
    pr = sub.add_parser("radau-check",
                        help="verify the Runge-Kutta equivalence")
    pr.add_argument("--kt", type=int, default=1)
    common(pr)
    common(sub.add_parser("convergence-study",
                          help="run the (h, tau) refinement ladder"))
    common(sub.add_parser("plot", help="emit gnuplot scripts next to CSVs"))
    return ap


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
    except (ConfigError, MeshParseError, MeshError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, args.inequality)
        if args.command == "infsup":
            return cmd_infsup(cfg)
        if args.command == "radau-check":
            return cmd_radau_check(cfg, args.kt)
        if args.command == "convergence-study":
            return cmd_convergence_study(cfg)
        if args.command == "plot":
            return cmd_plot(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        print(f"newton log: {['%.3e' % v for v in exc.log]}", file=sys.stderr)
        return EXIT_SOLVER
    except (MeshError, MeshParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
