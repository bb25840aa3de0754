"""Command-line entry point.

Exit status is 0 on success, 1 when a run fails and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__, formats
from .analysis import classify_shape, estimate_psd, fit_lorentzian
from .assembly import EventLog, MergeModel, execute_plan, merge_particles, plan_rearrangement
from .config import load_config
from .dynamics import ParticleState, simulate
from .errors import ConfigError, NanoarrayError, NoPeakError
from .optics import EllipsoidGeometry
from .scenarios import bundled_scenarios, run_scenario, stream

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _site(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"site must be 'row,col', got {text!r}") from None
    return r, c


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common")
    g.add_argument("--config", type=Path, help="YAML configuration file (lengths in the units named by each key)")
    g.add_argument("--seed", type=int, help="root random seed (integer; default 0, or the scenario's own seed)")
    g.add_argument("--out", type=Path, help="output file or directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nanoarray", description="Levitated nanoparticle array simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common = _common()

    p = sub.add_parser("simulate", parents=[common], help="integrate one particle and write its trajectory",
                       description="Integrate one particle in its trap. --out ending in .ntrj or .bin "
                                   "selects the binary layout, anything else CSV.")
    p.add_argument("--pressure-pa", type=float, help="gas pressure in Pa (default from config, 2000)")
    p.add_argument("--duration-s", type=float, required=True, help="simulated time in s")
    p.add_argument("--sample-rate-hz", type=float, default=3.0e6, help="sampling rate in Hz (default 3e6)")
    p.add_argument("--radius-nm", type=float, help="volume-equivalent radius in nm (default from config, 85)")
    p.add_argument("--shape", choices=("sphere", "spheroid", "dumbbell"), default="sphere", help="particle shape")
    p.add_argument("--aspect", type=float, default=1.5, help="spheroid long/short axis ratio (dimensionless)")
    p.add_argument("--site", type=_site, default=(0, 0), help="trap site as row,col (indices)")
    p.add_argument("--dt-s", type=float, help="integration step in s (default: from the stability bound)")

    p = sub.add_parser("analyze", parents=[common], help="spectra, Lorentzian fits and shape verdict",
                       description="Estimate spectra of one or more trajectories. With three or more "
                                   "pressures the particle is also classified.")
    p.add_argument("trajectories", nargs="+", type=Path, help="trajectory files (CSV or binary)")
    p.add_argument("--channels", default="x,y,z,torsion", help="comma-separated channels to fit")
    p.add_argument("--segment", type=int, help="Welch segment length in samples (default n/8, power of two)")
    p.add_argument("--threshold-db", type=float, default=6.0, help="peak detection threshold in dB")
    p.add_argument("--ratio-threshold", type=float, default=0.15,
                   help="damping-ratio anisotropy threshold (dimensionless)")

    p = sub.add_parser("plan", parents=[common], help="plan a rearrangement between occupancy patterns")
    p.add_argument("--current", type=Path, required=True, help="current occupancy (grid or coordinate file)")
    p.add_argument("--target", type=Path, required=True, help="target pattern (grid or coordinate file)")
    p.add_argument("--radius-nm", type=float, help="particle radius in nm (default from config, 85)")

    p = sub.add_parser("execute", parents=[common], help="execute a plan with lossy transport")
    p.add_argument("--plan", type=Path, required=True, help="plan JSON written by 'plan'")
    p.add_argument("--current", type=Path, help="occupancy file (default: the one stored in the plan)")
    p.add_argument("--success-prob", type=float, default=0.99,
                   help="per-move transport success probability (0 to 1)")
    p.add_argument("--radius-nm", type=float, help="particle radius in nm (default from config, 85)")

    p = sub.add_parser("merge", parents=[common], help="merge two particles into one trap")
    p.add_argument("--current", type=Path, required=True, help="occupancy file (grid or coordinate file)")
    p.add_argument("--site-a", type=_site, required=True, help="receiving trap as row,col (indices)")
    p.add_argument("--site-b", type=_site, required=True, help="particle to move in, as row,col (indices)")
    p.add_argument("--trials", type=int, default=1, help="independent repetitions for outcome statistics (count)")
    p.add_argument("--dumbbell-prob", type=float, default=0.25, help="dumbbell outcome probability (0 to 1)")
    p.add_argument("--lost-prob", type=float, default=0.5, help="particle-loss outcome probability (0 to 1)")
    p.add_argument("--radius-nm", type=float, help="particle radius in nm (default from config, 85)")

    p = sub.add_parser("scenario", parents=[common], help="run a scenario script",
                       description=f"Run a scenario file or a bundled one ({', '.join(bundled_scenarios())}).")
    p.add_argument("scenario", help="scenario YAML path or bundled name")
    p.add_argument("--workers", type=int, default=1, help="worker threads (count)")
    return parser


def _radius(args, cfg) -> float:
    return (args.radius_nm if getattr(args, "radius_nm", None) is not None else cfg.radius_nm) * 1e-9


def cmd_simulate(args, cfg) -> int:
    cfg = cfg.replace(pressure_pa=args.pressure_pa)
    radius = _radius(args, cfg)
    geometry = {"sphere": lambda: EllipsoidGeometry.sphere(radius),
                "spheroid": lambda: EllipsoidGeometry.spheroid(radius, args.aspect),
                "dumbbell": lambda: EllipsoidGeometry.dumbbell(radius)}[args.shape]()
    array = cfg.trap_array()
    start = ParticleState.at_equilibrium(array, geometry, *args.site)
    traj = simulate(start, array, cfg.gas(), args.duration_s, args.sample_rate_hz, seed=args.seed, dt=args.dt_s)
    out = formats.write_trajectory(args.out or Path("trajectory.csv"), traj)
    print(f"wrote {out} ({len(traj)} samples)")
    return EXIT_OK


def cmd_analyze(args, cfg) -> int:
    out = args.out or Path("analysis")
    trajs = [formats.read_trajectory(p) for p in args.trajectories]
    channels = [c.strip() for c in args.channels.split(",") if c.strip()]
    rows = {k: [] for k in ("file", "channel", "center_frequency[Hz]", "center_error[Hz]",
                            "damping[rad/s]", "damping_error[rad/s]", "peak[dB]")}
    spectra = []
    for path, traj in zip(args.trajectories, trajs):
        for ch in channels:
            psd = estimate_psd(traj, ch, args.segment)
            name = f"psd/{path.stem}_{ch}.csv"
            formats.write_text(out / name, formats.psd_csv(psd, {"seed": traj.metadata.get("seed"),
                                                                 "pressure_pa": traj.metadata.get("pressure_pa")}))
            spectra.append(name)
            try:
                fit = fit_lorentzian(psd, threshold_db=args.threshold_db)
            except NoPeakError:
                continue
            for key, val in zip(rows, (path.name, ch, fit.center_frequency, fit.center_error,
                                       fit.damping, fit.damping_error, fit.peak_db)):
                rows[key].append(val)
    formats.write_text(out / "fits.csv", formats.table_csv(rows, {"seed": args.seed}))
    report = {"schema_version": formats.SCHEMA_VERSION, "seed": args.seed,
              "inputs": [p.name for p in args.trajectories], "spectra": spectra}
    if len({t.metadata.get("pressure_pa") for t in trajs}) >= 3:
        report["shape"] = classify_shape(trajs, args.ratio_threshold, args.threshold_db, args.segment).as_dict()
    formats.write_text(out / "report.json", formats.dumps(report))
    verdict = report.get("shape", {}).get("verdict", "not classified (needs 3 pressures)")
    print(f"wrote {out}; {len(rows['file'])} fits; shape: {verdict}")
    return EXIT_OK


def _occupancy(path, args, cfg):
    _, _, grid = formats.read_pattern(path)
    return formats.occupancy_from_grid(grid, _radius(args, cfg), cfg.pitch_x_um * 1e-6, cfg.pitch_y_um * 1e-6)


def cmd_plan(args, cfg) -> int:
    current = _occupancy(args.current, args, cfg)
    rows, cols, target = formats.read_pattern(args.target)
    if (rows, cols) != (current.rows, current.cols):
        raise ConfigError(f"target is {rows}x{cols} but the current pattern is {current.rows}x{current.cols}")
    plan = plan_rearrangement(current, formats.pattern_sites(target))
    out = formats.write_text(args.out or Path("plan.json"),
                             formats.dumps(formats.plan_document(plan, current, args.seed)))
    print(f"wrote {out}: {len(plan)} moves, cost {plan.cost * 1e6:.3f} um")
    return EXIT_OK


def cmd_execute(args, cfg) -> int:
    doc = formats.read_json(args.plan)
    plan = formats.plan_from_document(doc, str(args.plan))
    if args.current is not None:
        occ = _occupancy(args.current, args, cfg)
    elif "current" in doc:
        occ = formats.occupancy_from_grid(doc["current"], _radius(args, cfg), cfg.pitch_x_um * 1e-6,
                                          cfg.pitch_y_um * 1e-6)
    else:
        raise ConfigError(f"{args.plan}: no stored occupancy; pass --current")
    result = execute_plan(plan, occ, stream(args.seed, "execute"), args.success_prob)
    out = args.out or Path("execution")
    formats.write_text(out / "occupancy.txt", formats.grid_text(occ, args.seed))
    formats.write_text(out / "events.jsonl", formats.events_jsonl(result.log, args.seed))
    print(f"wrote {out}: {'defect-free' if result.defect_free else f'{len(result.defects)} defects'}")
    return EXIT_OK


def cmd_merge(args, cfg) -> int:
    base = _occupancy(args.current, args, cfg)
    model = MergeModel(args.dumbbell_prob, args.lost_prob, 1.0 - args.dumbbell_prob - args.lost_prob)
    rng = stream(args.seed, "merge")
    log = EventLog()
    counts: dict[str, int] = {}
    last = base
    for _ in range(max(args.trials, 1)):
        last = base.copy()
        outcome = merge_particles(args.site_a, args.site_b, last, rng, model, log)
        counts[outcome.kind.value] = counts.get(outcome.kind.value, 0) + 1
    out = args.out or Path("merge")
    formats.write_text(out / "occupancy.txt", formats.grid_text(last, args.seed))
    formats.write_text(out / "events.jsonl", formats.events_jsonl(log, args.seed))
    formats.write_text(out / "counts.json", formats.dumps({"schema_version": formats.SCHEMA_VERSION,
                                                          "seed": args.seed, "trials": args.trials,
                                                          "counts": counts}))
    print(f"wrote {out}: " + ", ".join(f"{k} {v}" for k, v in sorted(counts.items())))
    return EXIT_OK


def cmd_scenario(args, cfg) -> int:
    from .scenarios import load_scenario
    sc = load_scenario(args.scenario, base=cfg if args.config else None)
    out = args.out or Path(f"{sc.name}_out")
    result = run_scenario(sc, out, seed=args.seed, workers=args.workers)
    if result.status:
        print(f"scenario {sc.name} failed: {result.error}; partial manifest in {out}", file=sys.stderr)
    else:
        print(f"scenario {sc.name} complete: {out}")
    return EXIT_FAILURE if result.status else EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "analyze": cmd_analyze, "plan": cmd_plan, "execute": cmd_execute,
            "merge": cmd_merge, "scenario": cmd_scenario}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        if args.seed is None and args.command != "scenario":
            args.seed = 0
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (NanoarrayError, OSError, ValueError) as exc:
        print(f"nanoarray {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
