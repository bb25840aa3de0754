"""Scripted pipelines: load, plan, execute, merge, simulate, analyze, rotation, report.

A scenario file is YAML with a ``name``, a ``seed``, ``config`` overrides
and an ordered list of ``stages``. Every random draw comes from a child
stream keyed by the stage name and the particle or pressure it serves, so
results do not depend on how work is spread over threads.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import formats
from .analysis import classify_shape, estimate_psd, fit_lorentzian
from .assembly import (EventLog, MergeKind, MergeModel, Occupancy, ShapeDistribution, SiteState, execute_plan,
                       load_array, merge_particles, plan_rearrangement, validate_plan)
from .config import Config, config_from_mapping, parse_mapping
from .dynamics import ParticleState, simulate, spin_up, terminal_rotation
from .errors import ConfigError, NanoarrayError, NoPeakError
from .gas import GasEnvironment, rotational_damping_rates
from .optics import EllipsoidGeometry, Polarization, make_site, trap_frequencies

SCHEMA_VERSION = 1
STAGE_ORDER = ("load", "plan", "execute", "merge", "simulate", "analyze", "rotation", "report")
ELEMENTARY_CHARGE = 1.602176634e-19

# accepted parameters and defaults per stage
STAGE_PARAMS = {
    "load": {"particles": None, "fill_probability": None, "sphere_fraction": 5 / 9,
             "aspect_range": [1.3, 1.6], "max_charge_e": 10, "radius_spread": 0.0},
    "plan": {"target": None},
    "execute": {"transport_success_prob": 0.99},
    "merge": {"pairs": None, "until": None, "probabilities": [0.25, 0.5, 0.25], "pressure_pa": None},
    "simulate": {"pressures_pa": None, "duration_s": 0.015, "sample_rate_hz": 3.0e6, "select": "all"},
    "analyze": {"ratio_threshold": 0.15, "threshold_db": 6.0, "spectra": ["x", "torsion"]},
    "rotation": {"pressures_pa": [0.06, 0.6, 6.0, 60.0], "spin_up_pressure_pa": 0.06,
                 "spin_up_time_constants": 8.0, "spin_up_steps": 4000},
    "report": {},
}


def stream_seed(seed: int, *names) -> int:
    """Integer seed of the child stream ``names`` under ``seed``."""
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, np.uint64)[0])


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, *names))


@dataclass(frozen=True)
class Stage:
    kind: str
    params: dict


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    config: Config
    stages: tuple[Stage, ...]
    source: Path | None = None


def _at(node, source) -> str:
    m = node.start_mark
    return f"{source}:{m.line + 1}:{m.column + 1}"


def _items(node):
    return {k.value: (k, v) for k, v in node.value} if isinstance(node, yaml.MappingNode) else {}


def parse_scenario(text: str, source: str = "<scenario>", base: Config | None = None) -> Scenario:
    """Validate scenario text; every complaint names its line and column.

    ``config`` overrides in the file apply on top of ``base`` (defaults
    when omitted).
    """
    data, top = parse_mapping(text, source)
    for key, (knode, _) in top.items():
        if key not in ("schema_version", "name", "seed", "config", "stages"):
            raise ConfigError(f"{_at(knode, source)}: unknown scenario key {key!r}")
    if data.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"{_at(top['schema_version'][1], source)}: unsupported schema_version")
    name = data.get("name")
    if not isinstance(name, str) or not name:
        raise ConfigError(f"{source}: scenario needs a name")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"{_at(top['seed'][1], source)}: seed must be a non-negative integer")
    cfg_node = top.get("config", (None, None))[1]
    config = config_from_mapping(data.get("config") or {}, _items(cfg_node), source, base)

    stages_node = top.get("stages", (None, None))[1]
    if not isinstance(stages_node, yaml.SequenceNode) or not stages_node.value:
        raise ConfigError(f"{source}: stages must be a non-empty list")
    stages, last = [], -1
    for raw, node in zip(data["stages"], stages_node.value):
        fields_ = _items(node)
        if not isinstance(raw, dict) or "kind" not in raw:
            raise ConfigError(f"{_at(node, source)}: each stage is a mapping with a 'kind'")
        kind = raw["kind"]
        if kind not in STAGE_PARAMS:
            raise ConfigError(f"{_at(fields_['kind'][1], source)}: unknown stage {kind!r}; "
                              f"choose from {', '.join(STAGE_ORDER)}")
        rank = STAGE_ORDER.index(kind)
        if rank <= last:
            raise ConfigError(f"{_at(node, source)}: stage {kind!r} out of order; "
                              f"stages run as {' -> '.join(STAGE_ORDER)}")
        last = rank
        params = dict(STAGE_PARAMS[kind])
        for key, value in raw.items():
            if key == "kind":
                continue
            if key not in params:
                raise ConfigError(f"{_at(fields_[key][0], source)}: stage {kind!r} has no parameter {key!r}")
            params[key] = value
        stages.append(Stage(kind, params))
    return Scenario(name, seed, config, tuple(stages))


def bundled_scenarios() -> list[str]:
    folder = resources.files("nanoarray") / "scenarios"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".yaml"))


def load_scenario(name_or_path, base: Config | None = None) -> Scenario:
    """A path to a YAML file, or the name of a bundled scenario."""
    path = Path(name_or_path)
    if not path.is_file():
        bundled = resources.files("nanoarray") / "scenarios" / f"{name_or_path}.yaml"
        if not bundled.is_file():
            raise ConfigError(f"no scenario file {name_or_path!r}; bundled: {', '.join(bundled_scenarios())}")
        text, path = bundled.read_text(), Path(str(bundled))
    else:
        text = path.read_text()
    sc = parse_scenario(text, str(path), base)
    return Scenario(sc.name, sc.seed, sc.config, sc.stages, path)


# ---------------------------------------------------------------- running

@dataclass
class _Context:
    scenario: Scenario
    out: Path
    seed: int
    workers: int
    config: Config
    array: object = None
    occupancy: Occupancy | None = None
    truth: dict = field(default_factory=dict)  # particle id -> geometry at load
    log: EventLog = field(default_factory=EventLog)
    plan: object = None
    trajectories: dict = field(default_factory=dict)  # particle id -> [(pressure, Trajectory)]
    summary: dict = field(default_factory=dict)

    def write(self, rel: str, text: str) -> None:
        formats.write_text(self.out / rel, text)

    def map(self, fn, items):
        items = list(items)
        if self.workers <= 1 or len(items) <= 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(fn, items))  # preserves input order


def _geometry(spec: dict, radius: float) -> EllipsoidGeometry:
    shape = spec.get("shape", "sphere")
    r = spec.get("radius_nm", radius * 1e9) * 1e-9
    if shape == "sphere":
        return EllipsoidGeometry.sphere(r)
    if shape == "spheroid":
        return EllipsoidGeometry.spheroid(r, float(spec.get("aspect", 1.5)))
    if shape == "dumbbell":
        return EllipsoidGeometry.dumbbell(r)
    raise ConfigError(f"unknown particle shape {shape!r}")


def _stage_load(ctx: _Context, p: dict) -> dict:
    cfg = ctx.config
    radius = cfg.radius_nm * 1e-9
    if p["particles"] is not None:
        occ = Occupancy(cfg.rows, cfg.cols, cfg.pitch_x_um * 1e-6, cfg.pitch_y_um * 1e-6)
        for spec in p["particles"]:
            occ.add(tuple(spec["site"]), _geometry(spec, radius), spec.get("charge_e", 0) * ELEMENTARY_CHARGE)
    else:
        if p["fill_probability"] is None:
            raise ConfigError("load needs either particles or fill_probability")
        shapes = ShapeDistribution(p["sphere_fraction"], radius, p["radius_spread"],
                                   tuple(p["aspect_range"]), p["max_charge_e"])
        occ = load_array(cfg.rows, cfg.cols, p["fill_probability"], stream(ctx.seed, "load"), shapes,
                         cfg.pitch_x_um * 1e-6, cfg.pitch_y_um * 1e-6)
    ctx.occupancy = occ
    ctx.truth = {pid: part.geometry for pid, part in occ.particles.items()}
    for site in occ.occupied():
        ctx.log.log("load", site, "loaded", particles=list(occ.contents(site)))
    ctx.write("occupancy/initial.txt", formats.grid_text(occ, ctx.seed))
    ctx.write("particles_initial.json", formats.dumps({"schema_version": SCHEMA_VERSION, "seed": ctx.seed,
                                                      "particles": formats.particles_table(occ)}))
    return {"loaded": occ.count, "grid": occ.as_grid()}


def _stage_plan(ctx: _Context, p: dict) -> dict:
    target = p["target"]
    if isinstance(target, str):
        base = ctx.scenario.source.parent if ctx.scenario.source else Path.cwd()
        _, _, grid = formats.read_pattern(base / target)
    else:
        _, _, grid = formats.parse_pattern("\n".join(target), "target")
    sites = formats.pattern_sites(grid)
    ctx.plan = plan_rearrangement(ctx.occupancy, sites)
    final = validate_plan(ctx.plan, ctx.occupancy)
    ctx.write("occupancy/target.txt", formats.grid_text(grid, ctx.seed))
    ctx.write("plan.json", formats.dumps(formats.plan_document(ctx.plan, ctx.occupancy, ctx.seed)))
    return {"moves": len(ctx.plan), "discards": sum(m.discard for m in ctx.plan.moves),
            "cost_m": ctx.plan.cost, "path_length_m": ctx.plan.path_length, "planned_grid": final.as_grid()}


def _stage_execute(ctx: _Context, p: dict) -> dict:
    if ctx.plan is None:
        raise ConfigError("execute needs a preceding plan stage")
    res = execute_plan(ctx.plan, ctx.occupancy, stream(ctx.seed, "execute"), p["transport_success_prob"],
                       ctx.log)
    ctx.write("occupancy/final.txt", formats.grid_text(ctx.occupancy, ctx.seed))
    return {"defect_free": res.defect_free, "defects": [list(d) for d in res.defects],
            "extras": [list(x) for x in res.extras], "grid": ctx.occupancy.as_grid(),
            "target_grid": formats.sites_grid(ctx.plan.target, ctx.occupancy.rows, ctx.occupancy.cols)}


def _stage_merge(ctx: _Context, p: dict) -> dict:
    occ = ctx.occupancy
    model = MergeModel(*p["probabilities"])
    rng = stream(ctx.seed, "merge")
    env = ctx.config.gas() if p["pressure_pa"] is None else ctx.config.gas().with_pressure(p["pressure_pa"])
    pairs = p["pairs"]
    if pairs is None:  # neighbouring spheres, row-major
        singles = [s for s in occ.occupied() if occ.state(s) is SiteState.SINGLE
                   and occ.particles[occ.contents(s)[0]].looks_spherical]
        pairs = [(singles[i], singles[i + 1]) for i in range(0, len(singles) - 1, 2)]
    outcomes = []
    for a, b in pairs:
        out = merge_particles(tuple(a), tuple(b), occ, rng, model, ctx.log, ctx.array, env)
        outcomes.append({"site": list(out.site), "source": list(b), "kind": out.kind.value,
                         "separation_m": out.separation})
        if out.kind is MergeKind.DUMBBELL:
            ctx.truth[out.product] = out.geometry
            if p["until"] == "dumbbell":
                break
    ctx.write("occupancy/merged.txt", formats.grid_text(occ, ctx.seed))
    counts = {k.value: sum(o["kind"] == k.value for o in outcomes) for k in MergeKind}
    return {"attempts": outcomes, "counts": counts, "grid": occ.as_grid()}


def _selected(ctx: _Context, select: str) -> list[tuple[int, tuple]]:
    occ = ctx.occupancy
    chosen = []
    for site in occ.occupied():
        if occ.state(site) not in (SiteState.SINGLE, SiteState.MERGED):
            continue
        pid = occ.contents(site)[0]
        g = occ.particles[pid].geometry
        if select == "all" or (select == "dumbbell" and g.shape == "dumbbell") \
                or (select == "spheres" and g.shape != "dumbbell" and g.is_sphere()):
            chosen.append((pid, site))
    return chosen


def _stage_simulate(ctx: _Context, p: dict) -> dict:
    pressures = [float(x) for x in (p["pressures_pa"] or [ctx.config.pressure_pa])]
    particles = _selected(ctx, p["select"])
    if not particles:
        raise NanoarrayError(f"no particles match select={p['select']!r}")
    base = ctx.config.gas()
    jobs = [(pid, site, i, pr) for pid, site in particles for i, pr in enumerate(pressures)]

    def run(job):
        pid, site, i, pr = job
        part = ctx.occupancy.particles[pid]
        start = ParticleState.at_equilibrium(ctx.array, part.geometry, *site, charge=part.charge)
        traj = simulate(start, ctx.array, base.with_pressure(pr), p["duration_s"], p["sample_rate_hz"],
                        seed=stream_seed(ctx.seed, "simulate", pid, i))
        traj.metadata.update(particle=pid, scenario_seed=ctx.seed)
        return traj

    trajs = ctx.map(run, jobs)
    for (pid, site, i, pr), traj in zip(jobs, trajs):
        ctx.trajectories.setdefault(pid, []).append((pr, traj))
        formats.write_trajectory(ctx.out / "trajectories" / f"particle{pid:02d}_p{i}.ntrj", traj)
    lost = [pid for (pid, *_), t in zip(jobs, trajs) if t.metadata["lost_at_s"] is not None]
    return {"trajectories": len(jobs), "pressures_pa": pressures, "particles": [pid for pid, _ in particles],
            "lost": lost}


def _truth_label(g: EllipsoidGeometry) -> str:
    return "spherical" if g.shape != "dumbbell" and g.is_sphere() else "anisotropic"


def _stage_analyze(ctx: _Context, p: dict) -> dict:
    if not ctx.trajectories:
        raise ConfigError("analyze needs a preceding simulate stage")
    pids = sorted(ctx.trajectories)

    def run(pid):
        trajs = [t for _, t in ctx.trajectories[pid]]
        return classify_shape(trajs, p["ratio_threshold"], p["threshold_db"])

    reports = ctx.map(run, pids)
    rows = {k: [] for k in ("particle", "pressure[Pa]", "axis", "center_frequency[Hz]", "center_error[Hz]",
                            "damping[rad/s]", "damping_error[rad/s]", "peak[dB]")}
    particles = []
    for pid, rep in zip(pids, reports):
        for i, (pr, traj) in enumerate(ctx.trajectories[pid]):
            for ch in p["spectra"]:
                psd = estimate_psd(traj, ch)
                ctx.write(f"psd/particle{pid:02d}_p{i}_{ch}.csv",
                          formats.psd_csv(psd, {"seed": traj.metadata["seed"], "pressure_pa": pr, "particle": pid}))
            for axis in ("x", "y", "z", "torsion"):
                try:
                    fit = fit_lorentzian(estimate_psd(traj, axis), threshold_db=p["threshold_db"])
                except NoPeakError:
                    continue
                for key, val in zip(rows, (str(pid), pr, axis, fit.center_frequency, fit.center_error,
                                           fit.damping, fit.damping_error, fit.peak_db)):
                    rows[key].append(val)
        ctx.occupancy.set_verdict(pid, rep.verdict)
        truth = ctx.truth.get(pid, ctx.occupancy.particles[pid].geometry)
        g = ctx.occupancy.particles[pid].geometry
        site = next(s for s in ctx.occupancy.occupied() if pid in ctx.occupancy.contents(s))
        predicted = trap_frequencies(ctx.array.site(*site), g, axial_force=ctx.array.axial_force,
                                     gravity=ctx.array.gravity) / (2 * math.pi)
        particles.append({"particle": pid, "site": list(site), "geometry": formats.geometry_dict(truth),
                          "truth": _truth_label(truth), "match": rep.verdict == _truth_label(truth),
                          "predicted_trap_frequencies_hz": predicted, **rep.as_dict()})
    ctx.write("fits.csv", formats.table_csv(rows, {"seed": ctx.seed}))
    ctx.write("shape_report.json", formats.dumps({"schema_version": SCHEMA_VERSION, "seed": ctx.seed,
                                                 "particles": particles}))
    return {"classified": len(particles), "correct": sum(q["match"] for q in particles),
            "verdicts": {str(q["particle"]): q["verdict"] for q in particles}}


def _stage_rotation(ctx: _Context, p: dict) -> dict:
    cfg = ctx.config
    rotors = [(pid, site) for pid, site in _selected(ctx, "dumbbell")]
    if not rotors:
        raise NanoarrayError("rotation needs a dumbbell in the array")
    pressures = np.array(p["pressures_pa"], float)
    rows = {"particle": [], "pressure[Pa]": [], "omega[rad/s]": [], "frequency[Hz]": []}
    result = []
    for pid, site in rotors:
        g = ctx.occupancy.particles[pid].geometry
        circ = make_site(ctx.array.site(*site).focus, cfg.power_mw * 1e-3, Polarization.CIRCULAR,
                         cfg.wavelength_nm * 1e-9, cfg.na)
        omega = np.array([terminal_rotation(g, circ, GasEnvironment(pr, cfg.temperature_k,
                                                                   accommodation=cfg.accommodation))
                          for pr in pressures])
        slope = float(np.polyfit(np.log(pressures), np.log(omega), 1)[0])
        env = GasEnvironment(p["spin_up_pressure_pa"], cfg.temperature_k, accommodation=cfg.accommodation)
        closed = terminal_rotation(g, circ, env)
        tau = 1.0 / rotational_damping_rates(g, env)[2]
        t, w = spin_up(g, circ, env, p["spin_up_time_constants"] * tau, p["spin_up_steps"],
                       seed=stream_seed(ctx.seed, "rotation", pid))
        for pr, om in zip(pressures, omega):
            for key, val in zip(rows, (str(pid), pr, om, om / (2 * math.pi))):
                rows[key].append(val)
        ctx.write(f"spin_up/particle{pid:02d}.csv",
                  formats.table_csv({"t[s]": t, "omega[rad/s]": w},
                                    {"seed": ctx.seed, "pressure_pa": env.pressure, "terminal_rad_s": closed}))
        result.append({"particle": pid, "log_log_slope": slope,
                       "frequency_hz_at_lowest_pressure": float(omega[np.argmin(pressures)] / (2 * math.pi)),
                       "spin_up_final_rad_s": float(w[-1]), "terminal_rad_s": closed,
                       "spin_up_relative_error": float(abs(w[-1] - closed) / closed)})
    ctx.write("rotation.csv", formats.table_csv(rows, {"seed": ctx.seed}))
    return {"rotors": result}


def _stage_report(ctx: _Context, p: dict) -> dict:
    if ctx.log.records:
        ctx.write("events.jsonl", formats.events_jsonl(ctx.log, ctx.seed))
    if ctx.occupancy is not None:
        ctx.write("particles_final.json", formats.dumps({"schema_version": SCHEMA_VERSION, "seed": ctx.seed,
                                                        "particles": formats.particles_table(ctx.occupancy)}))
    return {}


_STAGES = {"load": _stage_load, "plan": _stage_plan, "execute": _stage_execute, "merge": _stage_merge,
           "simulate": _stage_simulate, "analyze": _stage_analyze, "rotation": _stage_rotation,
           "report": _stage_report}


@dataclass(frozen=True)
class ScenarioResult:
    status: int  # 0 success, 1 a stage failed
    out: Path
    summary: dict
    error: str | None = None


def run_scenario(scenario, out, seed: int | None = None, workers: int = 1,
                 config: Config | None = None) -> ScenarioResult:
    """Run every stage in order, writing artifacts and a hashed manifest under ``out``.

    A failing stage stops the run; the manifest is still written, with
    ``status: failed`` and the error, covering whatever was produced.
    """
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    seed = scenario.seed if seed is None else seed
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = config or scenario.config
    ctx = _Context(scenario, out, seed, workers, cfg)
    error, current = None, "setup"
    try:
        ctx.array = cfg.trap_array()
        ctx.write("config.json", formats.dumps({"schema_version": SCHEMA_VERSION, "seed": seed,
                                               "scenario": scenario.name, "config": cfg.as_dict(),
                                               "stages": [{"kind": s.kind, **s.params} for s in scenario.stages]}))
        for stage in scenario.stages:
            current = stage.kind
            ctx.summary[stage.kind] = _STAGES[stage.kind](ctx, stage.params)
    except (NanoarrayError, ValueError, KeyError, TypeError) as exc:
        error = f"{type(exc).__name__}: {exc}"
        ctx.summary["error"] = {"stage": current, "message": error}
    doc = {"schema_version": SCHEMA_VERSION, "scenario": scenario.name, "seed": seed,
           "status": "failed" if error else "complete", "stages": ctx.summary}
    ctx.write("summary.json", formats.dumps(doc))
    formats.write_manifest(out, seed, "failed" if error else "complete",
                           {"scenario": scenario.name, **({"error": error} if error else {})})
    return ScenarioResult(1 if error else 0, out, ctx.summary, error)
